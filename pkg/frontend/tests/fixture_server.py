"""Boots a disposable analysis server seeded with one synthetic slide.

Prints `PORT <n>` on stdout once listening, then serves until killed.
Used by the viewer's integration test.
"""
import sys
import tempfile
import threading
from pathlib import Path

from tcrcount.model import ModelConfig, build_unet, save_weights
from tcrcount.pipeline import PipelineConfig
from tcrcount.postprocess import Thresholds
from tcrcount.server import AnalysisApp, make_server
from tcrcount.synth import SynthParams, generate_synthetic_slide


def main() -> None:
    root = Path(tempfile.mkdtemp(prefix="viewer-it-"))
    slides = root / "slides"
    generate_synthetic_slide(
        SynthParams(width=512, height=512, mpp=2.0 / 4.4, seed=77, n_blobs=1),
        slides / "demo")
    model = build_unet(ModelConfig(levels=2, base_channels=4, out_maps=2), seed=3)
    save_weights(model, root / "det.fcnw")
    cfg = PipelineConfig(det_weights=str(root / "det.fcnw"), det_magnification=20.0,
                         thresholds=Thresholds(0.3, 0.5), interior=256)
    cfg.save(root / "pipeline.json")
    app = AnalysisApp(slide_root=slides, config_path=root / "pipeline.json",
                      data_dir=root / "data", workers=1)
    httpd = make_server("127.0.0.1", 0, app)
    print(f"PORT {httpd.server_address[1]}", flush=True)
    try:
        httpd.serve_forever()
    finally:
        app.shutdown()


if __name__ == "__main__":
    main()
