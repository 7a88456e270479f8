"""Command-line entry points: synth, train, tune, eval, sweep, analyze, serve."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .dataset import load_slide_dir, partition, whole_slide_rois
from .model import DESK_CONFIG, SEG_DESK_CONFIG, ModelConfig, build_unet, load_weights
from .pipeline import PipelineConfig, Rect, run_pipeline
from .postprocess import Thresholds
from .server import AnalysisApp, make_server
from .slide import SlidePyramid
from .synth import SynthParams, generate_synthetic_slide
from .train import TrainConfig, save_checkpoint, save_curve_csv, train
from .tuning import (SWEEP_FACTORS, SweepRoi, evaluate_rois, magnification_sweep,
                     make_eval_roi, oracle_sweep_model, sweep_csv, tune_thresholds,
                     unet_sweep_model)


def _rect(text: str) -> Rect:
    parts = [int(v) for v in text.split(",")]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("region must be X,Y,W,H")
    return Rect(*parts)


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        params = SynthParams(width=args.size, height=args.size, mpp=args.mpp,
                             n_blobs=args.blobs, seed=args.seed + i,
                             ambiguous_fraction=args.ambiguous)
        res = generate_synthetic_slide(params, out / f"slide_{i:03d}")
        print(f"slide_{i:03d}: {res.n_cells} cells, TCR {res.tcr:.3f}")
    return 0


def _load_rois(slide_dir, ids=None):
    slides = load_slide_dir(slide_dir)
    ids = list(slides) if ids is None else ids
    return slides, whole_slide_rois(slides, ids)


def cmd_train(args) -> int:
    slides = load_slide_dir(args.slides)
    split = partition(sorted(slides), seed=args.seed)
    train_rois = whole_slide_rois(slides, split.train)
    val_rois = whole_slide_rois(slides, split.validation)
    if args.kind == "dt_cl":
        config = ModelConfig(levels=args.levels or DESK_CONFIG.levels,
                             base_channels=args.base or DESK_CONFIG.base_channels,
                             out_maps=2)
    else:
        config = ModelConfig(levels=args.levels or SEG_DESK_CONFIG.levels,
                             base_channels=args.base or SEG_DESK_CONFIG.base_channels,
                             out_maps=1)
    model = build_unet(config, seed=args.seed)
    tc = TrainConfig(examples_per_epoch=args.examples, batch_size=args.batch,
                     patch_px=args.patch, max_epochs=args.epochs, seed=args.seed,
                     magnification=args.magnification, kind=args.kind)
    result = train(model, train_rois, val_rois, tc)
    save_checkpoint(result, tc, args.out)
    save_curve_csv(Path(args.out).with_suffix(".curve.csv"), result.curve)
    print(f"best epoch {result.best_epoch}, val loss {result.best_val_loss:.5f}")
    print(f"weights -> {args.out}")
    return 0


def _eval_rois_for(args, ids):
    slides = load_slide_dir(args.slides)
    det = load_weights(args.det_weights)
    seg = load_weights(args.seg_weights) if args.seg_weights else None
    rois = []
    for sid in ids:
        pyramid, ann = slides[sid]
        rois.append(make_eval_roi(pyramid, (0, 0, pyramid.width, pyramid.height),
                                  ann["points"], det, args.det_magnification,
                                  seg, args.seg_magnification))
    return rois


def cmd_tune(args) -> int:
    slides = load_slide_dir(args.slides)
    split = partition(sorted(slides), seed=args.seed)
    # evaluation set = train + validation; the test split stays untouched
    rois = _eval_rois_for(args, list(split.train) + list(split.validation))
    result = tune_thresholds(rois, grid_step=args.grid_step, alpha=args.alpha,
                             joint=args.joint)
    print(f"t_d={result.thresholds.t_d:g} t_c={result.thresholds.t_c:g} "
          f"(detection F1 {result.detection_f1:.4f}, E_TCR {result.e_tcr:.4f})")
    if args.config:
        cfg = PipelineConfig.load(args.config)
        cfg.thresholds = result.thresholds
        cfg.save(args.config)
        print(f"thresholds written to {args.config}")
    return 0


def cmd_eval(args) -> int:
    slides = load_slide_dir(args.slides)
    split = partition(sorted(slides), seed=args.seed)
    rois = _eval_rois_for(args, list(split.test))
    report = evaluate_rois(rois, Thresholds(args.t_d, args.t_c, args.alpha))
    payload = report.to_json()
    print(json.dumps(payload, indent=2))
    if args.out:
        out = Path(args.out)
        if out.suffix == ".csv":
            out.write_text(report.to_csv())
        else:
            out.write_text(json.dumps(payload, indent=2))
    return 0


def cmd_sweep(args) -> int:
    slides = load_slide_dir(args.slides)
    rois = []
    for sid in sorted(slides):
        pyramid, ann = slides[sid]
        rois.append(SweepRoi(slide=pyramid, rect=(0, 0, pyramid.width, pyramid.height),
                             labels=ann["points"]))
    if args.oracle:
        provider = oracle_sweep_model()
        models = {f: provider for f in SWEEP_FACTORS}
    else:
        models = {}
        for pair in args.model or []:
            factor, path = pair.split("=", 1)
            models[float(factor)] = unet_sweep_model(load_weights(path))
    points = magnification_sweep(models, rois, args.mode,
                                 Thresholds(args.t_d, args.t_c))
    text = sweep_csv(points)
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return 0


def cmd_analyze(args) -> int:
    slide = SlidePyramid.open(args.slide)
    cfg = PipelineConfig.load(args.config)
    if args.heatmap_um:
        cfg.heatmap_um = args.heatmap_um
    region = args.region if args.region else None
    result = run_pipeline(slide, region, cfg, workers=args.workers, out_path=args.out)
    print(f"cells={len(result.cells)} tumor={sum(c.cls == 'tumor' for c in result.cells)} "
          f"TCR={result.tcr:.4f} throughput={result.throughput_mm2_s:.4f} mm^2/s")
    if result.failures:
        print(f"{len(result.failures)} tile(s) failed", file=sys.stderr)
        return 3  # partial result
    return 0


def cmd_serve(args) -> int:
    app = AnalysisApp(slide_root=args.slides, config_path=args.config,
                      data_dir=args.data, workers=args.jobs,
                      pipeline_workers=args.pipeline_workers,
                      static_dir=args.static)
    server = make_server(args.host, args.port, app)
    print(f"listening on http://{args.host}:{server.server_address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        app.shutdown()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcrcount",
                                     description="whole-slide tumor-cell-ratio counter")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic slides with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--size", type=int, default=768)
    p.add_argument("--mpp", type=float, default=0.45454545454545453)
    p.add_argument("--blobs", type=int, default=2)
    p.add_argument("--ambiguous", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detection/classification or segmentation model")
    p.add_argument("--slides", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("dt_cl", "seg"), default="dt_cl")
    p.add_argument("--levels", type=int)
    p.add_argument("--base", type=int)
    p.add_argument("--patch", type=int, default=96)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--examples", type=int, default=4000)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--magnification", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune", help="sequential threshold grid search")
    p.add_argument("--slides", required=True)
    p.add_argument("--det-weights", required=True)
    p.add_argument("--det-magnification", type=float, default=20.0)
    p.add_argument("--seg-weights")
    p.add_argument("--seg-magnification", type=float, default=10.0)
    p.add_argument("--grid-step", type=float, default=0.05)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--joint", action="store_true",
                   help="diagnostic 2-D joint search instead of the sequential default")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="pipeline config JSON to write the thresholds into")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("eval", help="evaluate on the held-out test split")
    p.add_argument("--slides", required=True)
    p.add_argument("--det-weights", required=True)
    p.add_argument("--det-magnification", type=float, default=20.0)
    p.add_argument("--seg-weights")
    p.add_argument("--seg-magnification", type=float, default=10.0)
    p.add_argument("--t-d", type=float, default=0.5)
    p.add_argument("--t-c", type=float, default=0.5)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="F1 vs magnification sweep")
    p.add_argument("--slides", required=True)
    p.add_argument("--mode", choices=("det", "cls", "det+cls"), default="det")
    p.add_argument("--model", action="append",
                   help="factor=weights.fcnw (repeatable)")
    p.add_argument("--oracle", action="store_true",
                   help="use ground-truth oracle maps instead of models")
    p.add_argument("--t-d", type=float, default=0.5)
    p.add_argument("--t-c", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="run the tile pipeline over a region")
    p.add_argument("--slide", required=True)
    p.add_argument("--region", type=_rect, help="X,Y,W,H in level-0 pixels")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--heatmap-um", type=float)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("serve", help="start the analysis HTTP server")
    p.add_argument("--slides", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="journal + results directory")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8077)
    p.add_argument("--jobs", type=int, default=1,
                   help="concurrent pipeline executions (default 1)")
    p.add_argument("--pipeline-workers", type=int, default=1,
                   help="tile workers inside each job")
    p.add_argument("--static", help="directory of viewer assets to serve at /")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
