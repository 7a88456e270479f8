"""Tile planning, ownership dedupe, parallel determinism, tiling invariance,
heatmap aggregation, and the timing profile."""
import json

import numpy as np
import pytest

from tcrcount.model import ModelConfig, build_unet, save_weights
from tcrcount.pipeline import (STAGE_NAMES, PipelineConfig, Rect, StageTiming,
                               build_heatmap, plan_tiles, run_pipeline, run_tile)
from tcrcount.postprocess import CellRecord, Thresholds
from tcrcount.slide import build_pyramid
from tcrcount.synth import SynthParams, generate_synthetic_slide

MPP_20X = 2.0 / 4.4


class TestPlanTiles:
    def test_four_tile_example_against_enumeration(self):
        # brute-force coverage oracle: every region pixel owned exactly once
        region = Rect(0, 0, 1000, 1000)
        jobs = plan_tiles(region, 500, 94, 1.0, (1000, 1000))
        assert len(jobs) == 4
        assert [tuple(j.interior) for j in jobs] == [
            (0, 0, 500, 500), (500, 0, 500, 500),
            (0, 500, 500, 500), (500, 500, 500, 500)]
        owner = np.full((1000, 1000), -1)
        for j in jobs:
            x, y, w, h = j.interior
            assert np.all(owner[y:y + h, x:x + w] == -1)
            owner[y:y + h, x:x + w] = j.index
            px, py, pw, ph = j.padded
            # padding clipped at the slide bounds
            assert px >= 0 and py >= 0 and px + pw <= 1000 and py + ph <= 1000
            assert px <= max(0, x - 94) and py <= max(0, y - 94)
        assert np.all(owner >= 0)

    def test_region_smaller_than_interior_single_job(self):
        jobs = plan_tiles(Rect(10, 20, 100, 80), 500, 94, 1.0, (1000, 1000))
        assert len(jobs) == 1
        assert tuple(jobs[0].interior) == (10, 20, 100, 80)

    def test_partition_contract_random_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            sw, sh = int(rng.integers(50, 400)), int(rng.integers(50, 400))
            x = int(rng.integers(0, sw - 10))
            y = int(rng.integers(0, sh - 10))
            w = int(rng.integers(10, sw - x + 1))
            h = int(rng.integers(10, sh - y + 1))
            interior = int(rng.integers(16, 200))
            jobs = plan_tiles(Rect(x, y, w, h), interior, 20, 1.0, (sw, sh))
            owner = np.zeros((h, w), dtype=int)
            for j in jobs:
                jx, jy, jw, jh = j.interior
                owner[jy - y:jy - y + jh, jx - x:jx - x + jw] += 1
                assert j.padded.x <= jx and j.padded.y <= jy
            assert np.all(owner == 1)

    def test_halo_converted_to_level0_units(self):
        jobs = plan_tiles(Rect(512, 512, 256, 256), 256, 94, 0.5, (4096, 4096))
        j = jobs[0]
        # 94 px at half magnification is 188 level-0 px, snapped to the grid
        assert j.padded.x == 512 - 188
        assert j.padded.y == 512 - 188

    def test_region_outside_slide_rejected(self):
        with pytest.raises(ValueError):
            plan_tiles(Rect(0, 0, 2000, 100), 256, 94, 1.0, (1000, 1000))

    def test_non_power_of_two_factor_rejected(self):
        with pytest.raises(ValueError):
            plan_tiles(Rect(0, 0, 100, 100), 64, 10, 0.3, (200, 200))


@pytest.fixture(scope="module")
def tiny_setup(tmp_path_factory):
    """A small synthetic slide plus an untrained two-map model: enough to
    exercise every pipeline mechanism (peaks exist in the sigmoid ripple)."""
    root = tmp_path_factory.mktemp("pipe")
    res = generate_synthetic_slide(
        SynthParams(width=640, height=640, mpp=MPP_20X, seed=21, n_blobs=2), root / "slide")
    model = build_unet(ModelConfig(levels=2, base_channels=4, out_maps=2), seed=5)
    weights = root / "det.fcnw"
    save_weights(model, weights)
    cfg = PipelineConfig(det_weights=str(weights), det_magnification=20.0,
                         thresholds=Thresholds(0.2, 0.5, 0.5), halo=94, interior=256)
    return res, cfg


class TestRunPipeline:
    def test_parallel_determinism_byte_identical(self, tiny_setup):
        res, cfg = tiny_setup
        payloads = []
        for workers in (1, 2, 8):
            out = run_pipeline(res.pyramid, None, cfg, workers=workers)
            payloads.append(json.dumps([c.to_json() for c in out.cells]) +
                            json.dumps(out.heatmap.to_json()))
        assert payloads[0] == payloads[1] == payloads[2]

    def test_tiling_invariance_exact(self, tiny_setup):
        res, cfg = tiny_setup
        sets = []
        for interior in (640, 320, 160):
            cfg_n = PipelineConfig(**{**cfg.__dict__, "interior": interior})
            out = run_pipeline(res.pyramid, None, cfg_n, workers=2)
            sets.append([(c.x, c.y, c.cls, round(c.score, 6)) for c in out.cells])
        assert sets[0] == sets[1] == sets[2]

    def test_cells_unique_and_inside_region(self, tiny_setup):
        res, cfg = tiny_setup
        region = Rect(64, 64, 512, 512)
        out = run_pipeline(res.pyramid, region, cfg, workers=2)
        coords = [(c.x, c.y) for c in out.cells]
        assert len(set(coords)) == len(coords)
        assert all(64 <= x < 576 and 64 <= y < 576 for x, y in coords)
        # the ownership rule is exercised only if some cells hug tile borders
        near_border = [c for c in out.cells
                       if min((c.x - 64) % 256, 256 - (c.x - 64) % 256) <= 10]
        assert near_border

    def test_conservation_heatmap_vs_overall(self, tiny_setup):
        res, cfg = tiny_setup
        out = run_pipeline(res.pyramid, None, cfg, workers=2)
        grid_n = int(out.heatmap.n.sum())
        grid_t = int(out.heatmap.n_tumor.sum())
        assert grid_n == len(out.cells)
        if grid_n:
            assert grid_t / grid_n == pytest.approx(out.tcr)

    def test_single_model_mode_i_s_equals_i_c(self, tiny_setup):
        res, cfg = tiny_setup
        out = run_pipeline(res.pyramid, Rect(0, 0, 256, 256), cfg, workers=1)
        assert out.cells
        assert all(c.i_s == c.i_c for c in out.cells)

    def test_stage_timing_names_and_shares(self, tiny_setup):
        res, cfg = tiny_setup
        out = run_pipeline(res.pyramid, Rect(0, 0, 256, 256), cfg, workers=1)
        assert set(out.timing.seconds) == set(STAGE_NAMES)
        shares = out.timing.shares()
        assert sum(shares.values()) <= 1.0 + 1e-9
        assert out.timing.seconds["model inference"] > 0

    def test_throughput_uses_micron_area(self, tiny_setup):
        res, cfg = tiny_setup
        region = Rect(0, 0, 640, 640)
        out = run_pipeline(res.pyramid, region, cfg, workers=1)
        expect_mm2 = 640 * 640 * MPP_20X ** 2 / 1e6
        assert out.area_mm2 == pytest.approx(expect_mm2)
        assert out.throughput_mm2_s == pytest.approx(expect_mm2 / out.timing.wall)

    def test_out_path_writes_result_json(self, tiny_setup, tmp_path):
        res, cfg = tiny_setup
        out_file = tmp_path / "result.json"
        out = run_pipeline(res.pyramid, Rect(0, 0, 256, 256), cfg, workers=1,
                           out_path=out_file)
        payload = json.loads(out_file.read_text())
        assert payload["n_cells"] == len(out.cells)
        assert payload["overall_tcr"] == pytest.approx(out.tcr, abs=1e-6)
        assert set(payload["timing"]["shares"]) == set(STAGE_NAMES)
        assert out.timing.seconds["save result"] > 0

    def test_failed_tile_reported_partial(self, tiny_setup, tmp_path):
        res, cfg = tiny_setup
        import shutil
        broken_root = tmp_path / "broken"
        shutil.copytree(res.pyramid.root, broken_root)
        (broken_root / "level_0" / "t_0_0.ppm").unlink()
        from tcrcount.slide import SlidePyramid
        broken = SlidePyramid.open(broken_root)
        out = run_pipeline(broken, None, cfg, workers=2)
        assert out.failures
        assert not out.clean
        assert all("IntegrityError" in msg for _, msg in out.failures)
        # tiles not touching the missing corner tile still produced cells
        assert out.cells

    def test_blank_background_tile_zero_cells(self, tmp_path):
        # a head biased hard negative emits ~0 maps: no peaks survive t_d
        white = np.full((256, 256, 3), 245, dtype=np.uint8)
        pyramid = build_pyramid(white, tmp_path / "blank", mpp=MPP_20X)
        model = build_unet(ModelConfig(levels=2, base_channels=4, out_maps=2), seed=1)
        dict(model.named_params())["head.bias"][...] = -12.0
        weights = tmp_path / "neg.fcnw"
        save_weights(model, weights)
        cfg = PipelineConfig(det_weights=str(weights), det_magnification=20.0,
                             thresholds=Thresholds(0.3, 0.5), interior=256)
        out = run_pipeline(pyramid, None, cfg, workers=1)
        assert out.cells == []
        assert out.tcr == 0.0 and out.tcr_empty

    def test_invalid_workers_rejected(self, tiny_setup):
        res, cfg = tiny_setup
        with pytest.raises(ValueError):
            run_pipeline(res.pyramid, None, cfg, workers=0)


class TestHeatmap:
    def _cell(self, x, y, cls):
        return CellRecord(x=x, y=y, i_d=0.9, i_c=0.9, i_s=0.9, cls=cls)

    def test_hand_placed_cells_two_grid_cells(self):
        side_um = 64.0
        mpp = 1.0
        cells = [self._cell(10, 10, "tumor"), self._cell(20, 12, "normal"),
                 self._cell(100, 10, "tumor"), self._cell(110, 20, "tumor")]
        grid = build_heatmap(cells, Rect(0, 0, 128, 64), side_um, mpp)
        assert (grid.nx, grid.ny) == (2, 1)
        assert grid.n.tolist() == [[2, 2]]
        assert grid.n_tumor.tolist() == [[1, 2]]
        assert grid.tcr().tolist() == [[0.5, 1.0]]

    def test_all_cells_one_grid_cell_matches_overall(self):
        cells = [self._cell(5, 5, "tumor"), self._cell(6, 7, "normal"),
                 self._cell(8, 5, "normal"), self._cell(9, 9, "tumor")]
        grid = build_heatmap(cells, Rect(0, 0, 500, 500), 600.0, 1.0)
        assert grid.tcr()[0, 0] == pytest.approx(0.5)

    def test_empty_region_all_flagged(self):
        grid = build_heatmap([], Rect(0, 0, 256, 256), 64.0, 1.0)
        payload = grid.to_json()
        assert all(cell["empty"] for cell in payload["cells"])

    def test_invalid_side_rejected(self):
        with pytest.raises(ValueError):
            build_heatmap([], Rect(0, 0, 10, 10), 0.0, 1.0)


class TestStageTiming:
    def test_merge_and_shares(self):
        a = StageTiming()
        a.add("read pixels", 1.0)
        b = StageTiming()
        b.add("model inference", 3.0)
        a.merge(b)
        a.wall = 5.0
        shares = a.shares()
        assert shares["read pixels"] == pytest.approx(0.2)
        assert shares["model inference"] == pytest.approx(0.6)
        assert sum(shares.values()) <= 1.0
