"""Partitioning, patch sampling, the stopping rule, and a toy training run."""
import numpy as np
import pytest

from tcrcount.dataset import (PatchSpec, partition, sample_patch,
                              whole_slide_rois)
from tcrcount.model import ModelConfig, build_unet
from tcrcount.train import EarlyStopper, TrainConfig, train
from tcrcount.synth import SynthParams, generate_synthetic_slide

MPP_20X = 2.0 / 4.4


class TestPartition:
    def test_ten_slides_split_7_1_2(self):
        split = partition([f"s{i}" for i in range(10)], seed=0)
        assert (len(split.train), len(split.validation), len(split.test)) == (7, 1, 2)

    def test_same_seed_identical(self):
        ids = [f"s{i}" for i in range(23)]
        assert partition(ids, seed=4) == partition(ids, seed=4)

    def test_hundred_slides_70_10_20(self):
        split = partition([f"s{i}" for i in range(100)], seed=1)
        assert (len(split.train), len(split.validation), len(split.test)) == (70, 10, 20)

    def test_each_slide_in_exactly_one_split(self):
        ids = [f"s{i}" for i in range(17)]
        split = partition(ids, seed=2)
        assert sorted(split.train + split.validation + split.test) == sorted(ids)

    def test_minimum_three_slides(self):
        split = partition(["a", "b", "c"], seed=0)
        assert min(len(split.train), len(split.validation), len(split.test)) == 1
        with pytest.raises(ValueError):
            partition(["a", "b"], seed=0)

    def test_different_seeds_usually_differ(self):
        ids = [f"s{i}" for i in range(20)]
        assert partition(ids, seed=0) != partition(ids, seed=1)


@pytest.fixture(scope="module")
def toy_rois(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_slides")
    slides = {}
    for i in range(4):
        params = SynthParams(width=320, height=320, mpp=MPP_20X, seed=60 + i,
                             n_blobs=1, blob_radius_um=(40.0, 60.0))
        res = generate_synthetic_slide(params, root / f"s{i}")
        ann = {"points": res.points, "polygons": res.polygons, "mpp": params.mpp}
        slides[f"s{i}"] = (res.pyramid, ann)
    return slides


class TestSamplePatch:
    SPEC = PatchSpec(patch_px=64, magnification=20.0, kind="dt_cl", augment=True)

    def test_repeatable_bit_identical(self, toy_rois):
        rois = whole_slide_rois(toy_rois, list(toy_rois))
        a_img, a_t, _ = sample_patch(rois, self.SPEC, seed=(1, 2, 3))
        b_img, b_t, _ = sample_patch(rois, self.SPEC, seed=(1, 2, 3))
        assert np.array_equal(a_img, b_img)
        assert np.array_equal(a_t, b_t)

    def test_no_augment_also_repeatable(self, toy_rois):
        rois = whole_slide_rois(toy_rois, list(toy_rois))
        spec = PatchSpec(64, 20.0, "dt_cl", augment=False)
        a, _, _ = sample_patch(rois, spec, seed=7)
        b, _, _ = sample_patch(rois, spec, seed=7)
        assert np.array_equal(a, b)

    def test_classification_target_subset_of_detection(self, toy_rois):
        rois = whole_slide_rois(toy_rois, list(toy_rois))
        for s in range(20):
            _, targets, _ = sample_patch(rois, self.SPEC, seed=(9, s))
            assert np.all(targets[1] <= targets[0] + 1e-6)

    def test_image_normalized_and_shaped(self, toy_rois):
        rois = whole_slide_rois(toy_rois, list(toy_rois))
        img, targets, _ = sample_patch(rois, self.SPEC, seed=0)
        assert img.shape == (3, 64, 64) and img.dtype == np.float32
        assert 0.0 <= img.min() and img.max() <= 1.0
        assert targets.shape == (2, 64, 64)
        assert targets.min() >= 0.0 and targets.max() <= 1.0

    def test_seg_kind_single_map(self, toy_rois):
        rois = whole_slide_rois(toy_rois, list(toy_rois))
        spec = PatchSpec(64, 10.0, "seg", augment=False)
        _, targets, _ = sample_patch(rois, spec, seed=1)
        assert targets.shape == (1, 64, 64)
        assert set(np.unique(targets)) <= {0.0, 1.0}

    def test_roi_draw_uniformity_chi_square(self, toy_rois):
        rois = whole_slide_rois(toy_rois, list(toy_rois))
        counts = {r.roi_id: 0 for r in rois}
        n = 1000
        for s in range(n):
            _, _, info = sample_patch(rois, PatchSpec(64, 20.0, "dt_cl", augment=False),
                                      seed=(5, s))
            counts[info["roi_id"]] += 1
        assert all(v > 0 for v in counts.values())
        expected = n / len(rois)
        chi2 = sum((v - expected) ** 2 / expected for v in counts.values())
        # 3 dof, upper 0.999 quantile ~ 16.27
        assert chi2 < 16.27

    def test_oversized_patch_clamped(self, toy_rois):
        rois = whole_slide_rois(toy_rois, list(toy_rois))
        spec = PatchSpec(512, 20.0, "dt_cl", augment=False)
        img, _, info = sample_patch(rois, spec, seed=3)
        assert img.shape == (3, 512, 512)
        assert info["clamped"]

    def test_empty_pool_rejected(self):
        with pytest.raises(ValueError):
            sample_patch([], self.SPEC, seed=0)


class TestEarlyStopper:
    def test_stops_exactly_patience_after_last_improvement(self):
        # improvements only at epochs 1..k -> stop exactly at epoch k+4
        k = 3
        stopper = EarlyStopper(patience=4)
        stopped_at = None
        for epoch in range(1, 30):
            val = 1.0 - 0.1 * min(epoch, k)  # improves through epoch k, then flat
            if stopper.update(epoch, val):
                stopped_at = epoch
                break
        assert stopped_at == k + 4
        assert stopper.best_epoch == k

    def test_equal_loss_is_not_improvement(self):
        stopper = EarlyStopper(patience=2)
        assert not stopper.update(1, 0.5)
        assert not stopper.update(2, 0.5)
        assert stopper.update(3, 0.5)
        assert stopper.best_epoch == 1

    def test_late_improvement_resets(self):
        stopper = EarlyStopper(patience=3)
        for epoch, val in ((1, 1.0), (2, 0.9), (3, 0.95), (4, 0.93), (5, 0.8)):
            assert not stopper.update(epoch, val)
        assert stopper.best_epoch == 5


class TestTrain:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(kind="wat")

    def test_patch_below_receptive_field_rejected(self, toy_rois):
        rois = whole_slide_rois(toy_rois, list(toy_rois))
        model = build_unet(ModelConfig(levels=2, base_channels=4, out_maps=2), seed=0)
        cfg = TrainConfig(examples_per_epoch=8, patch_px=16, max_epochs=1,
                          magnification=20.0)
        with pytest.raises(ValueError):
            train(model, rois, rois, cfg)

    def test_map_count_mismatch_rejected(self, toy_rois):
        rois = whole_slide_rois(toy_rois, list(toy_rois))
        model = build_unet(ModelConfig(levels=2, base_channels=4, out_maps=1), seed=0)
        cfg = TrainConfig(examples_per_epoch=8, patch_px=64, max_epochs=1, kind="dt_cl")
        with pytest.raises(ValueError):
            train(model, rois, rois, cfg)

    def test_toy_training_halves_validation_loss(self, toy_rois):
        # the toy task is its own oracle: loss on detecting high-contrast
        # nuclei must drop well below the untrained starting point
        ids = sorted(toy_rois)
        rois = whole_slide_rois(toy_rois, ids)
        model = build_unet(ModelConfig(levels=2, base_channels=8, out_maps=2), seed=1)
        cfg = TrainConfig(lr=3e-3, examples_per_epoch=160, batch_size=4, patch_px=64,
                          max_epochs=6, patience=4, seed=3, magnification=20.0,
                          val_patches=32)
        result = train(model, rois[:3], rois[3:], cfg)
        first_val = result.curve[0][2]
        assert result.best_val_loss < 0.5 * first_val
        assert result.best_epoch == min(result.curve, key=lambda r: r[2])[0]

    def test_curve_reproducible(self, toy_rois):
        ids = sorted(toy_rois)
        rois = whole_slide_rois(toy_rois, ids)
        cfg = TrainConfig(lr=1e-3, examples_per_epoch=24, batch_size=8, patch_px=64,
                          max_epochs=2, seed=5, magnification=20.0, val_patches=8)
        curves = []
        for _ in range(2):
            model = build_unet(ModelConfig(levels=2, base_channels=4, out_maps=2), seed=2)
            curves.append(train(model, rois[:3], rois[3:], cfg).curve)
        assert curves[0] == curves[1]

    def test_checkpoint_and_curve_files(self, toy_rois, tmp_path):
        from tcrcount.model import load_weights
        from tcrcount.train import save_checkpoint, save_curve_csv
        import json
        ids = sorted(toy_rois)
        rois = whole_slide_rois(toy_rois, ids)
        model = build_unet(ModelConfig(levels=2, base_channels=4, out_maps=2), seed=8)
        cfg = TrainConfig(examples_per_epoch=16, batch_size=8, patch_px=64,
                          max_epochs=1, seed=9, magnification=20.0, val_patches=8)
        result = train(model, rois[:3], rois[3:], cfg)
        ckpt = tmp_path / "model.fcnw"
        save_checkpoint(result, cfg, ckpt)
        save_curve_csv(tmp_path / "curve.csv", result.curve)

        reloaded = load_weights(ckpt)
        assert reloaded.config == model.config
        sidecar = json.loads((tmp_path / "model.fcnw.json").read_text())
        assert sidecar["best_epoch"] == result.best_epoch
        assert sidecar["config"]["seed"] == 9
        lines = (tmp_path / "curve.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss"
        assert len(lines) == 1 + len(result.curve)

    def test_best_model_returned_not_last(self, toy_rois):
        ids = sorted(toy_rois)
        rois = whole_slide_rois(toy_rois, ids)
        model = build_unet(ModelConfig(levels=2, base_channels=4, out_maps=2), seed=4)
        cfg = TrainConfig(lr=1e-2, examples_per_epoch=24, batch_size=8, patch_px=64,
                          max_epochs=4, seed=6, magnification=20.0, val_patches=8)
        result = train(model, rois[:3], rois[3:], cfg)
        best = min(v for _, _, v in result.curve)
        assert result.best_val_loss == best
