import numpy as np
import pytest
import torch

from crossfeat import losses
from crossfeat.geometry import TransformConfig, build_correspondences, project_points
from crossfeat.model import ConfigurationError
from crossfeat.training import (
    SyntheticPairDataset,
    TrainConfig,
    TrainingDiverged,
    config_hash,
    lr_at,
    make_sample,
    synth_modality,
    synthetic_base_image,
    train,
)

IDENTITY_TRANSFORM = TransformConfig(
    distortion_scale=(0.0, 0.0), rotation_deg=(0.0, 0.0), scale=(1.0, 1.0)
)


def small_config(**kw):
    base = dict(
        crop_size=64,
        batch_size=2,
        iterations=4,
        n_samples=64,
        margin=8,
        checkpoint_every=2,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestSynthModality:
    def test_identity_gray_on_gray(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(32, 32)).astype(np.float32)
        out = synth_modality(img, "identity-gray")
        assert np.allclose(out, img, atol=1e-6)

    def test_inverted_blur_not_involutive(self):
        rng = np.random.default_rng(1)
        img = synthetic_base_image(64, rng)
        once = synth_modality(img, "inverted-blur")
        twice = synth_modality(once, "inverted-blur")
        assert np.abs(twice - img).max() > 0.01

    def test_inverted_blur_negatively_correlated(self):
        for i in range(5):
            rng = np.random.default_rng(100 + i)
            img = synthetic_base_image(96, rng)
            out = synth_modality(img, "inverted-blur")
            corr = np.corrcoef(img.ravel(), out.ravel())[0, 1]
            assert corr < 0

    def test_gamma_edge_range(self):
        rng = np.random.default_rng(2)
        img = synthetic_base_image(64, rng)
        out = synth_modality(img, "gamma-edge")
        assert out.min() >= 0.0 and out.max() <= 1.0 + 1e-6

    def test_unknown_recipe(self):
        with pytest.raises(ConfigurationError):
            synth_modality(np.zeros((8, 8)), "mystery")


class TestSyntheticDataset:
    def test_deterministic_pairs(self):
        ds = SyntheticPairDataset(n_pairs=3, image_size=64, seed=7)
        a = ds.pair(1)
        b = ds.pair(1)
        assert np.array_equal(a.image_a, b.image_a)
        assert np.array_equal(a.image_b, b.image_b)

    def test_splits_disjoint(self):
        tr = SyntheticPairDataset(n_pairs=2, image_size=64, split="train")
        te = SyntheticPairDataset(n_pairs=2, image_size=64, split="test")
        assert np.abs(tr.pair(0).image_a - te.pair(0).image_a).max() > 0.01

    def test_images_textured(self):
        ds = SyntheticPairDataset(n_pairs=1, image_size=128)
        img = ds.pair(0).image_a
        assert img.std() > 0.05
        assert 0.0 <= img.min() and img.max() <= 1.0


class TestMakeSample:
    def test_zero_distortion_gives_identity(self):
        ds = SyntheticPairDataset(n_pairs=1, image_size=128)
        cfg = small_config(transform=IDENTITY_TRANSFORM)
        sample = make_sample(ds.pair(0), cfg, np.random.default_rng(0))
        assert np.abs(sample.h.matrix - np.eye(3)).max() < 1e-9
        assert sample.mask_b.all()
        assert not sample.resized

    def test_default_crop_size(self):
        ds = SyntheticPairDataset(n_pairs=1, image_size=256)
        cfg = TrainConfig()
        sample = make_sample(ds.pair(0), cfg, np.random.default_rng(0))
        assert sample.image_a.shape == (192, 192)
        assert sample.image_b.shape == (192, 192)

    def test_correspondences_roundtrip(self):
        ds = SyntheticPairDataset(n_pairs=1, image_size=128)
        cfg = small_config()
        rng = np.random.default_rng(3)
        sample = make_sample(ds.pair(0), cfg, rng)
        batch = build_correspondences(sample.h, (64, 64), (64, 64), 64, 8, rng)
        v = batch.valid_mask
        back = project_points(batch.coords_b[v], sample.h.inverse())
        assert np.abs(back - batch.coords_a[v]).max() < 1e-6

    def test_small_image_resized(self, caplog):
        import logging

        ds = SyntheticPairDataset(n_pairs=1, image_size=48)
        cfg = small_config()
        with caplog.at_level(logging.WARNING):
            sample = make_sample(ds.pair(0), cfg, np.random.default_rng(0))
        assert sample.resized
        assert sample.image_a.shape == (64, 64)

    def test_crops_standardized(self):
        ds = SyntheticPairDataset(n_pairs=1, image_size=128)
        cfg = small_config(transform=IDENTITY_TRANSFORM)
        sample = make_sample(ds.pair(0), cfg, np.random.default_rng(1))
        assert abs(sample.image_a.mean()) < 1e-4
        assert abs(sample.image_a.std() - 1.0) < 1e-3


class TestSchedule:
    def test_linear_decay(self):
        cfg = TrainConfig()
        assert lr_at(0, cfg) == 1e-3
        assert lr_at(10_000, cfg) == 0.0
        assert lr_at(5_000, cfg) == pytest.approx(5e-4)

    def test_floor_at_zero(self):
        cfg = TrainConfig()
        assert lr_at(20_000, cfg) == 0.0


class TestTrainConfig:
    def test_crop_size_floor(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(crop_size=32)

    def test_objective_validated(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(objective="whatever")

    def test_hash_stable_and_sensitive(self):
        a = config_hash(TrainConfig())
        b = config_hash(TrainConfig())
        c = config_hash(TrainConfig(lam=9.0))
        assert a == b
        assert a != c


class TestTrainLoop:
    def test_deterministic_loss_trace(self, tmp_path):
        ds = SyntheticPairDataset(n_pairs=2, image_size=96)
        cfg = small_config(iterations=3)
        _, log1 = train(ds, cfg)
        _, log2 = train(ds, cfg)
        assert [r["total"] for r in log1] == [r["total"] for r in log2]

    def test_logs_and_checkpoints_written(self, tmp_path):
        ds = SyntheticPairDataset(n_pairs=2, image_size=96)
        cfg = small_config(iterations=4, checkpoint_every=2)
        net, rows = train(ds, cfg, out_dir=tmp_path)
        assert (tmp_path / "train_log.jsonl").exists()
        assert (tmp_path / "checkpoint_000002.pt").exists()
        assert (tmp_path / "checkpoint_000004.pt").exists()
        assert (tmp_path / "checkpoint_final.pt").exists()
        assert len(rows) == 4
        for key in ("step", "lr", "total", "desc_r", "rep_r", "lambda"):
            assert key in rows[0]

    def test_resume_reproduces_next_step_loss(self, tmp_path):
        ds = SyntheticPairDataset(n_pairs=2, image_size=96)
        cfg = small_config(iterations=4, checkpoint_every=2)
        _, full = train(ds, cfg, out_dir=tmp_path)
        _, tail = train(ds, cfg, resume=tmp_path / "checkpoint_000002.pt")
        assert tail[0]["step"] == 2
        assert abs(tail[0]["total"] - full[2]["total"]) <= 1e-12
        assert abs(tail[1]["total"] - full[3]["total"]) <= 1e-12

    def test_naive_objective_runs(self):
        ds = SyntheticPairDataset(n_pairs=2, image_size=96)
        cfg = small_config(iterations=2, objective="naive-coupled")
        _, rows = train(ds, cfg)
        assert len(rows) == 2
        assert rows[0]["rep_r"] == 0.0
        assert rows[0]["desc_r"] != 0.0

    def test_divergence_aborts_with_dump(self, tmp_path, monkeypatch):
        ds = SyntheticPairDataset(n_pairs=2, image_size=96)
        cfg = small_config(iterations=2)

        real = losses.total_loss

        def poisoned(*args, **kwargs):
            bd = real(*args, **kwargs)
            bd.total = bd.total * torch.nan
            return bd

        monkeypatch.setattr(losses, "total_loss", poisoned)
        with pytest.raises(TrainingDiverged) as info:
            train(ds, cfg, out_dir=tmp_path)
        assert info.value.dump_path is not None
        assert info.value.dump_path.exists()

    def test_empty_dataset_rejected(self):
        ds = SyntheticPairDataset(n_pairs=0)
        with pytest.raises(ConfigurationError):
            train(ds, small_config())
