import numpy as np
import pytest
import torch

from crossfeat.geometry import Homography, build_correspondences
from crossfeat.losses import total_loss
from crossfeat.model import (
    ConfigurationError,
    FeatureNet,
    LNMSBlock,
    SuperDetector,
    extract_dense,
    load_checkpoint,
    local_softmax3,
    params_hash,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def net():
    torch.manual_seed(0)
    return FeatureNet({"gray": 1, "ir": 1})


class TestForward:
    def test_output_shapes(self, net):
        x = torch.randn(1, 1, 40, 48)
        out = net.forward(x, "gray")
        assert out["descriptors"].shape == (1, 128, 40, 48)
        assert out["scores"].shape == (1, 40, 48)
        assert out["prior"].shape == (1, 40, 48)
        assert out["conditional"].shape == (1, 40, 48)

    def test_descriptor_unit_norm(self, net):
        x = torch.randn(1, 1, 40, 40)
        out = net.forward(x, "gray")
        norms = out["descriptors"].norm(dim=1)
        assert (norms - 1.0).abs().max() < 1e-5

    def test_scores_are_prior_times_conditional(self, net):
        x = torch.randn(1, 1, 36, 36)
        out = net.forward(x, "gray")
        assert torch.allclose(out["scores"], out["prior"] * out["conditional"])
        assert out["scores"].min() >= 0.0 and out["scores"].max() <= 1.0

    def test_distinct_adapters_give_distinct_maps(self, net):
        x = torch.randn(1, 1, 40, 40)
        net.eval()
        a = net.forward(x, "gray")["descriptors"]
        b = net.forward(x, "ir")["descriptors"]
        assert (a - b).abs().max() > 1e-3

    def test_unregistered_modality(self, net):
        with pytest.raises(ConfigurationError):
            net.forward(torch.randn(1, 1, 40, 40), "sar")

    def test_too_small_input(self, net):
        with pytest.raises(ConfigurationError):
            net.forward(torch.randn(1, 1, 16, 16), "gray")

    def test_eval_mode_deterministic(self, net):
        net.eval()
        x = torch.randn(1, 1, 40, 40)
        a = net.forward(x, "gray")["scores"]
        b = net.forward(x, "gray")["scores"]
        assert torch.equal(a, b)

    def test_train_mode_updates_running_stats(self):
        torch.manual_seed(1)
        fresh = FeatureNet({"gray": 1})
        bn = fresh.adapters["gray"][0][1]
        before = bn.running_mean.clone()
        fresh.train()
        fresh.forward(torch.randn(2, 1, 40, 40), "gray")
        assert not torch.equal(bn.running_mean, before)

    def test_extract_dense_numpy_roundtrip(self, net):
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(40, 44)).astype(np.float32)
        desc, scores = extract_dense(net, img, "gray")
        assert desc.shape == (40, 44, 128)
        assert scores.shape == (40, 44)
        assert np.abs(np.linalg.norm(desc, axis=2) - 1.0).max() < 1e-4


class TestRawDetectorHead:
    def test_zero_weights_give_half(self):
        det = SuperDetector()
        with torch.no_grad():
            det.prior_head.weight.zero_()
            det.prior_head.bias.zero_()
        d = torch.randn(1, 128, 10, 10)
        d = torch.nn.functional.normalize(d, dim=1)
        _, prior, _ = det.forward(d)
        assert torch.allclose(prior, torch.full_like(prior, 0.5))

    def test_prior_in_open_unit_interval(self):
        torch.manual_seed(2)
        det = SuperDetector()
        d = torch.nn.functional.normalize(torch.randn(1, 128, 12, 12), dim=1)
        _, prior, _ = det.forward(d)
        assert prior.min() > 0.0 and prior.max() < 1.0

    def test_constant_descriptors_give_constant_prior(self):
        torch.manual_seed(3)
        det = SuperDetector()
        one = torch.nn.functional.normalize(torch.randn(128), dim=0)
        d = one[None, :, None, None].expand(1, 128, 9, 11)
        _, prior, _ = det.forward(d)
        assert (prior - prior[0, 0, 0]).abs().max() < 1e-6


class TestLocalSoftmax:
    def test_constant_map_gives_ones(self):
        x = torch.full((1, 3, 12, 12), 4.2, dtype=torch.float64)
        out = local_softmax3(x)
        assert (out - 1.0).abs().max() < 1e-12

    def test_spike_closed_form(self):
        x = torch.zeros(1, 1, 7, 7, dtype=torch.float64)
        x[0, 0, 3, 3] = 10.0
        out = local_softmax3(x)
        expected = 9.0 * np.exp(10.0) / (np.exp(10.0) + 8.0)
        assert abs(out[0, 0, 3, 3].item() - expected) < 1e-6

    def test_bounded(self):
        torch.manual_seed(4)
        x = torch.randn(2, 4, 16, 16, dtype=torch.float64) * 30
        out = local_softmax3(x)
        assert out.min() > 0.0
        assert out.max() <= 9.0 + 1e-12

    def test_overflow_guarded(self):
        x = torch.zeros(1, 1, 9, 9)
        x[0, 0, 4, 4] = 1e4  # would overflow exp() without the max shift
        out = local_softmax3(x)
        assert torch.isfinite(out).all()


class TestSuperDetector:
    def test_softmax_channels_sum_to_one(self):
        torch.manual_seed(5)
        det = SuperDetector()
        d = torch.nn.functional.normalize(torch.randn(1, 128, 14, 14), dim=1)
        x = det.blocks(d)
        logits = det.out_conv(x)
        probs = torch.softmax(logits, dim=1)
        assert (probs.sum(dim=1) - 1.0).abs().max() < 1e-6

    def test_forced_unit_prior_makes_scores_conditional(self):
        torch.manual_seed(6)
        det = SuperDetector()
        with torch.no_grad():
            det.prior_head.weight.zero_()
            det.prior_head.bias.fill_(100.0)  # sigmoid -> 1
        d = torch.nn.functional.normalize(torch.randn(1, 128, 10, 10), dim=1)
        conditional, prior, scores = det.forward(d)
        assert torch.allclose(prior, torch.ones_like(prior))
        assert torch.allclose(scores, conditional)

    def test_receptive_field_exceeds_pointwise_prior(self):
        det = SuperDetector()
        assert det.receptive_field() == 23
        assert det.receptive_field() > 1  # the prior head is 1x1


class TestGradientFlow:
    def test_all_parameter_groups_reached(self):
        torch.manual_seed(7)
        net = FeatureNet({"gray": 1, "ir": 1})
        net.train()
        rng = np.random.default_rng(0)
        img_a = torch.rand(1, 1, 64, 64)
        img_b = torch.rand(1, 1, 64, 64)
        fa = net.forward(img_a, "gray")
        fb = net.forward(img_b, "ir")
        h = Homography.identity()
        batch = build_correspondences(h, (64, 64), (64, 64), 64, 8, rng)
        bd = total_loss(
            fa["descriptors"][0],
            fa["scores"][0],
            fb["descriptors"][0],
            fb["scores"][0],
            batch,
            img_a[0],
            img_b[0],
            h,
        )
        bd.total.backward()
        for name, p in net.named_parameters():
            assert p.grad is not None, name
            assert p.grad.abs().max() > 0, f"dead parameter {name}"


class TestCheckpoint:
    def test_roundtrip_preserves_outputs(self, tmp_path, net):
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, net, config_hash="deadbeef", step=7)
        loaded, payload = load_checkpoint(path)
        assert payload["config_hash"] == "deadbeef"
        assert payload["step"] == 7
        x = torch.randn(1, 1, 40, 40)
        net.eval()
        loaded.eval()
        a = net.forward(x, "gray")["scores"]
        b = loaded.forward(x, "gray")["scores"]
        assert torch.equal(a, b)
        assert params_hash(net) == params_hash(loaded)

    def test_archive_keys(self, tmp_path, net):
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, net)
        payload = torch.load(path, weights_only=False)
        keys = list(payload["params"])
        assert all(
            k.startswith(("adapter/gray/", "adapter/ir/", "encoder/", "detector/"))
            for k in keys
        )
        # running statistics of the normalization layers are included
        assert any("running_mean" in k for k in keys)

    def test_version_check(self, tmp_path, net):
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, net)
        payload = torch.load(path, weights_only=False)
        payload["format_version"] = 99
        torch.save(payload, path)
        with pytest.raises(ConfigurationError):
            load_checkpoint(path)
