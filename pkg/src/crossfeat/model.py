"""The feature network: modality-specific adapters, a shared dilated
encoder, and a two-branch detector whose score is the product of a
pointwise prior probability and a wide-receptive-field conditional
probability sharpened by learnable non-maximum suppression blocks."""

from __future__ import annotations

import dataclasses
import hashlib

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DESC_DIM = 128
ADAPTER_CHANNELS = (32, 32, 64, 64, 128, 128)
ADAPTER_DILATIONS = (1, 1, 1, 2, 2, 2)
ENCODER_DILATIONS = (4, 4, 4)
DETECTOR_WIDTH = 64
DETECTOR_DILATIONS = (1, 2, 4)
CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    """Raised for unregistered modalities or malformed checkpoints."""


@dataclasses.dataclass
class DenseFeatures:
    """Per-image dense outputs (channels-first torch tensors).

    ``scores == prior * conditional`` elementwise; descriptors are unit
    l2 norm along the channel axis.
    """

    descriptors: torch.Tensor  # (D, H, W)
    scores: torch.Tensor  # (H, W)
    prior: torch.Tensor  # (H, W)
    conditional: torch.Tensor  # (H, W)


def _conv_block(c_in: int, c_out: int, dilation: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=dilation, dilation=dilation),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


def local_softmax3(x: torch.Tensor) -> torch.Tensor:
    """exp(x) / AP3(exp(x)) over 3x3 windows with replicate padding.

    The window max is subtracted inside both exponents, which leaves the
    value unchanged while preventing overflow. Output lies in (0, 9].
    """
    padded = F.pad(x, (1, 1, 1, 1), mode="replicate")
    m = F.max_pool2d(padded, 3, stride=1)
    h, w = x.shape[-2], x.shape[-1]
    denom = torch.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            denom = denom + torch.exp(padded[..., dy : dy + h, dx : dx + w] - m)
    return 9.0 * torch.exp(x - m) / denom


class LNMSBlock(nn.Module):
    """Learnable non-maximum suppression: conv, 3x3 local softmax, then
    batch- and instance-normalized rectification."""

    def __init__(self, c_in: int, c_out: int, dilation: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=dilation, dilation=dilation)
        self.bn = nn.BatchNorm2d(c_out)
        self.inorm = nn.InstanceNorm2d(c_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.conv(x)
        x = local_softmax3(x)
        x = F.relu(self.bn(x))
        x = F.relu(self.inorm(x))
        return x


class SuperDetector(nn.Module):
    """Two-branch detector over the dense descriptor map.

    The prior branch is a 1x1 convolution + sigmoid; the conditional
    branch cascades LNMS blocks with growing dilation, ends in a
    two-channel conv + channel softmax, and keeps the first channel.
    """

    def __init__(
        self,
        desc_dim: int = DESC_DIM,
        width: int = DETECTOR_WIDTH,
        dilations: tuple[int, ...] = DETECTOR_DILATIONS,
    ):
        super().__init__()
        self.prior_head = nn.Conv2d(desc_dim, 1, 1)
        blocks = []
        c_in = desc_dim
        for d in dilations:
            blocks.append(LNMSBlock(c_in, width, d))
            c_in = width
        self.blocks = nn.Sequential(*blocks)
        self.out_conv = nn.Conv2d(width, 2, 3, padding=1)
        self.dilations = tuple(dilations)

    def forward(
        self, descriptors: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        prior = torch.sigmoid(self.prior_head(descriptors))[:, 0]
        x = self.blocks(descriptors)
        logits = self.out_conv(x)
        conditional = torch.softmax(logits, dim=1)[:, 0]
        scores = prior * conditional
        return conditional, prior, scores

    def receptive_field(self) -> int:
        """Receptive field (pixels) of the conditional branch on the
        descriptor map; each 3x3 conv at dilation d adds 2d, each local
        softmax window adds 2."""
        rf = 1
        for d in self.dilations:
            rf += 2 * d + 2
        rf += 2  # final two-channel conv
        return rf


class FeatureNet(nn.Module):
    """Adapter (per modality, 6 convs) -> shared encoder (3 convs) ->
    unit-norm 128-d descriptors -> super detector. Full resolution
    throughout (dilation instead of downsampling)."""

    def __init__(self, modalities: dict[str, int]):
        super().__init__()
        if not modalities:
            raise ConfigurationError("at least one modality must be registered")
        self.modalities = dict(modalities)
        adapters = {}
        for tag, channels in self.modalities.items():
            layers = []
            c_in = channels
            for c_out, d in zip(ADAPTER_CHANNELS, ADAPTER_DILATIONS):
                layers.append(_conv_block(c_in, c_out, d))
                c_in = c_out
            adapters[tag] = nn.Sequential(*layers)
        self.adapters = nn.ModuleDict(adapters)
        enc = [
            _conv_block(ADAPTER_CHANNELS[-1], DESC_DIM, ENCODER_DILATIONS[0]),
            _conv_block(DESC_DIM, DESC_DIM, ENCODER_DILATIONS[1]),
            nn.Conv2d(
                DESC_DIM,
                DESC_DIM,
                3,
                padding=ENCODER_DILATIONS[2],
                dilation=ENCODER_DILATIONS[2],
            ),
        ]
        self.encoder = nn.Sequential(*enc)
        self.detector = SuperDetector()

    def forward(self, images: torch.Tensor, modality: str) -> dict[str, torch.Tensor]:
        """Dense maps for a batch of images of one modality.

        ``images`` is (B, C, H, W) with H, W >= 32; they are standardized
        per channel before the adapter. Train/eval mode of the module
        controls whether batch statistics or running statistics are used.
        """
        if modality not in self.adapters:
            raise ConfigurationError(f"modality {modality!r} is not registered")
        if images.ndim != 4:
            raise ConfigurationError("images must be (B, C, H, W)")
        if images.shape[-1] < 32 or images.shape[-2] < 32:
            raise ConfigurationError("images must be at least 32x32")
        x = standardize(images)
        x = self.adapters[modality](x)
        x = self.encoder(x)
        descriptors = F.normalize(x, p=2, dim=1)
        conditional, prior, scores = self.detector(descriptors)
        return {
            "descriptors": descriptors,
            "scores": scores,
            "prior": prior,
            "conditional": conditional,
        }

    def forward_single(self, image: torch.Tensor, modality: str) -> DenseFeatures:
        """Convenience wrapper for one (C, H, W) image."""
        out = self.forward(image[None], modality)
        return DenseFeatures(
            descriptors=out["descriptors"][0],
            scores=out["scores"][0],
            prior=out["prior"][0],
            conditional=out["conditional"][0],
        )


def standardize(images: torch.Tensor) -> torch.Tensor:
    """Zero-mean unit-variance per image and channel (eps-guarded)."""
    mean = images.mean(dim=(-2, -1), keepdim=True)
    std = images.std(dim=(-2, -1), keepdim=True, unbiased=False)
    return (images - mean) / (std + 1e-6)


def extract_dense(
    net: FeatureNet, image: np.ndarray, modality: str
) -> tuple[np.ndarray, np.ndarray]:
    """Run the net in eval mode on one numpy image.

    Accepts (h, w) or (h, w, c) float arrays; returns numpy
    ``(descriptors (h, w, D), scores (h, w))``.
    """
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    tens = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))
    was_training = net.training
    net.eval()
    with torch.no_grad():
        out = net.forward(tens[None], modality)
    if was_training:
        net.train()
    desc = out["descriptors"][0].permute(1, 2, 0).numpy()
    scores = out["scores"][0].numpy()
    return desc, scores


# ---------------------------------------------------------------------------
# checkpoint container


def _to_archive_key(key: str) -> str:
    if key.startswith("adapters."):
        rest = key[len("adapters."):]
        tag, sub = rest.split(".", 1)
        return f"adapter/{tag}/{sub}"
    if key.startswith("encoder."):
        return "encoder/" + key[len("encoder."):]
    if key.startswith("detector."):
        return "detector/" + key[len("detector."):]
    raise ConfigurationError(f"unexpected parameter key {key!r}")


def _from_archive_key(key: str) -> str:
    group, _, rest = key.partition("/")
    if group == "adapter":
        tag, _, sub = rest.partition("/")
        return f"adapters.{tag}.{sub}"
    if group in ("encoder", "detector"):
        return f"{group}.{rest}"
    raise ConfigurationError(f"unexpected archive key {key!r}")


def params_hash(net: FeatureNet) -> str:
    """Stable hash of all parameters and buffers (for feature files)."""
    digest = hashlib.sha256()
    for key in sorted(net.state_dict()):
        digest.update(key.encode())
        digest.update(net.state_dict()[key].numpy().tobytes())
    return digest.hexdigest()[:16]


def save_checkpoint(
    path,
    net: FeatureNet,
    config_hash: str = "",
    step: int = 0,
    optimizer_state: dict | None = None,
    rng_state: dict | None = None,
) -> None:
    """Versioned named-parameter archive, keyed adapter/<modality>/...,
    encoder/..., detector/... (normalization running stats included)."""
    params = {_to_archive_key(k): v for k, v in net.state_dict().items()}
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "modalities": net.modalities,
        "step": step,
        "params": params,
        "optimizer_state": optimizer_state,
        "rng_state": rng_state,
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[FeatureNet, dict]:
    """Rebuild the network from an archive; returns (net, payload)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigurationError(
            f"unsupported checkpoint version {payload.get('format_version')!r}"
        )
    net = FeatureNet(payload["modalities"])
    state = {_from_archive_key(k): v for k, v in payload["params"].items()}
    net.load_state_dict(state)
    return net, payload
