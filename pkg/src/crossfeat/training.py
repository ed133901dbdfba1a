"""Training: synthetic pseudo-modality data, crop/warp sample preparation,
the linear-decay Adam loop, logging and checkpointing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter, zoom

from . import losses
from .geometry import (
    Homography,
    InsufficientOverlapError,
    TransformConfig,
    build_correspondences,
    sample_homography,
    warp_image,
)
from .model import ConfigurationError, FeatureNet, save_checkpoint

log = logging.getLogger(__name__)

SYNTH_RECIPES = ("identity-gray", "inverted-blur", "gamma-edge")
OBJECTIVES = ("recoupled", "naive-coupled")


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite; carries the dump path."""

    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    crop_size: int = 192
    batch_size: int = 2
    iterations: int = 10_000
    lr_init: float = 1e-3
    weight_decay: float = 5e-4
    lam: float = 8.0
    n_samples: int = 512
    seed: int = 0
    margin: int = 8
    checkpoint_every: int = 1000
    grad_clip: float | None = None
    objective: str = "recoupled"
    transform: TransformConfig = dataclasses.field(default_factory=TransformConfig)

    def __post_init__(self):
        if self.crop_size < 64:
            raise ConfigurationError("crop_size must be >= 64")
        for name in ("batch_size", "iterations", "lr_init", "weight_decay",
                     "lam", "n_samples", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"objective must be one of {OBJECTIVES}")


def config_hash(config: TrainConfig) -> str:
    payload = dataclasses.asdict(config)
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclasses.dataclass
class RegisteredPair:
    """A pixel-registered image pair from the training corpus."""

    image_a: np.ndarray  # (h, w) or (h, w, 3) float32 in [0, 1]
    image_b: np.ndarray
    modality_a: str
    modality_b: str
    pair_id: str


@dataclasses.dataclass
class TrainSample:
    """One training instance: aligned crops with image B warped.

    ``h`` maps crop-A coordinates exactly onto warped-crop-B coordinates
    (both crops are taken at the same offset, so the crop-local ground
    truth is the drawn warp itself).
    """

    image_a: np.ndarray
    image_b: np.ndarray
    modality_a: str
    modality_b: str
    h: Homography
    mask_b: np.ndarray
    resized: bool = False


# ---------------------------------------------------------------------------
# synthetic data


def synthetic_base_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """A textured grayscale test image: low-frequency shading, smoothed
    noise, and randomly placed rectangles / ellipses with crisp edges."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    fx, fy = rng.uniform(1.0, 3.0, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    img = 0.5 + 0.2 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)

    smooth = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 24)
    img += 0.25 * smooth / (np.abs(smooth).max() + 1e-9)

    for _ in range(14):
        cx, cy = rng.uniform(0.1, 0.9, size=2) * size
        theta = rng.uniform(0, np.pi)
        ct, st = np.cos(theta), np.sin(theta)
        u = (np.arange(size)[None, :] - cx) * ct + (np.arange(size)[:, None] - cy) * st
        v = -(np.arange(size)[None, :] - cx) * st + (np.arange(size)[:, None] - cy) * ct
        a = rng.uniform(0.03, 0.18) * size
        b = rng.uniform(0.03, 0.18) * size
        if rng.random() < 0.5:
            mask = (np.abs(u) < a) & (np.abs(v) < b)
        else:
            mask = (u / a) ** 2 + (v / b) ** 2 < 1.0
        value = rng.uniform(0.0, 1.0)
        alpha = rng.uniform(0.5, 0.9)
        img = np.where(mask, (1 - alpha) * img + alpha * value, img)

    img += 0.015 * rng.standard_normal((size, size))
    lo, hi = img.min(), img.max()
    return ((img - lo) / max(hi - lo, 1e-9) * 0.9 + 0.05).astype(np.float32)


def synth_modality(
    image: np.ndarray, recipe: str, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Deterministic pseudo-modality of an image (rng reserved for future
    stochastic recipes).

    identity-gray: the luminance unchanged. inverted-blur: inverted
    luminance, Gaussian-blurred with sigma 1.5. gamma-edge: luminance^0.4
    blended 50/50 with the normalized gradient magnitude.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        lum = 0.299 * img[:, :, 0] + 0.587 * img[:, :, 1] + 0.114 * img[:, :, 2]
    else:
        lum = img
    if recipe == "identity-gray":
        out = lum
    elif recipe == "inverted-blur":
        out = gaussian_filter(1.0 - lum, sigma=1.5)
    elif recipe == "gamma-edge":
        gy, gx = np.gradient(lum)
        grad = np.hypot(gx, gy)
        grad = grad / (grad.max() + 1e-9)
        out = 0.5 * np.power(np.clip(lum, 0.0, 1.0), 0.4) + 0.5 * grad
    else:
        raise ConfigurationError(
            f"unknown modality recipe {recipe!r}; choose from {SYNTH_RECIPES}"
        )
    return out.astype(np.float32)


class SyntheticPairDataset:
    """Registered pairs of (grayscale base image, pseudo-modality render).

    Images are generated procedurally per index; the ``split`` enters the
    seed so train and test draw disjoint content.
    """

    def __init__(
        self,
        recipe: str = "inverted-blur",
        n_pairs: int = 20,
        image_size: int = 256,
        split: str = "train",
        seed: int = 0,
    ):
        if recipe not in SYNTH_RECIPES:
            raise ConfigurationError(
                f"unknown modality recipe {recipe!r}; choose from {SYNTH_RECIPES}"
            )
        self.recipe = recipe
        self.n_pairs = n_pairs
        self.image_size = image_size
        self.split = split
        self.seed = seed
        self.modalities = {"gray": 1, recipe: 1}

    def __len__(self) -> int:
        return self.n_pairs

    def pair(self, index: int) -> RegisteredPair:
        if not 0 <= index < self.n_pairs:
            raise IndexError(index)
        split_code = {"train": 0, "test": 1}.get(self.split, 2)
        rng = np.random.default_rng([self.seed, split_code, index])
        base = synthetic_base_image(self.image_size, rng)
        return RegisteredPair(
            image_a=base,
            image_b=synth_modality(base, self.recipe, rng),
            modality_a="gray",
            modality_b=self.recipe,
            pair_id=f"synth-{self.split}-{index:03d}",
        )


def _standardize_np(img: np.ndarray) -> np.ndarray:
    axes = (0, 1)
    mean = img.mean(axis=axes, keepdims=True)
    std = img.std(axis=axes, keepdims=True)
    return ((img - mean) / (std + 1e-6)).astype(np.float32)


def make_sample(
    pair: RegisteredPair, config: TrainConfig, rng: np.random.Generator
) -> TrainSample:
    """Aligned random crop from both modalities, image B warped by a fresh
    homography; crops are standardized per channel. Images smaller than
    the crop are upscaled (aspect preserved) first, with a logged flag."""
    crop = config.crop_size
    img_a = np.asarray(pair.image_a, dtype=np.float32)
    img_b = np.asarray(pair.image_b, dtype=np.float32)
    resized = False
    if min(img_a.shape[:2]) < crop or min(img_b.shape[:2]) < crop:
        resized = True
        log.warning("pair %s smaller than crop %d; resizing", pair.pair_id, crop)
        img_a = _resize_min_side(img_a, crop)
        img_b = _resize_min_side(img_b, crop)

    h_img, w_img = img_a.shape[:2]
    ox = int(rng.integers(0, w_img - crop + 1))
    oy = int(rng.integers(0, h_img - crop + 1))
    crop_a = _standardize_np(img_a[oy : oy + crop, ox : ox + crop])
    crop_b = _standardize_np(img_b[oy : oy + crop, ox : ox + crop])

    h_warp = sample_homography(config.transform, (crop, crop), rng)
    warped_b, mask_b = warp_image(crop_b, h_warp)
    return TrainSample(
        image_a=crop_a,
        image_b=warped_b.astype(np.float32),
        modality_a=pair.modality_a,
        modality_b=pair.modality_b,
        h=h_warp,
        mask_b=mask_b,
        resized=resized,
    )


def _resize_min_side(img: np.ndarray, target: int) -> np.ndarray:
    factor = target / min(img.shape[:2])
    factors = (factor, factor) + (1,) * (img.ndim - 2)
    out = zoom(img, factors, order=1)
    # guard against rounding one pixel short
    if min(out.shape[:2]) < target:
        out = zoom(img, tuple(f * 1.01 for f in factors[:2]) + factors[2:], order=1)
    return out.astype(np.float32)


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Linear decay from lr_init at step 0 to zero at the last step."""
    return config.lr_init * max(0.0, 1.0 - iteration / config.iterations)


def _to_tensor(img: np.ndarray) -> torch.Tensor:
    arr = img[:, :, None] if img.ndim == 2 else img
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def _draw_sample(pair, config, rng) -> tuple[TrainSample, "CorrespondenceBatch"]:
    for _ in range(8):
        sample = make_sample(pair, config, rng)
        try:
            batch = build_correspondences(
                sample.h,
                (config.crop_size, config.crop_size),
                (config.crop_size, config.crop_size),
                config.n_samples,
                config.margin,
                rng,
            )
            return sample, batch
        except InsufficientOverlapError:
            continue
    raise TrainingDiverged("could not draw an overlapping crop in 8 attempts")


def train(
    dataset,
    config: TrainConfig,
    out_dir: Path | None = None,
    resume: Path | None = None,
) -> tuple[FeatureNet, list[dict]]:
    """Run the training loop; returns the net and the per-step log rows.

    Each step samples ``batch_size`` pairs, builds correspondences, and
    takes one AdamW step (decoupled weight decay, betas 0.9/0.999,
    eps 1e-8) at the linearly decayed rate. Checkpoints are written every
    ``checkpoint_every`` steps and at the end; the final one is the one
    meant for evaluation. Fixed seeds give a bitwise-identical loss trace.
    """
    if len(dataset) == 0:
        raise ConfigurationError("dataset is empty")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    net = FeatureNet(dict(dataset.modalities))
    net.train()
    optimizer = torch.optim.AdamW(
        net.parameters(),
        lr=config.lr_init,
        weight_decay=config.weight_decay,
        betas=(0.9, 0.999),
        eps=1e-8,
    )
    chash = config_hash(config)
    start_step = 0
    if resume is not None:
        payload = torch.load(resume, map_location="cpu", weights_only=False)
        from .model import _from_archive_key  # local import to keep API small

        net.load_state_dict(
            {_from_archive_key(k): v for k, v in payload["params"].items()}
        )
        optimizer.load_state_dict(payload["optimizer_state"])
        rng.bit_generator.state = payload["rng_state"]["numpy"]
        torch.set_rng_state(payload["rng_state"]["torch"])
        start_step = payload["step"]

    def _checkpoint(path: Path, step: int) -> None:
        save_checkpoint(
            path,
            net,
            config_hash=chash,
            step=step,
            optimizer_state=optimizer.state_dict(),
            rng_state={
                "numpy": rng.bit_generator.state,
                "torch": torch.get_rng_state(),
            },
        )

    log_rows: list[dict] = []
    log_file = (out_dir / "train_log.jsonl").open("a") if out_dir else None
    try:
        for step in range(start_step, config.iterations):
            lr = lr_at(step, config)
            for group in optimizer.param_groups:
                group["lr"] = lr

            pair_ids = rng.integers(0, len(dataset), size=config.batch_size)
            drawn = [_draw_sample(dataset.pair(int(i)), config, rng) for i in pair_ids]

            # batch all images of one modality through the net together
            groups: dict[str, list[tuple[int, str]]] = {}
            for i, (sample, _) in enumerate(drawn):
                groups.setdefault(sample.modality_a, []).append((i, "a"))
                groups.setdefault(sample.modality_b, []).append((i, "b"))
            feats: dict[tuple[int, str], dict[str, torch.Tensor]] = {}
            for modality, members in groups.items():
                stack = torch.stack(
                    [
                        _to_tensor(
                            drawn[i][0].image_a if side == "a" else drawn[i][0].image_b
                        )
                        for i, side in members
                    ]
                )
                out = net.forward(stack, modality)
                for pos, (i, side) in enumerate(members):
                    feats[(i, side)] = {k: v[pos] for k, v in out.items()}

            terms = {"desc_r": 0.0, "peak_r_a": 0.0, "peak_r_b": 0.0, "rep_r": 0.0}
            pair_losses = []
            for i, (sample, corr) in enumerate(drawn):
                fa, fb = feats[(i, "a")], feats[(i, "b")]
                if config.objective == "recoupled":
                    bd = losses.total_loss(
                        fa["descriptors"],
                        fa["scores"],
                        fb["descriptors"],
                        fb["scores"],
                        corr,
                        _to_tensor(sample.image_a),
                        _to_tensor(sample.image_b),
                        sample.h,
                        lam=config.lam,
                        content_mask_b=torch.from_numpy(sample.mask_b),
                    )
                    pair_losses.append(bd.total)
                    for key in terms:
                        terms[key] += float(getattr(bd, key)) / len(drawn)
                else:
                    value = losses.naive_pair_loss(
                        fa["descriptors"],
                        fa["scores"],
                        fb["descriptors"],
                        fb["scores"],
                        corr,
                    )
                    pair_losses.append(value)
                    terms["desc_r"] += float(value) / len(drawn)

            loss = torch.stack(pair_losses).mean()
            if not torch.isfinite(loss):
                dump = None
                if out_dir is not None:
                    dump = out_dir / f"diverged_step{step:06d}.pt"
                    _checkpoint(dump, step)
                raise TrainingDiverged(
                    f"non-finite loss at step {step}", dump_path=dump
                )

            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(net.parameters(), config.grad_clip)
            optimizer.step()

            row = {
                "step": step,
                "lr": lr,
                "total": float(loss),
                **{k: v for k, v in terms.items()},
                "lambda": config.lam,
            }
            log_rows.append(row)
            if log_file is not None:
                log_file.write(json.dumps(row) + "\n")

            done = step + 1
            if out_dir is not None and (
                done % config.checkpoint_every == 0 or done == config.iterations
            ):
                _checkpoint(out_dir / f"checkpoint_{done:06d}.pt", done)
                if done == config.iterations:
                    _checkpoint(out_dir / "checkpoint_final.pt", done)
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None and config.iterations == start_step:
        _checkpoint(out_dir / "checkpoint_final.pt", start_step)
    return net, log_rows
