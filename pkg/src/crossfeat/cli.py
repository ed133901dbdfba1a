"""Command-line entry points: train, extract, match, evaluate, plot.

Configuration precedence is last-wins: config file < environment
variables (CROSSFEAT_<SECTION>_<KEY>) < --set section.key=value < named
flags. Exit codes: 0 success, 1 usage/config error, 2 runtime abort.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import os
import sys
import urllib.parse
from pathlib import Path

import click
import numpy as np
import yaml

from . import benchmark as bench
from . import features as feat
from . import plotting, training
from .geometry import GeometryError, TransformConfig
from .model import ConfigurationError, load_checkpoint, params_hash
from .training import SyntheticPairDataset, TrainConfig, TrainingDiverged

# the spec'd exit code for usage errors is 1, not click's default 2
click.UsageError.exit_code = 1

ENV_PREFIX = "CROSSFEAT_"
SECTIONS = {
    "train": {f.name for f in dataclasses.fields(TrainConfig)} - {"transform"},
    "transform": {"distortion_scale", "rotation_deg", "scale"},
    "dataset": {"uri", "n_pairs", "image_size", "split"},
}
MANIFEST_HINT = (
    "expected a JSON-lines manifest: one object per pair with keys "
    "pair_id, image_a, image_b, modality_a, modality_b and optional "
    "homography / landmarks paths, or a synth://<recipe> URI"
)


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except TrainingDiverged as exc:
            dump = f" (state dumped to {exc.dump_path})" if exc.dump_path else ""
            _fail(2, f"{exc}{dump}")
        except (ConfigurationError, GeometryError, FileNotFoundError, ValueError) as exc:
            _fail(1, str(exc))

    return wrapper


# ---------------------------------------------------------------------------
# config resolution


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: config must be a mapping of sections")
    return raw


def _apply_env(sections: dict) -> None:
    for key, value in os.environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        rest = key[len(ENV_PREFIX):]
        section, _, field = rest.partition("_")
        section = section.lower()
        field = field.lower()
        if section in SECTIONS and field in SECTIONS[section]:
            sections.setdefault(section, {})[field] = yaml.safe_load(value)


def _apply_overrides(sections: dict, overrides: tuple[str, ...]) -> None:
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigurationError(
                f"--set expects section.key=value, got {item!r}"
            )
        dotted, value = item.split("=", 1)
        section, field = dotted.split(".", 1)
        if section not in SECTIONS or field not in SECTIONS[section]:
            raise ConfigurationError(f"unknown config key {dotted!r}")
        sections.setdefault(section, {})[field] = yaml.safe_load(value)


def _resolve_sections(config_path, overrides, flag_values: dict) -> dict:
    sections = _load_config_file(config_path)
    for name in sections:
        if name not in SECTIONS:
            raise ConfigurationError(f"unknown config section {name!r}")
        unknown = set(sections[name] or {}) - SECTIONS[name]
        if unknown:
            raise ConfigurationError(
                f"unknown keys in section {name!r}: {sorted(unknown)}"
            )
    _apply_env(sections)
    _apply_overrides(sections, overrides)
    for dotted, value in flag_values.items():
        if value is None:
            continue
        section, field = dotted.split(".", 1)
        sections.setdefault(section, {})[field] = value
    return sections


def _build_train_config(sections: dict) -> TrainConfig:
    train_kw = dict(sections.get("train", {}) or {})
    tr = dict(sections.get("transform", {}) or {})
    transform = TransformConfig(
        distortion_scale=tuple(tr.get("distortion_scale", (0.0, 0.2))),
        rotation_deg=tuple(tr.get("rotation_deg", (-10.0, 10.0))),
        scale=tuple(tr.get("scale", (0.8, 1.0))),
        seed=int(train_kw.get("seed", 0)),
    )
    return TrainConfig(**train_kw, transform=transform)


def _resolve_dataset(uri: str, sections: dict, split: str):
    """A training dataset or a list of evaluation inputs from a dataset URI
    (synth://<recipe>[?n=..&size=..&split=..]) or a manifest path."""
    ds = dict(sections.get("dataset", {}) or {})
    if uri.startswith("synth://"):
        parsed = urllib.parse.urlparse(uri)
        recipe = parsed.netloc or parsed.path.lstrip("/")
        query = dict(urllib.parse.parse_qsl(parsed.query))
        return SyntheticPairDataset(
            recipe=recipe,
            n_pairs=int(query.get("n", ds.get("n_pairs", 20))),
            image_size=int(query.get("size", ds.get("image_size", 256))),
            split=query.get("split", ds.get("split", split)),
            seed=int(query.get("seed", 0)),
        )
    path = Path(uri)
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest {uri!r} not found; {MANIFEST_HINT}")
    return bench.load_manifest(path)


def _eval_inputs(dataset, transform: TransformConfig, seed: int):
    """Evaluation pairs from a resolved dataset (manifest entries pass
    through; synthetic pairs are warped here)."""
    if isinstance(dataset, SyntheticPairDataset):
        pairs = []
        for i in range(len(dataset)):
            rp = dataset.pair(i)
            pairs.append(
                bench.warp_aligned_pair(
                    rp.pair_id,
                    rp.image_a,
                    rp.image_b,
                    rp.modality_a,
                    rp.modality_b,
                    transform=transform,
                    seed=seed,
                )
            )
        return pairs
    return dataset


def _training_dataset(dataset):
    if isinstance(dataset, SyntheticPairDataset):
        return dataset
    entries = dataset
    for e in entries:
        if e.homography is not None:
            raise ConfigurationError(
                f"pair {e.pair_id}: training needs pixel-registered pairs "
                "(manifest rows must not carry a homography)"
            )
    return _ManifestTrainingDataset(entries)


class _ManifestTrainingDataset:
    """Aligned manifest pairs as a training dataset."""

    def __init__(self, entries):
        self.entries = entries
        mods: dict[str, int] = {}
        for e in entries:
            for tag, path in ((e.modality_a, e.image_a), (e.modality_b, e.image_b)):
                if tag not in mods:
                    img = bench.load_image(path)
                    mods[tag] = 1 if img.ndim == 2 else img.shape[2]
        self.modalities = mods

    def __len__(self):
        return len(self.entries)

    def pair(self, index: int) -> training.RegisteredPair:
        e = self.entries[index]
        return training.RegisteredPair(
            image_a=bench.load_image(e.image_a),
            image_b=bench.load_image(e.image_b),
            modality_a=e.modality_a,
            modality_b=e.modality_b,
            pair_id=e.pair_id,
        )


def _write_files_manifest(out_dir: Path) -> None:
    names = sorted(
        p.name for p in out_dir.iterdir() if p.is_file() and p.name != "files.json"
    )
    (out_dir / "files.json").write_text(json.dumps({"files": names}, indent=2) + "\n")


# ---------------------------------------------------------------------------
# commands


@click.group()
def main():
    """Cross-modal feature learning, matching and registration toolkit."""


@main.command()
@click.option("--dataset", required=True, help="manifest path or synth://<recipe>")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="YAML config file (sections train/transform/dataset)")
@click.option("--output", required=True, type=click.Path(), help="run directory")
@click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
              help="config override, repeatable")
@click.option("--iterations", type=int, default=None, help="train.iterations")
@click.option("--seed", type=int, default=None, help="train.seed")
@click.option("--crop-size", type=int, default=None, help="train.crop_size")
@click.option("--batch-size", type=int, default=None, help="train.batch_size")
@click.option("--lam", type=float, default=None, help="train.lam (loss weight)")
@click.option("--objective", type=click.Choice(training.OBJECTIVES), default=None,
              help="train.objective")
@_guard
def train(dataset, config_path, output, overrides, iterations, seed, crop_size,
          batch_size, lam, objective):
    """Train a model and write checkpoints + the step log."""
    sections = _resolve_sections(
        config_path,
        overrides,
        {
            "train.iterations": iterations,
            "train.seed": seed,
            "train.crop_size": crop_size,
            "train.batch_size": batch_size,
            "train.lam": lam,
            "train.objective": objective,
        },
    )
    config = _build_train_config(sections)
    ds = _training_dataset(_resolve_dataset(dataset, sections, split="train"))
    out_dir = Path(output)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_resolved.yaml").write_text(
        yaml.safe_dump(dataclasses.asdict(config), sort_keys=True)
    )
    training.train(ds, config, out_dir=out_dir)
    _write_files_manifest(out_dir)
    click.echo(f"trained {config.iterations} iterations -> {out_dir}")


@main.command()
@click.option("--dataset", required=True, help="manifest path or synth://<recipe>")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--output", required=True, type=click.Path())
@click.option("--k", type=int, default=1024, show_default=True,
              help="keypoints per image")
@click.option("--seed", type=int, default=0, show_default=True,
              help="evaluation transform seed")
@click.option("--nms-radius", type=float, default=4.0, show_default=True)
@click.option("--border", type=int, default=8, show_default=True)
@_guard
def extract(dataset, checkpoint, output, k, seed, nms_radius, border):
    """Write feature files for every image of every evaluation pair."""
    net, _ = load_checkpoint(checkpoint)
    model_hash = params_hash(net)
    ds = _resolve_dataset(dataset, {}, split="test")
    pairs = _eval_inputs(ds, TransformConfig(), seed)
    extractor = bench.net_extractor(net, k, nms_radius=nms_radius, border=border)
    out_dir = Path(output)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for item in pairs:
        pair = (
            item
            if isinstance(item, bench.EvalPair)
            else bench.prepare_pair(item, seed=seed)
        )
        for side, image, modality in (
            ("a", pair.image_a, pair.modality_a),
            ("b", pair.image_b, pair.modality_b),
        ):
            kp = extractor(image, modality)
            feat.save_features(out_dir / f"{pair.pair_id}.{side}.feat", kp, model_hash)
            count += 1
    _write_files_manifest(out_dir)
    click.echo(f"wrote {count} feature files -> {out_dir}")


@main.command()
@click.option("--features-a", required=True, type=click.Path(exists=True))
@click.option("--features-b", required=True, type=click.Path(exists=True))
@click.option("--output", required=True, type=click.Path(), help="matches text file")
@_guard
def match(features_a, features_b, output):
    """Bidirectional nearest-neighbor matching of two feature files."""
    kp_a, _ = feat.load_features(features_a)
    kp_b, _ = feat.load_features(features_b)
    matches = feat.match_bidirectional(kp_a, kp_b)
    feat.save_matches(output, matches)
    click.echo(f"{len(matches)} mutual matches -> {output}")


@main.command()
@click.option("--dataset", required=True, help="manifest path or synth://<recipe>")
@click.option("--checkpoint", type=click.Path(exists=True), default=None)
@click.option("--features", "feature_dir", type=click.Path(exists=True), default=None,
              help="directory of <pair_id>.{a,b}.feat files")
@click.option("--output", required=True, type=click.Path())
@click.option("--k", type=int, default=1024, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--ransac-iters", type=int, default=bench.RANSAC_ITERS,
              show_default=True)
@click.option("--ransac-thresh", type=float, default=bench.RANSAC_REPROJ_T,
              show_default=True)
@_guard
def evaluate(dataset, checkpoint, feature_dir, output, k, seed, workers,
             ransac_iters, ransac_thresh):
    """Run the benchmark and write report.csv + summary.json."""
    if (checkpoint is None) == (feature_dir is None):
        raise ConfigurationError("pass exactly one of --checkpoint / --features")
    ds = _resolve_dataset(dataset, {}, split="test")
    pairs = _eval_inputs(ds, TransformConfig(), seed)
    extractor = None
    if checkpoint is not None:
        net, _ = load_checkpoint(checkpoint)
        extractor = bench.net_extractor(net, k)
    report = bench.run_benchmark(
        pairs,
        extractor=extractor,
        feature_dir=feature_dir,
        k=k,
        seed=seed,
        ransac_iters=ransac_iters,
        ransac_thresh=ransac_thresh,
        workers=workers,
    )
    out_dir = Path(output)
    out_dir.mkdir(parents=True, exist_ok=True)
    bench.write_report_csv(report, out_dir / "report.csv")
    bench.write_summary(report, out_dir / "summary.json")
    _write_files_manifest(out_dir)
    agg = report.aggregates()
    click.echo(
        f"{agg['n_pairs']} pairs ({agg['n_skipped']} skipped), "
        f"SR {agg.get('sr', 0)}, SRR {agg.get('srr', 0.0):.3f} -> {out_dir}"
    )


@main.command()
@click.argument("reports", nargs=-1, required=True,
                type=click.Path(exists=True))
@click.option("--output", required=True, type=click.Path(), help="plot directory")
@click.option("--labels", default=None,
              help="comma-separated labels, one per report (default: file stems)")
@_guard
def plot(reports, output, labels):
    """RR/MS/SRR-vs-threshold curves (and a comparison bar chart when
    several reports, e.g. a lambda sweep, are given)."""
    names = labels.split(",") if labels else [Path(r).stem for r in reports]
    if len(names) != len(reports):
        raise ConfigurationError("need as many labels as reports")
    loaded = {}
    for name, path in zip(names, reports):
        rows = bench.read_report_csv(path)
        if not rows:
            raise ConfigurationError(f"{path}: report has no rows")
        loaded[name] = rows
    out_dir = Path(output)
    written = plotting.plot_curves(loaded, out_dir)
    if len(loaded) > 1:
        written.append(plotting.plot_comparison_bars(loaded, out_dir))
    _write_files_manifest(out_dir)
    click.echo(f"wrote {len(written)} plots -> {out_dir}")


if __name__ == "__main__":
    main()
