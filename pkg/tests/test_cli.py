import json

import numpy as np
import pytest
from click.testing import CliRunner

from crossfeat.benchmark import read_report_csv, save_image, write_report_csv
from crossfeat.cli import (
    _build_train_config,
    _resolve_sections,
    main,
)
from crossfeat.features import save_features
from crossfeat.geometry import Homography, write_homography
from crossfeat.model import ConfigurationError


@pytest.fixture
def runner():
    return CliRunner()


FAST_TRAIN = [
    "--set", "train.crop_size=64",
    "--set", "train.n_samples=64",
    "--set", "train.checkpoint_every=2",
]


def invoke(runner, args):
    return runner.invoke(main, args, catch_exceptions=False)


class TestConfigResolution:
    def test_precedence_file_env_set_flag(self, tmp_path, monkeypatch):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("train:\n  iterations: 5\n  crop_size: 96\n")
        monkeypatch.setenv("CROSSFEAT_TRAIN_ITERATIONS", "4")
        sections = _resolve_sections(str(cfg), (), {"train.iterations": None})
        assert sections["train"]["iterations"] == 4  # env beats file
        sections = _resolve_sections(
            str(cfg), ("train.iterations=3",), {"train.iterations": None}
        )
        assert sections["train"]["iterations"] == 3  # --set beats env
        sections = _resolve_sections(
            str(cfg), ("train.iterations=3",), {"train.iterations": 2}
        )
        assert sections["train"]["iterations"] == 2  # named flag wins
        config = _build_train_config(sections)
        assert config.iterations == 2
        assert config.crop_size == 96

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigurationError):
            _resolve_sections(None, ("train.posterity=1",), {})

    def test_unknown_section_rejected(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("trainer:\n  iterations: 5\n")
        with pytest.raises(ConfigurationError):
            _resolve_sections(str(cfg), (), {})

    def test_transform_section(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text(
            "transform:\n  rotation_deg: [-5.0, 5.0]\n  scale: [0.9, 1.0]\n"
        )
        config = _build_train_config(_resolve_sections(str(cfg), (), {}))
        assert config.transform.rotation_deg == (-5.0, 5.0)
        assert config.transform.scale == (0.9, 1.0)


class TestHelp:
    @pytest.mark.parametrize(
        "command", ["train", "extract", "match", "evaluate", "plot"]
    )
    def test_help_lists_flags(self, runner, command):
        result = invoke(runner, [command, "--help"])
        assert result.exit_code == 0
        assert "--output" in result.output

    def test_defaults_shown(self, runner):
        result = invoke(runner, ["evaluate", "--help"])
        assert "1024" in result.output  # keypoint default
        assert "100000" in result.output  # RANSAC iteration default


class TestTrainCommand:
    def test_smoke_writes_checkpoint_and_log(self, runner, tmp_path):
        out = tmp_path / "run"
        result = invoke(
            runner,
            ["train", "--dataset", "synth://inverted-blur?n=2&size=96",
             "--iterations", "2", "--output", str(out)] + FAST_TRAIN,
        )
        assert result.exit_code == 0
        assert (out / "checkpoint_final.pt").exists()
        assert (out / "train_log.jsonl").exists()
        assert (out / "config_resolved.yaml").exists()
        files = json.loads((out / "files.json").read_text())["files"]
        assert "train_log.jsonl" in files
        rows = [
            json.loads(line)
            for line in (out / "train_log.jsonl").read_text().splitlines()
        ]
        assert [r["step"] for r in rows] == [0, 1]

    def test_seeded_rerun_reproduces_log(self, runner, tmp_path):
        args = ["train", "--dataset", "synth://inverted-blur?n=2&size=96",
                "--iterations", "2", "--seed", "11"] + FAST_TRAIN
        r1 = invoke(runner, args + ["--output", str(tmp_path / "a")])
        r2 = invoke(runner, args + ["--output", str(tmp_path / "b")])
        assert r1.exit_code == 0 and r2.exit_code == 0
        log_a = (tmp_path / "a" / "train_log.jsonl").read_bytes()
        log_b = (tmp_path / "b" / "train_log.jsonl").read_bytes()
        assert log_a == log_b

    def test_missing_manifest_exits_one_with_hint(self, runner, tmp_path):
        result = runner.invoke(
            main,
            ["train", "--dataset", str(tmp_path / "nope.jsonl"),
             "--output", str(tmp_path / "out")],
        )
        assert result.exit_code == 1
        assert "manifest" in result.output

    def test_bad_config_value_exits_one(self, runner, tmp_path):
        result = runner.invoke(
            main,
            ["train", "--dataset", "synth://inverted-blur?n=2&size=96",
             "--iterations", "2", "--crop-size", "16",
             "--output", str(tmp_path / "out")],
        )
        assert result.exit_code == 1

    def test_unknown_flag_exits_one(self, runner, tmp_path):
        result = runner.invoke(main, ["train", "--frobnicate"])
        assert result.exit_code == 1


def _make_perfect_dataset(tmp_path, n_pairs=2, size=96, step=12):
    """Manifest with stored homographies plus matching perfect feature files."""
    from test_benchmark import grid_coords, unit_rows

    data = tmp_path / "data"
    feats = tmp_path / "feats"
    data.mkdir()
    feats.mkdir()
    rng = np.random.default_rng(0)
    entries = []
    for i in range(n_pairs):
        img = rng.uniform(size=(size, size))
        save_image(data / f"{i}_a.png", img)
        save_image(data / f"{i}_b.png", img)
        shift = (5 + i, 3)
        h = Homography(
            np.array([[1, 0, shift[0]], [0, 1, shift[1]], [0, 0, 1]], dtype=float)
        )
        write_homography(data / f"{i}_h.txt", h)
        entries.append(
            {"pair_id": f"p{i}", "image_a": f"{i}_a.png", "image_b": f"{i}_b.png",
             "modality_a": "gray", "modality_b": "gray",
             "homography": f"{i}_h.txt"}
        )
        coords_a = grid_coords(size, 20, step)
        desc = unit_rows(rng, len(coords_a))
        from crossfeat.features import KeypointSet

        kp_a = KeypointSet(
            coords=coords_a,
            scores=np.linspace(1, 0.5, len(coords_a)),
            descriptors=desc,
            image_size=(size, size),
        )
        kp_b = KeypointSet(
            coords=coords_a + np.array(shift),
            scores=kp_a.scores.copy(),
            descriptors=desc.copy(),
            image_size=(size, size),
        )
        save_features(feats / f"p{i}.a.feat", kp_a)
        save_features(feats / f"p{i}.b.feat", kp_b)
    manifest = data / "pairs.jsonl"
    manifest.write_text("\n".join(json.dumps(e) for e in entries) + "\n")
    return manifest, feats


class TestEvaluateCommand:
    def test_perfect_features_max_metrics(self, runner, tmp_path):
        manifest, feats = _make_perfect_dataset(tmp_path)
        out = tmp_path / "eval"
        result = invoke(
            runner,
            ["evaluate", "--dataset", str(manifest), "--features", str(feats),
             "--output", str(out), "--ransac-iters", "500"],
        )
        assert result.exit_code == 0
        summary = json.loads((out / "summary.json").read_text())
        agg = summary["aggregates"]
        assert agg["srr"] == 1.0
        assert agg["mean_ms"]["1"] == 1.0  # JSON object keys are strings

    def test_rerun_byte_identical(self, runner, tmp_path):
        manifest, feats = _make_perfect_dataset(tmp_path)
        outs = []
        for name in ("e1", "e2"):
            out = tmp_path / name
            result = invoke(
                runner,
                ["evaluate", "--dataset", str(manifest), "--features", str(feats),
                 "--output", str(out), "--ransac-iters", "500", "--seed", "3"],
            )
            assert result.exit_code == 0
            outs.append(
                (out / "report.csv").read_bytes()
                + (out / "summary.json").read_bytes()
            )
        assert outs[0] == outs[1]

    def test_corrupt_feature_file_skipped_exit_zero(self, runner, tmp_path):
        manifest, feats = _make_perfect_dataset(tmp_path)
        (feats / "p0.a.feat").write_bytes(b"garbage")
        out = tmp_path / "eval"
        result = invoke(
            runner,
            ["evaluate", "--dataset", str(manifest), "--features", str(feats),
             "--output", str(out), "--ransac-iters", "500"],
        )
        assert result.exit_code == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["aggregates"]["n_skipped"] == 1
        assert summary["skipped"][0]["pair_id"] == "p0"

    def test_requires_exactly_one_source(self, runner, tmp_path):
        manifest, feats = _make_perfect_dataset(tmp_path)
        result = runner.invoke(
            main,
            ["evaluate", "--dataset", str(manifest),
             "--output", str(tmp_path / "o")],
        )
        assert result.exit_code == 1


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    runner = CliRunner()
    out = tmp_path_factory.mktemp("train")
    result = invoke(
        runner,
        ["train", "--dataset", "synth://inverted-blur?n=2&size=96",
         "--iterations", "2", "--output", str(out)] + FAST_TRAIN,
    )
    assert result.exit_code == 0
    return out / "checkpoint_final.pt"


class TestExtractAndMatchCommands:

    def test_extract_writes_feature_files(self, runner, tmp_path, checkpoint):
        out = tmp_path / "feats"
        result = invoke(
            runner,
            ["extract", "--dataset", "synth://inverted-blur?n=2&size=96",
             "--checkpoint", str(checkpoint), "--output", str(out),
             "--k", "64"],
        )
        assert result.exit_code == 0
        names = sorted(p.name for p in out.glob("*.feat"))
        assert names == [
            "synth-test-000.a.feat", "synth-test-000.b.feat",
            "synth-test-001.a.feat", "synth-test-001.b.feat",
        ]

    def test_extract_deterministic(self, runner, tmp_path, checkpoint):
        blobs = []
        for name in ("f1", "f2"):
            out = tmp_path / name
            result = invoke(
                runner,
                ["extract", "--dataset", "synth://inverted-blur?n=1&size=96",
                 "--checkpoint", str(checkpoint), "--output", str(out),
                 "--k", "32", "--seed", "5"],
            )
            assert result.exit_code == 0
            blobs.append((out / "synth-test-000.a.feat").read_bytes())
        assert blobs[0] == blobs[1]

    def test_match_command(self, runner, tmp_path, checkpoint):
        out = tmp_path / "feats"
        invoke(
            runner,
            ["extract", "--dataset", "synth://inverted-blur?n=1&size=96",
             "--checkpoint", str(checkpoint), "--output", str(out),
             "--k", "64"],
        )
        matches = tmp_path / "matches.txt"
        result = invoke(
            runner,
            ["match", "--features-a", str(out / "synth-test-000.a.feat"),
             "--features-b", str(out / "synth-test-000.b.feat"),
             "--output", str(matches)],
        )
        assert result.exit_code == 0
        assert matches.exists()
        lines = [
            line for line in matches.read_text().splitlines()
            if line and not line.startswith("#")
        ]
        assert len(lines) >= 1

    def test_evaluate_from_checkpoint(self, runner, tmp_path, checkpoint):
        out = tmp_path / "eval"
        result = invoke(
            runner,
            ["evaluate", "--dataset", "synth://inverted-blur?n=2&size=96",
             "--checkpoint", str(checkpoint), "--output", str(out),
             "--k", "64", "--ransac-iters", "500"],
        )
        assert result.exit_code == 0
        rows = read_report_csv(out / "report.csv")
        assert len(rows) == 20  # 2 pairs x 10 thresholds


class TestPlotCommand:
    def test_plots_from_report(self, runner, tmp_path):
        manifest, feats = _make_perfect_dataset(tmp_path, n_pairs=1)
        eval_dir = tmp_path / "eval"
        invoke(
            runner,
            ["evaluate", "--dataset", str(manifest), "--features", str(feats),
             "--output", str(eval_dir), "--ransac-iters", "300"],
        )
        out = tmp_path / "plots"
        result = invoke(
            runner, ["plot", str(eval_dir / "report.csv"), "--output", str(out)]
        )
        assert result.exit_code == 0
        for name in ("rr_vs_threshold.png", "ms_vs_threshold.png",
                     "srr_vs_threshold.png"):
            assert (out / name).exists()

    def test_multiple_reports_get_bars(self, runner, tmp_path):
        manifest, feats = _make_perfect_dataset(tmp_path, n_pairs=1)
        eval_dir = tmp_path / "eval"
        invoke(
            runner,
            ["evaluate", "--dataset", str(manifest), "--features", str(feats),
             "--output", str(eval_dir), "--ransac-iters", "300"],
        )
        report = eval_dir / "report.csv"
        out = tmp_path / "plots"
        result = invoke(
            runner,
            ["plot", str(report), str(report), "--labels", "lam4,lam8",
             "--output", str(out)],
        )
        assert result.exit_code == 0
        assert (out / "comparison_bars.png").exists()

    def test_empty_report_exits_one(self, runner, tmp_path):
        from crossfeat.benchmark import CSV_HEADER

        empty = tmp_path / "empty.csv"
        empty.write_text(CSV_HEADER + "\n")
        result = runner.invoke(
            main, ["plot", str(empty), "--output", str(tmp_path / "plots")]
        )
        assert result.exit_code == 1
