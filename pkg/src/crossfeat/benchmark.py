"""The evaluation protocol: pair preparation with random transforms,
correspondence/repeatability/matching-score metrics, RANSAC registration
with reprojection-error scoring, aggregation and report emission."""

from __future__ import annotations

import dataclasses
import json
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from . import kernels
from .features import KeypointSet, MatchSet, load_features, match_bidirectional, select_keypoints
from .geometry import (
    DegenerateHomographyError,
    GeometryError,
    Homography,
    TransformConfig,
    homography_from_points,
    project_points,
    read_homography,
    sample_homography,
    warp_image,
)
from .model import FeatureNet, extract_dense

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = tuple(range(1, 11))
DEFAULT_SUCCESS_THRESHOLD = 10.0
RANSAC_ITERS = 100_000
RANSAC_REPROJ_T = 10.0

CSV_HEADER = (
    "pair_id,threshold,n_kp_a,n_kp_b,n_matches,corres,rr,"
    "n_correct,ms,re_h,re_m,success"
)


@dataclasses.dataclass
class ManifestEntry:
    """One line of the dataset manifest (paths relative to the manifest)."""

    pair_id: str
    image_a: Path
    image_b: Path
    modality_a: str
    modality_b: str
    homography: Path | None = None
    landmarks: Path | None = None


@dataclasses.dataclass
class EvalPair:
    """A prepared evaluation pair: loaded images plus ground truth.

    After preparation at least one of ``h_gt`` / ``landmarks`` is present
    (aligned raw pairs get the generated warp as their ground truth).
    """

    pair_id: str
    image_a: np.ndarray
    image_b: np.ndarray
    modality_a: str
    modality_b: str
    h_gt: Homography | None
    landmarks: tuple[np.ndarray, np.ndarray] | None

    def __post_init__(self):
        if self.h_gt is None and self.landmarks is None:
            raise ValueError(f"pair {self.pair_id}: no ground truth at all")
        if self.landmarks is not None:
            la, lb = self.landmarks
            if la.shape != lb.shape or la.shape[0] < 4:
                raise ValueError(
                    f"pair {self.pair_id}: landmark lists must match with >= 4 rows"
                )


def load_image(path) -> np.ndarray:
    """Load an image as float32 in [0, 1]; (h, w) for gray, (h, w, 3) rgb."""
    with Image.open(path) as img:
        if img.mode == "L":
            return np.asarray(img, dtype=np.float32) / 255.0
        if img.mode in ("I", "I;16"):
            arr = np.asarray(img, dtype=np.float32)
            scale = 65535.0 if img.mode == "I;16" else max(float(arr.max()), 1.0)
            return arr / scale
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(path)


def load_manifest(path) -> list[ManifestEntry]:
    """Read the JSON-lines manifest; one object per pair with keys
    pair_id, image_a, image_b, modality_a, modality_b and optional
    homography / landmarks file paths (relative to the manifest)."""
    base = Path(path).parent
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        for key in ("pair_id", "image_a", "image_b", "modality_a", "modality_b"):
            if key not in obj:
                raise ValueError(f"{path}:{lineno}: missing key {key!r}")
        entries.append(
            ManifestEntry(
                pair_id=obj["pair_id"],
                image_a=base / obj["image_a"],
                image_b=base / obj["image_b"],
                modality_a=obj["modality_a"],
                modality_b=obj["modality_b"],
                homography=base / obj["homography"] if obj.get("homography") else None,
                landmarks=base / obj["landmarks"] if obj.get("landmarks") else None,
            )
        )
    return entries


def write_manifest(path, entries: list[dict]) -> None:
    with open(path, "w") as f:
        for obj in entries:
            f.write(json.dumps(obj) + "\n")


def load_landmarks(path) -> tuple[np.ndarray, np.ndarray]:
    """Landmark file: one 'x_a y_a x_b y_b' record per line."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) != 4:
            raise ValueError(f"{path}: landmark lines need 4 values, got {line!r}")
        rows.append(vals)
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 4)
    return arr[:, :2], arr[:, 2:]


def pair_rng(seed: int, pair_id: str, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(pair_id.encode()), stream])


def warp_aligned_pair(
    pair_id: str,
    image_a: np.ndarray,
    image_b: np.ndarray,
    modality_a: str,
    modality_b: str,
    landmarks: tuple[np.ndarray, np.ndarray] | None = None,
    transform: TransformConfig = TransformConfig(),
    seed: int = 0,
) -> EvalPair:
    """Turn a registered (aligned) pair into an evaluation pair by warping
    the second image with a per-pair random homography, which becomes the
    ground-truth transform; landmarks on image B move along with it."""
    rng = pair_rng(seed, pair_id)
    h_gen = sample_homography(transform, image_b.shape[:2], rng)
    warped, _ = warp_image(image_b, h_gen)
    if landmarks is not None:
        landmarks = (landmarks[0], project_points(landmarks[1], h_gen))
    return EvalPair(
        pair_id=pair_id,
        image_a=image_a,
        image_b=warped,
        modality_a=modality_a,
        modality_b=modality_b,
        h_gt=h_gen,
        landmarks=landmarks,
    )


def prepare_pair(
    entry: ManifestEntry,
    transform: TransformConfig = TransformConfig(),
    seed: int = 0,
) -> EvalPair:
    """Load a manifest pair and apply the evaluation-protocol transform.

    Pairs carrying a stored homography are used as-is. Aligned pairs get
    the second image warped by a per-pair random homography, which then
    serves as the ground-truth transform; landmarks on the second image
    are moved along with it.
    """
    img_a = load_image(entry.image_a)
    img_b = load_image(entry.image_b)
    landmarks = load_landmarks(entry.landmarks) if entry.landmarks else None

    if entry.homography is not None:
        return EvalPair(
            pair_id=entry.pair_id,
            image_a=img_a,
            image_b=img_b,
            modality_a=entry.modality_a,
            modality_b=entry.modality_b,
            h_gt=read_homography(entry.homography),
            landmarks=landmarks,
        )
    return warp_aligned_pair(
        entry.pair_id,
        img_a,
        img_b,
        entry.modality_a,
        entry.modality_b,
        landmarks=landmarks,
        transform=transform,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# metrics


def symmetric_reprojection_errors(
    pts_a: np.ndarray, pts_b: np.ndarray, h: Homography
) -> np.ndarray:
    """Per-row symmetric reprojection error max(|H a - b|, |H^-1 b - a|).

    Taking the worse direction makes every threshold test invariant to
    swapping the image roles.
    """
    fwd = np.linalg.norm(project_points(pts_a, h) - pts_b, axis=1)
    bwd = np.linalg.norm(project_points(pts_b, h.inverse()) - pts_a, axis=1)
    return np.maximum(fwd, bwd)


def _candidate_pairs(
    coords_a: np.ndarray, coords_b: np.ndarray, h: Homography, t: float
):
    """All (i, j) with symmetric reprojection error <= t, sorted by
    (error, i, j) for the deterministic nearest-first greedy pass."""
    if coords_a.shape[0] == 0 or coords_b.shape[0] == 0:
        return (np.zeros(0, np.int64), np.zeros(0, np.int64))
    proj_a = project_points(coords_a, h)
    # the forward distance lower-bounds the symmetric one: prefilter on it
    tree = cKDTree(coords_b)
    neighbors = tree.query_ball_point(proj_a, r=t)
    rows, cols = [], []
    for i, js in enumerate(neighbors):
        rows.extend([i] * len(js))
        cols.extend(js)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.size == 0:
        return rows, cols
    d = symmetric_reprojection_errors(coords_a[rows], coords_b[cols], h)
    keep = d <= t
    rows, cols, d = rows[keep], cols[keep], d[keep]
    order = np.lexsort((cols, rows, d))
    return rows[order], cols[order]


def count_correspondences(
    kp_a: KeypointSet, kp_b: KeypointSet, h: Homography, t: float
) -> int:
    """One-to-one correspondences: keypoint pairs within ``t`` px symmetric
    reprojection error, greedily assigned nearest-first, each keypoint used
    at most once."""
    if t <= 0:
        raise ValueError("threshold must be positive")
    rows, cols = _candidate_pairs(
        kp_a.coords.astype(np.float64), kp_b.coords.astype(np.float64), h, t
    )
    if rows.size == 0:
        return 0
    picked = kernels.greedy_assign(rows, cols, len(kp_a), len(kp_b))
    return int(picked.sum())


def _overlap_counts(
    kp_a: KeypointSet, kp_b: KeypointSet, h: Homography
) -> tuple[int, int]:
    hb, wb = kp_b.image_size
    ha, wa = kp_a.image_size
    pa = project_points(kp_a.coords.astype(np.float64), h)
    pb = project_points(kp_b.coords.astype(np.float64), h.inverse())
    in_b = (pa[:, 0] >= 0) & (pa[:, 0] <= wb - 1) & (pa[:, 1] >= 0) & (pa[:, 1] <= hb - 1)
    in_a = (pb[:, 0] >= 0) & (pb[:, 0] <= wa - 1) & (pb[:, 1] >= 0) & (pb[:, 1] <= ha - 1)
    return int(in_b.sum()), int(in_a.sum())


def repeatable_rate(
    kp_a: KeypointSet, kp_b: KeypointSet, h: Homography, t: float
) -> float:
    """Symmetrized ratio of correspondences over keypoints in the overlap."""
    corres = count_correspondences(kp_a, kp_b, h, t)
    na, nb = _overlap_counts(kp_a, kp_b, h)
    term_a = corres / na if na else 0.0
    term_b = corres / nb if nb else 0.0
    return 0.5 * (term_a + term_b)


def correct_matches(
    matches: MatchSet, kp_a: KeypointSet, kp_b: KeypointSet, h: Homography, t: float
) -> int:
    """Matches whose symmetric reprojection error is at most ``t`` px."""
    if len(matches) == 0:
        return 0
    pa = kp_a.coords[matches.pairs[:, 0]].astype(np.float64)
    pb = kp_b.coords[matches.pairs[:, 1]].astype(np.float64)
    err = symmetric_reprojection_errors(pa, pb, h)
    return int((err <= t).sum())


def matching_score(
    matches: MatchSet, kp_a: KeypointSet, kp_b: KeypointSet, h: Homography, t: float
) -> float:
    """Symmetrized ratio of correct matches over keypoints in the overlap."""
    good = correct_matches(matches, kp_a, kp_b, h, t)
    na, nb = _overlap_counts(kp_a, kp_b, h)
    term_a = good / na if na else 0.0
    term_b = good / nb if nb else 0.0
    return 0.5 * (term_a + term_b)


# ---------------------------------------------------------------------------
# registration


def _minimal_samples(
    rng: np.random.Generator, n_matches: int, iters: int
) -> np.ndarray:
    samples = rng.integers(0, n_matches, size=(iters, 4))
    while True:
        dup = (
            (samples[:, 0] == samples[:, 1])
            | (samples[:, 0] == samples[:, 2])
            | (samples[:, 0] == samples[:, 3])
            | (samples[:, 1] == samples[:, 2])
            | (samples[:, 1] == samples[:, 3])
            | (samples[:, 2] == samples[:, 3])
        )
        if not dup.any():
            return samples
        samples[dup] = rng.integers(0, n_matches, size=(int(dup.sum()), 4))


def ransac_homography(
    pa: np.ndarray,
    pb: np.ndarray,
    reproj_t: float = RANSAC_REPROJ_T,
    iters: int = RANSAC_ITERS,
    rng: np.random.Generator | None = None,
) -> Homography | None:
    """RANSAC over float point correspondences: normalized-DLT minimal
    solves, inlier counting at ``reproj_t`` px, then a least-squares refit
    on the best inlier set (h33 normalized). Returns None with fewer than
    4 points or when every minimal sample is degenerate."""
    pa = np.asarray(pa, dtype=np.float64)
    pb = np.asarray(pb, dtype=np.float64)
    if pa.shape[0] < 4:
        return None
    if rng is None:
        rng = np.random.default_rng(0)
    samples = _minimal_samples(rng, pa.shape[0], iters)
    best_idx, best_count = kernels.ransac_best_model(pa, pb, samples, reproj_t)
    if best_idx < 0 or best_count < 4:
        return None
    h_min = kernels.dlt_minimal(pa[samples[best_idx]], pb[samples[best_idx]])
    if h_min is None:
        return None
    proj = np.concatenate([pa, np.ones((len(pa), 1))], axis=1) @ h_min.T
    with np.errstate(invalid="ignore", divide="ignore"):
        proj2 = proj[:, :2] / proj[:, 2:]
    err = np.linalg.norm(proj2 - pb, axis=1)
    inliers = np.isfinite(err) & (err <= reproj_t)
    try:
        return homography_from_points(pa[inliers], pb[inliers])
    except (GeometryError, np.linalg.LinAlgError):
        return None


def estimate_homography(
    matches: MatchSet,
    kp_a: KeypointSet,
    kp_b: KeypointSet,
    reproj_t: float = RANSAC_REPROJ_T,
    iters: int = RANSAC_ITERS,
    rng: np.random.Generator | None = None,
) -> Homography | None:
    """Registration from matched keypoints (see ``ransac_homography``)."""
    if len(matches) < 4:
        return None
    pa = kp_a.coords[matches.pairs[:, 0]].astype(np.float64)
    pb = kp_b.coords[matches.pairs[:, 1]].astype(np.float64)
    return ransac_homography(pa, pb, reproj_t=reproj_t, iters=iters, rng=rng)


def re_h(h_gt: Homography, h_est: Homography) -> float:
    """l2 norm of the difference of the flattened h33-normalized matrices."""
    return float(np.linalg.norm(h_gt.matrix.ravel() - h_est.matrix.ravel()))


def re_m(h_est: Homography, marks_a: np.ndarray, marks_b: np.ndarray) -> float:
    """Mean distance between reprojected A-landmarks and B-landmarks."""
    return float(
        np.linalg.norm(project_points(marks_a, h_est) - marks_b, axis=1).mean()
    )


# ---------------------------------------------------------------------------
# the benchmark harness


@dataclasses.dataclass
class PairResult:
    pair_id: str
    n_kp_a: int
    n_kp_b: int
    n_matches: int
    corres: dict[int, int]
    rr: dict[int, float]
    n_correct: dict[int, int]
    ms: dict[int, float]
    re_h: float | None
    re_m: float | None
    success: dict[int, bool]
    registered: bool

    @property
    def re_primary(self) -> float | None:
        """Landmark error when landmarks exist, else the matrix error."""
        return self.re_m if self.re_m is not None else self.re_h


@dataclasses.dataclass
class BenchmarkReport:
    rows: list[PairResult]
    skipped: list[dict]
    thresholds: tuple[int, ...]
    success_threshold: float
    k: int
    seed: int

    def aggregates(self) -> dict:
        n = len(self.rows)
        agg: dict = {
            "n_pairs": n,
            "n_skipped": len(self.skipped),
            "k": self.k,
            "seed": self.seed,
            "success_threshold": self.success_threshold,
        }
        if n == 0:
            return agg
        agg["mean_rr"] = {
            t: sum(r.rr[t] for r in self.rows) / n for t in self.thresholds
        }
        agg["mean_ms"] = {
            t: sum(r.ms[t] for r in self.rows) / n for t in self.thresholds
        }
        agg["mean_corres"] = {
            t: sum(r.corres[t] for r in self.rows) / n for t in self.thresholds
        }
        agg["mean_correct"] = {
            t: sum(r.n_correct[t] for r in self.rows) / n for t in self.thresholds
        }
        agg["srr_curve"] = {
            t: sum(r.success[t] for r in self.rows) / n for t in self.thresholds
        }
        sr = sum(
            1
            for r in self.rows
            if r.re_primary is not None and r.re_primary < self.success_threshold
        )
        agg["sr"] = sr
        agg["srr"] = sr / n
        agg["mean_matches"] = sum(r.n_matches for r in self.rows) / n
        return agg


def net_extractor(net: FeatureNet, k: int, nms_radius: float = 4.0, border: int = 8):
    """Keypoint extractor closure over a trained network."""

    def extract(image: np.ndarray, modality: str) -> KeypointSet:
        desc, scores = extract_dense(net, image, modality)
        return select_keypoints(scores, desc, k, nms_radius=nms_radius, border=border)

    return extract


def feature_file_extractor(feature_dir):
    """Pair-feature loader reading <pair_id>.a.feat / <pair_id>.b.feat."""
    feature_dir = Path(feature_dir)

    def load(pair_id: str, side: str) -> KeypointSet:
        kp, _ = load_features(feature_dir / f"{pair_id}.{side}.feat")
        return kp

    return load


def evaluate_pair(
    pair: EvalPair,
    kp_a: KeypointSet,
    kp_b: KeypointSet,
    thresholds: tuple[int, ...] = DEFAULT_THRESHOLDS,
    success_threshold: float = DEFAULT_SUCCESS_THRESHOLD,
    ransac_iters: int = RANSAC_ITERS,
    ransac_thresh: float = RANSAC_REPROJ_T,
    rng: np.random.Generator | None = None,
) -> PairResult:
    """All metrics for one prepared pair with extracted keypoints."""
    h_gt = pair.h_gt
    empty = len(kp_a) == 0 or len(kp_b) == 0
    if empty:
        zero_i = {t: 0 for t in thresholds}
        zero_f = {t: 0.0 for t in thresholds}
        return PairResult(
            pair_id=pair.pair_id,
            n_kp_a=len(kp_a),
            n_kp_b=len(kp_b),
            n_matches=0,
            corres=dict(zero_i),
            rr=dict(zero_f),
            n_correct=dict(zero_i),
            ms=dict(zero_f),
            re_h=None,
            re_m=None,
            success={t: False for t in thresholds},
            registered=False,
        )
    matches = match_bidirectional(kp_a, kp_b)
    corres = {t: count_correspondences(kp_a, kp_b, h_gt, t) for t in thresholds}
    rr = {t: repeatable_rate(kp_a, kp_b, h_gt, t) for t in thresholds}
    n_correct = {t: correct_matches(matches, kp_a, kp_b, h_gt, t) for t in thresholds}
    ms = {t: matching_score(matches, kp_a, kp_b, h_gt, t) for t in thresholds}

    h_est = estimate_homography(
        matches, kp_a, kp_b, reproj_t=ransac_thresh, iters=ransac_iters, rng=rng
    )
    reh = rem = None
    if h_est is not None:
        if h_gt is not None:
            reh = re_h(h_gt, h_est)
        if pair.landmarks is not None:
            rem = re_m(h_est, pair.landmarks[0], pair.landmarks[1])
    re_primary = rem if rem is not None else reh
    success = {
        t: (re_primary is not None and re_primary < t) for t in thresholds
    }
    return PairResult(
        pair_id=pair.pair_id,
        n_kp_a=len(kp_a),
        n_kp_b=len(kp_b),
        n_matches=len(matches),
        corres=corres,
        rr=rr,
        n_correct=n_correct,
        ms=ms,
        re_h=reh,
        re_m=rem,
        success=success,
        registered=h_est is not None,
    )


def run_benchmark(
    pairs,
    extractor=None,
    feature_dir=None,
    k: int = 1024,
    thresholds: tuple[int, ...] = DEFAULT_THRESHOLDS,
    success_threshold: float = DEFAULT_SUCCESS_THRESHOLD,
    transform: TransformConfig = TransformConfig(),
    seed: int = 0,
    ransac_iters: int = RANSAC_ITERS,
    ransac_thresh: float = RANSAC_REPROJ_T,
    workers: int = 1,
) -> BenchmarkReport:
    """Evaluate every pair and aggregate (deterministic under the seed).

    ``pairs`` may mix manifest entries (prepared here, with the protocol's
    per-pair random warp for aligned pairs) and ready EvalPair objects.
    Keypoints come from ``extractor(image, modality)`` or from feature
    files under ``feature_dir``. Unreadable pairs are recorded as skipped,
    never aborting the run.
    """
    if (extractor is None) == (feature_dir is None):
        raise ValueError("pass exactly one of extractor / feature_dir")
    loader = feature_file_extractor(feature_dir) if feature_dir else None

    def run_one(item):
        if isinstance(item, ManifestEntry):
            pair = prepare_pair(item, transform=transform, seed=seed)
        else:
            pair = item
        if loader is not None:
            kp_a = loader(pair.pair_id, "a")
            kp_b = loader(pair.pair_id, "b")
        else:
            kp_a = extractor(pair.image_a, pair.modality_a)
            kp_b = extractor(pair.image_b, pair.modality_b)
        return evaluate_pair(
            pair,
            kp_a,
            kp_b,
            thresholds=thresholds,
            success_threshold=success_threshold,
            ransac_iters=ransac_iters,
            ransac_thresh=ransac_thresh,
            rng=pair_rng(seed, pair.pair_id, stream=1),
        )

    rows: list[PairResult] = []
    skipped: list[dict] = []

    def guarded(item):
        pid = item.pair_id
        try:
            return run_one(item), None
        except Exception as exc:  # noqa: BLE001 - a bad pair must not abort the run
            log.warning("pair %s skipped: %s", pid, exc)
            return None, {"pair_id": pid, "reason": str(exc)}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(guarded, pairs))
    else:
        outcomes = [guarded(item) for item in pairs]
    for row, skip in outcomes:
        if row is not None:
            rows.append(row)
        else:
            skipped.append(skip)
    rows.sort(key=lambda r: r.pair_id)
    skipped.sort(key=lambda s: s["pair_id"])
    return BenchmarkReport(
        rows=rows,
        skipped=skipped,
        thresholds=tuple(thresholds),
        success_threshold=success_threshold,
        k=k,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# report files


def write_report_csv(report: BenchmarkReport, path) -> None:
    """One row per pair per threshold, fixed header, comma separated."""
    with open(path, "w") as f:
        f.write(CSV_HEADER + "\n")
        for r in report.rows:
            for t in report.thresholds:
                reh = f"{r.re_h:.6f}" if r.re_h is not None else ""
                rem = f"{r.re_m:.6f}" if r.re_m is not None else ""
                f.write(
                    f"{r.pair_id},{t},{r.n_kp_a},{r.n_kp_b},{r.n_matches},"
                    f"{r.corres[t]},{r.rr[t]:.6f},{r.n_correct[t]},"
                    f"{r.ms[t]:.6f},{reh},{rem},{int(r.success[t])}\n"
                )


def read_report_csv(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: not a benchmark report (bad header)")
    keys = CSV_HEADER.split(",")
    out = []
    for line in lines[1:]:
        vals = line.split(",")
        row = dict(zip(keys, vals))
        row["threshold"] = int(row["threshold"])
        for key in ("n_kp_a", "n_kp_b", "n_matches", "corres", "n_correct"):
            row[key] = int(row[key])
        for key in ("rr", "ms"):
            row[key] = float(row[key])
        for key in ("re_h", "re_m"):
            row[key] = float(row[key]) if row[key] else None
        row["success"] = bool(int(row["success"]))
        out.append(row)
    return out


def write_summary(report: BenchmarkReport, path) -> None:
    payload = {
        "aggregates": report.aggregates(),
        "skipped": report.skipped,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
