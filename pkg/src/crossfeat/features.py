"""Discrete features from dense maps: keypoint selection, descriptor lookup,
bidirectional nearest-neighbor matching, and the feature file format."""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

MAGIC = "crossfeat-features"
FORMAT_VERSION = 1
ACOS_EPS = 1e-7


@dataclasses.dataclass
class KeypointSet:
    """Selected interest points with scores and 128-dim unit descriptors.

    ``coords`` are integer (x, y) pixels, scores sorted descending.
    """

    coords: np.ndarray  # (K, 2) int64
    scores: np.ndarray  # (K,) float64, descending
    descriptors: np.ndarray  # (K, D) float32, unit l2 norm
    image_size: tuple[int, int]  # (h, w)

    def __len__(self) -> int:
        return self.coords.shape[0]


@dataclasses.dataclass
class MatchSet:
    """Mutual nearest-neighbor matches between two keypoint sets."""

    pairs: np.ndarray  # (M, 2) int64 indices into (a, b)
    distances: np.ndarray  # (M,) angular distances in radians

    def __len__(self) -> int:
        return self.pairs.shape[0]


def _local_maxima(scores: np.ndarray) -> np.ndarray:
    """Boolean map of strict 3x3 local maxima (border padded with -inf)."""
    padded = np.full(
        (scores.shape[0] + 2, scores.shape[1] + 2), -np.inf, dtype=np.float64
    )
    padded[1:-1, 1:-1] = scores
    center = padded[1:-1, 1:-1]
    out = np.ones_like(scores, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            out &= center > padded[1 + dy : 1 + dy + scores.shape[0],
                                   1 + dx : 1 + dx + scores.shape[1]]
    return out


def select_keypoints(
    scores: np.ndarray,
    descriptors: np.ndarray,
    k: int,
    nms_radius: float = 4.0,
    border: int = 8,
) -> KeypointSet:
    """Greedy non-maximum suppression on strict 3x3 local maxima.

    Candidates at least ``border`` px from the edge are visited by
    descending score (ties by lowest (y, x)) and kept while farther than
    ``nms_radius`` (Euclidean) from every previously kept point, up to
    ``k``. Returns fewer points when the map cannot supply k, with a
    logged warning.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    s = np.asarray(scores, dtype=np.float64)
    h, w = s.shape
    maxima = _local_maxima(s)
    if border > 0:
        maxima[:border, :] = False
        maxima[-border:, :] = False
        maxima[:, :border] = False
        maxima[:, -border:] = False
    ys, xs = np.nonzero(maxima)
    vals = s[ys, xs]
    order = np.lexsort((xs, ys, -vals))
    coords = np.stack([xs[order], ys[order]], axis=1).astype(np.int64)

    keep = kernels.greedy_nms_keep(coords, nms_radius, k)
    coords = coords[keep]
    if coords.shape[0] < k:
        log.warning(
            "keypoint shortfall: %d of %d requested survive selection",
            coords.shape[0],
            k,
        )
    desc = np.asarray(descriptors, dtype=np.float32)[coords[:, 1], coords[:, 0]]
    return KeypointSet(
        coords=coords,
        scores=s[coords[:, 1], coords[:, 0]],
        descriptors=desc,
        image_size=(h, w),
    )


def match_bidirectional(a: KeypointSet, b: KeypointSet) -> MatchSet:
    """Mutual nearest-neighbor matching under angular distance.

    A pair (i, j) is kept iff j is i's nearest neighbor in b and i is j's
    nearest neighbor in a; argmax ties resolve to the smaller index.
    """
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both keypoint sets must be nonempty")
    sim = a.descriptors.astype(np.float64) @ b.descriptors.astype(np.float64).T
    nn_ab = np.argmax(sim, axis=1)
    nn_ba = np.argmax(sim, axis=0)
    ia = np.arange(len(a))
    mutual = nn_ba[nn_ab] == ia
    pairs = np.stack([ia[mutual], nn_ab[mutual]], axis=1).astype(np.int64)
    dots = sim[pairs[:, 0], pairs[:, 1]]
    dist = np.arccos(np.clip(dots, -1.0 + ACOS_EPS, 1.0 - ACOS_EPS))
    return MatchSet(pairs=pairs, distances=dist)


def save_features(path, kp: KeypointSet, model_hash: str = "") -> None:
    """Write the columnar feature file: text header, then per-keypoint
    records of (x, y, score, desc[D]) as little-endian float32."""
    d = kp.descriptors.shape[1] if len(kp) else 128
    header = (
        f"{MAGIC} {FORMAT_VERSION}\n"
        f"count {len(kp)}\n"
        f"size {kp.image_size[0]} {kp.image_size[1]}\n"
        f"desc_dim {d}\n"
        f"model {model_hash or '-'}\n"
        f"end_header\n"
    )
    body = np.concatenate(
        [
            kp.coords.astype(np.float32),
            kp.scores.astype(np.float32)[:, None],
            kp.descriptors.astype(np.float32),
        ],
        axis=1,
    ) if len(kp) else np.zeros((0, 3 + d), dtype=np.float32)
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(body.astype("<f4").tobytes())


def load_features(path) -> tuple[KeypointSet, str]:
    """Read a feature file; returns the keypoint set and the model hash."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if end < 0:
        raise ValueError(f"{path}: missing feature header")
    header = raw[:end].decode("ascii").splitlines()
    fields = dict(line.split(None, 1) for line in header[1:])
    magic = header[0].split()
    if magic[0] != MAGIC:
        raise ValueError(f"{path}: not a feature file")
    count = int(fields["count"])
    h, w = (int(v) for v in fields["size"].split())
    d = int(fields["desc_dim"])
    model_hash = fields["model"]
    body = raw[end + len(b"end_header\n"):]
    expected = count * (3 + d) * 4
    if len(body) != expected:
        raise ValueError(
            f"{path}: body has {len(body)} bytes, expected {expected}"
        )
    arr = np.frombuffer(body, dtype="<f4").reshape(count, 3 + d)
    kp = KeypointSet(
        coords=arr[:, :2].astype(np.int64),
        scores=arr[:, 2].astype(np.float64),
        descriptors=arr[:, 3:].astype(np.float32),
        image_size=(h, w),
    )
    return kp, ("" if model_hash == "-" else model_hash)


def save_matches(path, matches: MatchSet) -> None:
    """Write matches as text lines 'index_a index_b angular_distance'."""
    with open(path, "w") as f:
        f.write("# index_a index_b angular_distance\n")
        for (i, j), d in zip(matches.pairs, matches.distances):
            f.write(f"{i} {j} {d:.9f}\n")


def load_matches(path) -> MatchSet:
    pairs = []
    dists = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        i, j, d = line.split()
        pairs.append((int(i), int(j)))
        dists.append(float(d))
    return MatchSet(
        pairs=np.array(pairs, dtype=np.int64).reshape(-1, 2),
        distances=np.array(dists, dtype=np.float64),
    )
