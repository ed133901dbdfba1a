"""Planar homographies: sampling, point projection, image/map warping and
ground-truth correspondence construction.

Conventions used throughout the package:

* coordinates are ``(x, y)`` with x to the right and y down, origin at the
  top-left pixel center;
* a homography ``H`` maps image-A coordinates onto image-B coordinates,
  ``p_b = project(p_a, H)``;
* ``warp_image(img, H)`` returns the image whose content has been moved by
  ``H`` (the output at ``p`` is sampled from the source at ``H^-1 p``),
  matching the usual warpPerspective semantics.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

__all__ = [
    "GeometryError",
    "DegenerateHomographyError",
    "PointAtInfinityError",
    "InsufficientOverlapError",
    "Homography",
    "TransformConfig",
    "CorrespondenceBatch",
    "homography_from_points",
    "sample_homography",
    "project",
    "project_points",
    "bilinear_sample",
    "warp_image",
    "warp_map",
    "build_correspondences",
    "read_homography",
    "write_homography",
]

DET_EPS = 1e-8
INFINITY_EPS = 1e-12


class GeometryError(ValueError):
    """Base class for geometric failures."""


class DegenerateHomographyError(GeometryError):
    """Sampling produced collinear corners / a non-invertible transform."""


class PointAtInfinityError(GeometryError):
    """Projection hit the plane at infinity (homogeneous depth ~ 0)."""


class InsufficientOverlapError(GeometryError):
    """Too few sampled correspondences survive inside both images."""


@dataclasses.dataclass(frozen=True)
class Homography:
    """A 3x3 planar projective transform in pixel coordinates.

    The matrix is normalized so that ``matrix[2, 2] == 1`` and is checked
    to be invertible (``|det| > 1e-8``) on construction.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise GeometryError(f"homography must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise GeometryError("homography contains non-finite entries")
        if abs(m[2, 2]) < INFINITY_EPS:
            raise DegenerateHomographyError("h33 is ~0, cannot normalize")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= DET_EPS:
            raise DegenerateHomographyError("homography is not invertible")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def compose(self, other: "Homography") -> "Homography":
        """Return the transform applying ``other`` first, then ``self``."""
        return Homography(self.matrix @ other.matrix)


@dataclasses.dataclass(frozen=True)
class TransformConfig:
    """Intervals for the random homography generator.

    Defaults follow the evaluation protocol: perspective distortion scale
    in [0, 0.2], rotation in [-10 deg, 10 deg], scale in [0.8, 1.0].
    """

    distortion_scale: tuple[float, float] = (0.0, 0.2)
    rotation_deg: tuple[float, float] = (-10.0, 10.0)
    scale: tuple[float, float] = (0.8, 1.0)
    seed: int = 0

    def __post_init__(self):
        d0, d1 = self.distortion_scale
        if not (0.0 <= d0 <= d1 < 1.0):
            raise GeometryError("distortion_scale must be within [0, 1)")
        if self.rotation_deg[0] > self.rotation_deg[1]:
            raise GeometryError("rotation interval is empty")
        s0, s1 = self.scale
        if not (0.0 < s0 <= s1):
            raise GeometryError("scale lower bound must be > 0")


@dataclasses.dataclass(frozen=True)
class CorrespondenceBatch:
    """Ground-truth pixel correspondences between two images.

    ``coords_b[i] == project(coords_a[i], H)`` for the generating ``H``;
    ``valid_mask`` marks the pairs that landed inside both images.
    """

    coords_a: np.ndarray  # (N, 2) int64, x-y pixel coordinates in image A
    coords_b: np.ndarray  # (N, 2) float64 coordinates in image B
    valid_mask: np.ndarray  # (N,) bool

    @property
    def n_valid(self) -> int:
        return int(self.valid_mask.sum())


def homography_from_points(src: np.ndarray, dst: np.ndarray) -> Homography:
    """DLT estimate of the homography mapping ``src`` points onto ``dst``.

    Solves the 2N x 9 system by SVD null space; needs N >= 4. Points are
    Hartley-normalized (zero centroid, mean distance sqrt(2)) first.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[0] < 4:
        raise GeometryError("need matching point arrays with >= 4 rows")
    t_src, src_n = _hartley_normalize(src)
    t_dst, dst_n = _hartley_normalize(dst)
    n = src.shape[0]
    a = np.zeros((2 * n, 9))
    x, y = src_n[:, 0], src_n[:, 1]
    u, v = dst_n[:, 0], dst_n[:, 1]
    a[0::2, 3] = -x
    a[0::2, 4] = -y
    a[0::2, 5] = -1.0
    a[0::2, 6] = v * x
    a[0::2, 7] = v * y
    a[0::2, 8] = v
    a[1::2, 0] = x
    a[1::2, 1] = y
    a[1::2, 2] = 1.0
    a[1::2, 6] = -u * x
    a[1::2, 7] = -u * y
    a[1::2, 8] = -u
    _, _, vt = np.linalg.svd(a)
    h = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ h @ t_src
    return Homography(h)


def _hartley_normalize(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centroid = pts.mean(axis=0)
    d = np.linalg.norm(pts - centroid, axis=1).mean()
    s = np.sqrt(2.0) / max(d, 1e-12)
    t = np.array(
        [[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]]
    )
    return t, (pts - centroid) * s


def _image_corners(image_size: tuple[int, int]) -> np.ndarray:
    h, w = image_size
    return np.array(
        [[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]]
    )


def _center_transform(image_size, inner: np.ndarray) -> np.ndarray:
    h, w = image_size
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    t_fwd = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    t_bwd = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    return t_fwd @ inner @ t_bwd


def _quad_is_degenerate(corners: np.ndarray, area_eps: float) -> bool:
    # any near-collinear corner triple makes the 4-point DLT ill posed
    for i in range(4):
        p0, p1, p2 = np.delete(corners, i, axis=0)
        cross = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
        if abs(cross) < area_eps:
            return True
    return False


def sample_homography(
    config: TransformConfig,
    image_size: tuple[int, int],
    rng: np.random.Generator,
) -> Homography:
    """Draw a random homography H = P @ R @ Sc.

    ``Sc`` scales about the image center by a uniform factor, ``R`` rotates
    about the center by a uniform angle, and ``P`` displaces each corner
    independently by a uniform magnitude in ``distortion_scale * (w, h)``
    with random sign. Degenerate corner draws are resampled up to 16 times.
    """
    h, w = image_size
    if h <= 0 or w <= 0:
        raise GeometryError("image_size must be positive")
    corners = _image_corners(image_size)
    area_eps = 1e-6 * w * h

    for _ in range(16):
        f = rng.uniform(config.scale[0], config.scale[1])
        angle = np.deg2rad(rng.uniform(config.rotation_deg[0], config.rotation_deg[1]))
        mag = rng.uniform(
            config.distortion_scale[0], config.distortion_scale[1], size=(4, 2)
        )
        sign = rng.integers(0, 2, size=(4, 2)) * 2 - 1
        shifts = sign * mag * np.array([w, h], dtype=np.float64)

        moved = corners + shifts
        if _quad_is_degenerate(moved, area_eps):
            continue

        sc = _center_transform(image_size, np.diag([f, f, 1.0]))
        c, s = np.cos(angle), np.sin(angle)
        rot = _center_transform(
            image_size, np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        )
        try:
            if np.all(shifts == 0.0):
                persp_matrix = np.eye(3)  # exact; DLT would add 1e-16 noise
            else:
                persp_matrix = homography_from_points(corners, moved).matrix
            return Homography(persp_matrix @ rot @ sc)
        except DegenerateHomographyError:
            continue
    raise DegenerateHomographyError(
        "no invertible homography after 16 corner draws"
    )


def project(point, h: Homography) -> np.ndarray:
    """Project one (x, y) point through the homography."""
    out = project_points(np.asarray(point, dtype=np.float64).reshape(1, 2), h)
    return out[0]


def project_points(points: np.ndarray, h: Homography) -> np.ndarray:
    """Project an (N, 2) array of points; raises on points at infinity."""
    pts = np.asarray(points, dtype=np.float64)
    ph = np.concatenate([pts, np.ones((pts.shape[0], 1))], axis=1)
    out = ph @ h.matrix.T
    depth = out[:, 2]
    if np.any(np.abs(depth) < INFINITY_EPS):
        raise PointAtInfinityError("projection hit the plane at infinity")
    return out[:, :2] / depth[:, None]


def bilinear_sample(
    values: np.ndarray, points: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Sample an (h, w[, k]) array at float (x, y) points.

    Returns ``(samples, inside)``; out-of-range neighbors contribute zero
    and ``inside`` marks points with 0 <= x <= w-1 and 0 <= y <= h-1.
    """
    vals = np.asarray(values, dtype=np.float64)
    squeeze = vals.ndim == 2
    if squeeze:
        vals = vals[:, :, None]
    h, w, k = vals.shape
    pts = np.asarray(points, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)

    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0

    out = np.zeros((pts.shape[0], k))
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            wgt = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xi_c = np.clip(xi, 0, w - 1)
            yi_c = np.clip(yi, 0, h - 1)
            out += (wgt * ok)[:, None] * vals[yi_c, xi_c]
    if squeeze:
        out = out[:, 0]
    return out, inside


def warp_image(
    image: np.ndarray,
    h: Homography,
    out_size: tuple[int, int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Warp an image so its content is transformed by ``h``.

    The output pixel ``p`` is bilinearly sampled from the source at
    ``h^-1 p``; the mask is true where that sample lies inside the source.
    Masked-out pixels are set to zero.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    src_h, src_w, _ = img.shape
    oh, ow = out_size if out_size is not None else (src_h, src_w)

    xs, ys = np.meshgrid(np.arange(ow), np.arange(oh))
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    src_pts = project_points(grid, h.inverse())
    samples, inside = bilinear_sample(img, src_pts)
    out = np.where(inside[:, None], samples, 0.0).reshape(oh, ow, -1)
    mask = inside.reshape(oh, ow)
    if squeeze:
        out = out[:, :, 0]
    return out, mask


def warp_map(
    values: np.ndarray,
    h: Homography,
    out_size: tuple[int, int] | None = None,
    renormalize: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Warp a score or descriptor map channel-wise (see ``warp_image``).

    With ``renormalize`` the warped vectors are rescaled to unit l2 norm
    where the mask is true, which keeps descriptor maps on the sphere.
    """
    out, mask = warp_image(values, h, out_size)
    if renormalize and out.ndim == 3:
        norm = np.linalg.norm(out, axis=2, keepdims=True)
        scale = np.where(norm > 1e-12, 1.0 / np.maximum(norm, 1e-12), 0.0)
        out = np.where(mask[:, :, None], out * scale, out)
    return out, mask


def build_correspondences(
    h: Homography,
    size_a: tuple[int, int],
    size_b: tuple[int, int],
    n: int,
    margin: int,
    rng: np.random.Generator,
) -> CorrespondenceBatch:
    """Sample ``n`` interior pixels of image A and project them into B.

    Pixels are drawn without replacement at least ``margin`` px from A's
    border. A projected point is valid when it stays at least one pixel
    inside B (so bilinear lookups at it are well defined). Fails with
    :class:`InsufficientOverlapError` when fewer than ``max(32, n // 4)``
    pairs survive.
    """
    if n < 1:
        raise GeometryError("n must be >= 1")
    ha, wa = size_a
    hb, wb = size_b
    x_lo, x_hi = margin, wa - 1 - margin
    y_lo, y_hi = margin, ha - 1 - margin
    if x_hi < x_lo or y_hi < y_lo:
        raise GeometryError("margin leaves no interior pixels")
    nx, ny = x_hi - x_lo + 1, y_hi - y_lo + 1
    if n > nx * ny:
        raise GeometryError(f"cannot draw {n} distinct pixels from {nx * ny}")

    flat = rng.choice(nx * ny, size=n, replace=False)
    coords_a = np.stack([x_lo + flat % nx, y_lo + flat // nx], axis=1).astype(np.int64)
    coords_b = project_points(coords_a.astype(np.float64), h)

    valid = (
        (coords_b[:, 0] >= 1.0)
        & (coords_b[:, 0] <= wb - 2.0)
        & (coords_b[:, 1] >= 1.0)
        & (coords_b[:, 1] <= hb - 2.0)
    )
    needed = max(32, n // 4)
    if int(valid.sum()) < needed:
        raise InsufficientOverlapError(
            f"only {int(valid.sum())} of {n} samples map into the other image"
            f" (needed {needed})"
        )
    return CorrespondenceBatch(coords_a=coords_a, coords_b=coords_b, valid_mask=valid)


def write_homography(path, h: Homography) -> None:
    """Write the 3x3 matrix as three lines of whitespace-separated decimals."""
    lines = [" ".join(f"{v:.17g}" for v in row) for row in h.matrix]
    Path(path).write_text("\n".join(lines) + "\n")


def read_homography(path) -> Homography:
    rows = []
    for line in Path(path).read_text().strip().splitlines():
        parts = line.split()
        if len(parts) != 3:
            raise GeometryError(f"expected 3 values per line, got {line!r}")
        rows.append([float(v) for v in parts])
    if len(rows) != 3:
        raise GeometryError(f"expected 3 lines, got {len(rows)}")
    return Homography(np.array(rows))
