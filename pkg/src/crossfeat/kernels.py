"""Hot numeric kernels with two interchangeable backends.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback.
The backend is selected per call from the ``CROSSFEAT_NUMBA`` environment
variable: unset or ``1`` uses numba when it is importable, ``0`` forces the
numpy path. ``benchmarks/compare_backends.py`` times both.

Kernels:

* ``greedy_nms_keep`` - greedy radius suppression of score-sorted candidates;
* ``greedy_assign_count`` - nearest-first one-to-one assignment of candidate
  pairs already sorted by distance;
* ``ransac_best_model`` - scan of precomputed 4-point minimal samples with a
  Hartley-normalized DLT solve and inlier count per sample.
"""

from __future__ import annotations

import os

import numpy as np

NUMBA_ENV = "CROSSFEAT_NUMBA"

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


def numba_enabled() -> bool:
    """True when the numba backend is active (env flag and importability)."""
    flag = os.environ.get(NUMBA_ENV, "1").strip().lower()
    return HAVE_NUMBA and flag not in ("0", "false", "no", "off")


# ---------------------------------------------------------------------------
# greedy radius NMS


@njit(cache=True)
def _nms_keep_numba(xs, ys, radius_sq, max_keep):
    n = xs.shape[0]
    keep = np.zeros(n, dtype=np.bool_)
    kept_x = np.empty(n, dtype=np.float64)
    kept_y = np.empty(n, dtype=np.float64)
    n_kept = 0
    for i in range(n):
        ok = True
        for j in range(n_kept):
            dx = xs[i] - kept_x[j]
            dy = ys[i] - kept_y[j]
            if dx * dx + dy * dy <= radius_sq:
                ok = False
                break
        if ok:
            keep[i] = True
            kept_x[n_kept] = xs[i]
            kept_y[n_kept] = ys[i]
            n_kept += 1
            if n_kept >= max_keep:
                break
    return keep


def _nms_keep_numpy(xs, ys, radius_sq, max_keep):
    n = xs.shape[0]
    keep = np.zeros(n, dtype=bool)
    kept_x = np.empty(n)
    kept_y = np.empty(n)
    n_kept = 0
    for i in range(n):
        if n_kept:
            d2 = (xs[i] - kept_x[:n_kept]) ** 2 + (ys[i] - kept_y[:n_kept]) ** 2
            if d2.min() <= radius_sq:
                continue
        keep[i] = True
        kept_x[n_kept] = xs[i]
        kept_y[n_kept] = ys[i]
        n_kept += 1
        if n_kept >= max_keep:
            break
    return keep


def greedy_nms_keep(coords: np.ndarray, radius: float, max_keep: int) -> np.ndarray:
    """Keep mask for candidates processed in order, rejecting any candidate
    within ``radius`` (Euclidean, inclusive) of an already kept one.

    ``coords`` is (N, 2) x-y, already sorted by priority. Stops once
    ``max_keep`` candidates are kept.
    """
    xs = np.ascontiguousarray(coords[:, 0], dtype=np.float64)
    ys = np.ascontiguousarray(coords[:, 1], dtype=np.float64)
    r2 = float(radius) ** 2
    if numba_enabled():
        return _nms_keep_numba(xs, ys, r2, max_keep)
    return _nms_keep_numpy(xs, ys, r2, max_keep)


# ---------------------------------------------------------------------------
# nearest-first one-to-one assignment


@njit(cache=True)
def _assign_numba(rows, cols, n_rows, n_cols):
    used_r = np.zeros(n_rows, dtype=np.bool_)
    used_c = np.zeros(n_cols, dtype=np.bool_)
    picked = np.zeros(rows.shape[0], dtype=np.bool_)
    for k in range(rows.shape[0]):
        r = rows[k]
        c = cols[k]
        if not used_r[r] and not used_c[c]:
            used_r[r] = True
            used_c[c] = True
            picked[k] = True
    return picked


def _assign_numpy(rows, cols, n_rows, n_cols):
    used_r = np.zeros(n_rows, dtype=bool)
    used_c = np.zeros(n_cols, dtype=bool)
    picked = np.zeros(rows.shape[0], dtype=bool)
    for k in range(rows.shape[0]):
        r, c = rows[k], cols[k]
        if not used_r[r] and not used_c[c]:
            used_r[r] = True
            used_c[c] = True
            picked[k] = True
    return picked


def greedy_assign(
    rows: np.ndarray, cols: np.ndarray, n_rows: int, n_cols: int
) -> np.ndarray:
    """Pick mask over candidate (row, col) pairs, already sorted by cost,
    accepting a pair when both endpoints are still unused."""
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    cols = np.ascontiguousarray(cols, dtype=np.int64)
    if numba_enabled():
        return _assign_numba(rows, cols, n_rows, n_cols)
    return _assign_numpy(rows, cols, n_rows, n_cols)


# ---------------------------------------------------------------------------
# RANSAC minimal-sample scan


@njit(cache=True)
def _dlt4_numba(pa, pb, out_h):
    # Hartley normalization of the 4-point sample
    cax = (pa[0, 0] + pa[1, 0] + pa[2, 0] + pa[3, 0]) / 4.0
    cay = (pa[0, 1] + pa[1, 1] + pa[2, 1] + pa[3, 1]) / 4.0
    cbx = (pb[0, 0] + pb[1, 0] + pb[2, 0] + pb[3, 0]) / 4.0
    cby = (pb[0, 1] + pb[1, 1] + pb[2, 1] + pb[3, 1]) / 4.0
    da = 0.0
    db = 0.0
    for i in range(4):
        da += np.sqrt((pa[i, 0] - cax) ** 2 + (pa[i, 1] - cay) ** 2)
        db += np.sqrt((pb[i, 0] - cbx) ** 2 + (pb[i, 1] - cby) ** 2)
    da /= 4.0
    db /= 4.0
    if da < 1e-12 or db < 1e-12:
        return False
    sa = np.sqrt(2.0) / da
    sb = np.sqrt(2.0) / db

    a = np.zeros((8, 9))
    for i in range(4):
        x = (pa[i, 0] - cax) * sa
        y = (pa[i, 1] - cay) * sa
        u = (pb[i, 0] - cbx) * sb
        v = (pb[i, 1] - cby) * sb
        a[2 * i, 3] = -x
        a[2 * i, 4] = -y
        a[2 * i, 5] = -1.0
        a[2 * i, 6] = v * x
        a[2 * i, 7] = v * y
        a[2 * i, 8] = v
        a[2 * i + 1, 0] = x
        a[2 * i + 1, 1] = y
        a[2 * i + 1, 2] = 1.0
        a[2 * i + 1, 6] = -u * x
        a[2 * i + 1, 7] = -u * y
        a[2 * i + 1, 8] = -u
    _, _, vt = np.linalg.svd(a)
    hn = vt[8].copy().reshape(3, 3)

    # denormalize: H = Tb^-1 @ Hn @ Ta
    for r in range(3):
        h0 = hn[r, 0] * sa
        h1 = hn[r, 1] * sa
        h2 = hn[r, 2] - hn[r, 0] * sa * cax - hn[r, 1] * sa * cay
        hn[r, 0] = h0
        hn[r, 1] = h1
        hn[r, 2] = h2
    for c in range(3):
        out_h[0, c] = hn[0, c] / sb + cbx * hn[2, c]
        out_h[1, c] = hn[1, c] / sb + cby * hn[2, c]
        out_h[2, c] = hn[2, c]
    for r in range(3):
        for c in range(3):
            if not np.isfinite(out_h[r, c]):
                return False
    return True


@njit(cache=True)
def _ransac_scan_numba(pa, pb, samples, thresh_sq):
    n = pa.shape[0]
    n_samples = samples.shape[0]
    best_count = -1
    best_idx = -1
    h = np.zeros((3, 3))
    sa = np.empty((4, 2))
    sb = np.empty((4, 2))
    for s in range(n_samples):
        for i in range(4):
            sa[i, 0] = pa[samples[s, i], 0]
            sa[i, 1] = pa[samples[s, i], 1]
            sb[i, 0] = pb[samples[s, i], 0]
            sb[i, 1] = pb[samples[s, i], 1]
        if not _dlt4_numba(sa, sb, h):
            continue
        count = 0
        for i in range(n):
            w = h[2, 0] * pa[i, 0] + h[2, 1] * pa[i, 1] + h[2, 2]
            if abs(w) < 1e-12:
                continue
            u = (h[0, 0] * pa[i, 0] + h[0, 1] * pa[i, 1] + h[0, 2]) / w
            v = (h[1, 0] * pa[i, 0] + h[1, 1] * pa[i, 1] + h[1, 2]) / w
            du = u - pb[i, 0]
            dv = v - pb[i, 1]
            if du * du + dv * dv <= thresh_sq:
                count += 1
        if count > best_count:
            best_count = count
            best_idx = s
    return best_idx, best_count


def _dlt4_batch_numpy(pa_s, pb_s):
    """Solve the normalized 4-point DLT for a batch of samples.

    pa_s, pb_s: (B, 4, 2). Returns (B, 3, 3) with NaN rows for degenerate
    samples.
    """
    b = pa_s.shape[0]
    ca = pa_s.mean(axis=1, keepdims=True)
    cb = pb_s.mean(axis=1, keepdims=True)
    da = np.linalg.norm(pa_s - ca, axis=2).mean(axis=1)
    db = np.linalg.norm(pb_s - cb, axis=2).mean(axis=1)
    bad = (da < 1e-12) | (db < 1e-12)
    sa = np.sqrt(2.0) / np.maximum(da, 1e-12)
    sb = np.sqrt(2.0) / np.maximum(db, 1e-12)
    an = (pa_s - ca) * sa[:, None, None]
    bn = (pb_s - cb) * sb[:, None, None]

    a = np.zeros((b, 8, 9))
    x, y = an[:, :, 0], an[:, :, 1]
    u, v = bn[:, :, 0], bn[:, :, 1]
    a[:, 0::2, 3] = -x
    a[:, 0::2, 4] = -y
    a[:, 0::2, 5] = -1.0
    a[:, 0::2, 6] = v * x
    a[:, 0::2, 7] = v * y
    a[:, 0::2, 8] = v
    a[:, 1::2, 0] = x
    a[:, 1::2, 1] = y
    a[:, 1::2, 2] = 1.0
    a[:, 1::2, 6] = -u * x
    a[:, 1::2, 7] = -u * y
    a[:, 1::2, 8] = -u
    _, _, vt = np.linalg.svd(a)
    hn = vt[:, 8, :].reshape(b, 3, 3)

    # denormalize per sample: Tb^-1 @ Hn @ Ta
    ta = np.zeros((b, 3, 3))
    ta[:, 0, 0] = sa
    ta[:, 1, 1] = sa
    ta[:, 0, 2] = -sa * ca[:, 0, 0]
    ta[:, 1, 2] = -sa * ca[:, 0, 1]
    ta[:, 2, 2] = 1.0
    tb_inv = np.zeros((b, 3, 3))
    tb_inv[:, 0, 0] = 1.0 / sb
    tb_inv[:, 1, 1] = 1.0 / sb
    tb_inv[:, 0, 2] = cb[:, 0, 0]
    tb_inv[:, 1, 2] = cb[:, 0, 1]
    tb_inv[:, 2, 2] = 1.0
    h = tb_inv @ hn @ ta
    h[bad] = np.nan
    h[~np.isfinite(h).all(axis=(1, 2))] = np.nan
    return h


def _ransac_scan_numpy(pa, pb, samples, thresh_sq, chunk=2048):
    n_samples = samples.shape[0]
    pa_h = np.concatenate([pa, np.ones((pa.shape[0], 1))], axis=1)
    best_count = -1
    best_idx = -1
    for start in range(0, n_samples, chunk):
        idx = samples[start : start + chunk]
        h = _dlt4_batch_numpy(pa[idx], pb[idx])
        ok = np.isfinite(h).all(axis=(1, 2))
        proj = np.einsum("bij,nj->bni", h, pa_h)
        w = proj[:, :, 2]
        safe = np.abs(w) >= 1e-12
        with np.errstate(invalid="ignore", divide="ignore"):
            u = proj[:, :, 0] / w
            v = proj[:, :, 1] / w
        d2 = (u - pb[None, :, 0]) ** 2 + (v - pb[None, :, 1]) ** 2
        inl = safe & np.isfinite(d2) & (d2 <= thresh_sq)
        counts = np.where(ok, inl.sum(axis=1), -1)
        local_best = int(np.argmax(counts))
        if counts[local_best] > best_count:
            best_count = int(counts[local_best])
            best_idx = start + local_best
    return best_idx, best_count


def ransac_best_model(
    pa: np.ndarray, pb: np.ndarray, samples: np.ndarray, thresh: float
) -> tuple[int, int]:
    """Scan minimal samples, returning (best sample index, inlier count).

    ``samples`` is an (iters, 4) int64 array of match indices; the first
    sample reaching the maximum count wins, which keeps both backends in
    agreement. Returns (-1, -1) when every sample is degenerate.
    """
    pa = np.ascontiguousarray(pa, dtype=np.float64)
    pb = np.ascontiguousarray(pb, dtype=np.float64)
    samples = np.ascontiguousarray(samples, dtype=np.int64)
    t2 = float(thresh) ** 2
    if numba_enabled():
        idx, count = _ransac_scan_numba(pa, pb, samples, t2)
    else:
        idx, count = _ransac_scan_numpy(pa, pb, samples, t2)
    return int(idx), int(count)


def dlt_minimal(pa4: np.ndarray, pb4: np.ndarray) -> np.ndarray | None:
    """Normalized 4-point DLT shared by both backends' best-model refit.

    Returns the 3x3 matrix or None when the sample is degenerate.
    """
    h = _dlt4_batch_numpy(
        pa4[None].astype(np.float64), pb4[None].astype(np.float64)
    )[0]
    if not np.isfinite(h).all():
        return None
    return h
