"""Training objectives: hard-negative mining, the basic description /
repeatability / peaking losses, their mutually weighted forms with
gradient-detached weights, the combined objective, and the naively
coupled baseline kept as a diagnostic.

All functions take channels-first torch tensors for one image pair and
are differentiable; the detached weights (``a``, ``b``, ``c`` and the
edge mask) carry no gradient to their producers. Window sizes default to
the production values (17x17 patches at stride 8, 17x17 pooling) but are
parameters so the losses stay well defined on tiny test instances.
"""

from __future__ import annotations

import dataclasses
import math
import warnings

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import CorrespondenceBatch, Homography, project_points

ACOS_EPS = 1e-7
NORM_EPS = 1e-8
SAFE_RADIUS = 5.0
PATCH_SIZE = 17
PATCH_STRIDE = 8
POOL_WINDOW = 17
DEFAULT_LAMBDA = 8.0

LAPLACIAN = torch.tensor(
    [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]
)


@dataclasses.dataclass
class NegativeSet:
    """Mined non-matching neighbor indices per kept anchor.

    ``anchors`` indexes into the sampled correspondence arrays; ``intra_a``
    (j) and ``inter_ba`` (m) index image-A samples, ``intra_b`` (k) and
    ``inter_ab`` (n) index image-B samples. Anchors without an admissible
    candidate on either side are dropped.
    """

    anchors: torch.Tensor
    intra_a: torch.Tensor
    intra_b: torch.Tensor
    inter_ab: torch.Tensor
    inter_ba: torch.Tensor

    def __len__(self) -> int:
        return int(self.anchors.shape[0])


@dataclasses.dataclass
class FrozenWeights:
    """Detached weights of one loss evaluation, reusable to re-evaluate
    the loss as the exact function autograd differentiates."""

    c: torch.Tensor
    a_a: torch.Tensor
    a_b: torch.Tensor
    edge_a: torch.Tensor
    edge_b: torch.Tensor
    b_patches: torch.Tensor


@dataclasses.dataclass
class LossBreakdown:
    """Per-term values of the combined objective; ``total`` is the tensor
    to backpropagate and always equals desc + both peak terms + lam * rep."""

    desc_r: torch.Tensor
    peak_r_a: torch.Tensor
    peak_r_b: torch.Tensor
    rep_r: torch.Tensor
    total: torch.Tensor
    lam: float
    negatives: NegativeSet | None = None
    frozen: FrozenWeights | None = None

    def scalars(self) -> dict[str, float]:
        return {
            "desc_r": float(self.desc_r),
            "peak_r_a": float(self.peak_r_a),
            "peak_r_b": float(self.peak_r_b),
            "rep_r": float(self.rep_r),
            "total": float(self.total),
            "lambda": self.lam,
        }


def angular_distance(d1: torch.Tensor, d2: torch.Tensor) -> torch.Tensor:
    """acos of the dot product of unit vectors, clamped away from +-1."""
    dot = (d1 * d2).sum(-1)
    return torch.acos(dot.clamp(-1.0 + ACOS_EPS, 1.0 - ACOS_EPS))


def _pairwise_angles(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return torch.acos((x @ y.T).clamp(-1.0 + ACOS_EPS, 1.0 - ACOS_EPS))


def mine_negatives(
    desc_a: torch.Tensor,
    desc_b: torch.Tensor,
    coords_a: torch.Tensor,
    coords_b: torch.Tensor,
    safe_radius: float = SAFE_RADIUS,
) -> NegativeSet:
    """Nearest non-matching neighbors per anchor pair.

    For anchor i: j minimizes the angle to d_i among image-A samples, k
    the angle to d_i' among image-B samples, n the angle to d_i among
    image-B samples, m the angle to d_i' among image-A samples.
    Candidates within ``safe_radius`` px of the anchor (or of its
    correspondence, in the opposite image) are inadmissible; anchors with
    an empty candidate set are dropped.
    """
    if desc_a.shape[0] < 2:
        raise ValueError("need at least 2 sampled correspondences")
    with torch.no_grad():
        r2 = safe_radius**2
        ca = coords_a.to(torch.float64)
        cb = coords_b.to(torch.float64)
        bad_a = (ca[:, None, :] - ca[None, :, :]).square().sum(-1) <= r2
        bad_b = (cb[:, None, :] - cb[None, :, :]).square().sum(-1) <= r2

        inf = torch.inf
        ang_aa = _pairwise_angles(desc_a, desc_a).masked_fill(bad_a, inf)
        ang_bb = _pairwise_angles(desc_b, desc_b).masked_fill(bad_b, inf)
        ang_ab = _pairwise_angles(desc_a, desc_b)
        ang_an = ang_ab.masked_fill(bad_b, inf)
        ang_bm = ang_ab.T.masked_fill(bad_a, inf)

        kept = ~bad_a.all(dim=1) & ~bad_b.all(dim=1)
        anchors = torch.nonzero(kept, as_tuple=False)[:, 0]
        return NegativeSet(
            anchors=anchors,
            intra_a=ang_aa.argmin(dim=1)[anchors],
            intra_b=ang_bb.argmin(dim=1)[anchors],
            inter_ab=ang_an.argmin(dim=1)[anchors],
            inter_ba=ang_bm.argmin(dim=1)[anchors],
        )


def matching_risks(
    desc_a: torch.Tensor,
    desc_b: torch.Tensor,
    negatives: NegativeSet,
    anchor: str = "a",
) -> torch.Tensor:
    """Per-anchor matching risk given the mined negatives.

    With ``anchor='a'`` the angles are measured from d_i; ``anchor='b'``
    measures them from d_i' (the role-swapped risk used for the second
    image's peaking term). The risk is the squared sum of the squared
    margin terms plus three times the squared correspondence angle.
    """
    idx = negatives
    da = desc_a[idx.anchors]
    db = desc_b[idx.anchors]
    ref = da if anchor == "a" else db
    th_intra_a = angular_distance(ref, desc_a[idx.intra_a])
    th_intra_b = angular_distance(ref, desc_b[idx.intra_b])
    th_inter_b = angular_distance(ref, desc_b[idx.inter_ab])
    th_inter_a = angular_distance(ref, desc_a[idx.inter_ba])
    th_corr = angular_distance(da, db)
    pi = math.pi
    inner = (
        (pi - th_intra_b).square()
        + (pi - th_intra_a).square()
        + (pi - torch.maximum(th_inter_b, th_inter_a)).square()
        + 3.0 * th_corr.square()
    )
    return inner.square()


def desc_basic_loss(risks: torch.Tensor) -> torch.Tensor:
    """Mean matching risk over the kept anchors."""
    return risks.mean()


def _patch_columns(m: torch.Tensor, size: int, stride: int) -> torch.Tensor:
    return F.unfold(m[None, None], size, stride=stride)[0]


def _valid_patch_mask(mask: torch.Tensor, size: int, stride: int) -> torch.Tensor:
    cols = _patch_columns(mask.to(torch.float64), size, stride)
    return cols.min(dim=0).values >= 1.0


def _patch_cosine(
    s: torch.Tensor,
    s_w: torch.Tensor,
    valid: torch.Tensor,
    size: int,
    stride: int,
) -> torch.Tensor:
    pa = _patch_columns(s, size, stride)[:, valid]
    pb = _patch_columns(s_w, size, stride)[:, valid]
    pa = pa / (pa.norm(dim=0, keepdim=True) + NORM_EPS)
    pb = pb / (pb.norm(dim=0, keepdim=True) + NORM_EPS)
    return (pa * pb).sum(dim=0)


def rep_basic_loss(
    s: torch.Tensor,
    s_w: torch.Tensor,
    mask: torch.Tensor,
    patch_size: int = PATCH_SIZE,
    patch_stride: int = PATCH_STRIDE,
) -> torch.Tensor:
    """Mean over fully valid patches of one minus the cosine of the
    l2-normalized flattened score patches."""
    if s.shape[-1] < patch_size or s.shape[-2] < patch_size:
        warnings.warn("score map smaller than the patch window; loss is 0")
        return s.sum() * 0.0
    valid = _valid_patch_mask(mask, patch_size, patch_stride)
    if not bool(valid.any()):
        warnings.warn("no fully valid patch under the warp mask; loss is 0")
        return s.sum() * 0.0
    cos = _patch_cosine(s, s_w, valid, patch_size, patch_stride)
    return (1.0 - cos).mean()


def peak_basic_loss(s: torch.Tensor, window: int = POOL_WINDOW) -> torch.Tensor:
    """Mean of squared average-pooled scores plus squared one-minus-max-
    pooled scores (replicate padding, stride 1)."""
    pad = window // 2
    padded = F.pad(s[None, None], (pad, pad, pad, pad), mode="replicate")
    ap = F.avg_pool2d(padded, window, stride=1)[0, 0]
    mp = F.max_pool2d(padded, window, stride=1)[0, 0]
    return (ap.square() + (1.0 - mp).square()).mean()


def weight_a(risks: torch.Tensor) -> torch.Tensor:
    """Detached per-anchor weight, high for low-risk (reliable) anchors:
    relu(1 - R_i / mean(R))."""
    return F.relu(1.0 - risks / risks.mean()).detach()


def edge_prior(image: torch.Tensor) -> torch.Tensor:
    """Detached smoothness mask from the Laplacian edge magnitude.

    High (-> 1) on smooth areas, low near edges: relu(1 - e / (mean(e)
    + eps)) with e the absolute 3x3 Laplacian response of the luminance.
    """
    img = image
    if img.ndim == 2:
        img = img[None]
    if img.shape[0] == 3:
        lum = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    else:
        lum = img[0]
    kernel = LAPLACIAN.to(dtype=lum.dtype, device=lum.device)[None, None]
    padded = F.pad(lum[None, None], (1, 1, 1, 1), mode="replicate")
    e = F.conv2d(padded, kernel)[0, 0].abs()
    return F.relu(1.0 - e / (e.mean() + NORM_EPS)).detach()


def peak_recoupled_loss(
    s: torch.Tensor,
    anchor_scores: torch.Tensor,
    risks: torch.Tensor,
    image: torch.Tensor,
    window: int = POOL_WINDOW,
    a_weights: torch.Tensor | None = None,
    edge_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Basic peaking loss plus the edge-masked score penalty and the
    risk-weighted pull of reliable anchors toward score one. The risk
    weights and the edge mask are detached."""
    if a_weights is None:
        a_weights = weight_a(risks)
    if edge_mask is None:
        edge_mask = edge_prior(image)
    smooth_term = (edge_mask * s).square().mean()
    anchor_term = (a_weights * (1.0 - anchor_scores).square()).mean()
    return peak_basic_loss(s, window) + smooth_term + anchor_term


def patch_similarity_weights(
    d: torch.Tensor,
    d_w: torch.Tensor,
    valid: torch.Tensor,
    patch_size: int = PATCH_SIZE,
    patch_stride: int = PATCH_STRIDE,
) -> torch.Tensor:
    """Detached per-patch mean cosine similarity of corresponding
    descriptors (descriptor maps are unit norm, so the pixel dot product
    is the cosine)."""
    dot = (d * d_w).sum(dim=0)
    cols = _patch_columns(dot, patch_size, patch_stride)[:, valid]
    return cols.mean(dim=0).detach()


def rep_recoupled_loss(
    s: torch.Tensor,
    s_w: torch.Tensor,
    d: torch.Tensor,
    d_w: torch.Tensor,
    mask: torch.Tensor,
    patch_size: int = PATCH_SIZE,
    patch_stride: int = PATCH_STRIDE,
    b_weights: torch.Tensor | None = None,
) -> torch.Tensor:
    """Repeatability loss with each patch weighted by the local
    descriptor similarity; the weights are detached."""
    if s.shape[-1] < patch_size or s.shape[-2] < patch_size:
        warnings.warn("score map smaller than the patch window; loss is 0")
        return s.sum() * 0.0
    valid = _valid_patch_mask(mask, patch_size, patch_stride)
    if not bool(valid.any()):
        warnings.warn("no fully valid patch under the warp mask; loss is 0")
        return s.sum() * 0.0
    if b_weights is None:
        b_weights = patch_similarity_weights(d, d_w, valid, patch_size, patch_stride)
    cos = _patch_cosine(s, s_w, valid, patch_size, patch_stride)
    return (b_weights * (1.0 - cos)).mean()


def desc_recoupled_loss(
    risks: torch.Tensor,
    scores_a: torch.Tensor,
    scores_b: torch.Tensor,
    c_weights: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean matching risk weighted by the detached product of the
    corresponding detection scores."""
    if c_weights is None:
        c_weights = (scores_a * scores_b).detach()
    return (c_weights * risks).mean()


def naive_coupled_loss(
    risks: torch.Tensor, scores_a: torch.Tensor, scores_b: torch.Tensor
) -> torch.Tensor:
    """Diagnostic baseline: the same forward value as the recoupled
    description loss but with gradients flowing through the scores, which
    admits the all-zero score map as a minimum."""
    return (scores_a * scores_b * risks).mean()


# ---------------------------------------------------------------------------
# dense sampling / warping helpers (torch, differentiable in map values)


def sample_at_int(maps: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Index an (H, W) or (C, H, W) map at integer (x, y) coordinates."""
    x, y = coords[:, 0].long(), coords[:, 1].long()
    if maps.ndim == 2:
        return maps[y, x]
    return maps[:, y, x].T


def sample_bilinear(maps: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample an (H, W) or (C, H, W) map at float (x, y)
    coordinates (differentiable in the map values)."""
    squeeze = maps.ndim == 2
    m = maps[None] if squeeze else maps
    h, w = m.shape[-2], m.shape[-1]
    pts = coords.to(m.dtype)
    gx = pts[:, 0] / (w - 1) * 2.0 - 1.0
    gy = pts[:, 1] / (h - 1) * 2.0 - 1.0
    grid = torch.stack([gx, gy], dim=-1)[None, None]
    out = F.grid_sample(
        m[None], grid, mode="bilinear", padding_mode="zeros", align_corners=True
    )[0, :, 0].T
    return out[:, 0] if squeeze else out


def warp_dense(
    maps: torch.Tensor,
    h_ab: Homography,
    out_size: tuple[int, int],
    content_mask: torch.Tensor | None = None,
    renormalize: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pull image-B maps into image A's frame through the A->B homography.

    The output at pixel p is the bilinear sample of ``maps`` at H(p); the
    mask marks pixels whose sample stays inside B (and, if given, inside
    B's own content mask). Masked-out pixels are zeroed.
    """
    squeeze = maps.ndim == 2
    m = maps[None] if squeeze else maps
    oh, ow = out_size
    hb, wb = m.shape[-2], m.shape[-1]

    xs, ys = np.meshgrid(np.arange(ow), np.arange(oh))
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    src = project_points(pts, h_ab)
    inside = (
        (src[:, 0] >= 0)
        & (src[:, 0] <= wb - 1)
        & (src[:, 1] >= 0)
        & (src[:, 1] <= hb - 1)
    ).reshape(oh, ow)

    src_t = torch.from_numpy(src).to(m.dtype)
    gx = src_t[:, 0] / (wb - 1) * 2.0 - 1.0
    gy = src_t[:, 1] / (hb - 1) * 2.0 - 1.0
    grid = torch.stack([gx, gy], dim=-1).reshape(1, oh, ow, 2)
    warped = F.grid_sample(
        m[None], grid, mode="bilinear", padding_mode="zeros", align_corners=True
    )[0]

    mask = torch.from_numpy(inside)
    if content_mask is not None:
        cm = F.grid_sample(
            content_mask.to(m.dtype)[None, None],
            grid,
            mode="bilinear",
            padding_mode="zeros",
            align_corners=True,
        )[0, 0]
        mask = mask & (cm >= 0.999)
    if renormalize:
        warped = F.normalize(warped, p=2, dim=0, eps=NORM_EPS)
    warped = warped * mask.to(m.dtype)
    if squeeze:
        warped = warped[0]
    return warped, mask


def total_loss(
    desc_a: torch.Tensor,
    scores_a: torch.Tensor,
    desc_b: torch.Tensor,
    scores_b: torch.Tensor,
    batch: CorrespondenceBatch,
    image_a: torch.Tensor,
    image_b: torch.Tensor,
    h_ab: Homography,
    lam: float = DEFAULT_LAMBDA,
    content_mask_b: torch.Tensor | None = None,
    patch_size: int = PATCH_SIZE,
    patch_stride: int = PATCH_STRIDE,
    pool_window: int = POOL_WINDOW,
    safe_radius: float = SAFE_RADIUS,
    negatives: NegativeSet | None = None,
    frozen: FrozenWeights | None = None,
) -> LossBreakdown:
    """Combined objective for one image pair.

    ``desc_a``/``desc_b`` are (D, H, W) unit-norm descriptor maps,
    ``scores_a``/``scores_b`` (H, W) detection maps, ``batch`` the sampled
    ground-truth correspondences under ``h_ab``. Passing ``negatives`` and
    ``frozen`` re-evaluates the loss with mining and all detached weights
    held fixed (used by the finite-difference tests); by default they are
    computed here and returned on the breakdown.
    """
    coords_a = torch.from_numpy(batch.coords_a[batch.valid_mask])
    coords_b = torch.from_numpy(batch.coords_b[batch.valid_mask])

    d_i = sample_at_int(desc_a, coords_a)
    s_i_all = sample_at_int(scores_a, coords_a)
    d_ip = sample_bilinear(desc_b, coords_b)
    d_ip = F.normalize(d_ip, p=2, dim=1, eps=NORM_EPS)
    s_ip_all = sample_bilinear(scores_b, coords_b)

    if negatives is None:
        negatives = mine_negatives(
            d_i.detach(), d_ip.detach(), coords_a, coords_b, safe_radius
        )
    risks_a = matching_risks(d_i, d_ip, negatives, anchor="a")
    risks_b = matching_risks(d_i, d_ip, negatives, anchor="b")
    s_i = s_i_all[negatives.anchors]
    s_ip = s_ip_all[negatives.anchors]

    s_w, mask_w = warp_dense(
        scores_b, h_ab, scores_a.shape, content_mask=content_mask_b
    )
    d_w, _ = warp_dense(
        desc_b, h_ab, scores_a.shape, content_mask=content_mask_b, renormalize=True
    )

    if frozen is None:
        valid = _valid_patch_mask(mask_w, patch_size, patch_stride)
        if bool(valid.any()):
            b_patches = patch_similarity_weights(
                desc_a, d_w, valid, patch_size, patch_stride
            )
        else:
            b_patches = torch.zeros(0, dtype=desc_a.dtype)
        frozen = FrozenWeights(
            c=(s_i * s_ip).detach(),
            a_a=weight_a(risks_a.detach()),
            a_b=weight_a(risks_b.detach()),
            edge_a=edge_prior(image_a),
            edge_b=edge_prior(image_b),
            b_patches=b_patches,
        )

    desc_r = desc_recoupled_loss(risks_a, s_i, s_ip, c_weights=frozen.c)
    peak_a = peak_recoupled_loss(
        scores_a, s_i, risks_a, image_a,
        window=pool_window, a_weights=frozen.a_a, edge_mask=frozen.edge_a,
    )
    peak_b = peak_recoupled_loss(
        scores_b, s_ip, risks_b, image_b,
        window=pool_window, a_weights=frozen.a_b, edge_mask=frozen.edge_b,
    )
    rep = rep_recoupled_loss(
        scores_a, s_w, desc_a, d_w, mask_w,
        patch_size=patch_size, patch_stride=patch_stride,
        b_weights=frozen.b_patches if frozen.b_patches.numel() else None,
    )
    total = desc_r + peak_a + peak_b + lam * rep
    return LossBreakdown(
        desc_r=desc_r,
        peak_r_a=peak_a,
        peak_r_b=peak_b,
        rep_r=rep,
        total=total,
        lam=lam,
        negatives=negatives,
        frozen=frozen,
    )


def naive_pair_loss(
    desc_a: torch.Tensor,
    scores_a: torch.Tensor,
    desc_b: torch.Tensor,
    scores_b: torch.Tensor,
    batch: CorrespondenceBatch,
    safe_radius: float = SAFE_RADIUS,
) -> torch.Tensor:
    """The coupled diagnostic objective for one pair: mean of
    s_i * s_i' * R_i with gradients through the scores."""
    coords_a = torch.from_numpy(batch.coords_a[batch.valid_mask])
    coords_b = torch.from_numpy(batch.coords_b[batch.valid_mask])
    d_i = sample_at_int(desc_a, coords_a)
    s_i = sample_at_int(scores_a, coords_a)
    d_ip = sample_bilinear(desc_b, coords_b)
    d_ip = F.normalize(d_ip, p=2, dim=1, eps=NORM_EPS)
    s_ip = sample_bilinear(scores_b, coords_b)
    negatives = mine_negatives(
        d_i.detach(), d_ip.detach(), coords_a, coords_b, safe_radius
    )
    risks = matching_risks(d_i, d_ip, negatives, anchor="a")
    return naive_coupled_loss(
        risks, s_i[negatives.anchors], s_ip[negatives.anchors]
    )
