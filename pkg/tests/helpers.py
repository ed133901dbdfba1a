"""Shared test utilities: finite differences, unit vectors, toy instances."""

import numpy as np
import torch


def unit_vectors(rng, n, d, dtype=torch.float64):
    v = rng.standard_normal((n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return torch.tensor(v, dtype=dtype)


def unit_map(rng, d, h, w, dtype=torch.float64):
    v = rng.standard_normal((d, h, w))
    v /= np.linalg.norm(v, axis=0, keepdims=True)
    return torch.tensor(v, dtype=dtype)


def embed2d(rows, d=8):
    out = torch.zeros(len(rows), d, dtype=torch.float64)
    out[:, :2] = torch.tensor(rows, dtype=torch.float64)
    return out


def finite_difference_grad(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite differences of a scalar function w.r.t. ``x``,
    perturbing the tensor in place (x must not require grad)."""
    assert not x.requires_grad
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = float(fn())
        flat[i] = orig - eps
        fm = float(fn())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom
