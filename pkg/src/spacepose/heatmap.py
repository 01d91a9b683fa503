"""Heatmap normalization, DSNT coordinate regression and the JS regularizer.

All functions act on the trailing two dimensions ``(rows, cols)`` of a tensor
so they apply equally to a single map or to a ``(batch, rows, cols)`` stack.

Normalized coordinates follow the DSNT grid: for 1-indexed column ``j`` of a
``W``-wide map, ``x = (2j - (W + 1)) / W``. Together with the continuous pixel
convention of :mod:`spacepose.geometry` this gives ``u = (x + 1) * W / 2``.
"""

from __future__ import annotations

import math

import torch

NORM_TOL = 1e-6
LOG_FLOOR = 1e-12


class HeatmapContractError(ValueError):
    pass


def coord_grids(rows: int, cols: int, dtype=torch.float32, device=None):
    """Return ``(xgrid, ygrid)`` each of shape ``(rows, cols)``."""
    xs = (2.0 * torch.arange(1, cols + 1, dtype=dtype, device=device) - (cols + 1)) / cols
    ys = (2.0 * torch.arange(1, rows + 1, dtype=dtype, device=device) - (rows + 1)) / rows
    return xs.expand(rows, cols), ys[:, None].expand(rows, cols)


def normalize_heatmap(raw: torch.Tensor) -> torch.Tensor:
    """Spatial softmax over all pixels of each map."""
    if not torch.isfinite(raw).all():
        raise FloatingPointError("heatmap logits contain non-finite values")
    shape = raw.shape
    flat = raw.reshape(*shape[:-2], shape[-2] * shape[-1])
    return torch.softmax(flat, dim=-1).reshape(shape)


def check_normalized(h: torch.Tensor, tol: float = NORM_TOL):
    sums = h.detach().sum(dim=(-2, -1))
    if (h.detach() < 0).any() or (sums - 1).abs().max() > tol:
        raise HeatmapContractError("heatmap is not normalized (entries must be >= 0 and sum to 1)")


def dsnt(h: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Expected normalized ``(x, y)`` under the heatmap. Output shape ``(..., 2)``."""
    if check:
        check_normalized(h, tol=max(NORM_TOL, 1e-4 if h.dtype == torch.float32 else NORM_TOL))
    xgrid, ygrid = coord_grids(h.shape[-2], h.shape[-1], dtype=h.dtype, device=h.device)
    x = (h * xgrid).sum(dim=(-2, -1))
    y = (h * ygrid).sum(dim=(-2, -1))
    return torch.stack([x, y], dim=-1)


def normalized_to_pixel(xy, width: int, height: int):
    """Map DSNT coordinates to continuous pixel coordinates ``(u, v)``."""
    xy = torch.as_tensor(xy) if not torch.is_tensor(xy) else xy
    u = (xy[..., 0] + 1.0) * width / 2.0
    v = (xy[..., 1] + 1.0) * height / 2.0
    return torch.stack([u, v], dim=-1)


def pixel_to_normalized(uv, width: int, height: int):
    uv = torch.as_tensor(uv) if not torch.is_tensor(uv) else uv
    x = 2.0 * uv[..., 0] / width - 1.0
    y = 2.0 * uv[..., 1] / height - 1.0
    return torch.stack([x, y], dim=-1)


def gaussian_target(center: torch.Tensor, sigma2: float, shape: tuple[int, int]) -> torch.Tensor:
    """Discretized isotropic Gaussian at ``center`` (normalized coords).

    ``sigma2`` is the variance in heatmap pixels. ``center`` may be batched as
    ``(..., 2)``; the result is ``(..., rows, cols)`` and sums to one.
    """
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    rows, cols = shape
    center = torch.as_tensor(center)
    dtype = center.dtype if center.is_floating_point() else torch.float32
    # pixel-center coordinates in heatmap pixels
    uc = (center[..., 0] + 1.0) * cols / 2.0
    vc = (center[..., 1] + 1.0) * rows / 2.0
    us = torch.arange(cols, dtype=dtype, device=center.device) + 0.5
    vs = torch.arange(rows, dtype=dtype, device=center.device) + 0.5
    du2 = (us - uc[..., None]) ** 2
    dv2 = (vs - vc[..., None]) ** 2
    logits = -(dv2[..., :, None] + du2[..., None, :]) / (2.0 * sigma2)
    return normalize_heatmap(logits)


def js_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Jensen-Shannon divergence (natural log) per map, in ``[0, ln 2]``."""
    if p.shape != q.shape:
        raise HeatmapContractError(f"shape mismatch {tuple(p.shape)} vs {tuple(q.shape)}")
    m = 0.5 * (p + q)

    def kl(a, b):
        # 0 * log(0 / b) contributes 0
        terms = a * (torch.log(a.clamp_min(LOG_FLOOR)) - torch.log(b.clamp_min(LOG_FLOOR)))
        return torch.where(a > 0, terms, torch.zeros_like(terms)).sum(dim=(-2, -1))

    js = 0.5 * kl(p, m) + 0.5 * kl(q, m)
    return js.clamp(0.0, math.log(2.0))
