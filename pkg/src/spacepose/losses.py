"""Training objectives for the translation and orientation networks."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch

from .heatmap import check_normalized, gaussian_target, js_divergence

DOT_CLAMP = 1.0 - 1e-7
UNIT_TOL = 1e-5


class LossContractError(ValueError):
    pass


@dataclass
class LossBreakdown:
    position: float = 0.0
    euc: float = 0.0
    reg: float = 0.0
    center: float = 0.0
    rotation: float = 0.0
    translation: float = 0.0
    pose: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _same_batch(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape or a.shape[0] < 1:
        raise LossContractError(f"{what}: batch mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def position_loss(t_true: torch.Tensor, t_pred: torch.Tensor) -> torch.Tensor:
    """Batch mean of the squared Euclidean translation error."""
    _same_batch(t_true, t_pred, "position_loss")
    return ((t_true - t_pred) ** 2).sum(dim=-1).mean()


def center_loss(c_true: torch.Tensor, c_pred: torch.Tensor, h_pred: torch.Tensor,
                sigma2: float = 1.0, lam: float = 1.0):
    """Euclidean center error plus the JS regularizer toward a Gaussian at ``c_pred``.

    Returns ``(euc, reg, center)`` where ``center = mean(euc_i + lam * reg_i)``.
    Coordinates are DSNT-normalized.
    """
    _same_batch(c_true, c_pred, "center_loss")
    if h_pred.shape[0] != c_pred.shape[0]:
        raise LossContractError("center_loss: heatmap batch differs from coordinate batch")
    check_normalized(h_pred, tol=1e-4)
    euc_i = torch.linalg.vector_norm(c_true - c_pred, dim=-1)
    target = gaussian_target(c_pred, sigma2, tuple(h_pred.shape[-2:]))
    reg_i = js_divergence(h_pred, target)
    return euc_i.mean(), reg_i.mean(), (euc_i + lam * reg_i).mean()


def quaternion_dot(q_true: torch.Tensor, q_pred: torch.Tensor) -> torch.Tensor:
    _same_batch(q_true, q_pred, "rotation_loss")
    for q, name in ((q_true, "q_true"), (q_pred, "q_pred")):
        if ((q.detach() ** 2).sum(-1) - 1).abs().max() > UNIT_TOL:
            raise LossContractError(f"{name} must contain unit quaternions")
    return (q_true * q_pred).sum(dim=-1)


def rotation_angles(q_true: torch.Tensor, q_pred: torch.Tensor, clamp: float = DOT_CLAMP) -> torch.Tensor:
    """Per-sample geodesic angle, ``2 * arccos(min(|<q, q_hat>|, clamp))``."""
    dot = quaternion_dot(q_true, q_pred).abs().clamp(max=clamp)
    return 2.0 * torch.acos(dot)


def rotation_loss(q_true: torch.Tensor, q_pred: torch.Tensor) -> torch.Tensor:
    return rotation_angles(q_true, q_pred).mean()


ROTATION_FLOOR = 2.0 * math.acos(DOT_CLAMP)


def compose_losses(position=0.0, euc=0.0, reg=0.0, center=0.0, rotation=0.0) -> LossBreakdown:
    """Sum the parts into translation and pose totals, rejecting non-finite terms."""
    parts = {"position": position, "euc": euc, "reg": reg, "center": center, "rotation": rotation}
    values = {}
    for name, value in parts.items():
        value = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(value):
            raise FloatingPointError(f"loss term {name!r} is not finite ({value})")
        values[name] = value
    translation = values["position"] + values["center"]
    return LossBreakdown(translation=translation, pose=translation + values["rotation"], **values)
