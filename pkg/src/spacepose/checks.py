"""Self-test suites: finite-difference gradient checks and numerical invariants.

Each check returns a :class:`CheckResult`; :func:`run_selftest` runs them all.
The gradient oracle is plain central differences in float64, independent of
autograd.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .geometry import axis_angle_quat, geodesic_angle, random_quaternions
from .heatmap import dsnt, gaussian_target, js_divergence, normalize_heatmap, normalized_to_pixel, \
    pixel_to_normalized
from .losses import ROTATION_FLOOR, center_loss, compose_losses, position_loss, rotation_angles
from .roi import BoundingBox, RoiConfig, augment_box, bounding_box

log = logging.getLogger(__name__)

GRAD_TOL = 1e-4
FD_STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def _autograd(f_torch, x: np.ndarray) -> np.ndarray:
    xt = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    f_torch(xt).backward()
    return xt.grad.numpy()


def _check_gradient(f_torch, x: np.ndarray) -> float:
    numeric = numerical_gradient(lambda v: float(f_torch(torch.from_numpy(v))), x)
    return relative_error(_autograd(f_torch, x), numeric)


def _unit(rng, n):
    return random_quaternions(rng, n)


def gradient_cases(seed: int = 0):
    """Yield ``(name, f_torch, x)`` gradient problems, 100 instances per operation."""
    rng = np.random.default_rng(seed)
    for _ in range(100):
        logits = rng.normal(size=(8, 8))
        yield "dsnt", (lambda z: dsnt(normalize_heatmap(z), check=False)[..., 0]
                       + 0.5 * dsnt(normalize_heatmap(z), check=False)[..., 1]), logits
    for _ in range(100):
        other = normalize_heatmap(torch.tensor(rng.normal(size=(8, 8))))
        logits = rng.normal(size=(8, 8))
        yield "js_divergence", (lambda z, q=other: js_divergence(normalize_heatmap(z), q)), logits
    for _ in range(100):
        t_true = torch.tensor(rng.normal(0, 5, size=(4, 3)))
        yield "position_loss", (lambda z, t=t_true: position_loss(t, z)), rng.normal(0, 5, size=(4, 3))
    for _ in range(100):
        c_true = torch.tensor(rng.uniform(-0.8, 0.8, size=(2, 2)))
        c_pred = rng.uniform(-0.8, 0.8, size=(2, 2))
        logits = rng.normal(size=(2, 8, 8))
        x = np.concatenate([c_pred.ravel(), logits.ravel()])

        def f(z, c=c_true):
            cp = z[:4].reshape(2, 2)
            h = normalize_heatmap(z[4:].reshape(2, 8, 8))
            return center_loss(c, cp, h, 1.0, 1.0)[2]
        yield "center_loss", f, x
    count = 0
    while count < 100:
        q = _unit(rng, 3)
        raw = _unit(rng, 3) * rng.uniform(0.5, 2.0, size=(3, 1))
        dots = np.abs(np.sum(q * raw / np.linalg.norm(raw, axis=1, keepdims=True), axis=1))
        if dots.max() > 0.99:  # stay away from the arccos clamp
            continue
        count += 1
        qt = torch.tensor(q)
        yield "rotation_loss", (lambda z, qq=qt: rotation_angles(
            qq, z / torch.linalg.vector_norm(z, dim=-1, keepdim=True)).mean()), raw


def gradient_suite(seed: int = 0) -> list[CheckResult]:
    worst: dict[str, float] = {}
    start = time.perf_counter()
    for name, f, x in gradient_cases(seed):
        worst[name] = max(worst.get(name, 0.0), _check_gradient(f, x))
    log.info("gradient suite took %.1fs", time.perf_counter() - start)
    return [CheckResult(f"gradient {name}", err < GRAD_TOL,
                        f"max relative error {err:.2e} over 100 instances (< {GRAD_TOL:g})")
            for name, err in worst.items()]


def dsnt_suite() -> list[CheckResult]:
    uniform = torch.full((9, 13), 1.0 / 117, dtype=torch.float64)
    u = dsnt(uniform).abs().max().item()
    pm = torch.zeros(4, 4, dtype=torch.float64)
    pm[0, 0] = 1.0
    xy = dsnt(pm).tolist()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        rows, cols = 24, 32
        uv = torch.tensor([rng.uniform(3, cols - 3), rng.uniform(3, rows - 3)], dtype=torch.float64)
        back = normalized_to_pixel(dsnt(gaussian_target(pixel_to_normalized(uv, cols, rows), 1.0, (rows, cols))),
                                   cols, rows)
        worst = max(worst, float((back - uv).abs().max()))
    return [
        CheckResult("dsnt uniform -> origin", u <= 1e-9, f"max |coord| {u:.1e}"),
        CheckResult("dsnt point mass (1,1) of 4x4", xy == [-0.75, -0.75], f"got {xy}"),
        CheckResult("gaussian -> dsnt round trip", worst < 1.0, f"max error {worst:.3f} heatmap px (< 1)"),
    ]


def quaternion_suite(seed: int = 2) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    a, b = _unit(rng, 1000), _unit(rng, 1000)
    at, bt = torch.tensor(a), torch.tensor(b)
    same = rotation_angles(at, at).max().item()
    flipped = rotation_angles(at, -at)
    sym = (rotation_angles(at, bt) - rotation_angles(bt, at)).abs().max().item()
    top = np.degrees(geodesic_angle(a, b)).max()
    axis_err = 0.0
    for deg in (10.0, 15.0, 90.0):
        theta = math.radians(deg)
        for axis in rng.normal(size=(20, 3)):
            q = torch.from_numpy(np.asarray(axis_angle_quat(axis, theta)))[None]
            ident = torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=torch.float64)
            axis_err = max(axis_err, abs(rotation_angles(ident, q).item() - theta))
    floor_deg = math.degrees(ROTATION_FLOOR)
    return [
        CheckResult("E_q(q, q) at clamp floor", same <= ROTATION_FLOOR * (1 + 1e-9),
                    f"{math.degrees(same):.4f} deg (floor {floor_deg:.4f})"),
        CheckResult("E_q(q, -q) = E_q(q, q)", torch.equal(flipped, rotation_angles(at, at)), "sign flip"),
        CheckResult("E_q symmetry", sym == 0.0, f"max asymmetry {sym:.1e}"),
        CheckResult("E_q range", top <= 180.0, f"max {top:.2f} deg"),
        CheckResult("axis-angle identity", axis_err < 1e-6, f"max error {axis_err:.1e} rad"),
    ]


def bounding_box_suite(seed: int = 3) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for ko, z in zip(rng.uniform(100, 1e4, 1000), rng.uniform(5, 40, 1000)):
        worst = max(worst, abs(bounding_box((0.0, 0.0), z, RoiConfig(k_object=ko)).side * z - ko) / ko)
    box = BoundingBox((0.0, 0.0), 100.0)
    draws = np.array([augment_box(box, 0.15, rng).center for _ in range(10000)])
    std, mean = draws.std(axis=0), draws.mean(axis=0)
    return [
        CheckResult("box side * z = K_O", worst <= 1e-15, f"max relative deviation {worst:.1e}"),
        CheckResult("CDA statistics", bool(np.all((14.25 <= std) & (std <= 15.75)) and np.all(np.abs(mean) <= 0.5)),
                    f"std {std.round(3).tolist()} mean {mean.round(3).tolist()}"),
    ]


def loss_identity_suite(seed: int = 4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(1000):
        p, c, r = rng.uniform(0, 50, 3)
        lb = compose_losses(position=p, center=c, rotation=r)
        worst = max(worst, abs(lb.translation - (p + c)), abs(lb.pose - (lb.translation + r)))
    return [CheckResult("loss composition identities", worst <= 1e-9, f"max deviation {worst:.1e}")]


def run_selftest(seed: int = 0) -> list[CheckResult]:
    results = []
    for suite in (lambda: gradient_suite(seed), dsnt_suite, quaternion_suite, bounding_box_suite,
                  loss_identity_suite):
        results.extend(suite())
    return results
