import math

import numpy as np
import pytest
import torch

from spacepose.geometry import axis_angle_quat, random_quaternions
from spacepose.heatmap import gaussian_target
from spacepose.losses import (LossContractError, ROTATION_FLOOR, center_loss, compose_losses,
                              position_loss, rotation_loss)


def t64(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def test_position_loss_examples():
    t = t64([[1.0, 2.0, 3.0]])
    assert float(position_loss(t, t)) == 0.0
    assert float(position_loss(t64([[0, 0, 0]]), t64([[1, 2, 2]]))) == 9.0
    assert float(position_loss(t64([[0, 0, 0]] * 2), t64([[1, 2, 2]] * 2))) == 9.0


def test_position_loss_scale_law():
    gen = torch.Generator().manual_seed(0)
    a, b = torch.randn(8, 3, generator=gen, dtype=torch.float64), torch.randn(8, 3, generator=gen, dtype=torch.float64)
    base = position_loss(a, b)
    assert float(position_loss(3.5 * a, 3.5 * b)) == pytest.approx(3.5 ** 2 * float(base), rel=1e-12)


def test_position_loss_batch_mismatch():
    with pytest.raises(LossContractError):
        position_loss(torch.zeros(2, 3), torch.zeros(3, 3))


def test_center_loss_zero_at_target():
    c = t64([[0.1, -0.2]])
    h = gaussian_target(c, 1.0, (16, 16))
    euc, reg, cen = center_loss(c, c, h)
    assert float(euc) == 0.0 and float(reg) == pytest.approx(0.0, abs=1e-12) and float(cen) == pytest.approx(0.0, abs=1e-12)


def test_center_loss_euclidean_term():
    c_pred = t64([[0.3, -0.4]])
    h = gaussian_target(c_pred, 1.0, (8, 8))
    euc, _, _ = center_loss(t64([[0.0, 0.0]]), c_pred, h)
    assert float(euc) == pytest.approx(0.5, abs=1e-15)


def test_center_loss_combination():
    gen = torch.Generator().manual_seed(1)
    c = torch.rand(5, 2, generator=gen, dtype=torch.float64) - 0.5
    cp = torch.rand(5, 2, generator=gen, dtype=torch.float64) - 0.5
    h = torch.softmax(torch.randn(5, 64, generator=gen, dtype=torch.float64), -1).reshape(5, 8, 8)
    euc, reg, cen = center_loss(c, cp, h, 1.0, 1.0)
    assert float(cen) == pytest.approx(float(euc) + float(reg), abs=1e-12)


def test_center_loss_requires_normalized_heatmaps():
    with pytest.raises(ValueError):
        center_loss(torch.zeros(1, 2), torch.zeros(1, 2), torch.ones(1, 4, 4))


def test_rotation_loss_examples():
    q = t64([axis_angle_quat([0.2, 0.5, -0.3], 1.1)])
    same = float(rotation_loss(q, q))
    # acos(1 - e) = sqrt(2e) * (1 + e / 12 + ...)
    assert same == pytest.approx(2 * math.sqrt(2e-7), rel=1e-6)
    assert same == pytest.approx(ROTATION_FLOOR)
    assert float(rotation_loss(q, -q)) == same
    q15 = t64([[math.cos(math.radians(15)), math.sin(math.radians(15)), 0, 0]])
    assert float(rotation_loss(t64([[1, 0, 0, 0]]), q15)) == pytest.approx(math.pi / 6, abs=1e-6)


def test_rotation_loss_sign_invariance():
    rng = np.random.default_rng(2)
    a, b = t64(random_quaternions(rng, 32)), t64(random_quaternions(rng, 32))
    flips = t64(rng.choice([-1.0, 1.0], size=(32, 1)))
    assert float(rotation_loss(a, b)) == pytest.approx(float(rotation_loss(flips * a, b)), abs=1e-15)
    assert float(rotation_loss(a, b)) == pytest.approx(float(rotation_loss(a, -b)), abs=1e-15)


def test_rotation_loss_rejects_non_unit():
    with pytest.raises(LossContractError):
        rotation_loss(t64([[1, 1, 0, 0]]), t64([[1, 0, 0, 0]]))


def test_rotation_gradient_bounded_at_clamp():
    q = t64([[1, 0, 0, 0]])
    qp = t64([[1, 0, 0, 0]]).requires_grad_(True)
    rotation_loss(q, qp).backward()
    assert torch.isfinite(qp.grad).all()


def test_gradcheck_losses():
    gen = torch.Generator().manual_seed(3)
    t = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    tp = torch.randn(4, 3, generator=gen, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda x: position_loss(t, x), (tp,))
    rng = np.random.default_rng(3)
    q = t64(random_quaternions(rng, 4))
    raw = t64(random_quaternions(rng, 4)).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda r: rotation_loss(q, r / r.norm(dim=-1, keepdim=True)), (raw,))


@pytest.mark.parametrize("parts, translation, pose", [
    (dict(position=1, center=2, rotation=3), 3, 6),
    (dict(), 0, 0),
])
def test_compose_losses_examples(parts, translation, pose):
    lb = compose_losses(**parts)
    assert lb.translation == translation and lb.pose == pose


def test_compose_losses_additive():
    rng = np.random.default_rng(4)
    for p, c, r in rng.uniform(0, 100, size=(200, 3)):
        lb = compose_losses(position=p, center=c, rotation=r)
        assert abs(lb.translation - (p + c)) <= 1e-12 and abs(lb.pose - (p + c + r)) <= 1e-12


@pytest.mark.parametrize("name", ["position", "center", "rotation", "euc", "reg"])
def test_compose_losses_rejects_nan(name):
    with pytest.raises(FloatingPointError, match=name):
        compose_losses(**{name: float("nan")})
