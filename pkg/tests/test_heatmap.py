import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from spacepose.heatmap import (HeatmapContractError, coord_grids, dsnt, gaussian_target, js_divergence,
                               normalize_heatmap, normalized_to_pixel, pixel_to_normalized)


def point_mass(rows, cols, r, c, dtype=torch.float64):
    h = torch.zeros(rows, cols, dtype=dtype)
    h[r, c] = 1.0
    return h


def random_heatmap(gen, rows=8, cols=8):
    return normalize_heatmap(torch.randn(rows, cols, generator=gen, dtype=torch.float64))


def test_grid_formula():
    xg, yg = coord_grids(3, 4, dtype=torch.float64)
    np.testing.assert_allclose(xg[0].numpy(), [(2 * j - 5) / 4 for j in range(1, 5)])
    np.testing.assert_allclose(yg[:, 0].numpy(), [(2 * i - 4) / 3 for i in range(1, 4)])


def test_normalize_zero_is_uniform():
    h = normalize_heatmap(torch.zeros(5, 7, dtype=torch.float64))
    np.testing.assert_allclose(h.numpy(), 1 / 35)


def test_normalize_saturates():
    raw = torch.zeros(6, 6)
    raw[2, 3] = 1000
    h = normalize_heatmap(raw)
    assert h[2, 3] > 1 - 1e-6


def test_normalize_rejects_nonfinite():
    raw = torch.zeros(3, 3)
    raw[1, 1] = float("nan")
    with pytest.raises(FloatingPointError):
        normalize_heatmap(raw)


@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
@settings(max_examples=50, deadline=None)
def test_normalize_shift_invariant_and_sums_to_one(seed, shift):
    raw = torch.randn(4, 4, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    h = normalize_heatmap(raw)
    assert float(h.sum()) == pytest.approx(1.0, abs=1e-6)
    assert (h >= 0).all()
    np.testing.assert_allclose(normalize_heatmap(raw + shift).numpy(), h.numpy(), atol=1e-12)


def test_dsnt_examples():
    np.testing.assert_array_equal(dsnt(point_mass(4, 4, 0, 0)).numpy(), [-0.75, -0.75])
    uniform = torch.full((6, 10), 1 / 60, dtype=torch.float64)
    np.testing.assert_allclose(dsnt(uniform).numpy(), [0, 0], atol=1e-12)
    h = torch.zeros(4, 4, dtype=torch.float64)
    h[1, 0] = h[1, 3] = 0.5
    np.testing.assert_allclose(dsnt(h).numpy(), [0.0, -0.25], atol=1e-15)


def test_dsnt_rejects_unnormalized():
    with pytest.raises(HeatmapContractError):
        dsnt(torch.ones(4, 4))


def test_dsnt_within_convex_hull():
    gen = torch.Generator().manual_seed(0)
    for _ in range(200):
        h = normalize_heatmap(5 * torch.randn(9, 6, generator=gen, dtype=torch.float64))
        x, y = dsnt(h)
        assert abs(x) <= 5 / 6 + 1e-12 and abs(y) <= 8 / 9 + 1e-12


def test_dsnt_gradient_is_grid():
    h = random_heatmap(torch.Generator().manual_seed(1)).requires_grad_(True)
    x = dsnt(h)[0]
    x.backward()
    xg, _ = coord_grids(8, 8, dtype=torch.float64)
    np.testing.assert_allclose(h.grad.numpy(), xg.numpy())


def test_gradcheck_dsnt_and_js():
    gen = torch.Generator().manual_seed(2)
    for _ in range(5):
        p = random_heatmap(gen).requires_grad_(True)
        q = random_heatmap(gen)
        assert torch.autograd.gradcheck(lambda h: dsnt(h, check=False), (p,))
        assert torch.autograd.gradcheck(lambda h: js_divergence(h, q), (p,))


def test_normalized_pixel_examples():
    u = normalized_to_pixel(torch.tensor([-0.75, 0.0]), 4, 4)
    assert float(u[0]) == pytest.approx(0.5)  # center of column 1 (1-indexed)
    for W in (2, 4, 10):
        u = normalized_to_pixel(torch.tensor([0.0, 0.0]), W, W)
        assert float(u[0]) == pytest.approx(((W / 2 - 0.5) + (W / 2 + 0.5)) / 2)


def test_pixel_round_trip():
    cols = torch.arange(7, dtype=torch.float64) + 0.5
    uv = torch.stack([cols, cols], dim=-1)
    xy = pixel_to_normalized(uv, 7, 7)
    xg, _ = coord_grids(7, 7, dtype=torch.float64)
    np.testing.assert_allclose(xy[:, 0].numpy(), xg[0].numpy(), atol=1e-15)
    np.testing.assert_allclose(normalized_to_pixel(xy, 7, 7).numpy(), uv.numpy(), atol=1e-9)


def test_gaussian_target_centered_symmetry():
    g = gaussian_target(torch.tensor([0.0, 0.0], dtype=torch.float64), 2.0, (9, 9))
    assert float(g.sum()) == pytest.approx(1.0, abs=1e-12)
    assert divmod(int(torch.argmax(g)), 9) == (4, 4)
    np.testing.assert_allclose(torch.rot90(g).numpy(), g.numpy(), atol=1e-15)


def test_gaussian_target_brute_force():
    # independent evaluation of exp(-d^2 / 2) / Z over pixel centers
    n = 17
    vals = [[math.exp(-((i - 8) ** 2 + (j - 8) ** 2) / 2) for j in range(n)] for i in range(n)]
    Z = sum(map(sum, vals))
    g = gaussian_target(torch.tensor([0.0, 0.0], dtype=torch.float64), 1.0, (n, n))
    assert float(g[8, 8]) == pytest.approx(vals[8][8] / Z, rel=1e-12)
    assert float(g[3, 11]) == pytest.approx(vals[3][11] / Z, rel=1e-12)


@pytest.mark.parametrize("shape", [(16, 16), (12, 20)])
def test_gaussian_then_dsnt_round_trip(shape):
    rows, cols = shape
    rng = np.random.default_rng(5)
    for _ in range(50):
        u = rng.uniform(3, cols - 3)
        v = rng.uniform(3, rows - 3)
        c = pixel_to_normalized(torch.tensor([u, v], dtype=torch.float64), cols, rows)
        back = normalized_to_pixel(dsnt(gaussian_target(c, 1.0, shape)), cols, rows)
        assert abs(float(back[0]) - u) < 1 and abs(float(back[1]) - v) < 1


def test_js_examples():
    gen = torch.Generator().manual_seed(3)
    p, q = random_heatmap(gen), random_heatmap(gen)
    assert float(js_divergence(p, p)) == pytest.approx(0.0, abs=1e-12)
    assert float(js_divergence(point_mass(4, 4, 0, 0), point_mass(4, 4, 3, 3))) == pytest.approx(math.log(2))
    assert float(js_divergence(p, q)) == pytest.approx(float(js_divergence(q, p)), abs=1e-15)
    assert 0 <= float(js_divergence(p, q)) <= math.log(2)


def test_js_shape_mismatch():
    with pytest.raises(HeatmapContractError):
        js_divergence(torch.ones(2, 2) / 4, torch.ones(3, 3) / 9)
