import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from anima4d.encoding import (Grid4D, HexPlaneEncoding, MultiScaleGrid3D, build_layout,
                              lift_static_to_dynamic, make_hexplane, make_static_grid,
                              time_weights)
from anima4d.errors import InvalidInputError


def _grid4d(rng, time_slices=3, feature_dim=2):
    layout = build_layout(levels=2, min_res=4, max_res=8,
                          dense_threshold=8, hash_table_size=64)
    table = torch.tensor(rng.standard_normal((time_slices * layout.total_rows, feature_dim)))
    return Grid4D(layout, feature_dim, time_slices, table)


# --- time interpolation ---------------------------------------------------

def test_time_weights_examples():
    i0, i1, w = time_weights(0.37, 5)
    assert (i0, i1) == (1, 2)
    assert w == pytest.approx(0.48, abs=1e-12)
    assert time_weights(0.25, 5) == (1, 1, 0.0)  # exactly on a slice center
    assert time_weights(0.5, 2) == (0, 1, 0.5)


def test_time_weights_edges_and_clamping():
    assert time_weights(0.0, 4) == (0, 0, 0.0)
    assert time_weights(1.0, 4) == (3, 3, 0.0)
    assert time_weights(-0.7, 4) == (0, 0, 0.0)
    assert time_weights(1.7, 4) == (3, 3, 0.0)
    assert time_weights(0.9, 1) == (0, 0, 0.0)


def test_time_weights_centers_exact():
    for T in range(2, 7):
        for i in range(T):
            assert time_weights(i / (T - 1), T) == (i, i, 0.0)


def test_time_weights_nan_rejected():
    with pytest.raises(InvalidInputError):
        time_weights(float("nan"), 4)


def test_blend_piecewise_linear_in_time():
    rng = np.random.default_rng(11)
    grid = _grid4d(rng, time_slices=4)
    slices = [grid.time_slice(i) for i in range(4)]
    pts = rng.random((1000, 3))
    ts = rng.random(1000)
    for k in range(1000):
        x, y, z = pts[k]
        i0, i1, w = time_weights(float(ts[k]), 4)
        got = grid.interpolate(x, y, z, float(ts[k]))
        f0 = slices[i0].interpolate(x, y, z)
        f1 = slices[i1].interpolate(x, y, z)
        want = f0 + w * (f1 - f0)
        assert torch.allclose(got, want, atol=1e-6)


def test_lookup_differentiable_wrt_table():
    rng = np.random.default_rng(12)
    grid = _grid4d(rng)
    grid.table.requires_grad_(True)
    out = grid.interpolate(0.3, 0.4, 0.5, t=0.37)
    out.sum().backward()
    assert grid.table.grad is not None
    assert float(grid.table.grad.abs().sum()) > 0


def test_coords_clamped_to_unit_cube():
    rng = np.random.default_rng(13)
    grid = _grid4d(rng)
    a = grid.interpolate(-0.5, 0.2, 1.8, t=0.0)
    b = grid.interpolate(0.0, 0.2, 1.0, t=0.0)
    assert torch.equal(a, b)


def test_nan_coords_rejected():
    rng = np.random.default_rng(14)
    grid = _grid4d(rng)
    with pytest.raises(InvalidInputError):
        grid.interpolate(float("nan"), 0.5, 0.5, t=0.0)
    with pytest.raises(InvalidInputError):
        grid.interpolate(0.5, 0.5, 0.5, t=float("nan"))


def test_time_slice_bounds_checked():
    rng = np.random.default_rng(15)
    grid = _grid4d(rng, time_slices=3)
    with pytest.raises(InvalidInputError):
        grid.time_slice(3)
    with pytest.raises(InvalidInputError):
        grid.time_slice(-1)


def test_time_slice_is_a_view():
    rng = np.random.default_rng(16)
    grid = _grid4d(rng, time_slices=2)
    s1 = grid.time_slice(1)
    with torch.no_grad():
        grid.table[grid.layout.total_rows] += 5.0
    assert float(s1.table[0, 0]) == float(grid.table[grid.layout.total_rows, 0])


# --- temporal smoothness --------------------------------------------------

def test_tv_identical_slices_is_zero():
    layout = build_layout(2, 4, 8, 8, 64)
    base = torch.randn(layout.total_rows, 2, generator=torch.Generator().manual_seed(0))
    grid = Grid4D(layout, 2, 3, base.repeat(3, 1))
    assert float(grid.tv_loss()) == 0.0


def test_tv_single_entry_diff_squares():
    layout = build_layout(2, 4, 8, 8, 64)
    table = torch.zeros(2 * layout.total_rows, 2)
    table[layout.total_rows + 7, 1] = 3.0  # slice 1 differs from slice 0 by 3 in one entry
    grid = Grid4D(layout, 2, 2, table)
    assert float(grid.tv_loss()) == 9.0


def test_tv_three_slices_brute_force():
    rng = np.random.default_rng(17)
    layout = build_layout(2, 4, 8, 8, 64)
    vals = rng.standard_normal((3 * layout.total_rows, 2))
    grid = Grid4D(layout, 2, 3, torch.tensor(vals))
    per_slice = vals.reshape(3, -1)
    want = ((per_slice[1] - per_slice[0]) ** 2).sum() + ((per_slice[2] - per_slice[1]) ** 2).sum()
    assert float(grid.tv_loss()) == pytest.approx(want, rel=1e-12)


def test_tv_single_slice_is_zero():
    rng = np.random.default_rng(18)
    grid = _grid4d(rng, time_slices=1)
    assert float(grid.tv_loss()) == 0.0


# --- static -> dynamic lift -----------------------------------------------

def test_lift_reproduces_static_values_bitwise():
    rng = np.random.default_rng(19)
    static = make_static_grid(2, 4, 8, 2, 8, 64, rng, torch.float64)
    dyn = lift_static_to_dynamic(static, 5)
    qrng = np.random.default_rng(20)
    for _ in range(8):
        x, y, z, t = qrng.random(4)
        a = static.interpolate(x, y, z).detach()
        b = dyn.interpolate(x, y, z, t=float(t)).detach()
        assert torch.equal(a, b)
    assert float(dyn.tv_loss().detach()) == 0.0


def test_lift_makes_an_independent_leaf():
    rng = np.random.default_rng(21)
    static = make_static_grid(2, 4, 8, 2, 8, 64, rng, torch.float64)
    dyn = lift_static_to_dynamic(static, 3)
    assert dyn.table.is_leaf and dyn.table.requires_grad
    with torch.no_grad():
        dyn.table[0, 0] += 1.0
    assert float(static.table[0, 0].detach()) != float(dyn.table[0, 0].detach())


def test_lift_rejects_bad_slice_count():
    rng = np.random.default_rng(22)
    static = make_static_grid(2, 4, 8, 2, 8, 64, rng, torch.float64)
    with pytest.raises(InvalidInputError):
        lift_static_to_dynamic(static, 0)


# --- six-plane factorized encoding ----------------------------------------

def _hexplane_table(resolutions, feature_dim, fill=1.0):
    rows = sum(int(r) ** 2 for r in resolutions for _ in range(6))
    return torch.full((rows, feature_dim), float(fill), dtype=torch.float64)


def test_hexplane_all_ones_gives_ones():
    enc = HexPlaneEncoding(np.array([4, 8]), 2, _hexplane_table([4, 8], 2))
    out = enc.interpolate(0.3, 0.7, 0.2, t=0.6)
    assert torch.allclose(out, torch.ones(4, dtype=torch.float64), atol=1e-12)


def test_hexplane_zeroed_plane_zeros_its_level():
    table = _hexplane_table([4, 8], 2)
    table[: 16] = 0.0  # first plane of level 0
    enc = HexPlaneEncoding(np.array([4, 8]), 2, table)
    out = enc.interpolate(0.3, 0.7, 0.2, t=0.6)
    assert torch.allclose(out[:2], torch.zeros(2, dtype=torch.float64), atol=1e-12)
    assert torch.allclose(out[2:], torch.ones(2, dtype=torch.float64), atol=1e-12)


def test_hexplane_constant_planes_multiply():
    consts = [1.0, 2.0, 3.0, 0.5, 2.0, 1.5]
    table = _hexplane_table([4], 1)
    for p, c in enumerate(consts):
        table[16 * p: 16 * (p + 1)] = c
    enc = HexPlaneEncoding(np.array([4]), 1, table)
    out = enc.interpolate(0.3, 0.7, 0.2, t=0.6)
    assert float(out[0]) == pytest.approx(np.prod(consts), rel=1e-12)


def test_hexplane_initial_fusion_is_time_invariant():
    rng = np.random.default_rng(23)
    enc = make_hexplane(2, 4, 8, 2, rng, torch.float64)
    a = enc.interpolate(0.3, 0.7, 0.2, t=0.0).detach()
    for t in (0.25, 0.5, 1.0):
        b = enc.interpolate(0.3, 0.7, 0.2, t=t).detach()
        assert torch.equal(a, b)


def test_hexplane_tv_is_zero():
    rng = np.random.default_rng(24)
    enc = make_hexplane(2, 4, 8, 2, rng, torch.float64)
    assert float(enc.tv_loss()) == 0.0


def test_hexplane_nan_rejected():
    rng = np.random.default_rng(25)
    enc = make_hexplane(2, 4, 8, 2, rng, torch.float64)
    with pytest.raises(InvalidInputError):
        enc.interpolate(0.5, 0.5, float("nan"), t=0.2)
    with pytest.raises(InvalidInputError):
        enc.interpolate(0.5, 0.5, 0.5, t=float("nan"))


@given(st.floats(0.0, 1.0), st.integers(2, 8))
def test_time_weights_blend_is_convex(t, T):
    i0, i1, w = time_weights(t, T)
    assert 0 <= i0 <= i1 < T
    assert i1 - i0 <= 1
    assert 0.0 <= w < 1.0
