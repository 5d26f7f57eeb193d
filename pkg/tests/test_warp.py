import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from anapred.dataset import Baseline, InputSelection
from anapred.volume import Kind, Volume
from anapred.warp import WarpMode, predict_anatomy, warp, warp_backward, warp_tensor

from oracles import warp_point_oracle


def ramp_x(shape=(8, 5, 4)):
    return np.broadcast_to(np.arange(shape[0], dtype=np.float64)[:, None, None], shape).copy()


@pytest.mark.parametrize("mode", list(WarpMode))
def test_zero_field_is_identity(mode):
    v = np.random.default_rng(0).normal(size=(7, 6, 5))
    out = warp(v, np.zeros((3, 7, 6, 5)), mode)
    assert np.max(np.abs(out - v)) <= 1e-6


@pytest.mark.parametrize("mode", list(WarpMode))
def test_integer_shift_equals_array_shift(mode):
    v = np.random.default_rng(1).normal(size=(8, 6, 5))
    disp = np.zeros((3, 8, 6, 5))
    disp[0] = -1.0
    disp[2] = 2.0
    out = warp(v, disp, mode)
    xi = np.clip(np.arange(8) - 1, 0, 7)
    zi = np.clip(np.arange(5) + 2, 0, 4)
    assert np.array_equal(out, v[xi][:, :, zi])


def test_integer_shift_on_ramp_interior():
    disp = np.zeros((3, 8, 5, 4))
    disp[0] = -1.0
    out = warp(ramp_x(), disp)
    assert np.array_equal(out[1:], ramp_x()[1:] - 1)


def test_half_voxel_value_and_gradient():
    v = torch.zeros((1, 1, 3, 1, 1), dtype=torch.float64)
    v[0, 0, 1] = 10.0
    disp = torch.zeros((1, 3, 3, 1, 1), dtype=torch.float64)
    disp[0, 0, 1] = -0.5
    out = warp_tensor(v, disp)
    assert abs(float(out[0, 0, 1]) - 5.0) <= 1e-6
    _, g = warp_backward(torch.ones_like(v), v, disp)
    assert abs(float(g[0, 0, 1]) - 10.0) <= 1e-12


def test_value_gradient_of_identity_is_one():
    v = torch.rand((1, 1, 5, 4, 3), dtype=torch.float64)
    gv, _ = warp_backward(torch.ones_like(v), v, torch.zeros((1, 3, 5, 4, 3), dtype=torch.float64))
    assert torch.all(gv == 1.0)


def test_matches_pointwise_oracle():
    rng = np.random.default_rng(3)
    v = rng.normal(size=(6, 5, 4))
    disp = rng.normal(scale=2.0, size=(3, 6, 5, 4))
    out = warp(v, disp, WarpMode.TRILINEAR)
    for p in np.ndindex(v.shape):
        assert abs(out[p] - warp_point_oracle(v, disp, p)) <= 1e-12


def test_nearest_rounds_half_up():
    v = np.arange(4, dtype=np.float64).reshape(4, 1, 1)
    disp = np.zeros((3, 4, 1, 1))
    disp[0] = 0.5
    assert warp(v, disp, WarpMode.NEAREST).ravel().tolist() == [1, 2, 3, 3]
    disp[0] = -0.5
    assert warp(v, disp, WarpMode.NEAREST).ravel().tolist() == [0, 1, 2, 3]


def test_gradients_match_torch_autograd_reference():
    # dual route: hand-written backward vs autograd through an independent differentiable sampler
    rng = np.random.default_rng(4)
    v = torch.from_numpy(rng.normal(size=(1, 2, 6, 5, 4)))
    disp = torch.from_numpy(rng.normal(scale=1.5, size=(1, 3, 6, 5, 4)))
    g = torch.from_numpy(rng.normal(size=(1, 2, 6, 5, 4)))
    gv, gd = warp_backward(g, v, disp)

    v2 = v.clone().requires_grad_(True)
    d2 = disp.clone().requires_grad_(True)
    shape = v.shape[2:]
    grid = torch.stack(torch.meshgrid(*[torch.arange(n, dtype=torch.float64) for n in shape], indexing="ij"))
    q = [(grid[a] + d2[0, a]).clamp(0, shape[a] - 1) for a in range(3)]
    lo = [torch.floor(q[a]).clamp(max=shape[a] - 2).detach().long() for a in range(3)]
    out = 0
    for bits in np.ndindex(2, 2, 2):
        w = 1
        idx = []
        for a in range(3):
            f = q[a] - lo[a]
            w = w * (f if bits[a] else 1 - f)
            idx.append(lo[a] + bits[a])
        out = out + w * v2[0][:, idx[0], idx[1], idx[2]]
    (out * g[0]).sum().backward()
    assert torch.allclose(gv, v2.grad, atol=1e-12)
    assert torch.allclose(gd, d2.grad, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.1, 4.0))
def test_trilinear_is_convex(seed, scale):
    rng = np.random.default_rng(seed)
    v = rng.uniform(-3, 5, size=(5, 4, 3))
    out = warp(v, rng.normal(scale=scale, size=(3, 5, 4, 3)), WarpMode.TRILINEAR)
    assert out.min() >= v.min() - 1e-12 and out.max() <= v.max() + 1e-12


def test_shape_mismatch_and_non_finite_rejected():
    with pytest.raises(ValueError, match="shape mismatch"):
        warp(np.zeros((4, 4, 4)), np.zeros((3, 4, 4, 3)))
    disp = np.zeros((3, 4, 4, 4))
    disp[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        warp(np.zeros((4, 4, 4)), disp)


def test_mask_volume_defaults_to_nearest():
    m = Volume(np.eye(4)[:, :, None].repeat(2, 2), (1, 1, 1), (0, 0, 0), Kind.MASK)
    disp = np.full((3, 4, 4, 2), 0.3)
    out = warp(m, disp)
    assert out.kind is Kind.MASK and set(np.unique(out.data)) <= {0.0, 1.0}


def test_predict_anatomy_zero_field(small_case):
    p = predict_anatomy(small_case, np.zeros((3,) + small_case.shape))
    assert p.image == small_case.cbct01 and p.gtvp == small_case.gtvp01 and p.gtvn == small_case.gtvn01


def test_predict_anatomy_ct_baseline_and_binary_masks(small_case):
    p = predict_anatomy(small_case, small_case.gt_dvf, InputSelection(baseline=Baseline.CT))
    assert np.array_equal(p.image.data, warp(small_case.ct, small_case.gt_dvf, WarpMode.TRILINEAR).data)
    for m in (p.gtvp, p.gtvn):
        assert m.kind is Kind.MASK and set(np.unique(m.data)) <= {0.0, 1.0}
    assert p.dvf.dtype == np.float32 and p.dvf.shape == (3,) + small_case.shape
