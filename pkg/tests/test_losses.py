import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from anapred.losses import (
    LossWeights,
    case_loss,
    composite_loss,
    diffusion_loss,
    soft_dice_loss,
    ssim_loss,
)
from anapred.phantom import PhantomSpec, generate_case

from oracles import diffusion_oracle, ssim_oracle


def t64(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def test_ssim_identical_is_zero():
    a = t64(np.random.default_rng(0).uniform(-1, 1, (9, 8, 7)))
    assert abs(float(ssim_loss(a, a))) <= 1e-6


def test_ssim_constant_images_closed_form():
    # 1 - C1 / (0.25 + C1) with C1 = (0.01 * 2)^2
    value = float(ssim_loss(t64(np.zeros((8, 8, 8))), t64(np.full((8, 8, 8), 0.5))))
    assert abs(value - (1 - 4e-4 / 0.2504)) <= 1e-9
    assert round(value, 6) == 0.998403


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_direct_oracle(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(3, 11, size=3))
    a = rng.uniform(-1, 1, shape)
    b = np.clip(a + rng.normal(scale=0.3, size=shape), -1, 1)
    assert abs((1 - float(ssim_loss(t64(a), t64(b)))) - ssim_oracle(a, b)) <= 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_ssim_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (2, 6, 5, 4))
    assert abs(float(ssim_loss(t64(a), t64(b))) - float(ssim_loss(t64(b), t64(a)))) <= 1e-9


def test_soft_dice_examples():
    a = np.zeros((4, 4, 4))
    b = np.zeros((4, 4, 4))
    a[:2, :2, :2] = 1
    b[1:3, :2, :2] = 1
    assert abs(float(soft_dice_loss(t64(a), t64(b))) - 0.5) <= 1e-6
    assert float(soft_dice_loss(t64(a), t64(a))) <= 1e-6
    far = np.zeros((4, 4, 4))
    far[3, 3, 3] = 1
    assert float(soft_dice_loss(t64(a), t64(far))) > 0.999


def test_diffusion_constant_and_ramp():
    assert float(diffusion_loss(t64(np.full((3, 5, 4, 3), 2.5)))) == 0.0
    ramp = np.zeros((3, 6, 5, 4))
    ramp[0] = np.arange(6)[:, None, None]
    assert abs(float(diffusion_loss(t64(ramp))) - 1 / 9) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-4, 4))
def test_diffusion_quadratic_and_oracle(seed, k):
    d = np.random.default_rng(seed).normal(size=(3, 5, 4, 3))
    base = float(diffusion_loss(t64(d)))
    assert abs(base - diffusion_oracle(d)) <= 1e-12
    assert abs(float(diffusion_loss(t64(k * d))) - k * k * base) <= 1e-9 * max(1.0, k * k * base)


def test_components_non_negative_and_breakdown_sums():
    rng = np.random.default_rng(5)
    shape = (1, 1, 8, 7, 6)
    masks = [t64(rng.random(shape) > 0.6) for _ in range(4)]
    w = LossWeights(w_image=0.7, w_gtvp=1.3, w_gtvn=0.4, lam=0.05)
    parts = composite_loss(
        t64(rng.uniform(-1, 1, shape)), masks[0], masks[1],
        t64(rng.uniform(-1, 1, shape)), masks[2], masks[3],
        t64(rng.normal(size=(1, 3) + shape[2:])), w,
    )
    assert all(float(v) >= 0 for v in parts.values())
    recombined = (w.w_image * parts["ssim"] + w.w_gtvp * parts["dice_p"]
                  + w.w_gtvn * parts["dice_n"] + w.lam * parts["diffusion"])
    assert abs(float(parts["total"] - recombined)) <= 1e-9


def test_default_weights():
    assert LossWeights() == LossWeights(1.0, 1.0, 1.0, 0.01)
    with pytest.raises(ValueError):
        LossWeights(lam=-1.0)


def test_case_loss_perfect_alignment():
    c = generate_case(PhantomSpec(shape=(32, 32, 16), body_semiaxes_mm=(25, 20, 100), gtvp_radius_mm=7,
                                  gtvn_radius_mm=5, shrink_factor=1.0, body_shrink_mm=0.0, seed=1))
    parts = case_loss(c, np.zeros((3,) + c.shape))
    assert parts["total"] < 1e-3 and parts["diffusion"] == 0.0


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="shape mismatch"):
        ssim_loss(t64(np.zeros((4, 4, 4))), t64(np.zeros((4, 4, 3))))
