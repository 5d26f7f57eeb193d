"""Training objective: SSIM image loss, soft Dice mask loss and DVF diffusion penalty.

All functions take torch tensors shaped (H, W, D) or (B, C, H, W, D).  With
``reduce=False`` the batched forms return one value per case.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Dict

import torch
import torch.nn.functional as F

from .warp import WarpMode, warp_tensor

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_DATA_RANGE = 2.0
SSIM_C1 = (0.01 * SSIM_DATA_RANGE) ** 2
SSIM_C2 = (0.03 * SSIM_DATA_RANGE) ** 2
DICE_EPS = 1e-5


@dataclass(frozen=True)
class LossWeights:
    w_image: float = 1.0
    w_gtvp: float = 1.0
    w_gtvn: float = 1.0
    lam: float = 0.01

    def __post_init__(self):
        if min(self.w_image, self.w_gtvp, self.w_gtvn, self.lam) < 0:
            raise ValueError("loss weights must be non-negative")

    def to_json(self) -> dict:
        return asdict(self)


def _as5d(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        return x[None, None]
    if x.dim() != 5:
        raise ValueError(f"expected a (H,W,D) or (B,C,H,W,D) tensor, got shape {tuple(x.shape)}")
    return x


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def gaussian_kernel1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64):
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    k = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    return (k / k.sum()).to(dtype)


def _gaussian_filter(x: torch.Tensor) -> torch.Tensor:
    """Separable Gaussian smoothing of (N, 1, H, W, D) with edge replication."""
    k = gaussian_kernel1d(dtype=x.dtype).tolist()
    r = SSIM_WINDOW // 2
    x = F.pad(x, (r, r, r, r, r, r), mode="replicate")
    for axis in (2, 3, 4):
        n = x.shape[axis] - 2 * r
        acc = k[0] * x.narrow(axis, 0, n)
        for i in range(1, SSIM_WINDOW):
            acc = acc + k[i] * x.narrow(axis, i, n)
        x = acc
    return x


def ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Local SSIM at every voxel (Gaussian window 7, sigma 1.5, data range 2)."""
    a, b = _as5d(a), _as5d(b)
    _check_pair(a, b)
    B, C = a.shape[:2]
    a = a.reshape(B * C, 1, *a.shape[2:])
    b = b.reshape(B * C, 1, *b.shape[2:])
    stats = _gaussian_filter(torch.cat([a, b, a * a, b * b, a * b], dim=0))
    mu_a, mu_b, aa, bb, ab = stats.split(B * C)
    var_a = aa - mu_a ** 2
    var_b = bb - mu_b ** 2
    cov = ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).reshape(B, C, *a.shape[2:])


def ssim_loss(pred: torch.Tensor, target: torch.Tensor, reduce: bool = True) -> torch.Tensor:
    per_case = 1.0 - ssim_map(pred, target).flatten(1).mean(1)
    return per_case.mean() if reduce else per_case


def soft_dice_loss(a: torch.Tensor, b: torch.Tensor, reduce: bool = True) -> torch.Tensor:
    a, b = _as5d(a), _as5d(b)
    _check_pair(a, b)
    a, b = a.flatten(1), b.flatten(1)
    per_case = 1.0 - (2.0 * (a * b).sum(1) + DICE_EPS) / (a.sum(1) + b.sum(1) + DICE_EPS)
    return per_case.mean() if reduce else per_case


def diffusion_loss(disp: torch.Tensor, reduce: bool = True) -> torch.Tensor:
    """Mean squared forward difference of each displacement component along each axis.

    ``disp`` is (3, H, W, D) or (B, 3, H, W, D).  The nine component/direction
    terms are averaged; each term is a mean over the voxels that have a forward
    neighbour along that direction.
    """
    if disp.dim() == 4:
        disp = disp[None]
    B = disp.shape[0]
    total = disp.new_zeros(B)
    for axis in (2, 3, 4):
        if disp.shape[axis] < 2:
            continue
        d = disp.narrow(axis, 1, disp.shape[axis] - 1) - disp.narrow(axis, 0, disp.shape[axis] - 1)
        total = total + (d ** 2).flatten(2).mean(2).sum(1)
    per_case = total / 9.0
    return per_case.mean() if reduce else per_case


def composite_loss(
    base_image: torch.Tensor,
    base_gtvp: torch.Tensor,
    base_gtvn: torch.Tensor,
    target_image: torch.Tensor,
    target_gtvp: torch.Tensor,
    target_gtvn: torch.Tensor,
    disp: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> Dict[str, torch.Tensor]:
    """Weighted similarity + smoothness objective, averaged over the batch.

    All volume arguments are (B, 1, H, W, D); ``disp`` is (B, 3, H, W, D).
    Masks are warped trilinearly so the Dice terms have displacement gradients.
    Returns a dict with ``total`` and the unweighted components ``ssim``,
    ``dice_p``, ``dice_n`` and ``diffusion``.
    """
    for t in (target_image, target_gtvp, target_gtvn):
        if t is None:
            raise ValueError("composite loss needs targets")
    moved = warp_tensor(torch.cat([base_image, base_gtvp, base_gtvn], dim=1), disp, WarpMode.TRILINEAR)
    parts = {
        "ssim": ssim_loss(moved[:, 0:1], target_image),
        "dice_p": soft_dice_loss(moved[:, 1:2], target_gtvp),
        "dice_n": soft_dice_loss(moved[:, 2:3], target_gtvn),
        "diffusion": diffusion_loss(disp),
    }
    total = (
        weights.w_image * parts["ssim"]
        + weights.w_gtvp * parts["dice_p"]
        + weights.w_gtvn * parts["dice_n"]
        + weights.lam * parts["diffusion"]
    )
    if not math.isfinite(float(total.detach())):
        raise FloatingPointError(f"non-finite loss: { {k: float(v.detach()) for k, v in parts.items()} }")
    return {"total": total, **parts}


def case_loss(c, disp, weights: LossWeights = LossWeights(), sel=None) -> Dict[str, float]:
    """Composite loss of one case bundle ``c`` under a (3, H, W, D) displacement array.

    Evaluated in float64 on the bundle's data as stored (no normalisation).
    ``sel`` picks the baseline that gets deformed (default CBCT01).
    """
    if not c.has_targets:
        raise ValueError(f"{c.case_id}: composite loss needs targets")
    image, gtvp, gtvn = c.baseline(sel) if sel is not None else (c.cbct01, c.gtvp01, c.gtvn01)

    def t(v):
        return torch.from_numpy(v.data.astype("float64"))[None, None]

    d = torch.as_tensor(disp, dtype=torch.float64)[None]
    with torch.no_grad():
        parts = composite_loss(t(image), t(gtvp), t(gtvn), t(c.cbct21), t(c.gtvp21), t(c.gtvn21), d, weights)
    return {k: float(v) for k, v in parts.items()}
