"""Dense displacement warping.

Pull convention in voxel units: ``out(p) = in(p + disp(p))``.  Sampling
locations are clamped to the grid border.  Trilinear warping has an explicit
backward pass so it can sit inside the training loss; nearest-neighbour
warping (round half up per axis) is used for masks at inference.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from itertools import product
from typing import Tuple, Union

import numpy as np
import torch

from .volume import Kind, Volume


class WarpMode(str, enum.Enum):
    TRILINEAR = "trilinear"
    NEAREST = "nearest"


def _identity_grid(shape, dtype, device):
    axes = [torch.arange(n, dtype=dtype, device=device) for n in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))  # (3, H, W, D)


def _check(v: torch.Tensor, disp: torch.Tensor):
    if v.dim() != 5 or disp.dim() != 5 or disp.shape[1] != 3:
        raise ValueError(f"expected v (B,C,H,W,D) and disp (B,3,H,W,D), got {tuple(v.shape)} and {tuple(disp.shape)}")
    if v.shape[0] != disp.shape[0] or v.shape[2:] != disp.shape[2:]:
        raise ValueError(f"shape mismatch: volume {tuple(v.shape)} vs displacement {tuple(disp.shape)}")


def _cells(disp: torch.Tensor, shape):
    """Lower cell corner, upper corner, fractional offset and in-grid flag per axis."""
    loc = _identity_grid(shape, disp.dtype, disp.device).unsqueeze(0) + disp
    lo, hi, frac, inside = [], [], [], []
    for a, n in enumerate(shape):
        q_raw = loc[:, a]
        q = q_raw.clamp(0, n - 1)
        i0 = torch.floor(q).clamp(max=max(n - 2, 0)).long()
        lo.append(i0)
        hi.append((i0 + 1).clamp(max=n - 1))
        frac.append(q - i0.to(q.dtype))
        inside.append(((q_raw >= 0) & (q_raw <= n - 1)).to(q.dtype))
    return lo, hi, frac, inside


def _flat_index(ix, iy, iz, shape):
    _, W, D = shape
    return ((ix * W + iy) * D + iz).flatten(1)


def _gather(v_flat, index):
    # v_flat (B, C, N), index (B, N)
    return torch.gather(v_flat, 2, index.unsqueeze(1).expand(-1, v_flat.shape[1], -1))


def _corners(lo, hi, frac):
    """Yield (corner indices, weight, per-axis weight factors and signs) for the 8 cell corners."""
    for bits in product((0, 1), repeat=3):
        idx, factors, signs = [], [], []
        for a, b in enumerate(bits):
            idx.append(hi[a] if b else lo[a])
            factors.append(frac[a] if b else 1.0 - frac[a])
            signs.append(1.0 if b else -1.0)
        yield idx, factors, signs


def _trilinear_forward(v, disp):
    shape = tuple(v.shape[2:])
    B, C = v.shape[:2]
    lo, hi, frac, _ = _cells(disp, shape)
    v_flat = v.reshape(B, C, -1)
    out = torch.zeros_like(v_flat)
    for idx, f, _ in _corners(lo, hi, frac):
        w = (f[0] * f[1] * f[2]).flatten(1).unsqueeze(1)
        out = out + w * _gather(v_flat, _flat_index(*idx, shape))
    return out.reshape(v.shape)


def warp_backward(grad_out: torch.Tensor, v: torch.Tensor, disp: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Exact gradients of trilinear warping w.r.t. the source values and the displacement.

    At integer sampling locations the cell whose lower corner is ``floor(q)``
    supplies the one-sided derivative; clamped (out-of-grid) locations get zero
    displacement gradient.
    """
    _check(v, disp)
    shape = tuple(v.shape[2:])
    B, C = v.shape[:2]
    lo, hi, frac, inside = _cells(disp, shape)
    v_flat = v.reshape(B, C, -1)
    g_flat = grad_out.reshape(B, C, -1)
    grad_v = torch.zeros_like(v_flat)
    dq = [torch.zeros_like(g_flat) for _ in range(3)]
    for idx, f, s in _corners(lo, hi, frac):
        index = _flat_index(*idx, shape)
        f = [fa.flatten(1).unsqueeze(1) for fa in f]
        grad_v.scatter_add_(2, index.unsqueeze(1).expand(-1, C, -1), f[0] * f[1] * f[2] * g_flat)
        corner = _gather(v_flat, index)
        dq[0] = dq[0] + s[0] * f[1] * f[2] * corner
        dq[1] = dq[1] + s[1] * f[0] * f[2] * corner
        dq[2] = dq[2] + s[2] * f[0] * f[1] * corner
    grad_disp = torch.stack(
        [(g_flat * dq[a]).sum(1).reshape(B, *shape) * inside[a] for a in range(3)], dim=1
    )
    return grad_v.reshape(v.shape), grad_disp


class _TrilinearWarp(torch.autograd.Function):
    @staticmethod
    def forward(ctx, v, disp):
        ctx.save_for_backward(v, disp)
        return _trilinear_forward(v, disp)

    @staticmethod
    def backward(ctx, grad_out):
        v, disp = ctx.saved_tensors
        grad_v, grad_disp = warp_backward(grad_out.contiguous(), v, disp)
        return (grad_v if ctx.needs_input_grad[0] else None,
                grad_disp if ctx.needs_input_grad[1] else None)


def _nearest_forward(v, disp):
    shape = tuple(v.shape[2:])
    B, C = v.shape[:2]
    loc = _identity_grid(shape, disp.dtype, disp.device).unsqueeze(0) + disp
    idx = [torch.floor(loc[:, a] + 0.5).clamp(0, n - 1).long() for a, n in enumerate(shape)]
    return _gather(v.reshape(B, C, -1), _flat_index(*idx, shape)).reshape(v.shape)


def warp_tensor(v: torch.Tensor, disp: torch.Tensor, mode: Union[WarpMode, str] = WarpMode.TRILINEAR) -> torch.Tensor:
    """Warp a batch ``v`` (B, C, H, W, D) by ``disp`` (B, 3, H, W, D)."""
    _check(v, disp)
    if not torch.isfinite(disp).all():
        raise ValueError("non-finite displacement")
    if WarpMode(mode) is WarpMode.NEAREST:
        return _nearest_forward(v, disp.detach())
    return _TrilinearWarp.apply(v, disp)


def warp(v: Union[Volume, np.ndarray], disp: np.ndarray, mode: Union[WarpMode, str, None] = None):
    """Warp a Volume or a 3D array by a (3, H, W, D) displacement array.

    ``mode`` defaults to nearest for masks and trilinear otherwise.  Returns the
    same type as ``v``.
    """
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    disp = np.asarray(disp)
    if disp.shape != (3,) + data.shape:
        raise ValueError(f"shape mismatch: volume {data.shape} vs displacement {disp.shape}")
    if mode is None:
        mode = WarpMode.NEAREST if isinstance(v, Volume) and v.kind is Kind.MASK else WarpMode.TRILINEAR
    with torch.no_grad():
        out = warp_tensor(
            torch.from_numpy(data.astype(np.float64))[None, None],
            torch.from_numpy(disp.astype(np.float64))[None],
            mode,
        )[0, 0].numpy()
    if isinstance(v, Volume):
        return v.with_data(out.astype(np.float32))
    return out.astype(data.dtype, copy=False)


@dataclass
class Prediction:
    """Predicted follow-up anatomy: deformed baseline image and masks plus the field used."""

    image: Volume
    gtvp: Volume
    gtvn: Volume
    dvf: np.ndarray  # (3, H, W, D) voxel units


def predict_anatomy(c, disp: np.ndarray, sel=None) -> Prediction:
    """Deform the baseline selected by ``sel`` (default CBCT01) of case bundle ``c``.

    The image is warped trilinearly and the masks by nearest neighbour, so
    predicted masks stay binary.
    """
    if sel is None:
        from .dataset import InputSelection

        sel = InputSelection()
    image, gtvp, gtvn = c.baseline(sel)
    disp = np.asarray(disp)
    return Prediction(
        image=warp(image, disp, WarpMode.TRILINEAR),
        gtvp=warp(gtvp, disp, WarpMode.NEAREST),
        gtvn=warp(gtvn, disp, WarpMode.NEAREST),
        dvf=disp.astype(np.float32),
    )
