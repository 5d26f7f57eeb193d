"""3D patch embedding, patch merging and shifted-window transformer blocks.

Token grids are channel-last tensors (B, X, Y, Z, C).
"""
from __future__ import annotations

from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

MASK_VALUE = -1e4  # exp() underflows to exactly 0 in float32 and float64


class PatchEmbed(nn.Module):
    """Shared affine projection of non-overlapping (px, py, pz) patches of all input channels."""

    def __init__(self, in_channels: int, embed_dim: int, patch_size: Sequence[int]):
        super().__init__()
        self.patch_size = tuple(patch_size)
        self.proj = nn.Conv3d(in_channels, embed_dim, kernel_size=self.patch_size, stride=self.patch_size)

    def forward(self, x):
        for n, p in zip(x.shape[2:], self.patch_size):
            if n % p:
                raise ValueError(f"input shape {tuple(x.shape[2:])} not divisible by patch size {self.patch_size}")
        return self.proj(x).permute(0, 2, 3, 4, 1)


class PatchMerging(nn.Module):
    """Concatenate each 2x2x2 neighbourhood (8k features) and project to 2k.

    Odd grid axes are padded with zero tokens at the high end.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.reduction = nn.Linear(8 * dim, 2 * dim)

    def forward(self, x):
        X, Y, Z = x.shape[1:4]
        x = F.pad(x, (0, 0, 0, Z % 2, 0, Y % 2, 0, X % 2))
        parts = [x[:, i::2, j::2, k::2] for i in (0, 1) for j in (0, 1) for k in (0, 1)]
        return self.reduction(torch.cat(parts, dim=-1))


def window_partition(x, window: Tuple[int, int, int]):
    B, X, Y, Z, C = x.shape
    wx, wy, wz = window
    x = x.view(B, X // wx, wx, Y // wy, wy, Z // wz, wz, C)
    return x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, wx * wy * wz, C)


def window_reverse(windows, window: Tuple[int, int, int], grid: Tuple[int, int, int], batch: int):
    wx, wy, wz = window
    X, Y, Z = grid
    x = windows.view(batch, X // wx, Y // wy, Z // wz, wx, wy, wz, -1)
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(batch, X, Y, Z, -1)


def relative_position_index(window: Sequence[int], table_window: Sequence[int]) -> torch.Tensor:
    """Index into a bias table sized for ``table_window`` for every pair of tokens in ``window``."""
    coords = torch.stack(torch.meshgrid(*[torch.arange(w) for w in window], indexing="ij")).flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]
    tx, ty, tz = table_window
    rel = rel + torch.tensor([tx - 1, ty - 1, tz - 1]).view(3, 1, 1)
    return rel[0] * (2 * ty - 1) * (2 * tz - 1) + rel[1] * (2 * tz - 1) + rel[2]


class WindowAttention(nn.Module):
    """Multi-head self-attention within a window, with a learned relative position bias."""

    def __init__(self, dim: int, heads: int, window: Sequence[int]):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.window = tuple(window)
        self.scale = (dim // heads) ** -0.5
        size = 1
        for w in self.window:
            size *= 2 * w - 1
        self.relative_position_bias_table = nn.Parameter(torch.zeros(size, heads))
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self._index_cache = {}
        self.record_attention = False
        self.last_attention: Optional[torch.Tensor] = None

    def _bias(self, window):
        key = tuple(window)
        if key not in self._index_cache:
            self._index_cache[key] = relative_position_index(window, self.window)
        idx = self._index_cache[key]
        n = idx.shape[0]
        bias = self.relative_position_bias_table[idx.reshape(-1)].view(n, n, self.heads)
        return bias.permute(2, 0, 1)

    def forward(self, x, window, mask=None):
        """x: (nW*B, N, C); mask: (nW, N, N) additive or None."""
        Bw, N, C = x.shape
        qkv = self.qkv(x).reshape(Bw, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn + self._bias(window).unsqueeze(0)
        if mask is not None:
            nW = mask.shape[0]
            attn = attn.view(Bw // nW, nW, self.heads, N, N) + mask[None, :, None]
            attn = attn.view(Bw, self.heads, N, N)
        attn = attn.softmax(dim=-1)
        if self.record_attention:
            self.last_attention = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(Bw, N, C)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def _region_ids(n: int, w: int, s: int) -> torch.Tensor:
    ids = torch.zeros(n, dtype=torch.long)
    if s:
        ids[n - w:n - s] = 1
        ids[n - s:] = 2
    return ids


class SwinBlock(nn.Module):
    """Pre-norm windowed attention and MLP, each with a residual connection.

    Axes no larger than the window use a single window without shifting;
    other axes are zero-padded to a window multiple and pad tokens are
    masked out as keys.
    """

    def __init__(self, dim: int, heads: int, window: Sequence[int], shifted: bool, mlp_ratio: float = 4.0):
        super().__init__()
        self.window = tuple(window)
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, self.window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def geometry(self, grid):
        window = tuple(min(w, n) for w, n in zip(self.window, grid))
        shift = tuple(w // 2 if self.shifted and n > w else 0 for w, n in zip(window, grid))
        padded = tuple(-(-n // w) * w for n, w in zip(grid, window))
        return window, shift, padded

    def attention_mask(self, grid, device, dtype):
        window, shift, padded = self.geometry(grid)
        has_pad = padded != tuple(grid)
        if not has_pad and not any(shift):
            return None
        ax = [_region_ids(n, w, s) for n, w, s in zip(padded, window, shift)]
        region = (ax[0].view(-1, 1, 1) * 9 + ax[1].view(1, -1, 1) * 3 + ax[2].view(1, 1, -1)).float()
        is_pad = torch.ones(padded, dtype=torch.bool)
        is_pad[: grid[0], : grid[1], : grid[2]] = False
        is_pad = torch.roll(is_pad, shifts=tuple(-s for s in shift), dims=(0, 1, 2))
        region_w = window_partition(region[None, ..., None], window).squeeze(-1)  # (nW, N)
        pad_w = window_partition(is_pad[None, ..., None].float(), window).squeeze(-1) > 0
        blocked = (region_w[:, :, None] != region_w[:, None, :]) | pad_w[:, None, :]
        mask = torch.zeros(blocked.shape, dtype=dtype)
        mask[blocked] = MASK_VALUE
        return mask.to(device)

    def forward(self, x):
        B, X, Y, Z, C = x.shape
        grid = (X, Y, Z)
        window, shift, padded = self.geometry(grid)
        h = self.norm1(x)
        h = F.pad(h, (0, 0, 0, padded[2] - Z, 0, padded[1] - Y, 0, padded[0] - X))
        if any(shift):
            h = torch.roll(h, shifts=tuple(-s for s in shift), dims=(1, 2, 3))
        mask = self.attention_mask(grid, x.device, x.dtype)
        h = self.attn(window_partition(h, window), window, mask)
        h = window_reverse(h, window, padded, B)
        if any(shift):
            h = torch.roll(h, shifts=shift, dims=(1, 2, 3))
        h = h[:, :X, :Y, :Z].contiguous()
        x = x + h
        return x + self.mlp(self.norm2(x))


class SwinStage(nn.Module):
    """Optional patch merging followed by ``depth`` blocks alternating regular/shifted windows."""

    def __init__(self, dim: int, depth: int, heads: int, window, mlp_ratio: float, merge_from: Optional[int] = None):
        super().__init__()
        self.merge = PatchMerging(merge_from) if merge_from is not None else None
        self.blocks = nn.ModuleList(
            [SwinBlock(dim, heads, window, shifted=bool(i % 2), mlp_ratio=mlp_ratio) for i in range(depth)]
        )

    def forward(self, x):
        if self.merge is not None:
            x = self.merge(x)
        for blk in self.blocks:
            x = blk(x)
        return x


class VitBlock(nn.Module):
    """Plain pre-norm transformer block with global self-attention over all tokens."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))
