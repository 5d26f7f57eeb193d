"""Displacement-predicting network: transformer (or CNN) encoder + convolutional decoder.

The network maps the 7-channel input stack to a 3-channel voxel-unit
displacement field at input resolution.  The final convolution is zero
initialised, so an untrained network predicts the identity deformation.
"""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .losses import LossWeights, composite_loss
from .swin import PatchEmbed, SwinStage, VitBlock
from .volume import PathLike, atomic_write_bytes

LEAKY_SLOPE = 0.01


class EncoderKind(str, enum.Enum):
    SWIN = "SwinHierarchical"
    VIT = "PlainViT"
    CONV = "ConvPyramid"


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 7
    patch_size: Tuple[int, int, int] = (4, 4, 2)
    embed_dim: int = 96
    depths: Tuple[int, ...] = (2, 2, 4, 2)
    heads: Tuple[int, ...] = (4, 4, 8, 8)
    window: Tuple[int, int, int] = (5, 5, 5)
    mlp_ratio: float = 4.0
    encoder_kind: EncoderKind = EncoderKind.SWIN
    dvf_channels: int = 3
    input_shape: Tuple[int, int, int] = (128, 128, 32)
    decoder_channels: int = 0  # width of the half/full-resolution conv paths; 0 means embed_dim // 2

    def __post_init__(self):
        for name in ("patch_size", "depths", "heads", "window", "input_shape"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        object.__setattr__(self, "encoder_kind", EncoderKind(self.encoder_kind))
        if len(self.depths) != len(self.heads) or not self.depths:
            raise ValueError("depths and heads must be non-empty and of equal length")
        for s, h in enumerate(self.heads):
            if (self.embed_dim * 2 ** s) % h:
                raise ValueError(f"stage {s} dim {self.embed_dim * 2 ** s} not divisible by {h} heads")
        for n, p in zip(self.input_shape, self.patch_size):
            if n % p:
                raise ValueError(f"input shape {self.input_shape} not divisible by patch size {self.patch_size}")
        if self.dvf_channels != 3:
            raise ValueError("dvf_channels must be 3")

    @property
    def n_stages(self) -> int:
        return len(self.depths)

    @property
    def token_grid(self) -> Tuple[int, int, int]:
        return tuple(n // p for n, p in zip(self.input_shape, self.patch_size))

    @property
    def conv_channels(self) -> int:
        return self.decoder_channels or max(self.embed_dim // 2, 4)

    def stage_grids(self) -> List[Tuple[int, int, int]]:
        grids = [self.token_grid]
        for _ in range(1, self.n_stages):
            grids.append(tuple(-(-n // 2) for n in grids[-1]))
        return grids

    def stage_dims(self) -> List[int]:
        return [self.embed_dim * 2 ** s for s in range(self.n_stages)]

    def to_json(self) -> dict:
        d = asdict(self)
        d["encoder_kind"] = self.encoder_kind.value
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)


TINY_CONFIG = ModelConfig(embed_dim=8, depths=(1, 1), heads=(2, 2), input_shape=(16, 16, 8))


def _conv(cin, cout):
    return nn.Sequential(nn.Conv3d(cin, cout, 3, padding=1), nn.LeakyReLU(LEAKY_SLOPE))


def _channels_first(x):
    return x.permute(0, 4, 1, 2, 3).contiguous()


class SwinEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch_embed = PatchEmbed(cfg.in_channels, cfg.embed_dim, cfg.patch_size)
        dims = cfg.stage_dims()
        self.stages = nn.ModuleList(
            SwinStage(dims[s], cfg.depths[s], cfg.heads[s], cfg.window, cfg.mlp_ratio,
                      merge_from=dims[s - 1] if s else None)
            for s in range(cfg.n_stages)
        )
        self.norms = nn.ModuleList(nn.LayerNorm(d) for d in dims)

    def forward(self, x):
        t = self.patch_embed(x)
        outs = []
        for stage, norm in zip(self.stages, self.norms):
            t = stage(t)
            outs.append(_channels_first(norm(t)))
        return outs


class VitEncoder(nn.Module):
    """Single-resolution transformer; stage outputs are pooled and re-projected to the pyramid."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        C = cfg.embed_dim
        self.grids = cfg.stage_grids()
        self.patch_embed = PatchEmbed(cfg.in_channels, C, cfg.patch_size)
        n_tokens = int(np.prod(cfg.token_grid))
        self.pos_embed = nn.Parameter(torch.zeros(1, n_tokens, C))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(VitBlock(C, cfg.heads[0], cfg.mlp_ratio) for _ in range(sum(cfg.depths)))
        self.norm = nn.LayerNorm(C)
        self.projections = nn.ModuleList(nn.Linear(C, d) for d in cfg.stage_dims())
        self.norms = nn.ModuleList(nn.LayerNorm(d) for d in cfg.stage_dims())

    def forward(self, x):
        t = self.patch_embed(x)
        B, X, Y, Z, C = t.shape
        if X * Y * Z != self.pos_embed.shape[1]:
            raise ValueError(f"token grid {(X, Y, Z)} does not match the configured input shape")
        seq = t.reshape(B, -1, C) + self.pos_embed
        for blk in self.blocks:
            seq = blk(seq)
        grid = _channels_first(self.norm(seq).reshape(B, X, Y, Z, C))
        outs = []
        for s, (proj, norm) in enumerate(zip(self.projections, self.norms)):
            g = grid if s == 0 else F.avg_pool3d(grid, 2 ** s, ceil_mode=True)
            outs.append(_channels_first(norm(proj(g.permute(0, 2, 3, 4, 1)))))
        return outs


class ConvEncoder(nn.Module):
    """Strided-convolution pyramid with the same stage shapes as the transformer encoders."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dims = cfg.stage_dims()
        self.down = nn.ModuleList()
        self.convs = nn.ModuleList()
        for s, d in enumerate(dims):
            if s == 0:
                self.down.append(nn.Sequential(
                    nn.Conv3d(cfg.in_channels, d, cfg.patch_size, stride=cfg.patch_size), nn.LeakyReLU(LEAKY_SLOPE)))
            else:
                self.down.append(nn.Sequential(
                    nn.Conv3d(dims[s - 1], d, 3, stride=2, padding=1), nn.LeakyReLU(LEAKY_SLOPE)))
            self.convs.append(nn.Sequential(_conv(d, d), _conv(d, d)))

    def forward(self, x):
        outs = []
        for down, convs in zip(self.down, self.convs):
            x = convs(down(x))
            outs.append(x)
        return outs


ENCODERS = {EncoderKind.SWIN: SwinEncoder, EncoderKind.VIT: VitEncoder, EncoderKind.CONV: ConvEncoder}


class Decoder(nn.Module):
    """Upsample, concatenate the matching skip, two 3x3x3 convs; repeated down to full resolution."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dims = cfg.stage_dims()
        cc = cfg.conv_channels
        self.up_blocks = nn.ModuleList(
            nn.Sequential(_conv(dims[s + 1] + dims[s], dims[s]), _conv(dims[s], dims[s]))
            for s in reversed(range(cfg.n_stages - 1))
        )
        self.half_block = nn.Sequential(_conv(dims[0] + cc, cc), _conv(cc, cc))
        self.full_block = nn.Sequential(_conv(cc + cc, cc), _conv(cc, cc))

    def forward(self, pyramid, half, full):
        y = pyramid[-1]
        for block, skip in zip(self.up_blocks, reversed(pyramid[:-1])):
            y = _upsample(y, skip.shape[2:])
            y = block(torch.cat([y, skip], dim=1))
        y = self.half_block(torch.cat([_upsample(y, half.shape[2:]), half], dim=1))
        return self.full_block(torch.cat([_upsample(y, full.shape[2:]), full], dim=1))


def _upsample(x, size):
    if tuple(x.shape[2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="trilinear", align_corners=False)


class DisplacementNet(nn.Module):
    """Encoder, dual-resolution input convolutions, decoder and zero-initialised DVF head."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        cc = cfg.conv_channels
        self.encoder = ENCODERS[cfg.encoder_kind](cfg)
        self.conv_full = _conv(cfg.in_channels, cc)
        self.conv_half = _conv(cfg.in_channels, cc)
        self.decoder = Decoder(cfg)
        self.head = nn.Conv3d(cc, cfg.dvf_channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        # channels-last roughly halves CPU convolution time
        self.to(memory_format=torch.channels_last_3d)

    def encode(self, x):
        pyramid = self.encoder(x)
        full = self.conv_full(x)
        half = self.conv_half(F.avg_pool3d(x, 2, ceil_mode=True))
        return pyramid, half, full

    def decode(self, pyramid, half, full):
        return self.head(self.decoder(pyramid, half, full))

    def forward(self, x):
        if x.dim() == 4:
            x = x[None]
        x = x.contiguous(memory_format=torch.channels_last_3d)
        return self.decode(*self.encode(x)).contiguous()


def build_model(cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=torch.float32) -> DisplacementNet:
    """Construct a network with parameters drawn from a seeded generator."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = DisplacementNet(cfg)
    return net.to(dtype)


def parameter_count(cfg: ModelConfig) -> int:
    return sum(p.numel() for p in DisplacementNet(cfg).parameters())


PARAMETER_GROUPS = ("embedding", "attention", "bias", "norm", "decoder", "head")


def parameter_group(name: str) -> str:
    """Coarse group of a parameter path, used by gradient checking reports."""
    if name.startswith("head."):
        return "head"
    if "relative_position_bias_table" in name:
        return "bias"
    if "norm" in name:
        return "norm"
    if "patch_embed" in name or "pos_embed" in name:
        return "embedding"
    if name.startswith("encoder."):
        return "attention"
    return "decoder"


def gradient(
    net: DisplacementNet,
    x: torch.Tensor,
    targets: Dict[str, torch.Tensor],
    weights: LossWeights = LossWeights(),
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Composite loss and its gradient with respect to every named parameter.

    ``targets`` holds (B, 1, H, W, D) tensors ``base_image``, ``base_gtvp``,
    ``base_gtvn``, ``target_image``, ``target_gtvp`` and ``target_gtvn``.
    """
    params = dict(net.named_parameters())
    disp = net(x)
    loss = composite_loss(disp=disp, weights=weights, **targets)["total"]
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return loss.detach(), {
        name: (g if g is not None else torch.zeros_like(p)) for (name, p), g in zip(params.items(), grads)
    }


# ---------------------------------------------------------------- tensor files

MAGIC = b"ANAPRED-TENSORS\n"


def save_tensors(path: PathLike, tensors: Dict[str, torch.Tensor], header: Optional[dict] = None) -> None:
    """Write named arrays as little-endian f32 with a JSON manifest, atomically."""
    manifest, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    head = json.dumps({**(header or {}), "tensors": manifest}, sort_keys=True).encode()
    atomic_write_bytes(Path(path), MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks))


def load_tensors(path: PathLike) -> Tuple[dict, Dict[str, torch.Tensor]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a tensor file")
    pos = len(MAGIC)
    (n,) = struct.unpack("<Q", raw[pos:pos + 8])
    header = json.loads(raw[pos + 8:pos + 8 + n])
    base = pos + 8 + n
    tensors = {}
    for entry in header.pop("tensors"):
        start = base + entry["offset"]
        arr = np.frombuffer(raw[start:start + entry["nbytes"]], dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    return header, tensors


def save_checkpoint(path: PathLike, net: DisplacementNet, extra: Optional[dict] = None) -> None:
    header = {"model_config": net.cfg.to_json(), **(extra or {})}
    save_tensors(path, dict(net.state_dict()), header)


def load_checkpoint(path: PathLike) -> Tuple[DisplacementNet, dict]:
    header, tensors = load_tensors(path)
    cfg = ModelConfig.from_json(header["model_config"])
    net = DisplacementNet(cfg)
    net.load_state_dict(tensors)
    return net, header
