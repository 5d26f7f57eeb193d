"""Volumetric data type, on-disk persistence and preprocessing operators.

A volume is stored as a pair of files::

    <name>.mvol.json   header (shape, spacing, origin, kind, dtype, order, channel)
    <name>.mvol.raw    little-endian float32 payload, x varies fastest

Arrays in memory are indexed ``data[x, y, z]``.
"""
from __future__ import annotations

import enum
import json
import os
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

PathLike = Union[str, os.PathLike]

HU_MIN = -1000.0
HU_MAX = 1000.0

HEADER_SUFFIX = ".mvol.json"
PAYLOAD_SUFFIX = ".mvol.raw"


class VolumeFormatError(ValueError):
    """Raised for malformed headers, payloads or invalid volume contents."""


class Kind(str, enum.Enum):
    IMAGE = "Image"
    DOSE = "Dose"
    MASK = "Mask"


@dataclass(frozen=True)
class Volume:
    """A 3D scalar grid with physical geometry.

    Attributes:
        data: float32 array of shape (H, W, D), indexed (x, y, z).
        spacing_mm: voxel size per axis.
        origin_mm: physical position of voxel (0, 0, 0).
        kind: semantic type; masks must be binary.
        channel: free-text channel name carried through persistence.
    """

    data: np.ndarray
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin_mm: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    kind: Kind = Kind.IMAGE
    channel: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeFormatError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing_mm)
        origin = tuple(float(o) for o in self.origin_mm)
        if len(spacing) != 3 or len(origin) != 3:
            raise VolumeFormatError("spacing_mm and origin_mm need three components")
        if not all(s > 0 for s in spacing):
            raise VolumeFormatError(f"spacing must be strictly positive, got {spacing}")
        kind = Kind(self.kind)
        if kind is Kind.MASK and not _is_binary(data):
            raise VolumeFormatError("non-binary mask")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", origin)
        object.__setattr__(self, "kind", kind)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data: np.ndarray, **changes) -> "Volume":
        return replace(self, data=data, **changes)

    def header(self) -> "VolumeHeader":
        return VolumeHeader(self.shape, self.spacing_mm, self.origin_mm, self.kind, channel=self.channel)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.header() == other.header()
            and np.array_equal(self.data.view(np.uint32), other.data.view(np.uint32))
        )

    __hash__ = None


@dataclass(frozen=True)
class VolumeHeader:
    shape: Tuple[int, int, int]
    spacing_mm: Tuple[float, float, float]
    origin_mm: Tuple[float, float, float]
    kind: Kind
    dtype: str = "f32"
    order: str = "xyz-le"
    channel: str = ""

    def to_json(self) -> dict:
        return {
            "shape": [int(s) for s in self.shape],
            "spacing_mm": [float(s) for s in self.spacing_mm],
            "origin_mm": [float(o) for o in self.origin_mm],
            "kind": Kind(self.kind).value,
            "dtype": self.dtype,
            "order": self.order,
            "channel": self.channel,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "VolumeHeader":
        try:
            header = cls(
                shape=tuple(int(s) for s in obj["shape"]),
                spacing_mm=tuple(float(s) for s in obj["spacing_mm"]),
                origin_mm=tuple(float(o) for o in obj["origin_mm"]),
                kind=Kind(obj["kind"]),
                dtype=obj["dtype"],
                order=obj["order"],
                channel=str(obj.get("channel", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise VolumeFormatError(f"corrupt header: {exc}") from exc
        if header.dtype != "f32" or header.order != "xyz-le":
            raise VolumeFormatError(f"unsupported dtype/order {header.dtype!r}/{header.order!r}")
        if len(header.shape) != 3 or min(header.shape) < 1:
            raise VolumeFormatError(f"corrupt header: bad shape {header.shape}")
        return header


def _is_binary(data: np.ndarray) -> bool:
    return bool(np.all((data == 0.0) | (data == 1.0)))


def volume_paths(path: PathLike) -> Tuple[Path, Path]:
    """Return (header, payload) paths for a volume base name or either file."""
    p = str(path)
    for suffix in (HEADER_SUFFIX, PAYLOAD_SUFFIX):
        if p.endswith(suffix):
            p = p[: -len(suffix)]
            break
    return Path(p + HEADER_SUFFIX), Path(p + PAYLOAD_SUFFIX)


def atomic_write_bytes(target: Path, payload: bytes) -> None:
    """Write ``payload`` to a temp file next to ``target`` and rename it in place."""
    target = Path(target)
    fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_volume(v: Volume, path: PathLike) -> None:
    header_path, payload_path = volume_paths(path)
    # x-fastest on disk == Fortran order of the (x, y, z) array
    payload = np.asarray(v.data, dtype="<f4").tobytes(order="F")
    header = json.dumps(v.header().to_json(), indent=2).encode()
    atomic_write_bytes(payload_path, payload)
    atomic_write_bytes(header_path, header)


def read_volume(path: PathLike) -> Volume:
    header_path, payload_path = volume_paths(path)
    try:
        obj = json.loads(header_path.read_text())
    except FileNotFoundError as exc:
        raise VolumeFormatError(f"missing header {header_path}") from exc
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"corrupt header {header_path}: {exc}") from exc
    header = VolumeHeader.from_json(obj)
    try:
        raw = payload_path.read_bytes()
    except FileNotFoundError as exc:
        raise VolumeFormatError(f"missing payload {payload_path}") from exc
    expected = 4 * int(np.prod(header.shape))
    if len(raw) != expected:
        raise VolumeFormatError(f"payload size mismatch: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4").reshape(header.shape, order="F").astype(np.float32)
    return Volume(data, header.spacing_mm, header.origin_mm, header.kind, header.channel)


def resample(v: Volume, target_spacing_mm: Sequence[float]) -> Volume:
    """Resample onto a grid with ``target_spacing_mm``, keeping the origin.

    Output voxel ``i`` samples input index ``i * target / source``; samples
    beyond the last input voxel clamp to the edge.  Images and dose use
    trilinear interpolation, masks nearest neighbour.
    """
    target = tuple(float(s) for s in target_spacing_mm)
    if len(target) != 3 or not all(s > 0 for s in target):
        raise ValueError(f"target spacing must be three positive values, got {target_spacing_mm}")
    if target == v.spacing_mm:
        return v.with_data(v.data.copy())
    extent = np.asarray(v.shape) * np.asarray(v.spacing_mm)
    out_shape = tuple(max(1, int(round(e / t))) for e, t in zip(extent, target))
    scale = np.asarray(target) / np.asarray(v.spacing_mm)
    coords = np.meshgrid(*[np.arange(n) * s for n, s in zip(out_shape, scale)], indexing="ij")
    order = 0 if v.kind is Kind.MASK else 1
    out = ndimage.map_coordinates(v.data.astype(np.float64), coords, order=order, mode="nearest")
    if v.kind is Kind.MASK:
        out = (out >= 0.5).astype(np.float32)
    return v.with_data(out.astype(np.float32), spacing_mm=target)


def crop_pad_offsets(size: int, target: int) -> Tuple[int, int]:
    """Low-side (crop start, pad amount) for symmetric crop/pad; extra voxel goes high."""
    if size >= target:
        return (size - target) // 2, 0
    return 0, (target - size) // 2


def center_crop_pad(v: Volume, target_shape: Sequence[int]) -> Volume:
    target = tuple(int(t) for t in target_shape)
    if len(target) != 3 or not all(t > 0 for t in target):
        raise ValueError(f"target shape must be three positive ints, got {target_shape}")
    fill = HU_MIN if v.kind is Kind.IMAGE else 0.0
    out = np.full(target, fill, dtype=np.float32)
    src, dst = [], []
    origin = list(v.origin_mm)
    for ax, (n, t) in enumerate(zip(v.shape, target)):
        start, pad = crop_pad_offsets(n, t)
        keep = min(n, t)
        src.append(slice(start, start + keep))
        dst.append(slice(pad, pad + keep))
        origin[ax] += (start - pad) * v.spacing_mm[ax]
    out[tuple(dst)] = v.data[tuple(src)]
    return v.with_data(out, origin_mm=tuple(origin))


def clip_minmax_normalize(v: Volume) -> Volume:
    """Clamp HU to [-1000, 1000] and map affinely onto [-1, 1]."""
    if v.kind is not Kind.IMAGE:
        raise ValueError(f"clip_minmax_normalize expects an Image volume, got {v.kind.value}")
    clipped = np.clip(v.data.astype(np.float64), HU_MIN, HU_MAX)
    out = 2.0 * (clipped - HU_MIN) / (HU_MAX - HU_MIN) - 1.0
    return v.with_data(out.astype(np.float32))


def zscore_normalize(v: Volume) -> Volume:
    if v.kind is not Kind.DOSE:
        raise ValueError(f"zscore_normalize expects a Dose volume, got {v.kind.value}")
    data = v.data.astype(np.float64)
    std = data.std()
    if std < 1e-8:
        return v.with_data(np.zeros_like(v.data))
    return v.with_data(((data - data.mean()) / std).astype(np.float32))


def binarize(v: Volume, threshold: float = 0.5) -> Volume:
    return v.with_data((v.data >= threshold).astype(np.float32), kind=Kind.MASK)
