"""Case bundles, model-input stacking, augmentation, splits and manifests."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .volume import (
    Kind,
    PathLike,
    Volume,
    atomic_write_bytes,
    binarize,
    center_crop_pad,
    clip_minmax_normalize,
    read_volume,
    resample,
    write_volume,
    zscore_normalize,
)

# Order of the seven model input channels.
CHANNELS = ("ct", "gtvp_ct", "gtvn_ct", "dose", "baseline", "gtvp_baseline", "gtvn_baseline")
TARGET_FIELDS = ("cbct21", "gtvp21", "gtvn21")
DVF_CHANNELS = ("dvf_x", "dvf_y", "dvf_z")


class Baseline(str, enum.Enum):
    CBCT01 = "CBCT01"
    CT = "CT"


@dataclass(frozen=True)
class InputSelection:
    use_ct: bool = True
    use_dose: bool = True
    use_gtv_masks: bool = True
    baseline: Baseline = Baseline.CBCT01

    def __post_init__(self):
        object.__setattr__(self, "baseline", Baseline(self.baseline))

    @property
    def label(self) -> str:
        """Row label in the style of the ablation table."""
        parts = []
        if self.use_ct:
            parts.append("CT")
        parts.append("CBCT01")
        if self.use_gtv_masks:
            parts.append("GTV")
        if self.use_dose:
            parts.append("Dose")
        return f"{'+'.join(parts)} (Baseline: {self.baseline.value})"

    def to_json(self) -> dict:
        return {"use_ct": self.use_ct, "use_dose": self.use_dose,
                "use_gtv_masks": self.use_gtv_masks, "baseline": self.baseline.value}


@dataclass
class CaseBundle:
    """Aligned volumes of one case.

    ``gtvp_ct``/``gtvn_ct`` are the planning-CT contours; when omitted they
    default to the CBCT01 contours.  Targets are all present or all absent.
    ``gt_dvf`` is a (3, H, W, D) voxel-unit field, known only for phantoms.
    """

    case_id: str
    ct: Volume
    dose: Volume
    cbct01: Volume
    gtvp01: Volume
    gtvn01: Volume
    gtvp_ct: Optional[Volume] = None
    gtvn_ct: Optional[Volume] = None
    cbct21: Optional[Volume] = None
    gtvp21: Optional[Volume] = None
    gtvn21: Optional[Volume] = None
    gt_dvf: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.gtvp_ct is None:
            self.gtvp_ct = self.gtvp01
        if self.gtvn_ct is None:
            self.gtvn_ct = self.gtvn01
        present = [getattr(self, f) is not None for f in TARGET_FIELDS]
        if any(present) and not all(present):
            raise ValueError(f"{self.case_id}: targets must be all present or all absent")
        ref = self.ct
        for name, vol in self.volumes().items():
            if vol.shape != ref.shape or vol.spacing_mm != ref.spacing_mm or vol.origin_mm != ref.origin_mm:
                raise ValueError(f"{self.case_id}: {name} geometry differs from ct")
        if self.gt_dvf is not None and self.gt_dvf.shape != (3,) + ref.shape:
            raise ValueError(f"{self.case_id}: gt_dvf shape {self.gt_dvf.shape} != {(3,) + ref.shape}")

    @property
    def has_targets(self) -> bool:
        return self.cbct21 is not None

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.ct.shape

    def volumes(self) -> Dict[str, Volume]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Volume):
                out[f.name] = value
        return out

    def baseline(self, sel: InputSelection) -> Tuple[Volume, Volume, Volume]:
        """(image, gtvp, gtvn) that get deformed into the prediction."""
        if sel.baseline is Baseline.CT:
            return self.ct, self.gtvp_ct, self.gtvn_ct
        return self.cbct01, self.gtvp01, self.gtvn01


def stack_input(c: CaseBundle, sel: InputSelection = InputSelection()) -> np.ndarray:
    """Return the (7, H, W, D) float32 model input; disabled channels are zeros."""
    if sel.baseline is Baseline.CT:
        first, base = c.cbct01, c.ct
        base_p, base_n = c.gtvp_ct, c.gtvn_ct
        plan_p, plan_n = c.gtvp01, c.gtvn01
    else:
        first, base = c.ct, c.cbct01
        base_p, base_n = c.gtvp01, c.gtvn01
        plan_p, plan_n = c.gtvp_ct, c.gtvn_ct
    slots = [
        (first, sel.use_ct),
        (plan_p, sel.use_gtv_masks),
        (plan_n, sel.use_gtv_masks),
        (c.dose, sel.use_dose),
        (base, True),
        (base_p, sel.use_gtv_masks),
        (base_n, sel.use_gtv_masks),
    ]
    shape = c.shape
    out = np.zeros((7,) + shape, dtype=np.float32)
    for i, (vol, enabled) in enumerate(slots):
        if vol.shape != shape:
            raise ValueError(f"{c.case_id}: channel {CHANNELS[i]} shape {vol.shape} != {shape}")
        if enabled:
            out[i] = vol.data
    return out


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentSpec:
    flip_axes: Tuple[int, ...] = (0,)
    max_shift_voxels: int = 5
    max_rotation_deg: float = 10.0
    noise_sigma: float = 0.02
    p_flip: float = 0.5
    p_shift: float = 0.5
    p_rotate: float = 0.5
    p_noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if set(self.flip_axes) - {0}:
            raise ValueError("only the x axis (0) may be flipped")
        if self.max_shift_voxels < 0 or self.max_rotation_deg < 0 or self.noise_sigma < 0:
            raise ValueError("augmentation magnitudes must be non-negative")
        for p in (self.p_flip, self.p_shift, self.p_rotate, self.p_noise):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")

    @classmethod
    def disabled(cls, seed: int = 0) -> "AugmentSpec":
        return cls(p_flip=0.0, p_shift=0.0, p_rotate=0.0, p_noise=0.0, seed=seed)


@dataclass(frozen=True)
class Transform:
    """One sampled geometric transform (flip, then rotation about z, then shift)."""

    flip_x: bool = False
    shift: Tuple[int, int, int] = (0, 0, 0)
    angle_deg: float = 0.0
    noise_sigma: float = 0.0

    @property
    def is_identity(self) -> bool:
        return not self.flip_x and self.shift == (0, 0, 0) and self.angle_deg == 0.0


def sample_transform(spec: AugmentSpec, rng: np.random.Generator) -> Transform:
    # Draw every variate unconditionally so the stream does not depend on outcomes.
    u = rng.random(4)
    shift = rng.integers(-spec.max_shift_voxels, spec.max_shift_voxels + 1, size=3)
    angle = rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg)
    return Transform(
        flip_x=bool(spec.flip_axes) and u[0] < spec.p_flip,
        shift=tuple(int(s) for s in shift) if u[1] < spec.p_shift else (0, 0, 0),
        angle_deg=float(angle) if u[2] < spec.p_rotate else 0.0,
        noise_sigma=spec.noise_sigma if u[3] < spec.p_noise else 0.0,
    )


def _affine(t: Transform, shape) -> Tuple[np.ndarray, np.ndarray]:
    """Matrix A and offset b with output voxel p sampling input voxel A @ p + b."""
    c = (np.asarray(shape, dtype=np.float64) - 1) / 2
    theta = math.radians(t.angle_deg)
    # forward map: flip, rotate about the in-plane centre, shift; invert for pulling
    F_ = np.diag([-1.0 if t.flip_x else 1.0, 1.0, 1.0])
    R = np.array([[math.cos(theta), -math.sin(theta), 0.0], [math.sin(theta), math.cos(theta), 0.0], [0.0, 0.0, 1.0]])
    # forward: p_out = M (p_in - c) + c + s  =>  p_in = M^-1 (p_out - c - s) + c
    Minv = F_ @ R.T
    b = c - Minv @ (c + np.asarray(t.shift, dtype=np.float64))
    return Minv, b


def _transform_array(data: np.ndarray, A: np.ndarray, b: np.ndarray, order: int, mode: str) -> np.ndarray:
    out = ndimage.affine_transform(data.astype(np.float64), A, offset=b, order=order, mode=mode, cval=0.0)
    return out.astype(np.float32)


def apply_transform(c: CaseBundle, t: Transform, rng: Optional[np.random.Generator] = None) -> CaseBundle:
    """Apply one geometric transform to every volume (and the ground-truth field) of a bundle.

    Gaussian noise, when ``t.noise_sigma > 0``, is added to the input image
    channels (ct, cbct01) only.
    """
    updates = {}
    if not t.is_identity:
        A, b = _affine(t, c.shape)
        for name, vol in c.volumes().items():
            if vol.kind is Kind.MASK:
                data = _transform_array(vol.data, A, b, order=0, mode="constant")
            else:
                data = _transform_array(vol.data, A, b, order=1, mode="nearest")
            updates[name] = vol.with_data(data)
        if c.gt_dvf is not None:
            moved = np.stack([_transform_array(comp, A, b, 1, "nearest") for comp in c.gt_dvf]).astype(np.float64)
            # Pulled field transforms as disp'(p) = A^-1 disp(A p + b)
            Ainv = np.linalg.inv(A)
            updates["gt_dvf"] = np.einsum("ij,j...->i...", Ainv, moved).astype(np.float32)
    if t.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        for name in ("ct", "cbct01"):
            vol = updates.get(name, getattr(c, name))
            noisy = vol.data + rng.normal(0.0, t.noise_sigma, size=vol.shape).astype(np.float32)
            updates[name] = vol.with_data(noisy)
    if not updates:
        return c
    return replace(c, **updates)


def augment(c: CaseBundle, spec: AugmentSpec, rng: Optional[np.random.Generator] = None) -> CaseBundle:
    """Sample a transform from ``spec`` and apply it jointly to the whole bundle.

    Without an explicit ``rng`` the draw is seeded from ``spec.seed``.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    t = sample_transform(spec, rng)
    return apply_transform(c, t, rng)


# ---------------------------------------------------------------- splits


def split_cases(ids: Sequence[str], fractions=(0.8, 0.1, 0.1), seed: int = 0) -> Tuple[List[str], List[str], List[str]]:
    """Shuffle ``ids`` deterministically and cut (train, val, test); rounding remainder goes to train."""
    ids = list(ids)
    if not ids:
        raise ValueError("cannot split an empty id list")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    n = len(ids)
    n_val = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    n_train = n - n_val - n_test
    if n_train < 0:
        raise ValueError("fractions leave no room for a training split")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


def write_split(path: PathLike, train: Sequence[str], val: Sequence[str], test: Sequence[str]) -> None:
    doc = {"train": list(train), "val": list(val), "test": list(test)}
    atomic_write_bytes(Path(path), json.dumps(doc, indent=2).encode())


def read_split(path: PathLike) -> Tuple[List[str], List[str], List[str]]:
    doc = json.loads(Path(path).read_text())
    return list(doc["train"]), list(doc["val"]), list(doc["test"])


# ---------------------------------------------------------------- manifests

_CASE_FILES = ("ct", "dose", "cbct01", "gtvp01", "gtvn01", "gtvp_ct", "gtvn_ct", "cbct21", "gtvp21", "gtvn21")


def write_case(c: CaseBundle, case_dir: PathLike) -> Dict[str, str]:
    """Write all volumes of a case into ``case_dir``; returns channel -> relative base path."""
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name in _CASE_FILES:
        vol = getattr(c, name)
        if vol is None:
            continue
        write_volume(replace(vol, channel=name), case_dir / name)
        paths[name] = name
    if c.gt_dvf is not None:
        for comp, name in zip(c.gt_dvf, DVF_CHANNELS):
            ref = c.ct
            write_volume(Volume(comp, ref.spacing_mm, ref.origin_mm, Kind.IMAGE, name), case_dir / name)
            paths[name] = name
    return paths


def write_manifest(cases: Sequence[CaseBundle], out_dir: PathLike) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for c in cases:
        rel = write_case(c, out_dir / c.case_id)
        entries.append({"case_id": c.case_id, "paths": {k: f"{c.case_id}/{v}" for k, v in rel.items()}})
    manifest = out_dir / "manifest.json"
    atomic_write_bytes(manifest, json.dumps(entries, indent=2).encode())
    return manifest


def read_manifest(path: PathLike) -> List[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    entries = json.loads(path.read_text())
    root = path.parent
    for e in entries:
        e["paths"] = {k: str(root / v) for k, v in e["paths"].items()}
    return entries


def load_case(entry: dict) -> CaseBundle:
    paths = entry["paths"]
    vols = {name: read_volume(paths[name]) for name in _CASE_FILES if name in paths}
    gt = None
    if all(n in paths for n in DVF_CHANNELS):
        gt = np.stack([read_volume(paths[n]).data for n in DVF_CHANNELS])
    return CaseBundle(case_id=entry["case_id"], gt_dvf=gt, **vols)


def load_cases(manifest: PathLike) -> Dict[str, CaseBundle]:
    return {e["case_id"]: load_case(e) for e in read_manifest(manifest)}


def case_dir_entry(case_dir: PathLike) -> dict:
    """Manifest-style entry for a bare case directory of ``.mvol`` pairs."""
    case_dir = Path(case_dir)
    paths = {}
    for name in _CASE_FILES + DVF_CHANNELS:
        if (case_dir / f"{name}.mvol.json").exists():
            paths[name] = str(case_dir / name)
    return {"case_id": case_dir.name, "paths": paths}


# ---------------------------------------------------------------- preprocessing


def preprocess_case(
    c: CaseBundle,
    target_spacing_mm=(2.0, 2.0, 2.0),
    target_shape=(128, 128, 32),
) -> Tuple[CaseBundle, Dict[str, List[str]]]:
    """Resample, crop/pad and normalise every channel by kind.

    Returns the processed bundle and, per channel, the list of applied steps
    (``identity`` for steps that left the data unchanged).
    """
    provenance: Dict[str, List[str]] = {}
    updates = {}
    target_spacing = tuple(float(s) for s in target_spacing_mm)
    for name, vol in c.volumes().items():
        steps = []
        out = resample(vol, target_spacing)
        steps.append("resample:identity" if out.spacing_mm == vol.spacing_mm and out.shape == vol.shape else "resample")
        before = out.shape
        out = center_crop_pad(out, target_shape)
        steps.append("crop_pad:identity" if before == out.shape else "crop_pad")
        if out.kind is Kind.IMAGE:
            normed = clip_minmax_normalize(out) if _looks_like_hu(out) else out
            steps.append("clip_minmax" if normed is not out else "clip_minmax:identity")
            out = normed
        elif out.kind is Kind.DOSE:
            normed = zscore_normalize(out) if not _looks_zscored(out) else out
            steps.append("zscore" if normed is not out else "zscore:identity")
            out = normed
        else:
            binary = binarize(out, 0.5)
            steps.append("binarize:identity" if np.array_equal(binary.data, out.data) else "binarize")
            out = binary
        updates[name] = out
        provenance[name] = steps
    gt = c.gt_dvf
    if gt is not None:
        scale = np.asarray(c.ct.spacing_mm) / np.asarray(target_spacing)
        comps = []
        for a, comp in enumerate(gt):
            v = resample(Volume(comp, c.ct.spacing_mm, c.ct.origin_mm, Kind.IMAGE), target_spacing)
            # Dose kind so padding fills zero displacement
            v = center_crop_pad(Volume(v.data * scale[a], v.spacing_mm, v.origin_mm, Kind.DOSE), target_shape)
            comps.append(v.data)
        gt = np.stack(comps)
    return replace(c, gt_dvf=gt, **updates), provenance


def _looks_like_hu(v: Volume) -> bool:
    # Normalised images already live in [-1, 1]; raw CT spans hundreds of HU.
    return bool(v.data.min() < -1.0 - 1e-6 or v.data.max() > 1.0 + 1e-6)


def _looks_zscored(v: Volume) -> bool:
    d = v.data.astype(np.float64)
    return abs(d.mean()) <= 1e-4 and abs(d.std() - 1.0) <= 1e-3
