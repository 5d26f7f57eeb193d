"""Procedural head-and-neck-like longitudinal phantoms with a known deformation.

Each case has a planning CT, a dose blob on the primary tumour, an initial
CBCT (CT plus correlated noise and a smooth bias field), spherical GTVp/GTVn
masks and a ground-truth pull field built from compactly supported radial
contractions around each tumour plus an in-plane body shrink.  The late CBCT
and its masks are the initial ones warped by that field.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .dataset import CaseBundle, write_manifest
from .volume import Kind, PathLike, Volume, atomic_write_bytes
from .warp import WarpMode, warp

SOFT_TISSUE_HU = 40.0
TUMOUR_HU = 90.0
NODE_HU = 70.0
BONE_HU = 700.0
AIR_HU = -1000.0
SUPPORT_RATIO = 2.0  # radial field support radius / structure radius
BODY_BAND = 0.35  # half-width of the body field band in normalised elliptical radius


@dataclass(frozen=True)
class PhantomSpec:
    shape: Tuple[int, int, int] = (64, 64, 16)
    spacing_mm: Tuple[float, float, float] = (2.0, 2.0, 2.0)
    body_semiaxes_mm: Tuple[float, float, float] = (50.0, 40.0, 200.0)
    gtvp_radius_mm: float = 10.0
    gtvn_radius_mm: float = 6.0
    shrink_factor: float = 0.6
    body_shrink_mm: float = 2.0
    noise_sigma_image: float = 20.0
    dose_peak: float = 70.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        object.__setattr__(self, "body_semiaxes_mm", tuple(float(s) for s in self.body_semiaxes_mm))
        if not 0.0 < self.shrink_factor <= 1.0:
            raise ValueError(f"shrink_factor must lie in (0, 1], got {self.shrink_factor}")
        if self.body_shrink_mm < 0 or self.noise_sigma_image < 0:
            raise ValueError("body_shrink_mm and noise_sigma_image must be non-negative")
        if min(self.gtvp_radius_mm, self.gtvn_radius_mm) <= 0:
            raise ValueError("tumour radii must be positive")


@dataclass(frozen=True)
class PhantomRanges:
    """Uniform sampling ranges (min, max) for corpus generation."""

    gtvp_radius_mm: Tuple[float, float] = (9.0, 11.0)
    gtvn_radius_mm: Tuple[float, float] = (7.0, 9.0)
    shrink_factor: Tuple[float, float] = (0.5, 0.7)
    body_shrink_mm: Tuple[float, float] = (1.0, 3.0)
    dose_peak: Tuple[float, float] = (60.0, 70.0)
    noise_sigma_image: Tuple[float, float] = (15.0, 25.0)
    body_semiaxis_x_mm: Tuple[float, float] = (46.0, 54.0)
    body_semiaxis_y_mm: Tuple[float, float] = (38.0, 44.0)

    def __post_init__(self):
        for f in fields(self):
            lo, hi = getattr(self, f.name)
            if not lo <= hi:
                raise ValueError(f"invalid range for {f.name}: ({lo}, {hi})")

    @classmethod
    def from_json(cls, obj: dict) -> "PhantomRanges":
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown phantom range keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) for k, v in obj.items()})


def _falloff(t: np.ndarray) -> np.ndarray:
    """1 at 0, 0 for t >= 1; complement of the quintic smoothstep (C2 at t=1)."""
    t = np.clip(t, 0.0, 1.0)
    return 1.0 - t ** 3 * (10.0 - 15.0 * t + 6.0 * t ** 2)


def radial_gain(r_old: float, shrink: float, support: float) -> float:
    """Gain ``a`` of the field ``u(rho) = a * rho * falloff(rho / support)``.

    Chosen so the pulled surface radius ``r_old * shrink**(1/3)`` samples the
    original radius, i.e. the structure volume scales by ``shrink``.
    """
    r_new = r_old * shrink ** (1.0 / 3.0)
    return (r_old / r_new - 1.0) / float(_falloff(np.array(r_new / support)))


def _radial_field(pos_mm: np.ndarray, centre_mm: np.ndarray, r_old: float, shrink: float) -> np.ndarray:
    """Outward pull displacement (mm) contracting a sphere of radius ``r_old``."""
    support = SUPPORT_RATIO * r_old
    a = radial_gain(r_old, shrink, support)
    d = pos_mm - centre_mm.reshape(3, 1, 1, 1)
    rho = np.sqrt((d ** 2).sum(0))
    return a * d * _falloff(rho / support)


def _body_field(pos_mm: np.ndarray, centre_mm: np.ndarray, semiaxes: Sequence[float], shrink_mm: float) -> np.ndarray:
    """In-plane outward pull of ``shrink_mm`` at the body surface, fading to zero within a band."""
    ax, ay = semiaxes[0], semiaxes[1]
    dx = pos_mm[0] - centre_mm[0]
    dy = pos_mm[1] - centre_mm[1]
    rho = np.sqrt((dx / ax) ** 2 + (dy / ay) ** 2)
    r = np.maximum(np.sqrt(dx ** 2 + dy ** 2), 1e-12)
    w = shrink_mm * _falloff(np.abs(rho - 1.0) / BODY_BAND) / r
    return np.stack([dx * w, dy * w, np.zeros_like(dx)])


def _max_radial_displacement(r_old: float, shrink: float) -> float:
    support = SUPPORT_RATIO * r_old
    a = radial_gain(r_old, shrink, support)
    rho = np.linspace(0.0, support, 4001)
    return float(np.max(a * rho * _falloff(rho / support)))


def _check_radial_invertible(shrink: float) -> None:
    # 1 + u'(rho) > 0 keeps the radial map monotone (and the field invertible).
    r = 1.0
    a = radial_gain(r, shrink, SUPPORT_RATIO * r)
    rho = np.linspace(0.0, SUPPORT_RATIO * r, 4001)
    u = a * rho * _falloff(rho / (SUPPORT_RATIO * r))
    if np.min(1.0 + np.gradient(u, rho)) <= 0:
        raise ValueError(f"shrink_factor {shrink} folds the deformation")


def _gaussian_noise_field(rng, shape, sigma_vox, amplitude):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma_vox, mode="wrap")
    n /= max(n.std(), 1e-12)
    return amplitude * n


def _ball(pos_mm, centre_mm, radius_mm):
    d2 = ((pos_mm - centre_mm.reshape(3, 1, 1, 1)) ** 2).sum(0)
    return (d2 <= radius_mm ** 2).astype(np.float32)


def _place(rng, spec: PhantomSpec, pos_extent, body_c, semi, r_p, r_n):
    """Draw tumour centres (mm) inside the body, in the grid with 2-voxel margins, non-overlapping."""
    sp = np.asarray(spec.spacing_mm)
    lo = (2 * sp) + 0.0
    hi = pos_extent - 2 * sp
    for _ in range(1000):
        cp = body_c + np.array([rng.uniform(-0.35, 0.35) * semi[0], rng.uniform(-0.45, 0.05) * semi[1], 0.0])
        side = rng.choice([-1.0, 1.0])
        cn = body_c + np.array([side * rng.uniform(0.45, 0.6) * semi[0], rng.uniform(-0.2, 0.3) * semi[1], 0.0])
        cp[2] = body_c[2] + rng.uniform(-1, 1) * max(0.0, (hi[2] - lo[2]) / 2 - r_p)
        cn[2] = body_c[2] + rng.uniform(-1, 1) * max(0.0, (hi[2] - lo[2]) / 2 - r_n)
        ok = True
        for c, r in ((cp, r_p), (cn, r_n)):
            if np.any(c - r < lo - 1e-9) or np.any(c + r > hi + 1e-9):
                ok = False
            if ((c[0] - body_c[0]) / (semi[0] - r)) ** 2 + ((c[1] - body_c[1]) / (semi[1] - r)) ** 2 > 1.0:
                ok = False
        if np.linalg.norm(cp - cn) < r_p + r_n + 2 * sp.max():
            ok = False
        if ok:
            return cp, cn
    raise ValueError("structures out of bounds: cannot place tumours inside the grid with a 2-voxel margin")


def validate_spec(spec: PhantomSpec) -> None:
    sp = np.asarray(spec.spacing_mm)
    extent = (np.asarray(spec.shape) - 1) * sp
    for r in (spec.gtvp_radius_mm, spec.gtvn_radius_mm):
        if np.any(2 * r + 4 * sp > extent + 1e-9):
            raise ValueError(f"structures out of bounds: radius {r} mm does not fit the grid with a 2-voxel margin")
    if 2 * spec.body_semiaxes_mm[0] + 4 * sp[0] > extent[0] + 1e-9 or 2 * spec.body_semiaxes_mm[1] + 4 * sp[1] > extent[1] + 1e-9:
        raise ValueError("structures out of bounds: body does not fit in-plane")
    _check_radial_invertible(spec.shrink_factor)
    for r in (spec.gtvp_radius_mm, spec.gtvn_radius_mm):
        if _max_radial_displacement(r, spec.shrink_factor) >= 0.25 * r:
            raise ValueError(f"shrink_factor {spec.shrink_factor} displaces more than a quarter of radius {r} mm")
    if spec.body_shrink_mm >= 0.25 * min(spec.body_semiaxes_mm[:2]):
        raise ValueError("body_shrink_mm exceeds a quarter of the smallest body semiaxis")


def generate_case(spec: PhantomSpec, case_id: Optional[str] = None) -> CaseBundle:
    validate_spec(spec)
    rng = np.random.default_rng(spec.seed)
    shape, sp = spec.shape, np.asarray(spec.spacing_mm)
    pos = np.stack(np.meshgrid(*[np.arange(n) * s for n, s in zip(shape, sp)], indexing="ij"))
    extent = (np.asarray(shape) - 1) * sp
    centre = extent / 2
    semi = np.asarray(spec.body_semiaxes_mm)

    rel = (pos - centre.reshape(3, 1, 1, 1)) / semi.reshape(3, 1, 1, 1)
    body = (rel ** 2).sum(0) <= 1.0
    airway_c = centre + np.array([0.0, -0.25 * semi[1], 0.0])
    spine_c = centre + np.array([0.0, 0.55 * semi[1], 0.0])
    airway = ((pos[0] - airway_c[0]) ** 2 + (pos[1] - airway_c[1]) ** 2) <= (0.12 * semi[1]) ** 2
    spine = ((pos[0] - spine_c[0]) ** 2 + (pos[1] - spine_c[1]) ** 2) <= (0.2 * semi[1]) ** 2

    cp, cn = _place(rng, spec, extent, centre, semi, spec.gtvp_radius_mm, spec.gtvn_radius_mm)
    gtvp = _ball(pos, cp, spec.gtvp_radius_mm)
    gtvn = _ball(pos, cn, spec.gtvn_radius_mm)

    ct = np.full(shape, AIR_HU)
    texture = _gaussian_noise_field(rng, shape, 1.5, 12.0)
    ct[body] = SOFT_TISSUE_HU + texture[body]
    ct[body & spine] = BONE_HU
    ct[body & airway] = AIR_HU
    ct[gtvn > 0] = NODE_HU + texture[gtvn > 0]
    ct[gtvp > 0] = TUMOUR_HU + texture[gtvp > 0]
    ct = ct + rng.normal(0.0, 5.0, size=shape)

    bias = np.zeros(shape)
    coeff = rng.uniform(-1.0, 1.0, size=3)
    for a in range(3):
        bias += coeff[a] * (pos[a] - centre[a]) / max(extent[a], 1.0)
    cbct = ct + 30.0 * bias * body + _gaussian_noise_field(rng, shape, 1.0, spec.noise_sigma_image)

    d2 = ((pos - cp.reshape(3, 1, 1, 1)) ** 2).sum(0)
    dose = spec.dose_peak * np.exp(-d2 / (2 * (1.5 * spec.gtvp_radius_mm) ** 2)) * body

    field_mm = np.zeros((3,) + shape)
    if spec.shrink_factor < 1.0:
        field_mm += _radial_field(pos, cp, spec.gtvp_radius_mm, spec.shrink_factor)
        field_mm += _radial_field(pos, cn, spec.gtvn_radius_mm, spec.shrink_factor)
    if spec.body_shrink_mm > 0:
        field_mm += _body_field(pos, centre, semi, spec.body_shrink_mm)
    dvf = (field_mm / sp.reshape(3, 1, 1, 1)).astype(np.float32)

    geom = dict(spacing_mm=spec.spacing_mm, origin_mm=(0.0, 0.0, 0.0))
    ct_v = Volume(ct, kind=Kind.IMAGE, channel="ct", **geom)
    cbct_v = Volume(cbct, kind=Kind.IMAGE, channel="cbct01", **geom)
    p01 = Volume(gtvp, kind=Kind.MASK, channel="gtvp01", **geom)
    n01 = Volume(gtvn, kind=Kind.MASK, channel="gtvn01", **geom)
    if np.any(dvf):
        cbct21 = warp(cbct_v, dvf, WarpMode.TRILINEAR)
        p21 = warp(p01, dvf, WarpMode.NEAREST)
        n21 = warp(n01, dvf, WarpMode.NEAREST)
    else:
        cbct21, p21, n21 = cbct_v, p01, n01
    return CaseBundle(
        case_id=case_id or f"phantom{spec.seed}",
        ct=ct_v,
        dose=Volume(dose, kind=Kind.DOSE, channel="dose", **geom),
        cbct01=cbct_v,
        gtvp01=p01,
        gtvn01=n01,
        cbct21=replace(cbct21, channel="cbct21"),
        gtvp21=replace(p21, channel="gtvp21"),
        gtvn21=replace(n21, channel="gtvn21"),
        gt_dvf=dvf,
    )


def sample_specs(n: int, ranges: PhantomRanges = PhantomRanges(), seed: int = 0,
                 base: PhantomSpec = PhantomSpec()) -> List[PhantomSpec]:
    if n < 1:
        raise ValueError(f"need at least one case, got n={n}")
    specs = []
    for child in np.random.SeedSequence(seed).spawn(n):
        rng = np.random.default_rng(child)
        draw = {f.name: rng.uniform(*getattr(ranges, f.name)) for f in fields(ranges)}
        semi = (draw.pop("body_semiaxis_x_mm"), draw.pop("body_semiaxis_y_mm"), base.body_semiaxes_mm[2])
        case_seed = int(child.generate_state(1, np.uint64)[0])
        specs.append(replace(base, body_semiaxes_mm=semi, seed=case_seed, **draw))
    return specs


def generate_corpus(n: int, ranges: PhantomRanges = PhantomRanges(), seed: int = 0,
                    base: PhantomSpec = PhantomSpec(), out_dir: Optional[PathLike] = None):
    """Generate ``n`` cases with per-case seeds derived from ``seed``.

    Returns ``(cases, manifest)`` where ``manifest`` is the written manifest
    path when ``out_dir`` is given, otherwise the in-memory list of specs.
    """
    specs = sample_specs(n, ranges, seed, base)
    cases = [generate_case(s, case_id=f"case{i:03d}") for i, s in enumerate(specs)]
    if out_dir is None:
        return cases, [asdict(s) for s in specs]
    manifest = write_manifest(cases, out_dir)
    params = [{"case_id": c.case_id, **asdict(s)} for c, s in zip(cases, specs)]
    atomic_write_bytes(Path(out_dir) / "phantom_params.json", json.dumps(params, indent=2).encode())
    return cases, manifest
