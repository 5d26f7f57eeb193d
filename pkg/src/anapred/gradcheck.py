"""Finite-difference verification of every analytic gradient used in training.

Runs in float64 on a tiny network whose DVF head is given random weights (a
zero head would block all gradients upstream of it).  Each sampled parameter
entry is compared with a central difference of the composite loss; the warp
and every loss component are checked against central differences in the
displacement field.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from .losses import LossWeights, composite_loss, diffusion_loss, soft_dice_loss, ssim_loss
from .model import PARAMETER_GROUPS, TINY_CONFIG, ModelConfig, build_model, gradient, parameter_group
from .warp import WarpMode, warp_tensor

log = logging.getLogger(__name__)

TOLERANCE = 1e-4
STEP = 1e-5
# Relative error denominator floor: entries whose gradients are both below it are compared absolutely.
FLOOR = 1e-6


def rel_err(analytic: float, numeric: float, floor: float = FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class CheckResult:
    name: str
    worst_rel_err: float = 0.0
    worst_entry: str = ""
    count: int = 0

    def record(self, entry: str, analytic: float, numeric: float):
        e = rel_err(analytic, numeric)
        self.count += 1
        if e > self.worst_rel_err or not self.worst_entry:
            self.worst_rel_err, self.worst_entry = e, entry

    def to_json(self) -> dict:
        return {"worst_rel_err": self.worst_rel_err, "worst_entry": self.worst_entry, "count": self.count}


@dataclass
class GradcheckReport:
    tolerance: float
    groups: Dict[str, CheckResult] = field(default_factory=dict)
    field_checks: Dict[str, CheckResult] = field(default_factory=dict)

    @property
    def failures(self) -> List[CheckResult]:
        checks = list(self.groups.values()) + list(self.field_checks.values())
        return [c for c in checks if c.count == 0 or c.worst_rel_err > self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def parameters_checked(self) -> int:
        return sum(c.count for c in self.groups.values())

    def to_json(self) -> dict:
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "parameters_checked": self.parameters_checked,
            "groups": {k: v.to_json() for k, v in self.groups.items()},
            "field_checks": {k: v.to_json() for k, v in self.field_checks.items()},
        }

    def to_text(self) -> str:
        lines = [f"{'check':<22}{'n':>6}{'worst rel err':>16}  entry"]
        for c in list(self.groups.values()) + list(self.field_checks.values()):
            flag = "" if c.count and c.worst_rel_err <= self.tolerance else "  FAIL"
            lines.append(f"{c.name:<22}{c.count:>6}{c.worst_rel_err:>16.3e}  {c.worst_entry}{flag}")
        lines.append(f"{'PASS' if self.passed else 'FAIL'} (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def _smooth_volume(gen, shape, sigma=1.5):
    from scipy import ndimage

    noise = torch.randn(shape, generator=gen, dtype=torch.float64).numpy()
    v = ndimage.gaussian_filter(noise, sigma)
    return torch.from_numpy(v / (np.abs(v).max() + 1e-12))


def _blob(shape, centre, radius):
    idx = torch.stack(torch.meshgrid(*[torch.arange(n, dtype=torch.float64) for n in shape], indexing="ij"))
    d2 = sum((idx[a] - centre[a]) ** 2 for a in range(3))
    return (d2 <= radius ** 2).to(torch.float64)


def synthetic_problem(shape, seed: int = 0):
    """Random smooth input stack and loss targets with binary blob masks, all float64, batch 1."""
    gen = torch.Generator().manual_seed(seed)
    x = torch.stack([_smooth_volume(gen, shape) for _ in range(7)])[None]
    c = [n / 2 for n in shape]
    base_p = _blob(shape, c, min(shape) / 3)
    base_n = _blob(shape, [c[0] / 2, c[1], c[2]], min(shape) / 4)
    targets = {
        "base_image": _smooth_volume(gen, shape)[None, None],
        "base_gtvp": base_p[None, None],
        "base_gtvn": base_n[None, None],
        "target_image": _smooth_volume(gen, shape)[None, None],
        "target_gtvp": _blob(shape, c, min(shape) / 3 - 1)[None, None],
        "target_gtvn": _blob(shape, [c[0] / 2 + 1, c[1], c[2]], min(shape) / 4)[None, None],
    }
    return x, targets


def check_parameters(cfg: ModelConfig, per_group: int = 40, seed: int = 0, head_std: float = 0.05,
                     eps: float = STEP, corrupt_group: Optional[str] = None,
                     weights: LossWeights = LossWeights(), report: Optional[GradcheckReport] = None,
                     tag: str = "") -> GradcheckReport:
    """Compare analytic parameter gradients with central differences on sampled entries.

    ``corrupt_group`` scales the analytic gradient of that group by 1.5, a
    hook for testing that the detector reports it.
    """
    report = report or GradcheckReport(TOLERANCE)
    net = build_model(cfg, seed=seed, dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        net.head.weight.normal_(0.0, head_std, generator=gen)
        net.head.bias.normal_(0.0, head_std, generator=gen)
    x, targets = synthetic_problem(cfg.input_shape, seed)
    _, grads = gradient(net, x, targets, weights)
    if corrupt_group is not None:
        grads = {k: g * 1.5 if parameter_group(k) == corrupt_group else g for k, g in grads.items()}

    def loss() -> float:
        with torch.no_grad():
            return float(composite_loss(disp=net(x), weights=weights, **targets)["total"])

    params = dict(net.named_parameters())
    rng = np.random.default_rng(seed)
    for group in PARAMETER_GROUPS:
        entries = [(k, i) for k, p in params.items() if parameter_group(k) == group for i in range(p.numel())]
        if not entries:
            continue
        picks = rng.choice(len(entries), size=min(per_group, len(entries)), replace=False)
        res = report.groups.setdefault(group, CheckResult(group))
        for j in sorted(picks):
            name, i = entries[j]
            data = params[name].data
            at = tuple(int(a) for a in np.unravel_index(i, data.shape))  # data may be channels-last
            orig = float(data[at])
            data[at] = orig + eps
            up = loss()
            data[at] = orig - eps
            down = loss()
            data[at] = orig
            res.record(f"{tag}{name}[{i}]", float(grads[name].reshape(-1)[i]), (up - down) / (2 * eps))
    return report


def _field_check(report, name, fn: Callable[[torch.Tensor], torch.Tensor], disp: torch.Tensor,
                 n: int, rng, eps: float = STEP):
    d = disp.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(d), d)
    res = report.field_checks.setdefault(name, CheckResult(name))
    flat = disp.reshape(-1)
    for i in rng.choice(flat.numel(), size=min(n, flat.numel()), replace=False):
        orig = float(flat[i])
        with torch.no_grad():
            flat[i] = orig + eps
            up = float(fn(disp))
            flat[i] = orig - eps
            down = float(fn(disp))
            flat[i] = orig
        res.record(f"{name}[{int(i)}]", float(g.reshape(-1)[i]), (up - down) / (2 * eps))


def check_fields(shape=(12, 10, 8), n: int = 40, seed: int = 0, report: Optional[GradcheckReport] = None) -> GradcheckReport:
    """Displacement gradients of the trilinear warp and each loss component, plus warp value gradients."""
    report = report or GradcheckReport(TOLERANCE)
    _, t = synthetic_problem(shape, seed)
    gen = torch.Generator().manual_seed(seed + 7)
    # Non-integer displacements of about one voxel, away from cell boundaries in expectation.
    disp = (torch.randn((1, 3) + tuple(shape), generator=gen, dtype=torch.float64) * 0.8).contiguous()
    rng = np.random.default_rng(seed)
    w = torch.randn((1, 1) + tuple(shape), generator=gen, dtype=torch.float64)

    _field_check(report, "warp_disp", lambda d: (warp_tensor(t["base_image"], d) * w).sum(), disp, n, rng)
    img = t["base_image"].clone()
    _field_check(report, "warp_values", lambda v: (warp_tensor(v, disp) * w).sum(), img, n, rng)

    def moved(d, key):
        return warp_tensor(t[key], d, WarpMode.TRILINEAR)

    _field_check(report, "loss_ssim", lambda d: ssim_loss(moved(d, "base_image"), t["target_image"]), disp, n, rng)
    _field_check(report, "loss_dice_p", lambda d: soft_dice_loss(moved(d, "base_gtvp"), t["target_gtvp"]), disp, n, rng)
    _field_check(report, "loss_dice_n", lambda d: soft_dice_loss(moved(d, "base_gtvn"), t["target_gtvn"]), disp, n, rng)
    _field_check(report, "loss_diffusion", diffusion_loss, disp, n, rng)
    return report


def run_gradcheck(cfg: ModelConfig = TINY_CONFIG, per_group: int = 40, seed: int = 0,
                  corrupt_group: Optional[str] = None, include_shifted: bool = True) -> GradcheckReport:
    """Full suite: parameters of ``cfg`` (and of a window-3 variant that exercises
    shifted and padded windows), then the displacement-field checks."""
    report = check_parameters(cfg, per_group, seed, corrupt_group=corrupt_group)
    if include_shifted and cfg.encoder_kind.value == "SwinHierarchical":
        shifted = replace(cfg, window=(3, 3, 3), depths=(2,) + tuple(cfg.depths[1:]))
        check_parameters(shifted, per_group // 2, seed + 1, corrupt_group=corrupt_group, report=report, tag="w3:")
    check_fields(seed=seed, report=report)
    for f in report.failures:
        log.error("gradient check failed: %s worst rel err %.3e at %s", f.name, f.worst_rel_err, f.worst_entry)
    return report
