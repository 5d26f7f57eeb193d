"""Evaluation metrics (MSE, SSIM, Dice, ASD), body masks and comparison reports."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import jsonschema
import numpy as np
import torch
from scipy import ndimage

from .losses import ssim_map

log = logging.getLogger(__name__)

METRICS = ("mse", "ssim", "dice_body", "dice_gtvp", "dice_gtvn", "asd_body_mm", "asd_gtvp_mm", "asd_gtvn_mm")
BODY_THRESHOLD = -0.5  # normalised intensity, about -500 HU

_SIX = ndimage.generate_binary_structure(3, 1)


def _pair(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))


def ssim_eval(a, b) -> float:
    """Mean local SSIM, sharing the kernel of the SSIM training loss."""
    a, b = _pair(a, b)
    with torch.no_grad():
        return float(ssim_map(torch.from_numpy(a.astype(np.float64)), torch.from_numpy(b.astype(np.float64))).mean())


def dice(a, b) -> float:
    a, b = _pair(a, b)
    a, b = a.astype(bool), b.astype(bool)
    total = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


def surface(mask) -> np.ndarray:
    """Mask voxels with at least one 6-neighbour outside the mask (grid border counts as outside)."""
    m = np.asarray(mask).astype(bool)
    return m & ~ndimage.binary_erosion(m, structure=_SIX, border_value=0)


def asd(a, b, spacing_mm=(1.0, 1.0, 1.0)) -> float:
    """Average symmetric surface distance in mm between voxel centres of the two surfaces."""
    a, b = _pair(a, b)
    sa, sb = surface(a), surface(b)
    if not sa.any() or not sb.any():
        raise ValueError("undefined ASD: empty mask")
    to_b = ndimage.distance_transform_edt(~sb, sampling=spacing_mm)
    to_a = ndimage.distance_transform_edt(~sa, sampling=spacing_mm)
    total = to_b[sa].sum() + to_a[sb].sum()
    return float(total / (sa.sum() + sb.sum()))


def body_mask(img, threshold: float = BODY_THRESHOLD) -> np.ndarray:
    """Threshold, keep the largest 6-connected component, close (radius 1) and fill holes per axial slice."""
    m = np.asarray(img) > threshold
    labels, n = ndimage.label(m, structure=_SIX)
    if n == 0:
        raise ValueError("empty body mask")
    sizes = ndimage.sum_labels(m, labels, index=np.arange(1, n + 1))
    m = labels == (int(np.argmax(sizes)) + 1)
    padded = np.pad(m, 1)
    m = ndimage.binary_closing(padded, structure=_SIX)[1:-1, 1:-1, 1:-1]
    for z in range(m.shape[2]):
        m[:, :, z] = ndimage.binary_fill_holes(m[:, :, z])
    return m


@dataclass
class MetricsRow:
    subject: str
    mse: float
    ssim: float
    dice_body: float
    dice_gtvp: float
    dice_gtvn: float
    asd_body_mm: float
    asd_gtvp_mm: float
    asd_gtvn_mm: float
    case_id: str = ""

    def values(self) -> Dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}


def _safe_asd(a, b, spacing):
    try:
        return asd(a, b, spacing)
    except ValueError:
        log.warning("ASD undefined for an empty mask; recording NaN")
        return float("nan")


def compare_to_target(subject, image, gtvp, gtvn, target_image, target_gtvp, target_gtvn,
                      target_body, spacing_mm, case_id="") -> MetricsRow:
    body = body_mask(image)
    return MetricsRow(
        subject=subject,
        mse=mse(image, target_image),
        ssim=ssim_eval(image, target_image),
        dice_body=dice(body, target_body),
        dice_gtvp=dice(gtvp, target_gtvp),
        dice_gtvn=dice(gtvn, target_gtvn),
        asd_body_mm=_safe_asd(body, target_body, spacing_mm),
        asd_gtvp_mm=_safe_asd(gtvp, target_gtvp, spacing_mm),
        asd_gtvn_mm=_safe_asd(gtvn, target_gtvn, spacing_mm),
        case_id=case_id,
    )


def evaluate_case(c, prediction, label: str = "Predicted") -> List[MetricsRow]:
    """Rows for planning CT, CBCT01 and the prediction, each against the case's CBCT21.

    ``prediction`` is a :class:`anapred.warp.Prediction` (or ``None`` to skip
    the predicted row).
    """
    if not c.has_targets:
        raise ValueError(f"{c.case_id}: evaluation needs targets")
    tgt = c.cbct21.data
    tgt_body = body_mask(tgt)
    common = dict(target_image=tgt, target_gtvp=c.gtvp21.data, target_gtvn=c.gtvn21.data,
                  target_body=tgt_body, spacing_mm=c.ct.spacing_mm, case_id=c.case_id)
    rows = [
        compare_to_target("PlanningCT", c.ct.data, c.gtvp_ct.data, c.gtvn_ct.data, **common),
        compare_to_target("CBCT01", c.cbct01.data, c.gtvp01.data, c.gtvn01.data, **common),
    ]
    if prediction is not None:
        rows.append(compare_to_target(label, prediction.image.data, prediction.gtvp.data,
                                      prediction.gtvn.data, **common))
    return rows


# ---------------------------------------------------------------- reports


def lower_median(values: Sequence[float]) -> float:
    v = sorted(values)
    return float(v[(len(v) - 1) // 2])


def _finite(values):
    return [x for x in values if not math.isnan(x)]


@dataclass
class MetricsReport:
    """Per-case rows plus per-subject median / population std of every metric."""

    rows: List[MetricsRow]
    subjects: List[str]
    aggregate: Dict[str, Dict[str, Dict[str, Optional[float]]]] = field(default_factory=dict)
    title: str = ""

    def to_json(self) -> dict:
        return {
            "title": self.title,
            "subjects": list(self.subjects),
            "metrics": list(METRICS),
            "rows": [{k: _jsonable(v) for k, v in asdict(r).items()} for r in self.rows],
            "aggregate": self.aggregate,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsReport":
        jsonschema.validate(obj, REPORT_SCHEMA)
        rows = [MetricsRow(**{k: (float("nan") if v is None else v) for k, v in r.items()}) for r in obj["rows"]]
        return cls(rows=rows, subjects=list(obj["subjects"]), aggregate=obj["aggregate"], title=obj.get("title", ""))

    def dumps(self) -> str:
        obj = self.to_json()
        jsonschema.validate(obj, REPORT_SCHEMA)
        return json.dumps(obj, indent=2)

    def median(self, subject: str, metric: str) -> Optional[float]:
        return self.aggregate[subject][metric]["median"]

    def to_text(self) -> str:
        """Aligned text tables: image similarity, then structure similarity."""
        width = max([len(s) for s in self.subjects] + [12])

        def cell(subject, metric):
            a = self.aggregate[subject][metric]
            if a["median"] is None:
                return "n/a".rjust(15)
            return f"{a['median']:.3f}±{a['std']:.3f}".rjust(15)

        lines = [self.title] if self.title else []
        lines.append("(a) image similarity")
        lines.append("Image/Model".ljust(width) + "MSE".rjust(15) + "SSIM".rjust(15))
        for s in self.subjects:
            lines.append(s.ljust(width) + cell(s, "mse") + cell(s, "ssim"))
        lines.append("(b) structure similarity (ASD in mm)")
        header = ["Body Dice", "Body ASD", "GTVp Dice", "GTVp ASD", "GTVn Dice", "GTVn ASD"]
        lines.append("Image/Model".ljust(width) + "".join(h.rjust(15) for h in header))
        order = ("dice_body", "asd_body_mm", "dice_gtvp", "asd_gtvp_mm", "dice_gtvn", "asd_gtvn_mm")
        for s in self.subjects:
            lines.append(s.ljust(width) + "".join(cell(s, m) for m in order))
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["subject"] + [f"{m}_{stat}" for m in METRICS for stat in ("median", "std")])
        for s in self.subjects:
            w.writerow([s] + [self.aggregate[s][m][stat] for m in METRICS for stat in ("median", "std")])
        return buf.getvalue()


def _jsonable(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


def aggregate(rows: Iterable[MetricsRow], title: str = "") -> MetricsReport:
    rows = list(rows)
    if not rows:
        raise ValueError("cannot aggregate an empty set of rows")
    subjects: List[str] = []
    for r in rows:
        if r.subject not in subjects:
            subjects.append(r.subject)
    agg = {}
    for s in subjects:
        agg[s] = {}
        for m in METRICS:
            vals = _finite([getattr(r, m) for r in rows if r.subject == s])
            if vals:
                agg[s][m] = {"median": lower_median(vals), "std": float(np.std(vals)), "n": len(vals)}
            else:
                agg[s][m] = {"median": None, "std": None, "n": 0}
    return MetricsReport(rows=rows, subjects=subjects, aggregate=agg, title=title)


_NUM = {"type": ["number", "null"]}
_STAT = {
    "type": "object",
    "properties": {"median": _NUM, "std": _NUM, "n": {"type": "integer", "minimum": 0}},
    "required": ["median", "std", "n"],
    "additionalProperties": False,
}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["subjects", "metrics", "rows", "aggregate"],
    "properties": {
        "title": {"type": "string"},
        "subjects": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "metrics": {"type": "array", "items": {"enum": list(METRICS)}},
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["subject", *METRICS],
                "properties": {"subject": {"type": "string"}, "case_id": {"type": "string"},
                               **{m: _NUM for m in METRICS}},
                "additionalProperties": False,
            },
        },
        "aggregate": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "properties": {m: _STAT for m in METRICS},
                "required": list(METRICS),
                "additionalProperties": False,
            },
        },
    },
    "additionalProperties": False,
}
