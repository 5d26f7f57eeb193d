import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from anapred import metrics as M
from anapred.losses import ssim_loss
from anapred.train import prepare_case
from anapred.warp import Prediction

from oracles import asd_oracle, dice_oracle, mse_oracle, ssim_oracle


def random_mask(rng, shape, p):
    m = rng.random(shape) < p
    if not m.any():
        m[tuple(rng.integers(0, s) for s in shape)] = True
    return m


def random_pairs(n=200, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        shape = tuple(int(s) for s in rng.integers(1, 13, size=3))
        yield rng, shape


def test_dice_and_asd_match_oracles_on_200_random_masks():
    worst_asd = 0.0
    for rng, shape in random_pairs(seed=11):
        a = random_mask(rng, shape, rng.uniform(0.05, 0.6))
        b = random_mask(rng, shape, rng.uniform(0.05, 0.6))
        assert M.dice(a, b) == dice_oracle(a, b)
        spacing = tuple(rng.uniform(0.5, 3.0, size=3))
        worst_asd = max(worst_asd, abs(M.asd(a, b, spacing) - asd_oracle(a, b, spacing)))
    assert worst_asd <= 1e-6


def test_ssim_and_mse_match_oracles_on_200_random_images():
    worst_ssim = worst_mse = 0.0
    for rng, shape in random_pairs(seed=12):
        a = rng.uniform(-1, 1, shape).astype(np.float32)
        b = np.clip(a + rng.normal(scale=rng.uniform(0.01, 0.8), size=shape), -1, 1).astype(np.float32)
        worst_ssim = max(worst_ssim, abs(M.ssim_eval(a, b) - ssim_oracle(a, b)))
        worst_mse = max(worst_mse, abs(M.mse(a, b) - mse_oracle(a, b)))
    assert worst_ssim <= 1e-5
    assert worst_mse <= 1e-9


def test_simple_values():
    assert M.mse(np.zeros(8), np.full(8, 0.1)) == pytest.approx(0.01, abs=1e-12)
    a = np.zeros((4, 4, 4), bool)
    b = np.zeros((4, 4, 4), bool)
    a[:2, :2, :2] = True
    b[1:3, :2, :2] = True
    assert M.dice(a, b) == 0.5
    assert M.dice(np.zeros(3), np.zeros(3)) == 1.0
    assert M.dice(a, ~a) == 0.0


def test_asd_two_points():
    a = np.zeros((6, 3, 3), bool)
    b = np.zeros((6, 3, 3), bool)
    a[1, 1, 1] = True
    b[4, 1, 1] = True
    assert M.asd(a, b, (2.0, 2.0, 2.0)) == 6.0
    assert M.asd(a, a, (2.0, 2.0, 2.0)) == 0.0
    with pytest.raises(ValueError, match="undefined ASD"):
        M.asd(a, np.zeros_like(a), (1, 1, 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_symmetry(seed):
    rng = np.random.default_rng(seed)
    a = random_mask(rng, (6, 5, 4), 0.3)
    b = random_mask(rng, (6, 5, 4), 0.3)
    assert M.dice(a, b) == M.dice(b, a)
    assert M.asd(a, b, (1, 2, 3)) == M.asd(b, a, (1, 2, 3))


def test_ssim_eval_complements_loss():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(-1, 1, (2, 7, 6, 5))
    loss = float(ssim_loss(torch.from_numpy(a), torch.from_numpy(b)))
    assert abs(M.ssim_eval(a, b) + loss - 1.0) <= 1e-9
    assert abs(M.ssim_eval(a, a) - 1.0) <= 1e-6


def test_body_mask_recovers_phantom_ellipsoid(small_case):
    from conftest import SMALL_SPEC

    c = prepare_case(small_case)
    sp = np.asarray(SMALL_SPEC.spacing_mm)
    shape = SMALL_SPEC.shape
    pos = np.stack(np.meshgrid(*[np.arange(n) * s for n, s in zip(shape, sp)], indexing="ij"))
    centre = ((np.asarray(shape) - 1) * sp / 2).reshape(3, 1, 1, 1)
    truth = (((pos - centre) / np.asarray(SMALL_SPEC.body_semiaxes_mm).reshape(3, 1, 1, 1)) ** 2).sum(0) <= 1
    assert M.dice(M.body_mask(c.ct.data), truth) >= 0.97
    with pytest.raises(ValueError, match="empty body mask"):
        M.body_mask(np.full((8, 8, 4), -1.0))


def test_body_threshold_monotone(small_case):
    img = prepare_case(small_case).ct.data
    prev = None
    for t in (0.5, 0.0, -0.5, -0.9):
        cur = img > t
        if prev is not None:
            assert np.all(cur >= prev)
        prev = cur


def test_evaluate_case_with_copied_target(small_case):
    c = prepare_case(small_case)
    pred = Prediction(image=c.cbct21, gtvp=c.gtvp21, gtvn=c.gtvn21, dvf=np.zeros((3,) + c.shape, np.float32))
    rows = M.evaluate_case(c, pred)
    assert [r.subject for r in rows] == ["PlanningCT", "CBCT01", "Predicted"]
    p = rows[2]
    assert p.mse == 0 and abs(p.ssim - 1) <= 1e-6
    assert p.dice_body == p.dice_gtvp == p.dice_gtvn == 1.0
    assert p.asd_body_mm == p.asd_gtvp_mm == p.asd_gtvn_mm == 0.0
    for r in rows:
        assert 0 <= r.dice_gtvp <= 1 and r.asd_gtvp_mm >= 0 and -1 <= r.ssim <= 1


def make_row(subject, v, case_id=""):
    return M.MetricsRow(subject, *([float(v)] * len(M.METRICS)), case_id=case_id)


def test_aggregate_median_and_population_std():
    rep = M.aggregate([make_row("A", v, f"c{v}") for v in (3, 1, 2)])
    stat = rep.aggregate["A"]["mse"]
    assert stat["median"] == 2.0 and stat["n"] == 3
    assert abs(stat["std"] - math.sqrt(2 / 3)) <= 1e-12
    assert M.lower_median([4, 1, 3, 2]) == 2.0
    single = M.aggregate([make_row("B", 0.25)])
    assert single.aggregate["B"]["ssim"] == {"median": 0.25, "std": 0.0, "n": 1}
    with pytest.raises(ValueError):
        M.aggregate([])


def test_report_json_round_trip_and_layout():
    rows = [make_row(s, i + k, f"c{k}") for k in range(2) for i, s in enumerate(("PlanningCT", "CBCT01", "Predicted"))]
    rows[0].asd_gtvn_mm = float("nan")
    rep = M.aggregate(rows, title="demo")
    obj = json.loads(rep.dumps())
    back = M.MetricsReport.from_json(obj)
    assert back.subjects == ["PlanningCT", "CBCT01", "Predicted"]
    assert back.to_json() == rep.to_json()
    text = rep.to_text()
    assert "(a)" in text and "(b)" in text and "GTVp Dice" in text
    csv_lines = rep.to_csv().splitlines()
    assert csv_lines[0].startswith("subject,mse_median,mse_std") and len(csv_lines) == 4
    bad = dict(obj, extra=1)
    with pytest.raises(Exception):
        M.MetricsReport.from_json(bad)
