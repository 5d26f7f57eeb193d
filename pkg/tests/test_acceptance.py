"""Acceptance criteria, one test each. Every test prints a single CRITERION line.

The learning-trend run (about 10 minutes on one core) is shared by the trend and
determinism criteria through a session fixture.
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from anapred.dataset import split_cases
from anapred.gradcheck import run_gradcheck
from anapred.losses import LossWeights, case_loss, diffusion_loss
from anapred.metrics import METRICS, MetricsReport, aggregate
from anapred.model import TINY_CONFIG, DisplacementNet, ModelConfig
from anapred.phantom import generate_case, generate_corpus
from anapred.train import (
    ABLATION_SELECTIONS,
    AdamState,
    PlateauScheduler,
    TrainConfig,
    adam_step,
    evaluate_model,
    run_ablation,
    run_comparison,
    train,
)
from anapred.warp import WarpMode, warp

import oracles
from conftest import SMALL_SPEC

TREND_MODEL = ModelConfig(embed_dim=24, input_shape=(64, 64, 16), decoder_channels=8)
TREND_TRAIN = TrainConfig(epochs=50, batch_size=4, seed=0)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n} {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail

    return emit


def trend_run(out_dir):
    cases, _ = generate_corpus(30, seed=2024)
    cases = {c.case_id: c for c in cases}
    split = split_cases(sorted(cases), (0.8, 0.1, 0.1), seed=0)
    t = time.perf_counter()
    result = train(cases, split, TREND_TRAIN, TREND_MODEL, out_dir=out_dir)
    report = aggregate(evaluate_model(result.net, [cases[i] for i in split[2]]))
    return split, result, report, time.perf_counter() - t


@pytest.fixture(scope="session")
def trend(tmp_path_factory):
    out = tmp_path_factory.mktemp("trend_a")
    return (out,) + trend_run(out)


def test_criterion_1_gradient_contract(verdict):
    t = time.perf_counter()
    report = run_gradcheck(TINY_CONFIG, per_group=40, seed=0)
    elapsed = time.perf_counter() - t
    worst = max(c.worst_rel_err for c in list(report.groups.values()) + list(report.field_checks.values()))
    ok = (report.passed and report.tolerance <= 1e-4 and report.parameters_checked >= 200
          and len(report.groups) == 6 and len(report.field_checks) == 6 and elapsed <= 300)
    verdict(1, ok, f"params={report.parameters_checked} groups={len(report.groups)} "
                   f"fields={len(report.field_checks)} worst_rel_err={worst:.2e} time={elapsed:.1f}s")


def test_criterion_2_shape_ladder(verdict):
    cfg = ModelConfig()
    with torch.device("meta"):
        net = DisplacementNet(cfg)
        pyramid, half, full = net.encode(torch.empty((1, 7, 128, 128, 32)))
        dvf = net.decode(pyramid, half, full)
    grids = [tuple(p.shape[2:]) + (p.shape[1],) for p in pyramid]
    ok = grids == [(32, 32, 16, 96), (16, 16, 8, 192), (8, 8, 4, 384), (4, 4, 2, 768)] \
        and tuple(dvf.shape[1:]) == (3, 128, 128, 32)
    verdict(2, ok, f"grids={grids} dvf={tuple(dvf.shape[1:])}")


def test_criterion_3_warp_exactness(verdict):
    rng = np.random.default_rng(0)
    img = rng.normal(size=(9, 8, 7))
    zero = np.zeros((3,) + img.shape)
    identity_err = max(np.abs(warp(img, zero, mode) - img).max() for mode in WarpMode)
    shift = np.zeros_like(zero)
    shift[0], shift[2] = 2.0, -1.0
    expect = np.empty_like(img)
    expect[:-2, :, 1:] = img[2:, :, :-1]
    moved = warp(img, shift, WarpMode.TRILINEAR)
    shift_exact = np.array_equal(moved[:-2, :, 1:], expect[:-2, :, 1:])
    pair = np.zeros((2, 1, 1))
    pair[1] = 10.0
    half = np.zeros((3, 2, 1, 1))
    half[0] = 0.5
    half_value = float(warp(pair, half, WarpMode.TRILINEAR)[0, 0, 0])
    ok = identity_err <= 1e-6 and shift_exact and abs(half_value - 5.0) <= 1e-6
    verdict(3, ok, f"identity_err={identity_err:.1e} shift_exact={shift_exact} half_voxel={half_value}")


def test_criterion_4_metric_oracles(verdict):
    from anapred import metrics

    rng = np.random.default_rng(123)
    worst = {"dice": 0.0, "asd": 0.0, "ssim": 0.0, "mse": 0.0}
    for _ in range(200):
        shape = tuple(int(s) for s in rng.integers(1, 13, size=3))
        spacing = tuple(float(s) for s in rng.uniform(0.5, 3.0, size=3))
        a, b = rng.random(shape) < 0.4, rng.random(shape) < 0.4
        a.flat[0] = b.flat[-1] = True  # ASD needs non-empty masks
        x = rng.uniform(-1, 1, shape)
        y = np.clip(x + rng.normal(scale=0.3, size=shape), -1, 1)
        worst["dice"] = max(worst["dice"], abs(metrics.dice(a, b) - oracles.dice_oracle(a, b)))
        worst["asd"] = max(worst["asd"], abs(metrics.asd(a, b, spacing) - oracles.asd_oracle(a, b, spacing)))
        worst["ssim"] = max(worst["ssim"], abs(metrics.ssim_eval(x, y) - oracles.ssim_oracle(x, y)))
        worst["mse"] = max(worst["mse"], abs(metrics.mse(x, y) - oracles.mse_oracle(x, y)))
    ramp = torch.from_numpy(np.broadcast_to(np.arange(6.0).reshape(6, 1, 1), (3, 6, 5, 4)).copy())
    ramp[1:] = 0
    ramp_value = float(diffusion_loss(ramp))
    const_value = float(diffusion_loss(torch.full((3, 5, 5, 5), 2.7, dtype=torch.float64)))
    ok = (worst["dice"] == 0 and worst["asd"] <= 1e-6 and worst["ssim"] <= 1e-5 and worst["mse"] <= 1e-9
          and abs(ramp_value - 1 / 9) <= 1e-9 and const_value == 0.0)
    detail = " ".join(f"{k}={v:.1e}" for k, v in worst.items())
    verdict(4, ok, f"{detail} ramp={ramp_value:.12f} const={const_value}")


def test_criterion_5_loss_configuration(verdict):
    w = LossWeights()
    c = generate_case(replace(SMALL_SPEC, shrink_factor=1.0, body_shrink_mm=0.0))
    parts = case_loss(c, np.zeros((3,) + c.shape), w)
    ok = (w.w_image, w.w_gtvp, w.w_gtvn, w.lam) == (1.0, 1.0, 1.0, 0.01) and parts["total"] < 1e-3
    verdict(5, ok, f"weights=({w.w_image},{w.w_gtvp},{w.w_gtvn},{w.lam}) total={parts['total']:.2e}")


def test_criterion_6_learning_trend(trend, verdict):
    _, split, result, report, elapsed = trend
    gain = report.median("Predicted", "dice_gtvp") - report.median("CBCT01", "dice_gtvp")
    ordered = 0
    for cid in split[2]:
        by = {r.subject: r for r in report.rows if r.case_id == cid}
        ordered += by["Predicted"].ssim >= by["CBCT01"].ssim >= by["PlanningCT"].ssim
    first, last = result.history[0]["train_total"], result.history[-1]["train_total"]
    ok = len(split[0]) == 24 and len(split[2]) == 3 and gain >= 0.05 and ordered >= 2 and elapsed <= 3600
    verdict(6, ok, f"dice_gtvp_gain={gain:.3f} ssim_ordered={ordered}/3 train_total {first:.4f}->{last:.4f} "
                   f"time={elapsed:.0f}s")


def test_criterion_7_determinism(trend, tmp_path, verdict):
    out_a, _, _, report_a, _ = trend
    _, _, report_b, _ = trend_run(tmp_path)
    names = ("best.ckpt", "last.ckpt", "state.ckpt", "train.log.jsonl", "events.json")
    same_files = all((out_a / n).read_bytes() == (tmp_path / n).read_bytes() for n in names)
    same_report = report_a.dumps() == report_b.dumps()
    verdict(7, same_files and same_report, f"checkpoints_identical={same_files} report_identical={same_report}")


def test_criterion_8_harness_structure(tiny_corpus, verdict):
    cases, split = tiny_corpus
    cfg = TrainConfig(epochs=1, batch_size=2, seed=0)
    cmp = run_comparison(cases, split, cfg, TINY_CONFIG)
    abl = run_ablation(cases, split, cfg, TINY_CONFIG)
    cmp_subjects = ["PlanningCT", "CBCT01", "Swin", "CNN", "ViT"]
    abl_subjects = [s.label for s in ABLATION_SELECTIONS]
    ok_cmp = cmp.subjects == cmp_subjects and all(set(cmp.aggregate[s]) == set(METRICS) for s in cmp_subjects)
    ok_abl = abl.subjects == abl_subjects and len(set(abl_subjects)) == 5
    round_trip = all(MetricsReport.from_json(json.loads(r.dumps())).dumps() == r.dumps() for r in (cmp, abl))
    verdict(8, ok_cmp and ok_abl and round_trip,
            f"compare={cmp.subjects} x {len(METRICS)} metrics; ablate={len(abl.subjects)} configs; "
            f"round_trip={round_trip}")


def test_criterion_9_optimizer_and_scheduler(verdict):
    curvature = torch.tensor([1.0, 3.0, 0.5], dtype=torch.float64)
    optimum = torch.tensor([0.3, -0.7, 1.2], dtype=torch.float64)
    p = {"t": torch.zeros(3, dtype=torch.float64)}
    s = AdamState.zeros_like(p)
    gap = math.inf
    for step in range(1, 10_001):
        adam_step(p, {"t": curvature * (p["t"] - optimum)}, s, 1e-3)
        gap = float(0.5 * (curvature * (p["t"] - optimum) ** 2).sum())
        if gap <= 1e-6:
            break
    sched = PlateauScheduler(1e-3)
    reductions = sum(sched.step(0.5) for _ in range(6))
    ok = gap <= 1e-6 and reductions == 1 and sched.lr == 5e-4
    verdict(9, ok, f"adam_gap={gap:.1e} steps={step} plateau_reductions={reductions} lr={sched.lr}")
