"""Training loop, Adam, reduce-on-plateau scheduling, checkpoints and experiment harnesses."""
from __future__ import annotations

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .dataset import (
    AugmentSpec,
    Baseline,
    CaseBundle,
    InputSelection,
    augment,
    preprocess_case,
    stack_input,
)
from .losses import LossWeights, composite_loss
from .metrics import MetricsReport, MetricsRow, aggregate, evaluate_case
from .model import (
    DisplacementNet,
    EncoderKind,
    ModelConfig,
    build_model,
    load_tensors,
    save_checkpoint,
    save_tensors,
)
from .volume import PathLike, atomic_write_bytes
from .warp import Prediction, predict_anatomy

log = logging.getLogger(__name__)

LOSS_PARTS = ("total", "ssim", "dice_p", "dice_n", "diffusion")

COMPARISON_LABELS = {EncoderKind.SWIN: "Swin", EncoderKind.CONV: "CNN", EncoderKind.VIT: "ViT"}

ABLATION_SELECTIONS = (
    InputSelection(use_ct=False),
    InputSelection(use_dose=False),
    InputSelection(use_gtv_masks=False),
    InputSelection(baseline=Baseline.CT),
    InputSelection(),
)


class NumericalError(RuntimeError):
    """Training hit a non-finite loss."""


def _strict(cls, obj: dict, what: str) -> dict:
    unknown = set(obj) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {what} keys: {sorted(unknown)}")
    return dict(obj)


def augment_to_json(spec: AugmentSpec) -> dict:
    d = asdict(spec)
    d["flip_axes"] = list(spec.flip_axes)
    return d


def augment_from_json(obj: dict) -> AugmentSpec:
    d = _strict(AugmentSpec, obj, "augmentation")
    if "flip_axes" in d:
        d["flip_axes"] = tuple(d["flip_axes"])
    return AugmentSpec(**d)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    lr0: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    plateau_threshold: float = 1e-6
    min_lr: float = 1e-6
    seed: int = 0
    deterministic: bool = True
    weights: LossWeights = LossWeights()
    augment: AugmentSpec = AugmentSpec()
    selection: InputSelection = InputSelection()
    encoder_kind: EncoderKind = EncoderKind.SWIN

    def __post_init__(self):
        object.__setattr__(self, "encoder_kind", EncoderKind(self.encoder_kind))
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.lr0 <= 0 or self.min_lr < 0:
            raise ValueError("learning rates must be positive")

    def to_json(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["weights"] = self.weights.to_json()
        d["augment"] = augment_to_json(self.augment)
        d["selection"] = self.selection.to_json()
        d["encoder_kind"] = self.encoder_kind.value
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        d = _strict(cls, obj, "train config")
        if "weights" in d:
            d["weights"] = LossWeights(**_strict(LossWeights, d["weights"], "loss weight"))
        if "augment" in d:
            d["augment"] = augment_from_json(d["augment"])
        if "selection" in d:
            d["selection"] = InputSelection(**_strict(InputSelection, d["selection"], "input selection"))
        return cls(**d)


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: Dict[str, torch.Tensor] = field(default_factory=dict)
    v: Dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Dict[str, torch.Tensor]) -> "AdamState":
        return cls({k: torch.zeros_like(p) for k, p in params.items()},
                   {k: torch.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: Dict[str, torch.Tensor], grads: Dict[str, torch.Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """In-place bias-corrected Adam update.  Returns False (and changes nothing) if any gradient is non-finite."""
    for name, g in grads.items():
        if g.shape != params[name].shape or g.shape != state.m[name].shape:
            raise ValueError(f"shape mismatch for {name}")
        if not torch.isfinite(g).all():
            log.warning("non-finite gradient in %s; skipping step", name)
            return False
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for name, g in grads.items():
            m, v = state.m[name], state.v[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            params[name].sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return True


@dataclass
class PlateauScheduler:
    """Halve (by ``factor``) the learning rate after ``patience`` epochs without improvement."""

    lr: float
    factor: float = 0.5
    patience: int = 5
    threshold: float = 1e-6
    min_lr: float = 1e-6
    best: float = math.inf
    bad_epochs: int = 0

    def step(self, val_loss: float) -> bool:
        """Record one epoch's validation loss; returns True if the rate was reduced."""
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr = max(self.lr * self.factor, self.min_lr)
            self.bad_epochs = 0
            return True
        return False

    def to_json(self) -> dict:
        d = asdict(self)
        d["best"] = None if math.isinf(self.best) else self.best
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "PlateauScheduler":
        d = dict(obj)
        d["best"] = math.inf if d.get("best") is None else d["best"]
        return cls(**d)


@contextmanager
def deterministic_mode(enabled: bool = True):
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


# ---------------------------------------------------------------- batches


def prepare_case(c: CaseBundle) -> CaseBundle:
    """Normalise a case in place on its own grid (a no-op for already normalised data)."""
    return preprocess_case(c, c.ct.spacing_mm, c.shape)[0]


def batch_tensors(cases: Sequence[CaseBundle], sel: InputSelection) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Model input (B, 7, H, W, D) and the loss tensors for a batch of cases."""
    x = torch.from_numpy(np.stack([stack_input(c, sel) for c in cases]))
    bases = [c.baseline(sel) for c in cases]

    def col(vols):
        return torch.from_numpy(np.stack([v.data for v in vols])[:, None])

    targets = {
        "base_image": col([b[0] for b in bases]),
        "base_gtvp": col([b[1] for b in bases]),
        "base_gtvn": col([b[2] for b in bases]),
        "target_image": col([c.cbct21 for c in cases]),
        "target_gtvp": col([c.gtvp21 for c in cases]),
        "target_gtvn": col([c.gtvn21 for c in cases]),
    }
    return x, targets


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2 ** 64 - 1), epoch]))


def _chunks(items: Sequence, size: int) -> Iterator[list]:
    for i in range(0, len(items), size):
        yield list(items[i:i + size])


def validation_loss(net: DisplacementNet, cases: Sequence[CaseBundle], cfg: TrainConfig) -> Dict[str, float]:
    """Case-weighted mean of every loss component over ``cases`` (no augmentation)."""
    sums = dict.fromkeys(LOSS_PARTS, 0.0)
    with torch.no_grad():
        for chunk in _chunks(cases, cfg.batch_size):
            x, t = batch_tensors(chunk, cfg.selection)
            parts = composite_loss(disp=net(x), weights=cfg.weights, **t)
            for k in LOSS_PARTS:
                sums[k] += float(parts[k]) * len(chunk)
    return {k: v / len(cases) for k, v in sums.items()}


# ---------------------------------------------------------------- state files


def save_state(path: PathLike, net: DisplacementNet, adam: AdamState, sched: PlateauScheduler,
               epoch: int, cfg: TrainConfig, best_val: float) -> None:
    tensors = dict(net.state_dict())
    tensors.update({f"adam.m.{k}": t for k, t in adam.m.items()})
    tensors.update({f"adam.v.{k}": t for k, t in adam.v.items()})
    header = {
        "model_config": net.cfg.to_json(),
        "train_config": cfg.to_json(),
        "epoch": epoch,
        "adam_step": adam.step,
        "scheduler": sched.to_json(),
        "best_val": None if math.isinf(best_val) else best_val,
    }
    save_tensors(path, tensors, header)


def load_state(path: PathLike) -> Tuple[DisplacementNet, AdamState, PlateauScheduler, int, float, dict]:
    header, tensors = load_tensors(path)
    net = DisplacementNet(ModelConfig.from_json(header["model_config"]))
    names = [k for k, _ in net.named_parameters()]
    net.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adam.")})
    adam = AdamState({k: tensors[f"adam.m.{k}"].clone() for k in names},
                     {k: tensors[f"adam.v.{k}"].clone() for k in names}, header["adam_step"])
    sched = PlateauScheduler.from_json(header["scheduler"])
    best = math.inf if header["best_val"] is None else header["best_val"]
    return net, adam, sched, header["epoch"], best, header


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    net: DisplacementNet
    history: List[dict]
    events: List[dict]
    best_val: float
    out_dir: Optional[Path] = None


def _append_lines(path: Path, lines: List[dict]):
    with open(path, "a") as fh:
        for rec in lines:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def train(
    cases: Dict[str, CaseBundle],
    split: Tuple[Sequence[str], Sequence[str], Sequence[str]],
    cfg: TrainConfig = TrainConfig(),
    model_cfg: ModelConfig = ModelConfig(),
    out_dir: Optional[PathLike] = None,
    resume: Optional[PathLike] = None,
    stop_after_epoch: Optional[int] = None,
) -> TrainResult:
    """Fit a displacement network on the training split, validating once per epoch.

    With ``out_dir`` the run writes ``train.log.jsonl`` (one record per step
    and per epoch), ``events.json``, ``best.ckpt``, ``last.ckpt`` and the
    resumable ``state.ckpt``.  ``resume`` continues from such a state file;
    ``stop_after_epoch`` ends the run early (used to test resumption).
    """
    train_ids, val_ids, _ = split
    if not train_ids:
        raise ValueError("empty training split")
    missing = [i for i in list(train_ids) + list(val_ids) if i not in cases]
    if missing:
        raise KeyError(f"split references unknown cases: {missing}")
    prepared = {i: prepare_case(cases[i]) for i in list(train_ids) + list(val_ids)}
    for i, c in prepared.items():
        if not c.has_targets:
            raise ValueError(f"{i}: training cases need targets")
    val_cases = [prepared[i] for i in val_ids] or [prepared[i] for i in train_ids]
    shapes = {c.shape for c in prepared.values()}
    if len(shapes) != 1:
        raise ValueError(f"cases have differing shapes: {sorted(shapes)}")
    # The network input follows the data grid.
    model_cfg = replace(model_cfg, encoder_kind=cfg.encoder_kind, input_shape=shapes.pop())

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    with deterministic_mode(cfg.deterministic):
        if resume is not None:
            net, adam, sched, start_epoch, best_val, _ = load_state(resume)
            events = json.loads((out / "events.json").read_text()) if out and (out / "events.json").exists() else []
        else:
            net = build_model(model_cfg, seed=cfg.seed)
            params = dict(net.named_parameters())
            adam = AdamState.zeros_like({k: p.detach() for k, p in params.items()})
            sched = PlateauScheduler(cfg.lr0, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold, cfg.min_lr)
            start_epoch, best_val, events = 0, math.inf, []
            if out is not None:
                (out / "train.log.jsonl").write_text("")
        params = dict(net.named_parameters())
        history: List[dict] = []
        last_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
        for epoch in range(start_epoch, last_epoch):
            rng = epoch_rng(cfg.seed, epoch)
            order = [train_ids[i] for i in rng.permutation(len(train_ids))]
            lines, sums = [], dict.fromkeys(LOSS_PARTS, 0.0)
            net.train()
            for batch_ids in _chunks(order, cfg.batch_size):
                batch = [augment(prepared[i], cfg.augment, rng) for i in batch_ids]
                x, t = batch_tensors(batch, cfg.selection)
                try:
                    parts = composite_loss(disp=net(x), weights=cfg.weights, **t)
                except FloatingPointError as exc:
                    _dump_failure(out, epoch, batch_ids, str(exc))
                    raise NumericalError(f"non-finite loss at epoch {epoch} in cases {batch_ids}") from exc
                grads = torch.autograd.grad(parts["total"], list(params.values()), allow_unused=True)
                grads = {k: (g if g is not None else torch.zeros_like(p)) for (k, p), g in zip(params.items(), grads)}
                applied = adam_step({k: p.data for k, p in params.items()}, grads, adam, sched.lr,
                                    cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
                if not applied:
                    events.append({"event": "skipped_step", "epoch": epoch, "cases": batch_ids})
                rec = {"kind": "step", "epoch": epoch, "step": adam.step, "lr": sched.lr, "cases": batch_ids,
                       **{k: float(parts[k].detach()) for k in LOSS_PARTS}}
                lines.append(rec)
                for k in LOSS_PARTS:
                    sums[k] += rec[k] * len(batch_ids)
            net.eval()
            val = validation_loss(net, val_cases, cfg)
            epoch_rec = {"kind": "epoch", "epoch": epoch, "lr": sched.lr,
                         **{f"train_{k}": v / len(order) for k, v in sums.items()},
                         **{f"val_{k}": v for k, v in val.items()}}
            lines.append(epoch_rec)
            history.append(epoch_rec)
            if sched.step(val["total"]):
                events.append({"event": "lr_reduced", "epoch": epoch, "lr": sched.lr})
            improved = val["total"] < best_val
            if improved:
                best_val = val["total"]
            if out is not None:
                _append_lines(out / "train.log.jsonl", lines)
                meta = {"epoch": epoch + 1, "val_total": val["total"], "selection": cfg.selection.to_json()}
                if improved:
                    save_checkpoint(out / "best.ckpt", net, meta)
                    events.append({"event": "checkpoint", "kind": "best", "epoch": epoch, "val_total": val["total"]})
                save_checkpoint(out / "last.ckpt", net, meta)
                save_state(out / "state.ckpt", net, adam, sched, epoch + 1, cfg, best_val)
                atomic_write_bytes(out / "events.json", json.dumps(events, indent=2).encode())
            log.info("epoch %d train %.5f val %.5f lr %.2e", epoch, epoch_rec["train_total"], val["total"], sched.lr)
    return TrainResult(net=net, history=history, events=events, best_val=best_val, out_dir=out)


def _dump_failure(out: Optional[Path], epoch: int, case_ids, message: str):
    log.error("non-finite loss at epoch %d, cases %s: %s", epoch, case_ids, message)
    if out is not None:
        doc = {"epoch": epoch, "cases": list(case_ids), "message": message}
        atomic_write_bytes(out / "failure.json", json.dumps(doc, indent=2).encode())


# ---------------------------------------------------------------- inference and harnesses


def predict(net: DisplacementNet, c: CaseBundle, sel: InputSelection = InputSelection()) -> Prediction:
    c = prepare_case(c)
    x = torch.from_numpy(stack_input(c, sel)).to(next(net.parameters()).dtype)
    net.eval()
    with torch.no_grad():
        disp = net(x)[0].double().numpy()
    return predict_anatomy(c, disp, sel)


def evaluate_model(net: DisplacementNet, cases: Sequence[CaseBundle], sel: InputSelection = InputSelection(),
                   label: str = "Predicted") -> List[MetricsRow]:
    rows = []
    for c in cases:
        c = prepare_case(c)
        rows.extend(evaluate_case(c, predict(net, c, sel), label=label))
    return rows


def _test_cases(cases, split):
    test_ids = split[2]
    if not test_ids:
        raise ValueError("empty test split")
    return [cases[i] for i in test_ids]


def run_comparison(cases: Dict[str, CaseBundle], split, cfg: TrainConfig = TrainConfig(),
                   model_cfg: ModelConfig = ModelConfig(), out_dir: Optional[PathLike] = None) -> MetricsReport:
    """Train each encoder kind with identical seeds and splits; one report row set per model."""
    test = _test_cases(cases, split)
    rows: List[MetricsRow] = []
    for i, (kind, label) in enumerate(COMPARISON_LABELS.items()):
        sub = Path(out_dir) / label if out_dir is not None else None
        result = train(cases, split, replace(cfg, encoder_kind=kind), model_cfg, out_dir=sub)
        model_rows = evaluate_model(result.net, test, cfg.selection, label=label)
        rows.extend(r for r in model_rows if i == 0 or r.subject == label)
    ordered = [r for s in ("PlanningCT", "CBCT01", *COMPARISON_LABELS.values()) for r in rows if r.subject == s]
    return aggregate(ordered, title="Image and structure similarity to CBCT21")


def run_ablation(cases: Dict[str, CaseBundle], split, cfg: TrainConfig = TrainConfig(),
                 model_cfg: ModelConfig = ModelConfig(), out_dir: Optional[PathLike] = None) -> MetricsReport:
    """Train one model per input configuration; only the predicted rows are reported."""
    test = _test_cases(cases, split)
    rows: List[MetricsRow] = []
    for i, sel in enumerate(ABLATION_SELECTIONS):
        sub = Path(out_dir) / f"config{i}" if out_dir is not None else None
        result = train(cases, split, replace(cfg, selection=sel), model_cfg, out_dir=sub)
        rows.extend(r for r in evaluate_model(result.net, test, sel, label=sel.label) if r.subject == sel.label)
    return aggregate(rows, title="Input configuration ablation")
