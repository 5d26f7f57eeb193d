"""Command-line entry point: ``anapred <command> [options]``.

Exit codes: 0 success, 2 invalid configuration or malformed input, 3 missing
inputs, 4 numerical failure, 5 gradient check failure.  Machine-readable
results go to stdout, diagnostics to stderr.  ``ANAPRED_LOG`` sets the log
level (default WARNING).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import torch

from . import dataset as ds
from .gradcheck import run_gradcheck
from .metrics import aggregate, evaluate_case
from .model import TINY_CONFIG, ModelConfig, load_checkpoint
from .phantom import PhantomRanges, PhantomSpec, generate_corpus
from .train import (
    NumericalError,
    TrainConfig,
    predict,
    prepare_case,
    run_ablation,
    run_comparison,
    train,
)
from .volume import Kind, Volume, VolumeFormatError, atomic_write_bytes, write_volume
from .warp import Prediction

log = logging.getLogger("anapred")

EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERICAL, EXIT_GRADCHECK = 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class RunConfig:
    """Everything one experiment needs, loadable from a single JSON document."""

    phantom: PhantomRanges = PhantomRanges()
    phantom_grid: Tuple[Tuple[int, int, int], Tuple[float, float, float]] = ((64, 64, 16), (2.0, 2.0, 2.0))
    split_fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0
    preprocess_spacing_mm: Tuple[float, float, float] = (2.0, 2.0, 2.0)
    preprocess_shape: Tuple[int, int, int] = (128, 128, 32)
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    selection: ds.InputSelection = ds.InputSelection()
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(obj)
        if "phantom" in d:
            d["phantom"] = PhantomRanges.from_json(d["phantom"])
        if "phantom_grid" in d:
            shape, spacing = d["phantom_grid"]
            d["phantom_grid"] = (tuple(shape), tuple(spacing))
        for k in ("split_fractions", "preprocess_spacing_mm", "preprocess_shape"):
            if k in d:
                d[k] = tuple(d[k])
        if "model" in d:
            d["model"] = ModelConfig.from_json(d["model"])
        if "train" in d:
            if "selection" in d["train"]:
                raise ValueError("set the input selection at the top level, not inside train")
            d["train"] = TrainConfig.from_json(d["train"])
        if "selection" in d:
            unknown = set(d["selection"]) - {f.name for f in fields(ds.InputSelection)}
            if unknown:
                raise ValueError(f"unknown selection keys: {sorted(unknown)}")
            d["selection"] = ds.InputSelection(**d["selection"])
        if "paths" in d and not isinstance(d["paths"], dict):
            raise ValueError("paths must be an object")
        return cls(**d)

    def train_config(self) -> TrainConfig:
        return replace(self.train, selection=self.selection)


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_MISSING, f"config file not found: {p}")
    try:
        return RunConfig.from_json(json.loads(p.read_text()))
    except (ValueError, TypeError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid config {p}: {exc}") from exc


def _train_config(args, cfg: RunConfig) -> TrainConfig:
    tcfg = cfg.train_config()
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    if args.deterministic:
        tcfg = replace(tcfg, deterministic=True)
    if getattr(args, "epochs", None) is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    return tcfg


def _manifest_path(data: str) -> Path:
    p = Path(data)
    p = p / "manifest.json" if p.is_dir() else p
    if not p.exists():
        raise CliError(EXIT_MISSING, f"manifest not found: {p}")
    return p


def _load_corpus(data: str):
    manifest = _manifest_path(data)
    split_path = manifest.parent / "split.json"
    if not split_path.exists():
        raise CliError(EXIT_MISSING, f"split file not found: {split_path}")
    return ds.load_cases(manifest), ds.read_split(split_path)


def _emit(obj: dict):
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_generate(args, cfg: RunConfig) -> int:
    if args.n is None or args.n < 1:
        raise CliError(EXIT_CONFIG, f"--n must be a positive case count, got {args.n}")
    seed = 0 if args.seed is None else args.seed
    shape, spacing = cfg.phantom_grid
    base = PhantomSpec(shape=shape, spacing_mm=spacing)
    out = Path(args.out)
    cases, manifest = generate_corpus(args.n, cfg.phantom, seed=seed, base=base, out_dir=out)
    train_ids, val_ids, test_ids = ds.split_cases([c.case_id for c in cases], cfg.split_fractions, cfg.split_seed)
    ds.write_split(out / "split.json", train_ids, val_ids, test_ids)
    _emit({"manifest": str(manifest), "cases": len(cases),
           "split": {"train": len(train_ids), "val": len(val_ids), "test": len(test_ids)}})
    return 0


def cmd_preprocess(args, cfg: RunConfig) -> int:
    manifest = _manifest_path(args.data)
    out = Path(args.out)
    processed, provenance = [], {}
    for entry in ds.read_manifest(manifest):
        c, prov = ds.preprocess_case(ds.load_case(entry), cfg.preprocess_spacing_mm, cfg.preprocess_shape)
        processed.append(c)
        provenance[c.case_id] = prov
    new_manifest = ds.write_manifest(processed, out)
    atomic_write_bytes(out / "provenance.json", json.dumps(provenance, indent=2, sort_keys=True).encode())
    split = manifest.parent / "split.json"
    if split.exists():
        atomic_write_bytes(out / "split.json", split.read_bytes())
    _emit({"manifest": str(new_manifest), "cases": len(processed)})
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    cases, split = _load_corpus(args.data)
    tcfg = _train_config(args, cfg)
    resume = args.resume
    if resume is not None and not Path(resume).exists():
        raise CliError(EXIT_MISSING, f"state file not found: {resume}")
    result = train(cases, split, tcfg, cfg.model, out_dir=args.out, resume=resume)
    _emit({"best_val": result.best_val, "epochs": len(result.history), "out": str(args.out)})
    return 0


def _read_checkpoint(path):
    if not Path(path).exists():
        raise CliError(EXIT_MISSING, f"checkpoint not found: {path}")
    net, header = load_checkpoint(path)
    sel = ds.InputSelection(**header["selection"]) if "selection" in header else ds.InputSelection()
    return net, sel


def _load_case_dir(path) -> ds.CaseBundle:
    p = Path(path)
    if not p.is_dir():
        raise CliError(EXIT_MISSING, f"case directory not found: {p}")
    return ds.load_case(ds.case_dir_entry(p))


def write_prediction(pred: Prediction, ref: Volume, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_volume(Volume(pred.image.data, ref.spacing_mm, ref.origin_mm, Kind.IMAGE, "image"), out / "image")
    write_volume(Volume(pred.gtvp.data, ref.spacing_mm, ref.origin_mm, Kind.MASK, "gtvp"), out / "gtvp")
    write_volume(Volume(pred.gtvn.data, ref.spacing_mm, ref.origin_mm, Kind.MASK, "gtvn"), out / "gtvn")
    for comp, name in zip(pred.dvf if pred.dvf is not None else (), ds.DVF_CHANNELS):
        write_volume(Volume(comp, ref.spacing_mm, ref.origin_mm, Kind.IMAGE, name), out / name)


def read_prediction(path: Path) -> Prediction:
    from .volume import read_volume

    dvf = np.stack([read_volume(path / n).data for n in ds.DVF_CHANNELS]) \
        if all((path / f"{n}.mvol.json").exists() for n in ds.DVF_CHANNELS) else None
    return Prediction(read_volume(path / "image"), read_volume(path / "gtvp"), read_volume(path / "gtvn"), dvf)


def cmd_predict(args, cfg: RunConfig) -> int:
    net, sel = _read_checkpoint(args.checkpoint)
    c = prepare_case(_load_case_dir(args.case))
    pred = predict(net, c, sel)
    write_prediction(pred, c.ct, Path(args.out))
    _emit({"case_id": c.case_id, "out": str(args.out)})
    return 0


def _write_report(report, out: Optional[str], stem: str, csv: bool):
    text = report.to_text()
    sys.stderr.write(text + "\n")
    if out is not None:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(out_dir / f"{stem}.json", report.dumps().encode())
        atomic_write_bytes(out_dir / f"{stem}.txt", (text + "\n").encode())
        if csv:
            atomic_write_bytes(out_dir / f"{stem}.csv", report.to_csv().encode())
    _emit(report.to_json())


def cmd_evaluate(args, cfg: RunConfig) -> int:
    if args.case is not None:
        cases = [_load_case_dir(args.case)]
    else:
        corpus, split = _load_corpus(args.data)
        cases = [corpus[i] for i in split[2]]
    rows = []
    if args.pred is not None:
        root = Path(args.pred)
        for c in cases:
            pdir = root if args.case is not None else root / c.case_id
            if not (pdir / "image.mvol.json").exists():
                raise CliError(EXIT_MISSING, f"prediction not found for {c.case_id}: {pdir}")
            rows.extend(evaluate_case(prepare_case(c), read_prediction(pdir)))
    elif args.checkpoint is not None:
        net, sel = _read_checkpoint(args.checkpoint)
        for c in cases:
            c = prepare_case(c)
            rows.extend(evaluate_case(c, predict(net, c, sel)))
    else:
        raise CliError(EXIT_CONFIG, "evaluate needs --pred or --checkpoint")
    _write_report(aggregate(rows, title="Similarity to CBCT21"), args.out, "evaluation", args.csv)
    return 0


def cmd_compare(args, cfg: RunConfig) -> int:
    cases, split = _load_corpus(args.data)
    report = run_comparison(cases, split, _train_config(args, cfg), cfg.model, out_dir=args.out)
    _write_report(report, args.out, "comparison", args.csv)
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    cases, split = _load_corpus(args.data)
    report = run_ablation(cases, split, _train_config(args, cfg), cfg.model, out_dir=args.out)
    _write_report(report, args.out, "ablation", args.csv)
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    # Only the "model" block of a config is used, as overrides on the tiny network.
    model_cfg = TINY_CONFIG
    if args.config is not None:
        raw = json.loads(Path(args.config).read_text())
        if "model" in raw:
            model_cfg = ModelConfig.from_json({**TINY_CONFIG.to_json(), **raw["model"]})
    report = run_gradcheck(model_cfg, seed=0 if args.seed is None else args.seed, corrupt_group=args.corrupt)
    sys.stderr.write(report.to_text() + "\n")
    _emit(report.to_json())
    if not report.passed:
        worst = report.failures[0]
        raise CliError(EXIT_GRADCHECK, f"gradient check failed in group {worst.name} at {worst.worst_entry}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "compare": cmd_compare,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anapred", description="Anatomy change prediction pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--deterministic", action="store_true", help="force deterministic algorithms")
    common.add_argument("--jobs", type=int, help="cap on worker threads")
    common.add_argument("--csv", action="store_true", help="also write reports as CSV")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a phantom corpus, manifest and split")
    p.add_argument("--n", type=int, help="number of cases")
    p = sub.add_parser("preprocess", parents=[common], help="resample, crop/pad and normalise a corpus")
    p.add_argument("--data", required=True, help="input corpus directory or manifest")
    p = sub.add_parser("train", parents=[common], help="train a model on a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="state file to continue from")
    p = sub.add_parser("predict", parents=[common], help="predict the follow-up anatomy of one case")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--case", required=True, help="case directory")
    p = sub.add_parser("evaluate", parents=[common], help="score predictions against CBCT21")
    p.add_argument("--data", help="corpus (test split is evaluated)")
    p.add_argument("--case", help="single case directory")
    p.add_argument("--pred", help="prediction directory (per case id for a corpus)")
    p.add_argument("--checkpoint", help="predict with this checkpoint instead of reading --pred")
    for name in ("compare", "ablate"):
        p = sub.add_parser(name, parents=[common], help=f"{name} harness: train several models and report")
        p.add_argument("--data", required=True)
        p.add_argument("--epochs", type=int)
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    p.add_argument("--corrupt", choices=("embedding", "attention", "bias", "norm", "decoder", "head"),
                   help=argparse.SUPPRESS)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("ANAPRED_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.jobs is not None:
            if args.jobs < 1:
                raise CliError(EXIT_CONFIG, "--jobs must be >= 1")
            torch.set_num_threads(args.jobs)
        if args.command not in ("predict", "gradcheck", "evaluate") and args.out is None:
            raise CliError(EXIT_CONFIG, f"{args.command} needs --out")
        if args.command == "gradcheck":
            if args.config is not None and not Path(args.config).exists():
                raise CliError(EXIT_MISSING, f"config file not found: {args.config}")
            return cmd_gradcheck(args, RunConfig())
        if args.command == "predict" and args.out is None:
            raise CliError(EXIT_CONFIG, "predict needs --out")
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return exc.code
    except (NumericalError, FloatingPointError) as exc:
        sys.stderr.write(f"numerical failure: {exc}\n")
        return EXIT_NUMERICAL
    except (FileNotFoundError, KeyError) as exc:
        sys.stderr.write(f"missing input: {exc}\n")
        return EXIT_MISSING
    except (VolumeFormatError, ValueError, TypeError, json.JSONDecodeError) as exc:
        sys.stderr.write(f"invalid input: {exc}\n")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
