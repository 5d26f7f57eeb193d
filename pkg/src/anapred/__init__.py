"""Prediction of longitudinal anatomy change from planning and first-fraction images.

A network maps the planning CT, its GTV masks, the dose map, the first CBCT
and its GTV masks to a dense displacement field; warping the first CBCT and
its masks with that field gives the predicted late-fraction anatomy.
"""
from .dataset import AugmentSpec, Baseline, CaseBundle, InputSelection, stack_input
from .losses import LossWeights, composite_loss
from .metrics import MetricsReport, MetricsRow, aggregate, evaluate_case
from .model import DisplacementNet, EncoderKind, ModelConfig, build_model
from .phantom import PhantomRanges, PhantomSpec, generate_case, generate_corpus
from .train import TrainConfig, predict, train
from .volume import Kind, Volume, read_volume, write_volume
from .warp import Prediction, WarpMode, predict_anatomy, warp

__all__ = [
    "AugmentSpec", "Baseline", "CaseBundle", "InputSelection", "stack_input",
    "LossWeights", "composite_loss",
    "MetricsReport", "MetricsRow", "aggregate", "evaluate_case",
    "DisplacementNet", "EncoderKind", "ModelConfig", "build_model",
    "PhantomRanges", "PhantomSpec", "generate_case", "generate_corpus",
    "TrainConfig", "predict", "train",
    "Kind", "Volume", "read_volume", "write_volume",
    "Prediction", "WarpMode", "predict_anatomy", "warp",
]
