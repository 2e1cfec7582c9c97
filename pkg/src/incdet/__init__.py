"""Incremental few-shot object detection at desk scale.

A miniature set-prediction detector trained in three phases: base
pre-training, self-supervised base fine-tuning on selective-search pseudo
proposals, and incremental few-shot fine-tuning with masked feature
distillation and classification KL distillation against the frozen base
model.
"""

from .config import ExperimentConfig, PhaseConfig, load_config
from .data import Dataset, DetectionSample, SplitSpec, generate_shapes, kshot_sample
from .evaluation import EvalResult, evaluate
from .geometry import Box, PixelBox, giou, iou
from .matcher import Assignment, GroundTruthSet, PredictionSet, hungarian_solve
from .model import Detector, ModelConfig, ParamGroup
from .pipeline import finetune_base, finetune_novel, pretrain_base, run_protocol

__version__ = "0.1.0"

__all__ = [
    "Assignment",
    "Box",
    "Dataset",
    "DetectionSample",
    "Detector",
    "EvalResult",
    "ExperimentConfig",
    "GroundTruthSet",
    "ModelConfig",
    "ParamGroup",
    "PhaseConfig",
    "PixelBox",
    "PredictionSet",
    "SplitSpec",
    "evaluate",
    "finetune_base",
    "finetune_novel",
    "generate_shapes",
    "giou",
    "hungarian_solve",
    "iou",
    "kshot_sample",
    "load_config",
    "pretrain_base",
    "run_protocol",
]
