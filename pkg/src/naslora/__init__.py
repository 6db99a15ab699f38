"""naslora: parameter-efficient segmentation adapters with a differentiable
candidate-operation cell between the low-rank encoder and decoder."""

from .adapters import Adapter, MergedProjection, MergeReport, merge, verify_merge
from .autodiff import GradTape, Tensor, backward, grad_check, tensor
from .cell import (CANDIDATE_ORDER, CandidateOpKind, ChannelMask, NasCell,
                   cell_forward, fold_cell, make_channel_mask, op_proportions)
from .checkpoint import read_checkpoint, restore_state, write_checkpoint
from .config import RunConfig, load_config, parse_config, to_text
from .data import DataConfig, SegSample, SynthProvider, generate_sample
from .errors import (CheckpointError, ConfigError, NasLoraError,
                     NonFiniteError, ShapeError, TrainingDiverged,
                     ValueCheckError)
from .estimator import NasLoraSegmenter, check_image_batch, check_label_batch
from .metrics import MetricReport, compute_metrics
from .model import (ModelConfig, SegModel, mean_attention_distance,
                    semantic_inference)
from .optim import AdamState, adam_step, zero_grads
from .train import TrainConfig, History, evaluate, headline, stage_wise_train

__version__ = "0.1.0"

__all__ = [
    "Adapter",
    "AdamState",
    "CANDIDATE_ORDER",
    "CandidateOpKind",
    "ChannelMask",
    "CheckpointError",
    "ConfigError",
    "DataConfig",
    "GradTape",
    "History",
    "MergeReport",
    "MergedProjection",
    "MetricReport",
    "ModelConfig",
    "NasCell",
    "NasLoraError",
    "NasLoraSegmenter",
    "NonFiniteError",
    "RunConfig",
    "SegModel",
    "SegSample",
    "ShapeError",
    "SynthProvider",
    "Tensor",
    "TrainConfig",
    "TrainingDiverged",
    "ValueCheckError",
    "adam_step",
    "backward",
    "cell_forward",
    "check_image_batch",
    "check_label_batch",
    "compute_metrics",
    "evaluate",
    "fold_cell",
    "generate_sample",
    "grad_check",
    "headline",
    "load_config",
    "make_channel_mask",
    "mean_attention_distance",
    "merge",
    "op_proportions",
    "parse_config",
    "read_checkpoint",
    "restore_state",
    "semantic_inference",
    "stage_wise_train",
    "tensor",
    "to_text",
    "verify_merge",
    "write_checkpoint",
    "zero_grads",
]
