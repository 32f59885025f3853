"""Nested recurrent-residual U-Net (R2U++) on a small numpy autograd core."""
from .blocks import BlockSpec, block_param_count, plain_block, rcl_unit, rrcl_block
from .errors import CheckpointError, ConfigError, DataError, R2UppError, ShapeError
from .graph import (
    PRESETS,
    ArchitectureConfig,
    GraphPlan,
    NestedUNet,
    NodeId,
    build_plan,
    count_parameters,
    dump_plan,
    ensemble,
    forward,
    head,
    prune,
)
from .metrics import accuracy, binarize, confusion_counts, dice, hybrid_loss, iou, sensitivity, specificity, total_loss
from .tensor import Parameter, Tensor, no_grad
from .trainer import TrainConfig, adam_step, evaluate, fit

__version__ = "0.1.0"
