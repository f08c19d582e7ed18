"""trimlab: train binary gating masks on a frozen encoder, then physically
remove the dead units and measure the computational gains."""

from .autograd import (
    AutogradError,
    NumericError,
    ShapeError,
    Tensor,
    backward,
    count_macs,
    no_grad,
    ste_round,
)
from .blocks import (
    ConvBlockCfg,
    HeadCfg,
    LayerCfg,
    MaskableSite,
    ModelInstance,
    ModelSpec,
    SpecError,
    attach_head,
    build_backbone,
    default_spec,
    forward_encoder,
    forward_head,
    param_counts,
)
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, make_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, config_from_dict, default_config, load_config
from .costbench import CostReport, TimingStats, count_costs, instrumented_macs, render_comparison_row, time_forward
from .data import Dataset, FeatureSpec, TaskSpec, export_wav, featurize, generate
from .masking import (
    MaskSet,
    MaskSite,
    SparsityConfig,
    gate,
    mask_statistics,
    resolve_lambda,
    sparsity_loss,
    total_objective,
)
from .training import (
    Adam,
    TrainConfig,
    TrainResult,
    mean_average_precision,
    metrics,
    run_downstream,
    run_pretrain,
    task_loss,
    weighted_accuracy,
)
from .trimming import (
    TrimPlan,
    TrimReport,
    VerificationError,
    apply_trim,
    derive_trimmed_spec,
    plan_trim,
    trim,
    verify_equivalence,
)

__version__ = "0.1.0"
