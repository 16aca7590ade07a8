"""Selective output smoothing: losses, a minimal network stack, and a harness.

The core idea: when the model already classifies a sample correctly with
probability above a threshold, push all of its non-target logits toward
their common mean through an extra mean-squared-error term. This package
bundles that loss (plus label smoothing, a confidence penalty, and patch
mixing for comparison), a small numpy feed-forward stack with hand-written
backprop, dataset builders, and a config-driven experiment CLI.
"""

from .config import RegularizerSpec, RunConfig, build_datasets, parse_config, parse_data_recipe
from .data import (
    CutMixBatch,
    ImbalanceProfile,
    LabeledDataset,
    augment_standard,
    cutmix_mix,
    cutout,
    gaussian_blobs,
    load_cifar_binary,
    long_tail_counts,
    make_long_tailed,
    save_cifar_binary,
    subset_per_class,
)
from .errors import ConfigError, NumericError
from .harness import (
    EpochMetrics,
    SweepRow,
    census_overconfident,
    compute_loss,
    evaluate,
    export_features_2d,
    nontarget_logit_std,
    read_metrics,
    sweep,
    train_run,
    write_metrics,
)
from .losses import (
    DesiredOutput,
    HardTargets,
    LossResult,
    PairTargets,
    SmoothedTargets,
    SosrConfig,
    TargetSpec,
    apply_variant_mask,
    beta_at_epoch,
    build_desired_output,
    build_desired_output_cutmix,
    confidence_penalty_loss,
    cross_entropy,
    detect_overconfident,
    detect_overconfident_cutmix,
    label_smoothing_targets,
    mean_entropy,
    softmax,
    sosr_loss,
)
from .nn import (
    Conv2d,
    Dense,
    Flatten,
    LrSchedule,
    MaxPool2d,
    ModelGraph,
    OptimizerState,
    ReLU,
    backward,
    build_model,
    finite_diff_grad,
    format_layer_spec,
    forward,
    load_checkpoint,
    lr_at_epoch,
    parse_layer_spec,
    save_checkpoint,
    sgd_step,
)

__version__ = "0.1.0"
