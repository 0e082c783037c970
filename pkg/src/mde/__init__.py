"""Model drift estimation from batch-normalization statistics.

Compare a trained network's BN running estimates against live batch
statistics to score dataset shift without labels, then use the score to rank
and select models. Includes a small deterministic CNN stack, shift
simulation, selection metrics, and a bit-exact trace/model file format.
"""

from .batchnorm import (
    BatchStats,
    BnLayerState,
    batch_stats,
    bn_forward,
    ema_update,
    source_normalize,
    target_normalize,
)
from .drift import (
    DriftConfig,
    DriftError,
    DriftReport,
    Metric,
    NoBnLayersError,
    aggregate,
    cosine_distance,
    fake_batches,
    fakedata_report,
    gaussian_kl_drift,
    layer_drift,
    mde_score,
    minibatch_stream,
    normalize_by_fakedata,
    score_layer_inputs,
    score_stats,
    wasserstein_layer_drift,
)
from .linalg import (
    SvdResult,
    refine_low_rank,
    reshape_channels,
    sample_from_channels,
    svd,
    truncate_reconstruct,
)
from .selection import (
    CandidateScore,
    LinearFit,
    SelectionOutcome,
    brier,
    ece,
    linear_fit,
    nll,
    run_concept_recovery,
    select_model,
    spearman_rank_corr,
)
from .shiftlab import (
    Brightness,
    CutOut,
    GaussianNoise,
    OverlapSpec,
    Rotation,
    SyntheticDataset,
    apply_shift,
    cycle_stream,
    generate_dataset,
    overlapping_split,
)
from .toynet import (
    AvgPool,
    BatchNorm,
    Conv2d,
    Flatten,
    Linear,
    Relu,
    ToyModel,
    TrainConfig,
    build_model,
    default_model,
    default_specs,
    evaluate,
    finite_difference_check,
    forward,
    subset_accuracy,
    train,
)

__version__ = "0.1.0"
