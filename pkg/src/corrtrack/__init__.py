"""Correspondence-supervised point tracking on feature volumes.

The pieces: zero-shot feature-space tracking (cost volumes + windowed
soft-argmax), a differentiable correspondence loss with hand-derived
gradients, flow chaining with cycle checks for pseudo ground truth,
standard tracking metrics, a synthetic scene generator that knows the
true answers, and a small refiner network trained by hand-written
backprop against the correspondence loss.
"""

from .core import (
    CorrespondenceSet,
    CorrtrackError,
    FeatureVolume,
    FlowPyramid,
    FormatError,
    LengthError,
    Pair,
    Point,
    Track,
    TrackSet,
    ValidationError,
    read_checkpoint,
    read_feature_volume,
    read_flows,
    read_tracks,
    tracks_to_json,
    write_checkpoint,
    write_feature_volume,
    write_flows,
    write_tracks,
)
from .corrloss import (
    LossConfig,
    LossResult,
    corr_loss,
    corr_loss_value,
    fd_gradient,
    gradient_check_clean,
    huber,
    sample_pairs,
)
from .flowchain import Seed, advect, chain_tracks, long_range_reject, seeds_from_grid
from .matching import (
    CostVolume,
    DegenerateQueryError,
    MatchConfig,
    Segment,
    bilinear_weights,
    cost_volume,
    plan_segments,
    predict_target,
    sample_feature,
    soft_argmax,
    track_zero_shot,
    track_zero_shot_segmented,
    window_mask,
)
from .metrics import (
    EvalConfig,
    EvalReport,
    average_jaccard,
    badja_metrics,
    evaluate,
    jaccard_at,
    occlusion_accuracy,
    position_accuracy,
)
from .micronet import (
    AdamW,
    ConvLayer,
    Model,
    TrainConfig,
    TrainItem,
    TrainingError,
    apply_refiner,
    compute_grads,
    conv_backward,
    conv_forward,
    identity_conv,
    load_checkpoint,
    model_init,
    refiner_init,
    save_checkpoint,
    select_trainable_pairs,
    train_refiner,
    train_step,
    zero_conv,
)
from .synthgen import (
    BenchmarkItem,
    CorruptionSpec,
    SceneBundle,
    SceneSpec,
    SpriteSpec,
    corrupt_features,
    ideal_features,
    make_benchmark,
    render_scene,
)

__version__ = "0.1.0"
