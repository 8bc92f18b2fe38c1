"""One-shot temporal sign spotting at desk scale.

A query clip is summarized by multi-stride adaptive features; a continuous
target gets per-frame sliding-window features; a transformer encoder-decoder
matches the two and predicts, per target frame, whether the query occurs.
Training, evaluation metrics, a synthetic ground-truth corpus generator and
bit-exact file formats are included.
"""

from .errors import (
    BoundsError,
    ConfigError,
    CorpusError,
    DataError,
    FormatError,
    NumericError,
    ShapeError,
    SignLookupError,
)
from .features import (
    AdaptiveQueryFeatures,
    TargetFeatureSequence,
    VideoClip,
    adaptive_indices,
    extract_adaptive_query,
    extract_target_sequence,
    projection_extractor,
    window_spans,
)
from .metrics import (
    AnnotatedSegment,
    MetricsReport,
    PooledF1,
    evaluate,
    f1_at_k,
    frame_accuracy,
    segments_from_frames,
)
from .model import (
    ForwardActivations,
    ModelConfig,
    SignLookupModel,
    classify,
    decode,
    default_config,
    embed,
    encode,
    forward,
    positional_encoding,
    spot_probabilities,
)
from .numerics import (
    RngState,
    Tensor,
    dropout,
    feed_forward,
    grad_check,
    layer_norm,
    leaky_relu,
    multi_head_attention,
    no_grad,
    scaled_dot_attention,
    softmax,
    xavier_init,
)
from .synthgen import (
    SignPrototype,
    SynthConfig,
    gen_continuous,
    gen_corpus,
    gen_vocabulary,
    render_sign,
)
from .training import (
    PlateauState,
    TrainConfig,
    TrainingPair,
    bce_loss,
    build_pairs,
    plateau_schedule,
    sgd_step,
    train,
)

__version__ = "0.1.0"
