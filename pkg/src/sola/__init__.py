"""Lightweight temporal refinement of frozen snippet features, trained by
matching each window's predicted self-similarity matrix against a fixed
interval-based target."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    DomainError,
    FormatError,
    IoError,
    NumericsError,
    ShapeError,
    SolaError,
    SpecError,
    TooShortError,
    UnsupportedLayout,
)
from .feature_store import (
    FeatureSequence,
    FeatureWindow,
    SegmentLabels,
    SyntheticSpec,
    generate_synthetic,
    load_array_file,
    load_corpus,
    sample_window,
    save_array_file,
)
from .model import ModelConfig, SolaParams, conv1d_same, init_params, proj_forward, sola_forward
from .similarity import (
    MatchConfig,
    Tsm,
    build_target_tsm,
    gather,
    matching_loss,
    predicted_tsm,
    rescaled_cosine,
    target_similarity,
)
from .trainer import (
    AdamState,
    GradientSet,
    TrainConfig,
    TrainHistory,
    adam_step,
    finite_diff_grad,
    load_checkpoint,
    loss_and_grad,
    save_checkpoint,
    train,
)
from .evaluation import (
    DecayCurve,
    ProbeResult,
    average_tsm,
    compute_tsm,
    corpus_sensitivity,
    export_heatmap,
    linear_probe,
    similarity_decay,
    temporal_sensitivity,
    transform,
)
