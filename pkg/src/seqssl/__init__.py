"""Spatiotemporal stacked sequential learning for sliding-window detection.

A linear base classifier over dense feature channels scores every window
of an image pyramid; a second-stage classifier augments each candidate's
descriptor with the base classifier's cached scores over a spatiotemporal
neighborhood and makes the final call. Includes sequence/model I/O, a
Caltech-style FPPI / miss-rate evaluator and a synthetic moving-target
benchmark.
"""

__version__ = "0.1.0"

from .sequence_io import (
    Annotation,
    BBox,
    Frame,
    ImageSequence,
    load_model,
    load_sequence,
    save_model,
    save_sequence,
    subsample_fps,
)
from .features import (
    ChannelConfig,
    Descriptor,
    FeatureChannels,
    FlowField,
    compute_channels,
    compute_flow,
    extract_descriptor,
    mean_flow_in_window,
)
from .linear_svm import LinearModel, SvmConfig, TrainSet, bootstrap_train, score, train
from .scanning import DetectorConfig, Pyramid, ScoreMap, ScoreMapStore, build_pyramid
from .ssl_core import (
    AugmentedSample,
    FoldPlan,
    NeighborhoodSpec,
    WindowTrack,
    build_track,
    gather_neighbor_scores,
    make_fold_plan,
    train_ssl,
)
from .detector import Detection, detect_sequence, nms, stage1_scan, stage2_ssl
from .evaluation import (
    CurvePoint,
    EvalConfig,
    curve,
    log_average_miss_rate,
    match_frame,
    select_subset,
)
from .synth import SynthConfig, generate, generate_splits
from .config import RunConfig, load_config
