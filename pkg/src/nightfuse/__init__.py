"""Day-to-night image/event preprocessing, self-training, and evaluation."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    IGNORE,
    AllIgnored,
    ClassCountMismatch,
    DimensionMismatch,
    EventOutOfBounds,
    EventStream,
    GrayImage,
    InvalidParams,
    LabelMask,
    NoDefinedClasses,
    NonFiniteInput,
    NonFiniteLoss,
    ParseError,
    PipelineError,
    ProbMap,
    ShiftTooLarge,
    SignedMap,
    UnsortedTimestamps,
    ValueOutOfRange,
    to_grayscale,
)
from .motion import FilterParams, apply_filter, extract_motion, night_style_hook, salt_pepper_hook  # noqa: F401
from .content import ContentParams, extract_content, shift_image  # noqa: F401
from .voxel import VoxelGrid, WindowSpec, collapse_to_map, normalize_voxels, select_window, voxelize  # noqa: F401
from .warp import CameraIntrinsics, DepthMap, RigidTransform, warp_labels, warp_to_event_frame  # noqa: F401
from .model import ModelDims, ModelParams, ce_loss, decode, encode, forward, fuse, init_params, weighted_loss  # noqa: F401
from .metrics import CLASS_SCHEMAS, ConfusionMatrix, accumulate, format_percent, iou_per_class, miou  # noqa: F401
from .trainer import (  # noqa: F401
    Scenario,
    SourceSample,
    TargetSample,
    TrainConfig,
    evaluate,
    make_synthetic_scenario,
    pseudo_label,
    train,
    train_step,
)
