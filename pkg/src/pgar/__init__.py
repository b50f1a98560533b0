"""Progressively guided alternate refinement for RGB-D salient object detection."""

from .config import (
    DataConfig,
    EvalConfig,
    ModelConfig,
    RunConfig,
    TrainConfig,
    config_from_dict,
    load_config,
)
from .data import (
    DatasetEntry,
    DatasetManifest,
    Sample,
    augment,
    export_manifest,
    load_dataset,
    prepare_sample,
)
from .errors import (
    AssemblyError,
    CheckpointError,
    ConfigError,
    DataError,
    InputError,
    PgarError,
    ScheduleError,
    TopologyError,
    TrainingError,
)
from .metrics import (
    EvalResult,
    SCALE_DISCLAIMER,
    aggregate,
    e_measure,
    format_report_table,
    mae,
    max_f_measure,
    precision_recall_curve,
    s_measure,
)
from .multiscale import MultiScaleResidual, StackedMultiScaleResidual
from .network import (
    PgarNet,
    PredictionSet,
    StageSpec,
    build_stage_plan,
    count_parameters,
    final_saliency,
    init_model,
    load_checkpoint,
    model_from_checkpoint,
    resolve_guidance_input,
    save_checkpoint,
)
from .refine import (
    GuidanceSchedule,
    GuidedResidualBlock,
    RefineStage,
    build_schedule,
    split_and_concatenate,
)
from .streams import (
    ChannelReducer,
    DepthStream,
    FeatureMap,
    SideFeatureSet,
    Vgg16Features,
    assemble_side_features,
    extract_depth_features,
    extract_rgb_features,
    load_backbone_weights,
    reduce_channels,
    save_backbone_weights,
)
from .training import (
    LossReport,
    TrainResult,
    collate,
    deep_supervision_loss,
    lr_schedule,
    run_training,
    train_step,
)

__version__ = "0.1.0"
