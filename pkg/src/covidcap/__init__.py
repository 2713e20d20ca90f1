"""Dual-sampling attention pipeline for COVID-19 vs CAP classification in 3D
chest CT, runnable end-to-end on synthetic phantoms."""

from .data import (
    ClassLabel,
    EvalGroup,
    Manifest,
    SamplingGroup,
    ScanRecord,
    assign_eval_group,
    assign_sampling_group,
    infection_ratio,
    load_manifest,
    patient_level_folds,
    save_manifest,
)
from .harness import (
    CrossValResult,
    EvaluationResult,
    RunResult,
    TrainConfig,
    cross_validate,
    evaluate,
    export_attention,
    train,
)
from .losses import LossBreakdown, attention_loss, batch_objective, classification_loss, total_loss
from .metrics import (
    MetricReport,
    auc,
    confusion_metrics,
    dice,
    dual_weight,
    fuse,
    groupwise_report,
    paired_t_test,
)
from .network import (
    AttentionNet3d,
    ForwardOutput,
    NetworkConfig,
    feature_shape,
    grad_cam,
    init_model,
    load_checkpoint,
    raw_attention,
    save_checkpoint,
    soft_mask,
)
from .phantoms import PhantomSpec, RatioLaw, generate_dataset, generate_phantom
from .preprocess import (
    PreprocessConfig,
    PreprocessedSample,
    apply_lung_mask,
    downscale_pad,
    load_or_preprocess,
    preprocess_record,
    resample,
    window_normalize,
)
from .sampling import (
    GroupCounts,
    SamplerProbabilities,
    draw_size_balanced,
    group_indices,
    size_balanced_epoch,
    size_balanced_probabilities,
    uniform_epoch,
)
from .volumes import Volume, load_volume, save_volume

__version__ = "0.1.0"
