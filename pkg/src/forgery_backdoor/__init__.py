"""Translation-sensitive backdoor triggers against face forgery detectors, at toy scale."""

from ._validation import DegenerateTriggerError, TrainingDivergedError
from .blending import BlendTransformConfig, self_blend, source_transform
from .config import ExperimentConfig, config_digest, load_config
from .data import (
    DatasetManifest,
    SampleRecord,
    SyntheticFaceConfig,
    generate_synthetic_dataset,
    poison_dataset,
    verify_manifest,
)
from .detection import ForgeryDetector, score, score_group, train_detector
from .embedding import EmbedConfig, TriggerEmbedder, embed_trigger, landmark_mask, linf, psnr
from .evaluation import (
    BaselineTrigger,
    BaselineTriggerConfig,
    EvalReport,
    GeneratorTrigger,
    compute_auc,
    compute_bd_auc,
    defense_fineprune,
    defense_finetune,
    emit_report,
    make_baseline_trigger,
)
from .generator import GeneratorConfig, TriggerGenerator, sample_trigger, train_generator
from .trigger_math import (
    brute_force_discrepancy,
    build_kernel,
    conv_objective,
    convolve_kernel,
    shift_difference_sum,
    translate,
    trigger_loss,
)

__version__ = "0.1.0"
