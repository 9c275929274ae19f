"""Desk-scale laboratory for downstream transfer attacks on ViTs."""

from .attacks import (
    AttackConfig,
    AttackResult,
    atcs,
    dta_attack,
    loss_value,
    nrdm_attack,
    pap_uap,
    pgd_minimize,
)
from .dataset import LabeledData, SyntheticSpec, generate_synthetic, read_dataset, write_dataset
from .errors import (
    ContractError,
    CorruptionError,
    DataFormatError,
    NumericError,
    TrainingError,
    VersionError,
)
from .evaluation import (
    CurvePoint,
    EvalReport,
    SweepSchedule,
    atcs_asr_sweep,
    attack_success_rate,
    clean_accuracy,
    feature_shift_atcs,
    spearman,
)
from .store import content_hash, load_checkpoint, save_checkpoint
from .tensor import Tape, Tensor, apply_primitive, backward, finite_difference_gradient
from .training import (
    AdversarialSpec,
    Checkpoint,
    TrainConfig,
    adversarial_finetune,
    cross_entropy,
    finetune,
    pretrain_supervised,
)
from .vit import (
    AdaptFormerParams,
    Backbone,
    FeatureMap,
    LoRAParams,
    ModelConfig,
    ViTParams,
    forward_with_features,
    init_adaptformer,
    init_lora,
    init_params,
    merge_lora,
)

__version__ = "0.1.0"
