"""poisonbench: availability-attack poisons and early-stopping-aware evaluation."""

from .data import (
    CLASS_WISE,
    SAMPLE_WISE,
    ImageDataset,
    PoisonPack,
    load_cifar10,
    read_poison_pack,
    subsample,
    synth_blobs,
    write_poison_pack,
)
from .dct import dct2, idct2
from .errors import ConfigError, DataError, NumericError, PoisonbenchError, ShapeError
from .harness import (
    TrainConfig,
    TrainReport,
    early_stop_gain,
    epochs_to_threshold,
    peak_accuracy,
    spearman_rho,
    train,
    transferability,
)
from .models import ArchSpec, Model, arch_names, build_model, get_arch, load_model, predict, save_model
from .poisons import (
    AttackConfig,
    ErrMinConfig,
    ErrMinResult,
    apply_poison,
    craft_errmax_poison,
    craft_errmin_poison,
    gen_lowfreq_noise,
    gen_regions_noise,
    mifgsm_attack,
    pgd_attack,
)
from .tensor import LossValue, Parameter, Tensor, backward, cross_entropy, sgd_step

__version__ = "0.1.0"
