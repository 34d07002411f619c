"""Orthogonal mixtures of LoRA experts on a small frozen numpy transformer."""

from .analysis import collect_taps, diversity_report, pca_2d
from .backbone import (
    TARGETS, AdapterConfig, BackboneConfig, InjectionSpec, LayerPattern, ToyTransformer,
    build_backbone, inject_adapters, layer_bands, orthogonal_layers,
)
from .checkpoint import load_into, read_checkpoint, save_checkpoint, save_model
from .config import RunConfig, TaskConfig, build_model
from .errors import (
    ConfigError, ContractError, DegenerateStackError, DimensionError, FrozenWeightError,
    NonFiniteLossError, NumericError, OmoeError, PrecisionError,
)
from .experiments import compare_methods, run_experiment
from .layer import LayerTapRecord, OmoeLayer, omoe_forward, pairwise_diversity, tap_representations
from .lora import LoraExpert, count_trainable, expert_forward, kaiming_uniform_init
from .orthogonalize import OrthoMode, gram_schmidt, orthogonality_defect, stiefel_residual
from .router import RouterState, Routing, gate, load_balance_penalty, renormalize_topk
from .tasks import Batch, SynthTask, default_tasks
from .tensor import Precision, Tensor, get_precision, no_grad, precision, set_precision
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"
