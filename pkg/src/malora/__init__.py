"""malora: mixture-of-adapters fine-tuning layers with a shared low-rank
down-subspace, plus the single-expert and independent-expert baselines,
verified by small-instance oracles instead of large-model training."""

from .adapters import LoraLayer, init_asylora, init_lora, lora_forward, lora_param_count, merge_delta
from .autodiff import Tape, Var, grad_check
from .errors import (
    ConfigError,
    DivergedError,
    FormatError,
    InvalidInput,
    MaloraError,
    NotScalarLoss,
    RankDeficient,
    SchemaError,
    ShapeError,
    UnsupportedMethod,
)
from .linalg import Rng, SvdResult, kaiming_uniform, orthonormal_basis, svd_thin
from .moe import (
    AblationFlags,
    MaloraGeometry,
    MaloraLayer,
    MoloraLayer,
    RouterStats,
    balance_loss,
    bound_ratio,
    derive_geometry,
    flop_budget,
    init_malora,
    init_molora,
    malora_forward,
    malora_init,
    molora_forward,
    param_budget,
    route,
)

__version__ = "0.1.0"
