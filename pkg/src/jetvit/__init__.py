"""jetvit: convert a full-attention ViT into a linear/window/full hybrid.

Building blocks: a numpy tensor engine with an explicit gradient tape,
counter-based splittable RNG, the three attention kernels plus a dynamic
depthwise convolution, a compact ViT, weight-inherited supernet distillation,
and a two-stage beam search over per-layer attention kinds.  Every mechanism
has an independent oracle in :mod:`jetvit.oracles`.
"""

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    FormatError,
    GuardError,
    JetvitError,
    NumericError,
    StateError,
)
from .rng import Rng
from .tensor import AdamState, GradTape, Tensor, adam_step, grad_check

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "FormatError",
    "GradTape",
    "GuardError",
    "JetvitError",
    "NumericError",
    "Rng",
    "StateError",
    "Tensor",
    "adam_step",
    "grad_check",
    "__version__",
]
