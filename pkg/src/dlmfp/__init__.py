"""Desk-scale diffusion-LM inference: reducing-window KV caching and AR-guided unmasking."""
from ._kernels import BACKEND
from .denoise import decode_baseline
from .errors import ConfigurationError, ContractError, DLMError, FormatError, InputError, VerificationError
from .freecache import decode_freecache
from .guided import GuidanceConfig, decode_guided
from .models import ModelSpec, Transformer, init_weights, random_transformer
from .rules import RuleModel

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "decode_baseline", "decode_freecache", "decode_guided", "GuidanceConfig", "ModelSpec",
    "Transformer", "init_weights", "random_transformer", "RuleModel", "DLMError", "ConfigurationError",
    "ContractError", "FormatError", "InputError", "VerificationError",
]
