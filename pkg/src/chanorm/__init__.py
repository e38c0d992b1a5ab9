"""Channel normalization layers (CN, ACN, PCN), small forecasting backbones
and identifiability / entropy diagnostics, in numpy with hand-written
gradients."""

from .backbones import BackboneConfig, Forecaster, forward_forecast, load_checkpoint, save_checkpoint
from .normlayers import (
    AcnParams,
    CnParams,
    LnParams,
    NormLayer,
    PcnParams,
    acn_forward,
    channel_similarity,
    cn_forward,
    in_forward,
    ln_forward,
    norm_backward,
    normalize_core,
    pcn_forward,
    prototype_similarity,
)

__all__ = [
    "AcnParams", "BackboneConfig", "CnParams", "Forecaster", "LnParams", "NormLayer", "PcnParams",
    "acn_forward", "channel_similarity", "cn_forward", "forward_forecast", "in_forward", "ln_forward",
    "load_checkpoint", "norm_backward", "normalize_core", "pcn_forward", "prototype_similarity",
    "save_checkpoint",
]
