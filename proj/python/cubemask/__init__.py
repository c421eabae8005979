"""Masked discrete-diffusion engine over quantized token tensors."""

try:
    from . import _cubemask as _ext  # packaged wheel layout
except ImportError:
    import _cubemask as _ext  # in-tree build with the module on PYTHONPATH

ConfigError = _ext.ConfigError
DataError = _ext.DataError
ShapeError = _ext.ShapeError
ZeroSupportError = _ext.ZeroSupportError
QuantizerSpec = _ext.QuantizerSpec
ToyJoint = _ext.ToyJoint
calibrate = _ext.calibrate
quantize = _ext.quantize
dequantize = _ext.dequantize
sample_ratio = _ext.sample_ratio
sample_mask = _ext.sample_mask
cosine_schedule = _ext.cosine_schedule
masked_ce_loss = _ext.masked_ce_loss
generate_from_checkpoint = _ext.generate_from_checkpoint
read_tokens = _ext.read_tokens
read_features = _ext.read_features

__all__ = [
    "ConfigError",
    "DataError",
    "QuantizerSpec",
    "ShapeError",
    "ToyJoint",
    "ZeroSupportError",
    "calibrate",
    "cosine_schedule",
    "dequantize",
    "generate_from_checkpoint",
    "masked_ce_loss",
    "quantize",
    "read_features",
    "read_tokens",
    "sample_mask",
    "sample_ratio",
]
