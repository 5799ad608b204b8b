"""Affine collaborative normalization for transfer learning, in numpy.

The layer math lives in :mod:`acnorm.core` and :mod:`acnorm.variants`; the
network, surgery, training and transferability tooling build on top of it.
"""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    ACNormConfig,
    ACNormLayerState,
    AffineParams,
    CalibrationMatrix,
    Mode,
    NormStats,
    Role,
    acnorm_backward,
    acnorm_forward,
    acnorm_gradients,
    calibration_matrix,
    domain_signature,
    recalibrate,
    sparsify,
    standardize,
)
from .errors import ACNormError  # noqa: E402
from .variants import NormKind, bn_forward, variant_backward, variant_forward  # noqa: E402

__all__ = [
    "ACNormConfig", "ACNormError", "ACNormLayerState", "AffineParams", "CalibrationMatrix",
    "Mode", "NormKind", "NormStats", "Role", "acnorm_backward", "acnorm_forward",
    "acnorm_gradients", "bn_forward", "calibration_matrix", "domain_signature", "recalibrate",
    "sparsify", "standardize", "variant_backward", "variant_forward",
]
