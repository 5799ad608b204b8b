"""Plain batch norm and the ablation variants of the collaborative layer.

All kinds share :func:`acnorm.core.standardize_with_cache` and, apart from
``vanilla_bn``, the same recalibrated output; they differ only in where the
per-channel signature comes from and which entries of ``C`` survive.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core import (
    ACNormGrads,
    ACNormLayerState,
    ForwardCache,
    Mode,
    NormStats,
    calibration_matrix,
    collaborative_backward,
    collaborative_output,
    domain_signature,
    sparsity_mask,
    standardize_with_cache,
    _standardize_backward,
)
from .errors import ConfigError


class NormKind(str, enum.Enum):
    VANILLA_BN = "vanilla_bn"
    ACNORM = "acnorm"
    SC_NORM = "sc_norm"
    AC_DIAG = "ac_diag"
    AC_NON_SPARSE = "ac_non_sparse"
    AC_TRAINABLE_C = "ac_trainable_c"

    @classmethod
    def parse(cls, value) -> NormKind:
        try:
            return cls(value)
        except ValueError:
            raise ConfigError(
                f"unknown norm kind {value!r}; expected one of {[k.value for k in cls]}"
            ) from None


@dataclass
class VariantState(ACNormLayerState):
    """Layer state plus the extras some variants need.

    ``source_stats`` holds the frozen pretrained moving statistics (sc_norm);
    ``calibration`` is the free K x K matrix of ac_trainable_c.
    """

    source_stats: NormStats | None = None
    calibration: np.ndarray | None = None


def bn_forward(x, state: ACNormLayerState, return_cache=False, update_stats=True):
    x_hat, inv_std = standardize_with_cache(x, state.stats, state.mode, update_stats)
    y = x_hat * state.target.gamma + state.target.beta
    if return_cache:
        return y, ForwardCache(x_hat, inv_std, state.mode is Mode.TRAINING)
    return y


def scnorm_signature(stats: NormStats, mode, eps=None):
    """``mu / sqrt(var + eps)`` from batch stats in training, moving stats otherwise."""
    eps = stats.eps if eps is None else eps
    if Mode(mode) is Mode.TRAINING and stats.batch_mean is not None:
        mean, var = stats.batch_mean, stats.batch_var
    else:
        mean, var = stats.moving_mean, stats.moving_var
    return mean / np.sqrt(var + eps)


def signatures(state: VariantState, kind: NormKind):
    """(target, source) signatures feeding the calibration softmax."""
    eps = state.config.eps
    if kind is NormKind.SC_NORM:
        if state.source_stats is None:
            raise ConfigError("sc_norm needs the pretrained moving statistics")
        return (
            scnorm_signature(state.stats, state.mode, eps),
            scnorm_signature(state.source_stats, Mode.INFERENCE, eps),
        )
    return domain_signature(state.target, eps), domain_signature(state.source, eps)


def _mask(soft, kind):
    if kind in (NormKind.ACNORM, NormKind.SC_NORM):
        return sparsity_mask(soft)
    if kind is NormKind.AC_DIAG:
        return np.eye(soft.shape[0], dtype=bool)
    return np.ones(soft.shape, dtype=bool)


def initial_calibration(state: ACNormLayerState):
    """Sparsified affine calibration matrix of the current state (ac_trainable_c start point)."""
    eps = state.config.eps
    soft = calibration_matrix(
        domain_signature(state.target, eps), domain_signature(state.source, eps), state.config.temperature
    ).values
    return np.where(sparsity_mask(soft), soft, 0.0).astype(state.target.gamma.dtype)


def calibrated_output(x_hat, state: VariantState, kind: NormKind, z_t, z_s):
    """Everything downstream of the signatures; returns ``(y, C, softmax, mask)``."""
    soft = calibration_matrix(z_t, z_s, state.config.temperature).values
    mask = _mask(soft, kind)
    C = np.where(mask, soft, 0.0)
    return collaborative_output(x_hat, state.target.gamma, state.target.beta, C), C, soft, mask


def variant_forward(x, state: VariantState, kind, return_cache=False, update_stats=True):
    kind = NormKind.parse(kind)
    if kind is NormKind.VANILLA_BN:
        return bn_forward(x, state, return_cache, update_stats)
    x_hat, inv_std = standardize_with_cache(x, state.stats, state.mode, update_stats)
    cache = ForwardCache(x_hat, inv_std, state.mode is Mode.TRAINING)
    if kind is NormKind.AC_TRAINABLE_C:
        if state.calibration is None:
            state.calibration = initial_calibration(state)
        cache.C = state.calibration
        y = collaborative_output(x_hat, state.target.gamma, state.target.beta, cache.C)
    else:
        z_t, z_s = signatures(state, kind)
        y, cache.C, cache.softmax, cache.mask = calibrated_output(x_hat, state, kind, z_t, z_s)
        cache.z_t, cache.z_s = z_t, z_s
    return (y, cache) if return_cache else y


def variant_backward(upstream, state: VariantState, kind, cache: ForwardCache) -> ACNormGrads:
    kind = NormKind.parse(kind)
    if kind is NormKind.VANILLA_BN:
        g = np.asarray(upstream)
        dx = _standardize_backward(g * state.target.gamma, cache)
        return ACNormGrads(dx, np.sum(g * cache.x_hat, axis=0), g.sum(axis=0))
    cfg = state.config
    # sc_norm signatures carry no affine dependence; its C is treated as data.
    through = kind not in (NormKind.SC_NORM, NormKind.AC_TRAINABLE_C) and not cfg.detach_calibration
    return collaborative_backward(
        upstream, cache, state.target.gamma, state.target.beta,
        through_softmax=through, temperature=cfg.temperature, eps=cfg.eps,
        want_dC=kind is NormKind.AC_TRAINABLE_C,
    )
