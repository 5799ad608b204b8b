"""Affine collaborative normalization on (N, K) feature matrices.

Rows are samples (batch times spatial positions), columns are channels.
The layer keeps frozen source affines from a pretrained model and trainable
target affines initialised as a copy of them. On every forward pass it

1. standardises ``x`` per channel,
2. maps both affine sets to a per-channel signature ``z = beta / sqrt(gamma**2 + eps)``,
3. builds the row-softmax matrix ``C[p, q] ~ exp(-|z_t[p] - z_s[q]| / t)``,
4. zeroes every entry smaller than its row's diagonal,
5. mixes the target affines through ``C`` and adds the recalibrated affine
   output to the ordinary one.

:func:`acnorm_backward` is the hand-written gradient of that pipeline.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, InvalidBatchError, NumericError

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1
DEFAULT_TEMPERATURE = 1.0


class Role(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


class Mode(str, enum.Enum):
    TRAINING = "training"
    INFERENCE = "inference"


@dataclass
class AffineParams:
    gamma: np.ndarray
    beta: np.ndarray
    role: Role = Role.TARGET

    def __post_init__(self):
        self.role = Role(self.role)
        dtype = np.result_type(np.asarray(self.gamma).dtype, np.float32)
        self.gamma = np.array(self.gamma, dtype=dtype, ndmin=1)
        self.beta = np.array(self.beta, dtype=dtype, ndmin=1)
        if self.gamma.ndim != 1 or self.gamma.shape != self.beta.shape or self.gamma.size < 1:
            raise ConfigError(
                f"gamma/beta must be equal-length vectors, got {self.gamma.shape} and {self.beta.shape}"
            )
        if self.role is Role.SOURCE:
            self.gamma.flags.writeable = False
            self.beta.flags.writeable = False

    @property
    def K(self) -> int:
        return self.gamma.size

    def copy(self, role: Role | str | None = None) -> AffineParams:
        return AffineParams(self.gamma.copy(), self.beta.copy(), role or self.role)


@dataclass
class NormStats:
    moving_mean: np.ndarray
    moving_var: np.ndarray
    momentum: float = DEFAULT_MOMENTUM
    eps: float = DEFAULT_EPS
    batch_mean: np.ndarray | None = None
    batch_var: np.ndarray | None = None

    def __post_init__(self):
        dtype = np.result_type(np.asarray(self.moving_mean).dtype, np.float32)
        self.moving_mean = np.array(self.moving_mean, dtype=dtype, ndmin=1)
        self.moving_var = np.array(self.moving_var, dtype=self.moving_mean.dtype, ndmin=1)
        if self.moving_mean.shape != self.moving_var.shape:
            raise ConfigError("moving_mean and moving_var must have the same shape")
        if np.any(self.moving_var < 0):
            raise ConfigError("moving variance must be non-negative")
        if not 0.0 < self.momentum <= 1.0:
            raise ConfigError(f"momentum must lie in (0, 1], got {self.momentum}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")

    @classmethod
    def fresh(cls, K, dtype=np.float64, momentum=DEFAULT_MOMENTUM, eps=DEFAULT_EPS):
        return cls(np.zeros(K, dtype), np.ones(K, dtype), momentum, eps)

    @property
    def K(self) -> int:
        return self.moving_mean.size


@dataclass
class CalibrationMatrix:
    values: np.ndarray
    sparsified: bool = False

    @property
    def K(self) -> int:
        return self.values.shape[0]


@dataclass
class ACNormConfig:
    temperature: float = DEFAULT_TEMPERATURE
    eps: float = DEFAULT_EPS
    detach_calibration: bool = False
    momentum: float = DEFAULT_MOMENTUM

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not self.eps > 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if not 0.0 < self.momentum <= 1.0:
            raise ConfigError(f"momentum must lie in (0, 1], got {self.momentum}")


@dataclass
class ACNormLayerState:
    source: AffineParams
    target: AffineParams
    stats: NormStats
    config: ACNormConfig = field(default_factory=ACNormConfig)
    mode: Mode = Mode.TRAINING

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.source.role is not Role.SOURCE or self.target.role is not Role.TARGET:
            raise ConfigError("state needs one source and one target affine set")
        if not self.source.K == self.target.K == self.stats.K:
            raise ConfigError(
                f"channel mismatch: source {self.source.K}, target {self.target.K}, stats {self.stats.K}"
            )

    @classmethod
    def from_source(cls, gamma, beta, moving_mean=None, moving_var=None, config=None, mode=Mode.TRAINING):
        """Layer state with target affines copied from the given source affines."""
        config = config or ACNormConfig()
        source = AffineParams(gamma, beta, Role.SOURCE)
        K, dtype = source.K, source.gamma.dtype
        stats = NormStats(
            np.zeros(K, dtype) if moving_mean is None else moving_mean,
            np.ones(K, dtype) if moving_var is None else moving_var,
            momentum=config.momentum,
            eps=config.eps,
        )
        return cls(source, source.copy(Role.TARGET), stats, config, mode)

    @property
    def K(self) -> int:
        return self.source.K


class ACNormGrads(NamedTuple):
    x: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    calibration: np.ndarray | None = None


@dataclass
class ForwardCache:
    """Intermediates kept by a forward pass for the backward pass."""

    x_hat: np.ndarray
    inv_std: np.ndarray
    training: bool
    C: np.ndarray | None = None
    softmax: np.ndarray | None = None
    mask: np.ndarray | None = None
    z_t: np.ndarray | None = None
    z_s: np.ndarray | None = None


def _check_input(x, K):
    if x.ndim != 2 or x.shape[1] != K:
        raise InvalidBatchError(f"expected an (N, {K}) matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite values in normalization input")


def standardize_with_cache(x, stats: NormStats, mode, update_stats=True):
    """Return ``(x_hat, inv_std)``; updates moving stats in training mode."""
    x = np.asarray(x)
    _check_input(x, stats.K)
    if Mode(mode) is Mode.TRAINING:
        n = x.shape[0]
        if n < 2:
            raise InvalidBatchError("training-mode normalization needs at least 2 rows")
        mean = x.mean(axis=0)
        centered = x - mean
        var = np.mean(centered * centered, axis=0)
        inv_std = 1.0 / np.sqrt(var + stats.eps)
        stats.batch_mean, stats.batch_var = mean, var
        if update_stats:
            m = stats.momentum
            unbiased = var * (n / (n - 1))
            stats.moving_mean = ((1 - m) * stats.moving_mean + m * mean).astype(stats.moving_mean.dtype)
            stats.moving_var = ((1 - m) * stats.moving_var + m * unbiased).astype(stats.moving_var.dtype)
        return centered * inv_std, inv_std
    inv_std = 1.0 / np.sqrt(stats.moving_var + stats.eps)
    return (x - stats.moving_mean) * inv_std, inv_std


def standardize(x, stats: NormStats, mode):
    """Per-channel standardisation with batch (training) or moving (inference) statistics."""
    return standardize_with_cache(x, stats, mode)[0]


def domain_signature(affines: AffineParams, eps=DEFAULT_EPS):
    return affines.beta / np.sqrt(affines.gamma * affines.gamma + eps)


def _softmax_logits(z_t, z_s, temperature):
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    z_t = np.asarray(z_t)
    z_s = np.asarray(z_s)
    if z_t.shape != z_s.shape:
        raise ConfigError(f"signature lengths differ: {z_t.shape} vs {z_s.shape}")
    return -np.abs(z_t[:, None] - z_s[None, :]) / temperature


def calibration_matrix(z_t, z_s, temperature=DEFAULT_TEMPERATURE) -> CalibrationMatrix:
    logits = _softmax_logits(z_t, z_s, temperature)
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return CalibrationMatrix(e / e.sum(axis=1, keepdims=True), sparsified=False)


def sparsity_mask(values):
    """Entries at least as large as their row's diagonal (ties kept)."""
    return values >= np.diag(values)[:, None]


def sparsify(C: CalibrationMatrix) -> CalibrationMatrix:
    values = np.where(sparsity_mask(C.values), C.values, 0.0).astype(C.values.dtype)
    return CalibrationMatrix(values, sparsified=True)


def recalibrate(C: CalibrationMatrix, target: AffineParams):
    return C.values @ target.gamma, C.values @ target.beta


def collaborative_output(x_hat, gamma_t, beta_t, C):
    """Target affine output plus the C-recalibrated residual."""
    gamma_eff = gamma_t + C @ gamma_t
    beta_eff = beta_t + C @ beta_t
    return x_hat * gamma_eff + beta_eff


def acnorm_forward(x, state: ACNormLayerState, return_cache=False, update_stats=True):
    """AC-Norm forward pass. ``C`` is rebuilt from the current affines on every call."""
    cfg = state.config
    x_hat, inv_std = standardize_with_cache(x, state.stats, state.mode, update_stats)
    z_t = domain_signature(state.target, cfg.eps)
    z_s = domain_signature(state.source, cfg.eps)
    soft = calibration_matrix(z_t, z_s, cfg.temperature).values
    mask = sparsity_mask(soft)
    C = np.where(mask, soft, 0.0)
    y = collaborative_output(x_hat, state.target.gamma, state.target.beta, C)
    if not return_cache:
        return y
    cache = ForwardCache(
        x_hat, inv_std, state.mode is Mode.TRAINING, C=C, softmax=soft, mask=mask, z_t=z_t, z_s=z_s
    )
    return y, cache


def _standardize_backward(d_xhat, cache: ForwardCache):
    if not cache.training:
        return d_xhat * cache.inv_std
    n = d_xhat.shape[0]
    x_hat = cache.x_hat
    return (cache.inv_std / n) * (
        n * d_xhat - d_xhat.sum(axis=0) - x_hat * np.sum(d_xhat * x_hat, axis=0)
    )


def collaborative_backward(upstream, cache: ForwardCache, gamma_t, beta_t, *, through_softmax,
                           temperature=DEFAULT_TEMPERATURE, eps=DEFAULT_EPS, want_dC=False):
    """Backward pass of :func:`collaborative_output` composed with standardisation.

    ``through_softmax`` routes the gradient of ``C`` into the target affines via
    their signatures; the keep/drop mask is a constant of the forward pass.
    ``want_dC`` returns the gradient with respect to ``C`` itself instead.
    """
    g = np.asarray(upstream)
    C = cache.C
    a = np.sum(g * cache.x_hat, axis=0)
    b = g.sum(axis=0)
    gamma_eff = gamma_t + C @ gamma_t
    dx = _standardize_backward(g * gamma_eff, cache)
    d_gamma = a + C.T @ a
    d_beta = b + C.T @ b
    grad_C = np.outer(a, gamma_t) + np.outer(b, beta_t)
    if through_softmax:
        S = cache.softmax
        dS = grad_C * cache.mask
        d_logits = S * (dS - np.sum(S * dS, axis=1, keepdims=True))
        # d|u|/du taken as sign(u), with sign(0) = 0
        d_zt = -np.sum(d_logits * np.sign(cache.z_t[:, None] - cache.z_s[None, :]), axis=1) / temperature
        denom = gamma_t * gamma_t + eps
        d_gamma = d_gamma + d_zt * (-beta_t * gamma_t / denom ** 1.5)
        d_beta = d_beta + d_zt / np.sqrt(denom)
    return ACNormGrads(dx, d_gamma, d_beta, grad_C if want_dC else None)


def acnorm_backward(upstream, state: ACNormLayerState, cache: ForwardCache) -> ACNormGrads:
    cfg = state.config
    return collaborative_backward(
        upstream, cache, state.target.gamma, state.target.beta,
        through_softmax=not cfg.detach_calibration, temperature=cfg.temperature, eps=cfg.eps,
    )


def acnorm_gradients(x, state: ACNormLayerState, upstream) -> ACNormGrads:
    """Gradients of ``sum(upstream * acnorm_forward(x))`` w.r.t. x, target gamma and beta.

    Moving statistics are left untouched.
    """
    if state.mode is not Mode.TRAINING:
        raise InvalidBatchError("gradients are defined for training mode only")
    _, cache = acnorm_forward(x, state, return_cache=True, update_stats=False)
    return acnorm_backward(upstream, state, cache)
