"""Network layers with explicit forward/backward passes (NHWC tensors).

Each layer exposes its tensors through :meth:`Layer.tensors` (a fresh dict
of live arrays on every call), says which of them are trainable, and after
:meth:`Layer.backward` leaves parameter gradients in ``self.grads``.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .core import ACNormConfig, AffineParams, Mode, NormStats, Role
from .errors import SurgeryError
from .variants import (
    NormKind,
    VariantState,
    calibrated_output,
    initial_calibration,
    signatures,
    variant_backward,
    variant_forward,
)


class Layer:
    kind = "layer"
    trainable_names: tuple = ()

    def __init__(self, name):
        self.name = name
        self.grads = {}

    def tensors(self):
        return {}

    def set_tensor(self, key, value):
        arr = self.tensors()[key]
        if arr.shape != np.shape(value):
            raise SurgeryError(f"{self.name}.{key}: shape {np.shape(value)} != {arr.shape}")
        arr[...] = value

    def forward(self, x, training):
        raise NotImplementedError

    def backward(self, grad, need_param_grads=True):
        raise NotImplementedError

    def describe(self):
        return {"name": self.name, "kind": self.kind}


class Conv2d(Layer):
    """Same-padded 2D convolution; weight layout (out, in, kh, kw)."""

    kind = "conv"
    trainable_names = ("weight", "bias")

    def __init__(self, name, in_channels, out_channels, kernel=3, stride=1, dtype=np.float32):
        super().__init__(name)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride = kernel, stride
        self.weight = np.zeros((out_channels, in_channels, kernel, kernel), dtype)
        self.bias = np.zeros(out_channels, dtype)

    def tensors(self):
        return {"weight": self.weight, "bias": self.bias}

    def init(self, rng):
        fan_in = self.in_channels * self.kernel * self.kernel
        self.weight[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), self.weight.shape)
        self.bias[...] = 0.0

    def _wmat(self):
        k = self.kernel
        return self.weight.transpose(2, 3, 1, 0).reshape(k * k * self.in_channels, self.out_channels)

    def forward(self, x, training):
        k, pad = self.kernel, self.kernel // 2
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
        cols = kernels.im2col(xp, k, k, self.stride)
        n, ho, wo = cols.shape[:3]
        cols = cols.reshape(n * ho * wo, -1)
        out = cols @ self._wmat() + self.bias
        self._cache = (cols, xp.shape, (n, ho, wo))
        return out.reshape(n, ho, wo, self.out_channels)

    def backward(self, grad, need_param_grads=True):
        cols, xp_shape, (n, ho, wo) = self._cache
        k, pad = self.kernel, self.kernel // 2
        g2 = grad.reshape(n * ho * wo, self.out_channels)
        if need_param_grads:
            dw = cols.T @ g2
            self.grads = {
                "weight": dw.reshape(k, k, self.in_channels, self.out_channels).transpose(3, 2, 0, 1),
                "bias": g2.sum(axis=0),
            }
        dcols = (g2 @ self._wmat().T).reshape(n, ho, wo, k, k, self.in_channels)
        dxp = kernels.col2im(dcols, xp_shape[1], xp_shape[2], self.stride)
        self._cache = None
        if pad:
            return dxp[:, pad:-pad, pad:-pad, :]
        return dxp

    def describe(self):
        return {**super().describe(), "out_channels": self.out_channels,
                "kernel": self.kernel, "stride": self.stride}


class Dense(Layer):
    kind = "dense"
    trainable_names = ("weight", "bias")

    def __init__(self, name, in_features, out_features, dtype=np.float32):
        super().__init__(name)
        self.in_features, self.out_features = in_features, out_features
        self.weight = np.zeros((out_features, in_features), dtype)
        self.bias = np.zeros(out_features, dtype)

    def tensors(self):
        return {"weight": self.weight, "bias": self.bias}

    def init(self, rng):
        self.weight[...] = rng.normal(0.0, np.sqrt(2.0 / self.in_features), self.weight.shape)
        self.bias[...] = 0.0

    def forward(self, x, training):
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, grad, need_param_grads=True):
        if need_param_grads:
            self.grads = {"weight": grad.T @ self._x, "bias": grad.sum(axis=0)}
        return grad @ self.weight

    def describe(self):
        return {**super().describe(), "out_features": self.out_features}


class ReLU(Layer):
    kind = "activation"

    def forward(self, x, training):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype)

    def backward(self, grad, need_param_grads=True):
        return np.where(self._mask, grad, 0).astype(grad.dtype)

    def describe(self):
        return {**super().describe(), "activation": "relu"}


class MaxPool2(Layer):
    kind = "pool"

    def forward(self, x, training):
        out, self._idx = kernels.maxpool2(x)
        return out

    def backward(self, grad, need_param_grads=True):
        return kernels.maxpool2_backward(np.ascontiguousarray(grad), self._idx)


class Upsample2(Layer):
    kind = "upsample"

    def forward(self, x, training):
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, grad, need_param_grads=True):
        n, h, w, c = grad.shape
        return grad.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


class GlobalAvgPool(Layer):
    kind = "pool"

    def forward(self, x, training):
        self._shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, grad, need_param_grads=True):
        n, h, w, c = self._shape
        return np.broadcast_to(grad[:, None, None, :] / (h * w), self._shape).copy()


class Norm(Layer):
    """Normalization layer of any :class:`NormKind` over the channel axis.

    Tensor names: ``gamma``/``beta`` (target affines), ``moving_mean``/``moving_var``,
    and, depending on kind, ``source_gamma``/``source_beta``, ``source_mean``/``source_var``
    and ``calibration``.
    """

    kind = "norm"

    def __init__(self, name, channels, norm_kind=NormKind.VANILLA_BN, config=None, dtype=np.float32):
        super().__init__(name)
        self.norm_kind = NormKind.parse(norm_kind)
        self.config = config or ACNormConfig()
        ones, zeros = np.ones(channels, dtype), np.zeros(channels, dtype)
        self.state = VariantState(
            source=AffineParams(ones, zeros, Role.SOURCE),
            target=AffineParams(ones, zeros, Role.TARGET),
            stats=NormStats(zeros, ones, self.config.momentum, self.config.eps),
            config=self.config,
        )
        if self.norm_kind is NormKind.SC_NORM:
            self._ensure_source_stats()
        if self.norm_kind is NormKind.AC_TRAINABLE_C:
            self.state.calibration = initial_calibration(self.state)

    @property
    def K(self):
        return self.state.K

    @property
    def trainable_names(self):
        names = ("gamma", "beta")
        if self.norm_kind is NormKind.AC_TRAINABLE_C:
            names += ("calibration",)
        return names

    def tensors(self):
        st = self.state
        out = {
            "gamma": st.target.gamma,
            "beta": st.target.beta,
            "moving_mean": st.stats.moving_mean,
            "moving_var": st.stats.moving_var,
        }
        if self.norm_kind is not NormKind.VANILLA_BN:
            out["source_gamma"] = st.source.gamma
            out["source_beta"] = st.source.beta
        if self.norm_kind is NormKind.SC_NORM:
            out["source_mean"] = st.source_stats.moving_mean
            out["source_var"] = st.source_stats.moving_var
        if self.norm_kind is NormKind.AC_TRAINABLE_C:
            out["calibration"] = st.calibration
        return out

    def set_tensor(self, key, value):
        st = self.state
        value = np.asarray(value)
        if key == "source_gamma":
            st.source = AffineParams(value, st.source.beta, Role.SOURCE)
        elif key == "source_beta":
            st.source = AffineParams(st.source.gamma, value, Role.SOURCE)
        elif key in ("moving_mean", "moving_var"):
            current = getattr(st.stats, key)
            if current.shape != value.shape:
                raise SurgeryError(f"{self.name}.{key}: shape {value.shape} != {current.shape}")
            setattr(st.stats, key, value.astype(current.dtype))
        elif key in ("source_mean", "source_var"):
            self._ensure_source_stats()
            attr = "moving_mean" if key == "source_mean" else "moving_var"
            setattr(st.source_stats, attr, value.astype(st.target.gamma.dtype))
        else:
            super().set_tensor(key, value)

    def _ensure_source_stats(self):
        if self.state.source_stats is None:
            st = self.state
            self.state.source_stats = NormStats(
                st.stats.moving_mean.copy(), st.stats.moving_var.copy(), self.config.momentum, self.config.eps
            )

    def load_source(self, gamma, beta, moving_mean, moving_var):
        """Freeze pretrained affines as the source, copy them into the target, reset the kind's extras."""
        st = self.state
        dtype = st.target.gamma.dtype
        st.source = AffineParams(np.asarray(gamma, dtype), np.asarray(beta, dtype), Role.SOURCE)
        st.target = st.source.copy(Role.TARGET)
        st.stats = NormStats(np.asarray(moving_mean, dtype), np.asarray(moving_var, dtype),
                             self.config.momentum, self.config.eps)
        st.source_stats = None
        st.calibration = None
        if self.norm_kind is NormKind.SC_NORM:
            self._ensure_source_stats()
        if self.norm_kind is NormKind.AC_TRAINABLE_C:
            st.calibration = initial_calibration(st)

    def forward(self, x, training):
        st = self.state
        st.mode = Mode.TRAINING if training else Mode.INFERENCE
        shape = x.shape
        y, self._cache = variant_forward(
            x.reshape(-1, shape[-1]), st, self.norm_kind, return_cache=True, update_stats=training
        )
        return y.reshape(shape).astype(x.dtype, copy=False)

    def backward(self, grad, need_param_grads=True):
        shape = grad.shape
        g = variant_backward(grad.reshape(-1, shape[-1]), self.state, self.norm_kind, self._cache)
        if need_param_grads:
            self.grads = {"gamma": g.gamma, "beta": g.beta}
            if g.calibration is not None:
                self.grads["calibration"] = g.calibration
        self._cache = None
        return g.x.reshape(shape).astype(grad.dtype, copy=False)

    def current_calibration(self):
        """C as the next inference-mode forward would build it from the current tensors."""
        st = self.state
        if self.norm_kind is NormKind.VANILLA_BN:
            return None
        if self.norm_kind is NormKind.AC_TRAINABLE_C:
            return st.calibration.copy()
        mode = st.mode
        st.mode = Mode.INFERENCE
        try:
            z_t, z_s = signatures(st, self.norm_kind)
        finally:
            st.mode = mode
        return calibrated_output(np.zeros((1, self.K)), st, self.norm_kind, z_t, z_s)[1]

    def describe(self):
        return {**super().describe(), "norm_kind": self.norm_kind.value, "K": self.K}
