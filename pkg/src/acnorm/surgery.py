"""Norm-layer swapping, channel shuffle/mask manipulations and freezing policies."""
from __future__ import annotations

import fnmatch
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .errors import ConfigError, PolicyWarning, SurgeryError
from .layers import Conv2d, Dense, Norm
from .model import ModelGraph, build_model

log = logging.getLogger(__name__)

NORM_STAT_KEYS = ("gamma", "beta", "moving_mean", "moving_var")


def swap_norm_layers(model: ModelGraph, source_ckpt: Checkpoint, kind, config=None) -> ModelGraph:
    """Rebuild ``model`` with ``kind`` norm layers initialised from ``source_ckpt``.

    Every non-head tensor comes from the checkpoint: conv/dense weights directly,
    norm affines as the frozen source (and a copy as the trainable target), moving
    statistics as the starting statistics. Head tensors are kept from ``model``.
    """
    config = config or model.norm_config
    new = build_model(model.arch, 0, kind, config)
    head = {name: arr for name, arr in model.parameters().items() if model.is_head(name)}

    problems = []
    for layer in new.layers:
        if new.is_head(layer.name):
            continue
        if isinstance(layer, Norm):
            src = [source_ckpt.tensors.get(f"{layer.name}.{k}") for k in NORM_STAT_KEYS]
            if any(t is None for t in src):
                problems.append(f"{layer.name} (missing in checkpoint)")
            elif any(np.shape(t) != (layer.K,) for t in src):
                problems.append(f"{layer.name} (K={layer.K}, checkpoint {np.shape(src[0])})")
            else:
                layer.load_source(*src)
        else:
            for key, arr in layer.tensors().items():
                t = source_ckpt.tensors.get(f"{layer.name}.{key}")
                if t is None:
                    problems.append(f"{layer.name}.{key} (missing in checkpoint)")
                elif t.shape != arr.shape:
                    problems.append(f"{layer.name}.{key} ({arr.shape} vs checkpoint {t.shape})")
                else:
                    arr[...] = t
    if problems:
        raise SurgeryError("checkpoint does not fit the model: " + "; ".join(problems))
    for name, arr in head.items():
        new.set_tensor(name, arr)
    return new


def _channel_groups(model: ModelGraph):
    """(conv, norm, consumer) for every non-head conv; consumer takes its channels as input."""
    groups = []
    layers = model.layers
    for i, layer in enumerate(layers):
        if not isinstance(layer, Conv2d) or model.is_head(layer.name):
            continue
        norm = next((l for l in layers[i + 1:] if isinstance(l, Norm)), None)
        consumer = next((l for l in layers[i + 1:] if isinstance(l, (Conv2d, Dense))), None)
        groups.append((layer, norm, consumer))
    return groups


def _model_for(ckpt: Checkpoint):
    return build_model(ckpt.arch, ckpt.seed, ckpt.norm_kind)


def _permute_group(tensors, conv, norm, perm):
    for key in ("weight", "bias"):
        name = f"{conv.name}.{key}"
        tensors[name] = tensors[name][perm].copy()
    if norm is not None:
        prefix = f"{norm.name}."
        for name in list(tensors):
            if name.startswith(prefix):
                t = tensors[name]
                if t.ndim == 1:
                    tensors[name] = t[perm].copy()
                elif name.endswith(".calibration"):
                    tensors[name] = t[np.ix_(perm, perm)].copy()


def _random_permutation(K, rng):
    return rng.permutation(K)


def shuffle_channels(ckpt: Checkpoint, seed, permutation=_random_permutation) -> Checkpoint:
    """Permute each conv's output channels (with its norm tensors), one permutation per layer.

    The consuming layer's input axis is left alone, so channels stop lining up
    with the weights that read them.
    """
    out = ckpt.copy()
    rng = np.random.default_rng(seed)
    for conv, norm, _ in _channel_groups(_model_for(ckpt)):
        perm = np.asarray(permutation(conv.out_channels, rng))
        _permute_group(out.tensors, conv, norm, perm)
    out.manifest["derived_from"] = f"shuffle(seed={seed})"
    return out


def permute_channels_consistently(ckpt: Checkpoint, seed, permutation=_random_permutation) -> Checkpoint:
    """Like :func:`shuffle_channels` but also permutes the consumer's input axis.

    The result computes the same function as ``ckpt``.
    """
    out = ckpt.copy()
    rng = np.random.default_rng(seed)
    for conv, norm, consumer in _channel_groups(_model_for(ckpt)):
        perm = np.asarray(permutation(conv.out_channels, rng))
        _permute_group(out.tensors, conv, norm, perm)
        if consumer is not None:
            name = f"{consumer.name}.weight"
            out.tensors[name] = out.tensors[name][:, perm].copy()
    out.manifest["derived_from"] = f"permute(seed={seed})"
    return out


def mask_channels(ckpt: Checkpoint, ratio, seed) -> Checkpoint:
    """Re-initialise ``floor(ratio * K)`` random output channels of every non-head conv."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1], got {ratio}")
    out = ckpt.copy()
    rng = np.random.default_rng(seed)
    for conv, norm, _ in _channel_groups(_model_for(ckpt)):
        K = conv.out_channels
        m = int(np.floor(ratio * K))
        if m == 0:
            continue
        chosen = np.sort(rng.choice(K, size=m, replace=False))
        w = out.tensors[f"{conv.name}.weight"]
        fan_in = w.shape[1] * w.shape[2] * w.shape[3]
        w[chosen] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (m,) + w.shape[1:])
        out.tensors[f"{conv.name}.bias"][chosen] = 0.0
        if norm is not None:
            fresh = {"gamma": 1.0, "beta": 0.0, "moving_mean": 0.0, "moving_var": 1.0,
                     "source_gamma": 1.0, "source_beta": 0.0, "source_mean": 0.0, "source_var": 1.0}
            for key, value in fresh.items():
                t = out.tensors.get(f"{norm.name}.{key}")
                if t is not None:
                    t[chosen] = value
    out.manifest["derived_from"] = f"mask(ratio={ratio},seed={seed})"
    return out


@dataclass
class FreezePolicy:
    """``full_ft``, ``norm_only``, or ``custom`` with glob patterns of tensors to freeze."""

    policy: str = "full_ft"
    patterns: list = field(default_factory=list)

    def __post_init__(self):
        if self.policy not in ("full_ft", "norm_only", "custom"):
            raise ConfigError(f"unknown freeze policy {self.policy!r}")

    @classmethod
    def parse(cls, value) -> FreezePolicy:
        if isinstance(value, FreezePolicy):
            return value
        if isinstance(value, dict):
            return cls(**value)
        if isinstance(value, (list, tuple)):
            return cls("custom", list(value))
        return cls(str(value))


def apply_freeze_policy(model: ModelGraph, policy) -> ModelGraph:
    policy = FreezePolicy.parse(policy)
    all_trainable = model.default_trainable()
    if policy.policy == "full_ft":
        chosen = set(all_trainable)
    elif policy.policy == "norm_only":
        norm_names = {layer.name for layer in model.norm_layers()}
        chosen = {n for n in all_trainable
                  if n.rsplit(".", 1)[0] in norm_names or model.is_head(n)}
    else:
        frozen = set()
        for pattern in policy.patterns:
            hits = fnmatch.filter(all_trainable, pattern)
            if not hits:
                warnings.warn(f"freeze pattern {pattern!r} matched no parameter", PolicyWarning, stacklevel=2)
            frozen.update(hits)
        chosen = set(all_trainable) - frozen
    model.trainable = chosen
    log.debug("freeze policy %s: %d/%d tensors trainable", policy.policy, len(chosen), len(all_trainable))
    return model
