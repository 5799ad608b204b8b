"""Small encoder/decoder and classifier networks as ordered layer lists."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import ACNormConfig
from .errors import ConfigError
from .layers import Conv2d, Dense, GlobalAvgPool, MaxPool2, Norm, ReLU, Upsample2
from .variants import NormKind

TASKS = ("segmentation", "classification")


class SpecError(ConfigError):
    pass


@dataclass
class ArchSpec:
    """Architecture description.

    Encoder block ``i`` is conv(widths[i]) -> norm -> relu, followed by a 2x2 max
    pool except after the last block. Segmentation nets mirror the pooled blocks
    with upsample -> conv -> norm -> relu and end in a 1x1 conv to one logit map;
    classification nets replace the decoder with global pooling and two dense layers.
    """

    task: str = "segmentation"
    in_channels: int = 1
    widths: list = field(default_factory=lambda: [8, 16, 32])
    kernel: int = 3
    num_classes: int = 2
    head_hidden: int = 32
    dtype: str = "float32"

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if self.task not in TASKS:
            raise SpecError(f"task must be one of {TASKS}, got {self.task!r}")
        if not self.widths or any(w < 1 for w in self.widths):
            raise SpecError(f"widths must be a non-empty list of positive ints, got {self.widths}")
        if self.in_channels < 1 or self.kernel < 1 or self.kernel % 2 == 0:
            raise SpecError("in_channels must be >= 1 and kernel a positive odd number")
        if self.task == "classification" and self.num_classes < 2:
            raise SpecError("classification needs num_classes >= 2")
        if self.dtype not in ("float32", "float64"):
            raise SpecError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def structure(self):
        d = asdict(self)
        d.pop("dtype")
        return d

    def hash(self):
        blob = json.dumps(self.structure(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def downsample(self):
        return 2 ** (len(self.widths) - 1)


class ModelGraph:
    """Ordered layers plus the name -> tensor view used by optimisers and checkpoints."""

    def __init__(self, arch: ArchSpec, layers, encoder_boundary, norm_kind, norm_config):
        self.arch = arch
        self.layers = list(layers)
        self.encoder_boundary = encoder_boundary
        self.norm_kind = NormKind.parse(norm_kind)
        self.norm_config = norm_config
        self._by_name = {layer.name: layer for layer in self.layers}
        self.trainable = set(self.default_trainable())
        validate_graph(self)

    def __repr__(self):
        return f"ModelGraph({self.arch.task}, widths={self.arch.widths}, norm={self.norm_kind.value})"

    def layer(self, name):
        return self._by_name[name]

    def norm_layers(self):
        return [layer for layer in self.layers if isinstance(layer, Norm)]

    def conv_layers(self):
        return [layer for layer in self.layers if isinstance(layer, Conv2d)]

    def encoder_norm_layers(self):
        return [layer for i, layer in enumerate(self.layers)
                if isinstance(layer, Norm) and i <= self.encoder_boundary]

    def is_head(self, layer_name):
        return layer_name.startswith("head.")

    def parameters(self):
        """All tensors by hierarchical name (live arrays)."""
        out = {}
        for layer in self.layers:
            for key, arr in layer.tensors().items():
                out[f"{layer.name}.{key}"] = arr
        return out

    def default_trainable(self):
        return [f"{layer.name}.{key}" for layer in self.layers for key in layer.trainable_names]

    def set_tensor(self, name, value):
        layer_name, key = name.rsplit(".", 1)
        self._by_name[layer_name].set_tensor(key, value)

    def describe(self):
        return [layer.describe() for layer in self.layers]

    def forward(self, x, training=False):
        x = np.asarray(x, dtype=self.arch.dtype)
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    __call__ = forward

    def backward(self, grad):
        """Backpropagate ``grad`` and return gradients of the trainable tensors."""
        needs = [
            any(f"{layer.name}.{k}" in self.trainable for k in layer.trainable_names)
            for layer in self.layers
        ]
        if not any(needs):
            return {}
        first = needs.index(True)
        grads = {}
        for i in range(len(self.layers) - 1, first - 1, -1):
            layer = self.layers[i]
            grad = layer.backward(grad, need_param_grads=needs[i])
            if needs[i]:
                for key, g in layer.grads.items():
                    name = f"{layer.name}.{key}"
                    if name in self.trainable:
                        grads[name] = g
                layer.grads = {}
        return grads


def validate_graph(model: ModelGraph):
    """Each norm layer must match the channel count of the conv feeding it."""
    last_out = None
    names = set()
    for layer in model.layers:
        if layer.name in names:
            raise SpecError(f"duplicate layer name {layer.name}")
        names.add(layer.name)
        if isinstance(layer, Conv2d):
            if last_out is not None and layer.in_channels != last_out:
                raise SpecError(f"{layer.name}: expects {layer.in_channels} input channels, gets {last_out}")
            last_out = layer.out_channels
        elif isinstance(layer, Norm):
            if layer.K != last_out:
                raise SpecError(f"{layer.name}: K={layer.K} but the preceding conv has {last_out} channels")


def build_model(arch: ArchSpec, seed=0, norm_kind=NormKind.VANILLA_BN, norm_config=None) -> ModelGraph:
    """Deterministic network for ``arch``; He-normal conv/dense weights, unit affines."""
    if isinstance(arch, dict):
        arch = ArchSpec(**arch)
    norm_config = norm_config or ACNormConfig()
    dtype = np.dtype(arch.dtype)
    layers = []

    def block(prefix, cin, cout):
        layers.append(Conv2d(f"{prefix}.conv", cin, cout, arch.kernel, dtype=dtype))
        layers.append(Norm(f"{prefix}.norm", cout, norm_kind, norm_config, dtype=dtype))
        layers.append(ReLU(f"{prefix}.act"))

    cin = arch.in_channels
    for i, width in enumerate(arch.widths):
        block(f"encoder.{i}", cin, width)
        if i < len(arch.widths) - 1:
            layers.append(MaxPool2(f"encoder.{i}.pool"))
        cin = width
    encoder_boundary = len(layers) - 1

    if arch.task == "segmentation":
        for i, width in enumerate(reversed(arch.widths[:-1])):
            layers.append(Upsample2(f"decoder.{i}.up"))
            block(f"decoder.{i}", cin, width)
            cin = width
        layers.append(Conv2d("head.conv", cin, 1, 1, dtype=dtype))
    else:
        layers.append(GlobalAvgPool("head.pool"))
        layers.append(Dense("head.fc1", cin, arch.head_hidden, dtype=dtype))
        layers.append(ReLU("head.act"))
        layers.append(Dense("head.fc2", arch.head_hidden, arch.num_classes, dtype=dtype))

    rng = np.random.default_rng(seed)
    for layer in layers:
        if hasattr(layer, "init"):
            layer.init(rng)
    return ModelGraph(arch, layers, encoder_boundary, norm_kind, norm_config)


def reinit_head(model: ModelGraph, seed):
    """Fresh random head weights (same init scheme as :func:`build_model`)."""
    rng = np.random.default_rng([seed, 0x4EAD])
    for layer in model.layers:
        if model.is_head(layer.name) and hasattr(layer, "init"):
            layer.init(rng)
    return model
