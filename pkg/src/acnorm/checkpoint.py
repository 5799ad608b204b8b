"""Checkpoint archive: a zip holding ``manifest.txt`` and one ``.npy`` per tensor.

Writes are byte-deterministic (sorted entries, fixed timestamps, stored
without compression), so ``save(load(path))`` reproduces the file exactly.
The layout is documented in ``docs/checkpoint.md``.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ACNormConfig
from .errors import SurgeryError
from .model import ArchSpec, ModelGraph, build_model

FORMAT_VERSION = "1"
_EPOCH = (1980, 1, 1, 0, 0, 0)
_ALLOWED = (np.dtype("<f4"), np.dtype("<f8"))


@dataclass
class Checkpoint:
    manifest: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)

    @property
    def arch(self) -> ArchSpec:
        return ArchSpec(**json.loads(self.manifest["arch"]))

    @property
    def norm_kind(self):
        return self.manifest.get("norm_kind", "vanilla_bn")

    @property
    def seed(self):
        return int(self.manifest.get("seed", 0))

    def copy(self) -> Checkpoint:
        return Checkpoint(dict(self.manifest), {k: v.copy() for k, v in self.tensors.items()})

    def equals(self, other: Checkpoint) -> bool:
        return (
            self.manifest == other.manifest
            and self.tensors.keys() == other.tensors.keys()
            and all(
                self.tensors[k].dtype == other.tensors[k].dtype
                and np.array_equal(self.tensors[k], other.tensors[k])
                for k in self.tensors
            )
        )


def _manifest_text(manifest):
    lines = []
    for key in sorted(manifest):
        value = str(manifest[key])
        if "\n" in value or "=" in key:
            raise ValueError(f"manifest entry {key!r} cannot be encoded")
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def _parse_manifest(text):
    out = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key] = value
    return out


def _entry(name):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(ckpt: Checkpoint, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_entry("manifest.txt"), _manifest_text(ckpt.manifest))
        for name in sorted(ckpt.tensors):
            arr = np.asarray(ckpt.tensors[name])
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            if arr.dtype not in _ALLOWED:
                raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(_entry(f"tensors/{name}.npy"), buf.getvalue())
    return path


def load_checkpoint(path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        manifest = _parse_manifest(zf.read("manifest.txt").decode())
        tensors = {}
        for name in sorted(zf.namelist()):
            if name.startswith("tensors/") and name.endswith(".npy"):
                arr = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
                tensors[name[len("tensors/"):-len(".npy")]] = arr
    if manifest.get("format_version") != FORMAT_VERSION:
        raise SurgeryError(f"{path}: unsupported checkpoint format {manifest.get('format_version')!r}")
    return Checkpoint(manifest, tensors)


def checkpoint_from_model(model: ModelGraph, seed=0, **extra) -> Checkpoint:
    cfg = model.norm_config
    manifest = {
        "format_version": FORMAT_VERSION,
        "arch": json.dumps(vars(model.arch), sort_keys=True),
        "arch_hash": model.arch.hash(),
        "seed": str(seed),
        "norm_kind": model.norm_kind.value,
        "temperature": repr(cfg.temperature),
        "eps": repr(cfg.eps),
        "momentum": repr(cfg.momentum),
        "detach_calibration": str(cfg.detach_calibration).lower(),
    }
    manifest.update({k: str(v) for k, v in extra.items()})
    tensors = {name: np.array(arr, copy=True) for name, arr in model.parameters().items()}
    return Checkpoint(manifest, tensors)


def norm_config_from_manifest(manifest) -> ACNormConfig:
    return ACNormConfig(
        temperature=float(manifest.get("temperature", 1.0)),
        eps=float(manifest.get("eps", 1e-5)),
        momentum=float(manifest.get("momentum", 0.1)),
        detach_calibration=manifest.get("detach_calibration", "false") == "true",
    )


def model_from_checkpoint(ckpt: Checkpoint) -> ModelGraph:
    """Rebuild the exact network a checkpoint was taken from."""
    model = build_model(ckpt.arch, ckpt.seed, ckpt.norm_kind, norm_config_from_manifest(ckpt.manifest))
    expected = model.parameters()
    missing = sorted(set(expected) - set(ckpt.tensors))
    if missing:
        raise SurgeryError(f"checkpoint lacks tensors: {', '.join(missing)}")
    for name in expected:
        model.set_tensor(name, ckpt.tensors[name])
    return model
