"""Update magnitudes between checkpoints and the affine -> statistics propagation check."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from .checkpoint import Checkpoint
from .core import DEFAULT_EPS, AffineParams
from .errors import ProbeError
from .layers import Conv2d, Norm
from .model import build_model


@dataclass
class LayerDelta:
    layer: str
    kind: str
    affine_delta: float = 0.0
    stats_delta: float = 0.0
    kernel_delta: float = 0.0


def layer_deltas(before: Checkpoint, after: Checkpoint, eps=DEFAULT_EPS, encoder_only=False):
    """Per norm layer: mean |dz| of beta/sqrt(gamma^2+eps) and of mu/sqrt(var+eps);
    per conv layer: mean |d{w, b}|. Order follows the network."""
    if before.manifest.get("arch_hash") != after.manifest.get("arch_hash"):
        raise ProbeError(
            f"architecture mismatch: {before.manifest.get('arch_hash')} vs {after.manifest.get('arch_hash')}"
        )
    model = build_model(before.arch)
    out = []
    for i, layer in enumerate(model.layers):
        if encoder_only and i > model.encoder_boundary:
            break
        t0, t1 = before.tensors, after.tensors
        try:
            if isinstance(layer, Norm):
                n = layer.name
                z0 = t0[f"{n}.beta"] / np.sqrt(t0[f"{n}.gamma"].astype(np.float64) ** 2 + eps)
                z1 = t1[f"{n}.beta"] / np.sqrt(t1[f"{n}.gamma"].astype(np.float64) ** 2 + eps)
                s0 = t0[f"{n}.moving_mean"] / np.sqrt(t0[f"{n}.moving_var"].astype(np.float64) + eps)
                s1 = t1[f"{n}.moving_mean"] / np.sqrt(t1[f"{n}.moving_var"].astype(np.float64) + eps)
                out.append(LayerDelta(n, "norm", float(np.mean(np.abs(z1 - z0))),
                                      float(np.mean(np.abs(s1 - s0)))))
            elif isinstance(layer, Conv2d):
                n = layer.name
                dw = np.abs(t1[f"{n}.weight"].astype(np.float64) - t0[f"{n}.weight"]).ravel()
                db = np.abs(t1[f"{n}.bias"].astype(np.float64) - t0[f"{n}.bias"]).ravel()
                out.append(LayerDelta(n, "conv", kernel_delta=float(np.mean(np.concatenate([dw, db])))))
        except KeyError as exc:
            raise ProbeError(f"tensor {exc} missing from one checkpoint") from None
        except ValueError as exc:
            raise ProbeError(f"{layer.name}: {exc}") from None
    return out


def mean_of_layer_means(runs):
    """Average each delta over layers, then over runs (lists of LayerDelta)."""
    def per_run(deltas, kind, attr):
        vals = [getattr(d, attr) for d in deltas if d.kind == kind]
        return float(np.mean(vals)) if vals else float("nan")

    return {
        "affine": float(np.mean([per_run(r, "norm", "affine_delta") for r in runs])),
        "stats": float(np.mean([per_run(r, "norm", "stats_delta") for r in runs])),
        "kernel": float(np.mean([per_run(r, "conv", "kernel_delta") for r in runs])),
    }


def write_deltas_csv(deltas, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(LayerDelta.__dataclass_fields__))
        writer.writeheader()
        for d in deltas:
            writer.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in asdict(d).items()})


@dataclass
class StatPropagation:
    empirical_mean: float
    empirical_var: float
    predicted_mean: float
    predicted_var: float

    def relative_errors(self):
        return (abs(self.empirical_mean - self.predicted_mean) / abs(self.predicted_mean),
                abs(self.empirical_var - self.predicted_var) / abs(self.predicted_var))


def verify_stat_propagation(prev_affines: AffineParams, conv_w, n_samples=10**6, seed=0,
                            activation="identity", act_mean_gain=1.0, act_var_gain=1.0,
                            chunk=1 << 17):
    """Push standard-normal channels through ``gamma * x + beta``, the activation and a
    1x1 conv with weights ``conv_w``; compare the output's mean/variance with
    ``act_mean_gain * sum(w * beta)`` and ``act_var_gain * sum(w**2 * gamma**2)``.

    The two gains are exact (1, 1) only for the identity activation.
    """
    gamma = np.asarray(prev_affines.gamma, dtype=np.float64)
    beta = np.asarray(prev_affines.beta, dtype=np.float64)
    w = np.asarray(conv_w, dtype=np.float64)
    if w.shape != gamma.shape:
        raise ProbeError(f"filter has {w.size} taps for {gamma.size} channels")
    if activation not in ("identity", "relu"):
        raise ProbeError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    total = total_sq = 0.0
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        f = rng.standard_normal((m, gamma.size)) * gamma + beta
        if activation == "relu":
            f = np.maximum(f, 0.0)
        out = f @ w
        total += out.sum()
        total_sq += np.dot(out, out)
        done += m
    mean = total / n_samples
    var = total_sq / n_samples - mean * mean
    return StatPropagation(
        float(mean), float(var),
        float(act_mean_gain * np.sum(w * beta)),
        float(act_var_gain * np.sum(w * w * gamma * gamma)),
    )


def random_propagation_draws(draws=20, K=4, n_samples=10**6, seed=0, activation="identity"):
    """``draws`` random (alpha, beta, gamma) triples pushed through :func:`verify_stat_propagation`."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(draws):
        gamma = rng.uniform(0.5, 2.0, K)
        beta = rng.uniform(-1.0, 1.0, K)
        alpha = rng.uniform(0.5, 1.5, K) * rng.choice([-1.0, 1.0], K)
        res = verify_stat_propagation(AffineParams(gamma, beta), alpha, n_samples,
                                      seed=int(rng.integers(2**31)), activation=activation)
        err_mean, err_var = res.relative_errors()
        rows.append({"draw": i, **asdict(res), "rel_err_mean": err_mean, "rel_err_var": err_var})
    return rows
