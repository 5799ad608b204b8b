"""AC-Corr transferability scores and rank-correlation metrics."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint
from .core import CalibrationMatrix
from .errors import DataError, InputError
from .training import TrainConfig, assemble_target, train
from .variants import NormKind

log = logging.getLogger(__name__)

SCORES_SCHEMA = "acnorm.scores/1"
TRUTH_SCHEMA = "acnorm.truth/1"
RANKING_SCHEMA = "acnorm.ranking/1"


@dataclass
class TransferScore:
    checkpoint_id: str
    ac_corr: float
    probe_layer: str
    epochs_adapted: int = 1
    K: int = 0


@dataclass
class RankingReport:
    pearson: float
    kendall_tau: float
    weighted_tau: float
    pairs: list = field(default_factory=list)
    ties_in_truth: bool = False

    def to_dict(self):
        doc = {"schema": RANKING_SCHEMA, **asdict(self), "n": len(self.pairs)}
        for key in ("pearson", "kendall_tau", "weighted_tau"):
            if np.isnan(doc[key]):
                doc[key] = None  # undefined when one side is constant
        return doc


def ac_corr(C) -> float:
    """Sum of all entries of a (sparsified) calibration matrix."""
    values = C.values if isinstance(C, CalibrationMatrix) else np.asarray(C)
    return float(np.sum(values))


def probe_layer_name(model, requested=None):
    if requested:
        names = [layer.name for layer in model.norm_layers()]
        if requested not in names:
            raise InputError(f"no norm layer named {requested!r}; available: {names}")
        return requested
    return model.encoder_norm_layers()[-1].name


def estimate_transferability(ckpt: Checkpoint, datasets, arch, config: TrainConfig,
                             probe_layer=None, checkpoint_id="") -> TransferScore:
    """One epoch of AC-Norm fine-tuning on the target train split, then AC-Corr at the probe layer."""
    train_split = datasets["train"]
    if len(train_split) == 0:
        raise DataError("target training split is empty")
    cfg = replace(config, norm_kind=NormKind.ACNORM.value, epochs=1, probe_epochs=[])
    model = assemble_target(ckpt, arch, cfg)
    train(model, train_split, cfg)
    name = probe_layer_name(model, probe_layer)
    C = model.layer(name).current_calibration()
    return TransferScore(checkpoint_id, ac_corr(C), name, 1, int(C.shape[0]))


def _estimate_file(args):
    path, datasets, arch, config, probe_layer = args
    return estimate_transferability(load_checkpoint(path), datasets, arch, config, probe_layer, Path(path).stem)


def estimate_many(paths, datasets, arch, config, probe_layer=None, workers=1):
    """Score several checkpoint files; with ``workers > 1`` each runs in its own process."""
    jobs = [(str(p), datasets, arch, config, probe_layer) for p in sorted(paths)]
    if workers <= 1:
        return [_estimate_file(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_estimate_file, jobs))


# rank correlation


def _validate_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError(f"score and ground-truth lists must have equal length, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise InputError("need at least two models to rank")
    return x, y


def pearson(x, y):
    x, y = _validate_pair(x, y)
    xc, yc = x - x.mean(), y - y.mean()
    denom = np.sqrt(np.sum(xc * xc) * np.sum(yc * yc))
    return float(np.sum(xc * yc) / denom) if denom > 0 else float("nan")


def kendall_tau(x, y):
    """Kendall tau-b: (concordant - discordant) over the tie-adjusted pair count."""
    x, y = _validate_pair(x, y)
    i, j = np.triu_indices(x.size, k=1)
    sx, sy = np.sign(x[i] - x[j]), np.sign(y[i] - y[j])
    denom = np.sqrt(np.count_nonzero(sx) * np.count_nonzero(sy))
    return float(np.sum(sx * sy) / denom) if denom > 0 else float("nan")


def truth_ranks(y):
    """0-based rank of each element when sorted by ``y`` descending (stable)."""
    order = np.argsort(-np.asarray(y, dtype=np.float64), kind="stable")
    ranks = np.empty(len(order), dtype=np.int64)
    ranks[order] = np.arange(len(order))
    return ranks


def weighted_tau(x, y, ranks=None):
    """Additive hyperbolic weighted tau; pair (i, j) weighs 1/(1+r_i) + 1/(1+r_j)."""
    x, y = _validate_pair(x, y)
    ranks = truth_ranks(y) if ranks is None else np.asarray(ranks)
    w_elem = 1.0 / (1.0 + ranks)
    i, j = np.triu_indices(x.size, k=1)
    w = w_elem[i] + w_elem[j]
    sx, sy = np.sign(x[i] - x[j]), np.sign(y[i] - y[j])
    denom = np.sqrt(np.sum(w * (sx != 0)) * np.sum(w * (sy != 0)))
    return float(np.sum(w * sx * sy) / denom) if denom > 0 else float("nan")


def rank_models(scores, ground_truth, ids=None) -> RankingReport:
    x, y = _validate_pair(scores, ground_truth)
    ids = list(ids) if ids is not None else [str(k) for k in range(x.size)]
    pairs = [{"checkpoint_id": cid, "score": float(s), "ground_truth": float(g)}
             for cid, s, g in zip(ids, x, y)]
    return RankingReport(
        pearson=pearson(x, y),
        kendall_tau=kendall_tau(x, y),
        weighted_tau=weighted_tau(x, y),
        pairs=pairs,
        ties_in_truth=bool(np.unique(y).size < y.size),
    )


# JSON files


def write_scores(scores, path, metadata=None):
    doc = {"schema": SCORES_SCHEMA, **(metadata or {}), "scores": [asdict(s) for s in scores]}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_scores(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != SCORES_SCHEMA:
        raise InputError(f"{path}: expected schema {SCORES_SCHEMA}")
    return [TransferScore(**s) for s in doc["scores"]]


def write_truth(values: dict, path, metric="dice"):
    doc = {"schema": TRUTH_SCHEMA, "metric": metric,
           "results": [{"checkpoint_id": k, "value": float(v)} for k, v in sorted(values.items())]}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_truth(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != TRUTH_SCHEMA:
        raise InputError(f"{path}: expected schema {TRUTH_SCHEMA}")
    return {r["checkpoint_id"]: float(r["value"]) for r in doc["results"]}


def rank_files(scores_path, truth_path, out_path=None) -> RankingReport:
    scores = {s.checkpoint_id: s.ac_corr for s in read_scores(scores_path)}
    truth = read_truth(truth_path)
    missing = sorted(set(scores) ^ set(truth))
    if missing:
        raise InputError(f"ids present in only one file: {missing}")
    ids = sorted(scores)
    report = rank_models([scores[i] for i in ids], [truth[i] for i in ids], ids)
    if out_path:
        Path(out_path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return report

