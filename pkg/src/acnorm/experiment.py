"""Experiment runner: pretrain, derive checkpoint variants, fine-tune every arm, write reports.

Output directory layout::

    run_manifest.json   resolved config, library versions, output digests, status
    metrics.csv         one row per (seed, variant, arm)
    deltas.csv          per-layer update magnitudes of every fine-tuning run
    errors.json         per-arm failures (empty list on success)
    scores.json         AC-Corr of every (seed, variant) checkpoint, when ``estimate`` is on
    zoo.csv, zoo_ranking.json   the transferability zoo, when configured
    checkpoints/seed<S>/...     pretrained variants and fine-tuned models
    calibration/*.npz   calibration matrices at the probe epochs
    plots/*.png
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from ._backend import backend_name
from .checkpoint import checkpoint_from_model, save_checkpoint
from .config import ExperimentConfig, config_from_dict, task_with_seed
from .data import generate_task
from .model import build_model
from .probe import layer_deltas
from .surgery import mask_channels, shuffle_channels
from .training import assemble_target, finetune, pretrain
from .transferability import estimate_transferability, rank_models, write_scores
from .variants import NormKind

log = logging.getLogger(__name__)

METRIC_FIELDS = ["seed", "variant", "arm", "norm_kind", "freeze_policy", "status",
                 "dice", "accuracy", "auc", "final_loss", "ac_corr"]
DELTA_FIELDS = ["seed", "variant", "arm", "layer", "kind", "affine_delta", "stats_delta", "kernel_delta"]
ZOO_FIELDS = ["seed", "member", "origin", "ac_corr", "truth", "probe_layer"]


def fmt(value):
    """The emitted precision of every float in the reports."""
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.10g}"
    return str(value)


@dataclass
class SeedResult:
    seed: int
    metrics: list = field(default_factory=list)
    deltas: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    zoo: list = field(default_factory=list)
    errors: list = field(default_factory=list)


@dataclass
class ExperimentReport:
    out_dir: Path
    metrics: list
    errors: list
    zoo_ranking: dict | None = None

    @property
    def ok(self):
        return not self.errors


def _error(seed, stage, exc, **where):
    log.error("seed %s %s failed: %s", seed, stage, exc)
    return {"seed": seed, "stage": stage, **where, "error": f"{type(exc).__name__}: {exc}",
            "traceback": traceback.format_exc(limit=4)}


def _variant_checkpoint(cfg: ExperimentConfig, variant, base, seed):
    if variant == "original":
        return base
    if variant == "shuffled":
        return shuffle_channels(base, seed)
    if variant == "masked":
        return mask_channels(base, cfg.mask_ratio, seed)
    return None


def _save_calibration(snapshots, path):
    arrays = {f"epoch{epoch}__{layer}": C for epoch, by_layer in snapshots.items()
              for layer, C in by_layer.items()}
    if arrays:
        np.savez(path, **arrays)
    return arrays


def _run_arms(cfg: ExperimentConfig, seed, variant, ckpt, target, out: Path, result: SeedResult,
              ac_corr=None):
    ckpt_dir = out / "checkpoints" / f"seed{seed}"
    for arm in cfg.arms:
        row = {"seed": seed, "variant": variant, "arm": arm.name, "ac_corr": ac_corr}
        try:
            ft_cfg = arm.train_config(cfg.finetune, seed)
            row.update(norm_kind=ft_cfg.norm_kind, freeze_policy=str(ft_cfg.freeze_policy))
            before = checkpoint_from_model(assemble_target(ckpt, cfg.arch, ft_cfg), seed)
            after, record = finetune(ckpt, target, cfg.arch, ft_cfg)
        except Exception as exc:  # one failing arm must not sink the others
            result.errors.append(_error(seed, "finetune", exc, variant=variant, arm=arm.name))
            row["status"] = "error"
            result.metrics.append(row)
            continue
        save_checkpoint(after, ckpt_dir / f"{variant}__{arm.name}.ckpt")
        row.update(status="ok", dice=record.dice, accuracy=record.accuracy, auc=record.auc,
                   final_loss=record.loss_curve[-1] if record.loss_curve else None)
        result.metrics.append(row)
        for d in layer_deltas(before, after, cfg.finetune.eps):
            result.deltas.append({"seed": seed, "variant": variant, "arm": arm.name, **asdict(d)})
        arrays = _save_calibration(record.calibration_snapshots,
                                   out / "calibration" / f"seed{seed}_{variant}_{arm.name}.npz")
        if cfg.plots and arrays:
            from .plots import calibration_heatmap
            for key, C in arrays.items():
                epoch, layer = key.split("__", 1)
                calibration_heatmap(C, out / "plots" / "calibration" / f"seed{seed}_{variant}_{arm.name}_{layer}_{epoch}.png",
                                    f"{arm.name} {variant} {layer} {epoch}")


def _zoo_member_checkpoint(cfg: ExperimentConfig, member, seed):
    if member.origin == "random":
        model = build_model(cfg.arch, seed + 7919, NormKind.VANILLA_BN, cfg.pretrain.norm_config())
        return checkpoint_from_model(model, seed + 7919, role="random_init")
    base = cfg.target if member.origin == "target" else cfg.source
    datasets = generate_task(task_with_seed(base, seed, **member.overrides))
    ckpt, _ = pretrain(datasets, cfg.arch, replace(cfg.pretrain, seed=seed))
    return ckpt


def _run_zoo(cfg: ExperimentConfig, seed, target, out: Path, result: SeedResult):
    truth_cfg = cfg.arm(cfg.zoo.truth_arm).train_config(cfg.finetune, seed)
    ckpt_dir = out / "checkpoints" / f"seed{seed}" / "zoo"
    for member in cfg.zoo.members:
        try:
            ckpt = _zoo_member_checkpoint(cfg, member, seed)
            save_checkpoint(ckpt, ckpt_dir / f"{member.name}.ckpt")
            score = estimate_transferability(ckpt, target, cfg.arch, replace(cfg.finetune, seed=seed),
                                             cfg.probe_layer, member.name)
            _, record = finetune(ckpt, target, cfg.arch, truth_cfg)
        except Exception as exc:
            result.errors.append(_error(seed, "zoo", exc, member=member.name))
            continue
        result.zoo.append({"seed": seed, "member": member.name, "origin": member.origin,
                           "ac_corr": score.ac_corr, "truth": getattr(record, cfg.zoo.metric),
                           "probe_layer": score.probe_layer})


def run_seed(cfg: ExperimentConfig, seed, out_dir) -> SeedResult:
    out = Path(out_dir)
    seed_dir = out / "checkpoints" / f"seed{seed}"
    result = SeedResult(seed)
    target = generate_task(task_with_seed(cfg.target, seed))
    base = None
    if any(v != "scratch" for v in cfg.variants):
        try:
            source = generate_task(task_with_seed(cfg.source, seed))
            base, _ = pretrain(source, cfg.arch, replace(cfg.pretrain, seed=seed))
            save_checkpoint(base, seed_dir / "pretrained.ckpt")
        except Exception as exc:
            result.errors.append(_error(seed, "pretrain", exc))
    for variant in cfg.variants:
        if variant != "scratch" and base is None:
            result.metrics += [{"seed": seed, "variant": variant, "arm": a.name, "status": "error"}
                               for a in cfg.arms]
            continue
        ckpt = _variant_checkpoint(cfg, variant, base, seed)
        if variant in ("shuffled", "masked"):
            save_checkpoint(ckpt, seed_dir / f"{variant}.ckpt")
        ac_corr = None
        if cfg.estimate:
            try:
                score = estimate_transferability(ckpt, target, cfg.arch, replace(cfg.finetune, seed=seed),
                                                 cfg.probe_layer, f"seed{seed}_{variant}")
                result.scores.append(score)
                ac_corr = score.ac_corr
            except Exception as exc:
                result.errors.append(_error(seed, "estimate", exc, variant=variant))
        _run_arms(cfg, seed, variant, ckpt, target, out, result, ac_corr)
    if cfg.zoo:
        _run_zoo(cfg, seed, target, out, result)
    return result


def _run_seed_job(args):
    cfg_doc, seed, out_dir = args
    return run_seed(config_from_dict(cfg_doc, env={}), seed, out_dir)


def _write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: fmt(row.get(k)) for k in fieldnames})


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions():
    import matplotlib
    import scipy
    out = {"acnorm": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
           "matplotlib": matplotlib.__version__, "python": platform.python_version()}
    try:
        import numba
        out["numba"] = numba.__version__
    except ImportError:
        pass
    return out


def _plot_summaries(cfg: ExperimentConfig, out: Path, metrics, deltas, zoo_rows):
    from .plots import score_vs_performance, update_magnitudes
    for variant in cfg.variants:
        rows = [d for d in deltas if d["variant"] == variant]
        if rows:
            update_magnitudes(rows, out / "plots" / f"update_magnitudes_{variant}.png", variant)
    points = [(f"{r['arm']}/{r['variant']}", r["ac_corr"], r["dice"]) for r in metrics
              if r.get("ac_corr") is not None and r.get("dice") is not None]
    points += [(f"zoo/{r['member']}", r["ac_corr"], r["truth"]) for r in zoo_rows]
    if points:
        score_vs_performance(points, out / "plots" / "score_vs_performance.png")


def _zoo_summary(zoo_rows, seeds):
    per_seed = {}
    for seed in seeds:
        rows = [r for r in zoo_rows if r["seed"] == seed]
        if len(rows) < 2:
            continue
        rep = rank_models([r["ac_corr"] for r in rows], [r["truth"] for r in rows],
                          [r["member"] for r in rows])
        per_seed[str(seed)] = rep.to_dict()
    taus = [v["kendall_tau"] for v in per_seed.values() if v["kendall_tau"] is not None]
    return {"schema": "acnorm.zoo/1", "per_seed": per_seed,
            "median_kendall_tau": float(np.median(taus)) if taus else None}


def run_experiment(cfg: ExperimentConfig, out_dir) -> ExperimentReport:
    out = Path(out_dir)
    for sub in ("checkpoints", "calibration", "plots/calibration"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    doc = cfg.to_dict()
    jobs = [(doc, seed, str(out)) for seed in cfg.seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_seed_job, jobs))
    else:
        results = [run_seed(cfg, seed, out) for seed in cfg.seeds]

    key = lambda r: (r["seed"], cfg.variants.index(r["variant"]), [a.name for a in cfg.arms].index(r["arm"]))
    metrics = sorted((m for r in results for m in r.metrics), key=key)
    deltas = [d for r in sorted(results, key=lambda r: r.seed) for d in r.deltas]
    errors = [e for r in results for e in r.errors]
    scores = [s for r in results for s in r.scores]
    zoo_rows = [z for r in sorted(results, key=lambda r: r.seed) for z in r.zoo]

    _write_csv(out / "metrics.csv", METRIC_FIELDS, metrics)
    _write_csv(out / "deltas.csv", DELTA_FIELDS, deltas)
    (out / "errors.json").write_text(json.dumps(errors, indent=2) + "\n")
    outputs = ["metrics.csv", "deltas.csv", "errors.json"]
    if cfg.estimate:
        write_scores(scores, out / "scores.json", {"experiment": cfg.name})
        outputs.append("scores.json")
    zoo_ranking = None
    if cfg.zoo:
        _write_csv(out / "zoo.csv", ZOO_FIELDS, zoo_rows)
        zoo_ranking = _zoo_summary(zoo_rows, cfg.seeds)
        (out / "zoo_ranking.json").write_text(json.dumps(zoo_ranking, indent=2, sort_keys=True) + "\n")
        outputs += ["zoo.csv", "zoo_ranking.json"]
    if cfg.plots:
        _plot_summaries(cfg, out, metrics, deltas, zoo_rows)

    manifest = {
        "schema": "acnorm.run/1",
        "config": doc,
        "seeds": cfg.seeds,
        "backend": backend_name(),
        "versions": _versions(),
        "status": "ok" if not errors else "failed",
        "n_errors": len(errors),
        "outputs": {name: _digest(out / name) for name in outputs},
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return ExperimentReport(out, metrics, errors, zoo_ranking)


def read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
