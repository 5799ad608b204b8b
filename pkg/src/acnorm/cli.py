"""Command-line entry point: ``acnorm <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config, task_with_seed
from .data import generate_task
from .errors import ACNormError, InputError

log = logging.getLogger("acnorm")


def _dump(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n"
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_pretrain(args):
    from .training import pretrain

    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    ckpt, record = pretrain(generate_task(task_with_seed(cfg.source, seed)), cfg.arch,
                            replace(cfg.pretrain, seed=seed))
    save_checkpoint(ckpt, args.out)
    if args.metrics:
        _dump({"schema": "acnorm.train/1", "seed": seed, "loss_curve": record.loss_curve}, args.metrics)
    print(f"wrote {args.out}")


def cmd_finetune(args):
    from .training import finetune

    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    ft = cfg.arm(args.arm).train_config(cfg.finetune, seed) if args.arm else replace(cfg.finetune, seed=seed)
    if args.freeze_policy:
        ft = replace(ft, freeze_policy=args.freeze_policy)
    ckpt = None if args.ckpt is None else load_checkpoint(args.ckpt)
    out, record = finetune(ckpt, generate_task(task_with_seed(cfg.target, seed)), cfg.arch, ft)
    save_checkpoint(out, args.out)
    doc = {"schema": "acnorm.finetune/1", "seed": seed, "checkpoint": args.ckpt,
           "norm_kind": ft.norm_kind, "freeze_policy": str(ft.freeze_policy),
           **record.summary(), "loss_curve": record.loss_curve}
    _dump(doc, args.metrics)


def cmd_estimate(args):
    from .transferability import estimate_many, write_scores

    cfg = load_config(args.task)
    paths = sorted(Path(args.ckpt_dir).glob("*.ckpt"))
    if not paths:
        raise InputError(f"no *.ckpt files in {args.ckpt_dir}")
    datasets = generate_task(task_with_seed(cfg.target, cfg.seed))
    scores = estimate_many(paths, datasets, cfg.arch, replace(cfg.finetune, seed=cfg.seed),
                           args.probe_layer or cfg.probe_layer, args.workers)
    write_scores(scores, args.out, {"task": cfg.name, "seed": cfg.seed})
    for s in scores:
        print(f"{s.checkpoint_id}\t{s.ac_corr:.6f}\t{s.probe_layer}")


def cmd_rank(args):
    from .transferability import rank_files

    report = rank_files(args.scores, args.truth, args.out)
    print(f"pearson={report.pearson:.4f} kendall_tau={report.kendall_tau:.4f} "
          f"weighted_tau={report.weighted_tau:.4f} n={len(report.pairs)}")


def cmd_probe_deltas(args):
    from .probe import layer_deltas, write_deltas_csv

    deltas = layer_deltas(load_checkpoint(args.before), load_checkpoint(args.after),
                          encoder_only=args.encoder_only)
    write_deltas_csv(deltas, args.out)
    print(f"wrote {len(deltas)} rows to {args.out}")


def cmd_probe_eq5(args):
    from .probe import random_propagation_draws

    opts = {"draws": 20, "K": 4, "n_samples": 10**6, "seed": 0, "activation": "identity"}
    if args.config:
        opts.update(load_config(args.config).eq5)
    rows = random_propagation_draws(**opts)
    worst = max(max(r["rel_err_mean"], r["rel_err_var"]) for r in rows)
    _dump({"schema": "acnorm.eq5/1", "options": opts, "draws": rows, "max_rel_err": worst}, args.out)
    print(f"max relative error {worst:.3e} over {len(rows)} draws", file=sys.stderr)


def _derived_path(path, tag):
    p = Path(path)
    return p.with_name(f"{p.stem}.{tag}{p.suffix}")


def cmd_surgery_shuffle(args):
    from .surgery import shuffle_channels

    out = args.out or _derived_path(args.ckpt, f"shuffled-s{args.seed}")
    save_checkpoint(shuffle_channels(load_checkpoint(args.ckpt), args.seed), out)
    print(f"wrote {out}")


def cmd_surgery_mask(args):
    from .surgery import mask_channels

    out = args.out or _derived_path(args.ckpt, f"masked-r{args.ratio:g}-s{args.seed}")
    save_checkpoint(mask_channels(load_checkpoint(args.ckpt), args.ratio, args.seed), out)
    print(f"wrote {out}")


def cmd_experiment(args):
    from .experiment import run_experiment

    cfg = load_config(args.config)
    if args.no_plots:
        cfg.plots = False
    report = run_experiment(cfg, args.out)
    for row in report.metrics:
        dice = row.get("dice")
        print(f"seed={row['seed']} variant={row['variant']} arm={row['arm']} "
              f"status={row.get('status')} dice={'' if dice is None else f'{dice:.4f}'}")
    if report.zoo_ranking:
        print(f"zoo median kendall tau: {report.zoo_ranking['median_kendall_tau']}")
    if not report.ok:
        print(f"{len(report.errors)} failure(s); see {Path(args.out) / 'errors.json'}", file=sys.stderr)
        return 1
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="acnorm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="train a source checkpoint from random init")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--seed", type=int)
    s.add_argument("--metrics", help="write the loss curve as JSON here")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="fine-tune a checkpoint (or scratch) on the target task")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", help="source checkpoint; omit to start from random init")
    s.add_argument("--out", required=True)
    s.add_argument("--arm", help="arm name from the config, or a norm kind")
    s.add_argument("--freeze-policy", choices=["full_ft", "norm_only"])
    s.add_argument("--seed", type=int)
    s.add_argument("--metrics", help="metrics JSON path (default: stdout)")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("estimate", help="AC-Corr for every checkpoint in a directory")
    s.add_argument("--ckpt-dir", required=True)
    s.add_argument("--task", required=True, help="config whose target section is the target task")
    s.add_argument("--out", required=True)
    s.add_argument("--probe-layer")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("rank", help="rank correlations between scores and ground truth")
    s.add_argument("--scores", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_rank)

    probe = sub.add_parser("probe", help="update magnitudes and the statistics-propagation check")
    psub = probe.add_subparsers(dest="probe_command", required=True)
    s = psub.add_parser("deltas")
    s.add_argument("--before", required=True)
    s.add_argument("--after", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--encoder-only", action="store_true")
    s.set_defaults(func=cmd_probe_deltas)
    s = psub.add_parser("eq5")
    s.add_argument("--config", help="config with an eq5 section (draws, K, n_samples, seed, activation)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_probe_eq5)

    surgery = sub.add_parser("surgery", help="derive shuffled or masked checkpoints")
    ssub = surgery.add_subparsers(dest="surgery_command", required=True)
    s = ssub.add_parser("shuffle")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_surgery_shuffle)
    s = ssub.add_parser("mask")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--ratio", type=float, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_surgery_mask)

    s = sub.add_parser("experiment", help="run a full experiment config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="report directory")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except ACNormError as exc:
        print(f"acnorm: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
