"""Command-line entry point: run / ablate / eval / sample / toy subcommands.

Flags mirror config keys; explicit flags override the config file, which
overrides the built-in defaults."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .config import ExperimentConfig, config_from_dict, load_config, validate_config


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--dataset", help="dataset name, or 'a->b' for sequential scenarios")
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--method", choices=("multiband_vae", "multiband_gan", "gr"))
    p.add_argument("--scenario", choices=("class_incremental", "dirichlet", "sequential_datasets"))
    p.add_argument("--num-tasks", type=int, dest="num_tasks")
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--seed", type=int, action="append",
                   help="random seed; repeat the flag for multi-seed runs")
    p.add_argument("--out", help="output directory")
    p.add_argument("--limit-train", type=int, dest="limit_train")
    p.add_argument("--epochs-local", type=int, dest="epochs_local")
    p.add_argument("--epochs-global", type=int, dest="epochs_global")
    p.add_argument("--eval-budget", type=int, dest="eval_budget")
    p.add_argument("--classifier", action="store_true", help="enable the downstream classifier stage")


def build_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    updates = {}
    if args.dataset:
        updates["dataset"] = args.dataset
    if args.data_root:
        updates["data_root"] = args.data_root
    if args.method:
        updates["method"] = args.method
    if args.gamma is not None:
        updates["gamma"] = args.gamma
    if args.seed:
        updates["seeds"] = args.seed
    if args.out:
        updates["out"] = args.out
    if args.limit_train is not None:
        updates["limit_train"] = args.limit_train
    cfg = dataclasses.replace(cfg, **updates)
    if args.scenario or args.num_tasks or args.alpha is not None:
        sc = dataclasses.replace(
            cfg.scenario,
            **{k: v for k, v in (("policy", args.scenario), ("num_tasks", args.num_tasks),
                                 ("alpha", args.alpha)) if v is not None},
        )
        cfg = dataclasses.replace(cfg, scenario=sc)
    ep = {}
    if args.epochs_local is not None:
        ep["local"] = args.epochs_local
    if args.epochs_global is not None:
        ep["global_"] = args.epochs_global
    if ep:
        cfg = dataclasses.replace(cfg, epochs=dataclasses.replace(cfg.epochs, **ep))
    if args.eval_budget is not None:
        cfg = dataclasses.replace(cfg, eval=dataclasses.replace(cfg.eval, budget=args.eval_budget))
    if args.classifier:
        cfg = dataclasses.replace(cfg, clf=dataclasses.replace(cfg.clf, enabled=True))
    validate_config(cfg)
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="multiband",
                                     description="Continual generative learning via latent-space alignment")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the full experiment defined by the config")
    _add_common(p_run)
    p_run.add_argument("--resume", action="store_true", help="continue from the last task checkpoint")

    p_abl = sub.add_parser("ablate", help="run the cumulative ablation ladder")
    _add_common(p_abl)

    p_eval = sub.add_parser("eval", help="re-evaluate a saved checkpoint")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True, help="path to a task_XX.bundle file")

    p_sample = sub.add_parser("sample", help="emit sample grids from a saved checkpoint")
    _add_common(p_sample)
    p_sample.add_argument("--checkpoint", required=True)
    p_sample.add_argument("--columns", type=int, default=10)

    p_toy = sub.add_parser("toy", help="three-task alignment-vs-replay comparison")
    _add_common(p_toy)
    p_toy.add_argument("--per-task", type=int, default=1000, dest="per_task")
    p_toy.add_argument("--extra-shared", type=int, default=500, dest="extra_shared")

    args = parser.parse_args(argv)
    cfg = build_config(args)

    from . import runner

    if args.command == "run":
        art = runner.run_experiment(cfg, resume=args.resume)
        for seed, summary in art.summaries.items():
            print(f"seed {seed}: final mean FID {summary['final_mean_fid']:.3f} -> {summary['run_dir']}")
    elif args.command == "ablate":
        table, path = runner.run_ablation(cfg)
        width = max(len(r["modification"]) for r in table)
        for r in table:
            print(f"{r['modification']:<{width}}  mean FID {r['mean_fid']:8.3f}")
        print(f"table written to {path}")
    elif args.command == "eval":
        from .metrics import MetricsReport, evaluate_after_task
        from .runner import _build_streams, _feature_net, _load_checkpoint

        model, _, meta = _load_checkpoint(args.checkpoint, cfg)
        seed = cfg.seeds[0]
        train_ds, test_ds, _, test_stream = _build_streams(cfg, seed)
        fnet = _feature_net(train_ds, test_ds, cfg.eval.feature_net_epochs, seed, cfg.device)
        rows = evaluate_after_task(model, test_stream, test_ds, fnet, model.tasks_seen - 1,
                                   budget=cfg.eval.budget, seed=seed,
                                   num_clusters=cfg.eval.num_clusters)
        print(json.dumps(rows, indent=1))
    elif args.command == "sample":
        import os

        model, _, meta = runner._load_checkpoint(args.checkpoint, cfg)
        out = os.path.join(cfg.out, "samples")
        paths = runner.emit_samples(model, args.columns, out, seed=cfg.seeds[0])
        print("\n".join(paths))
    elif args.command == "toy":
        summary = runner.run_toy(cfg, per_task=args.per_task, extra_shared=args.extra_shared)
        print(json.dumps({k: v for k, v in summary.items() if k != "fid_matrix"}, indent=1))
        print("fid matrix (rows = trained after, cols = evaluated):")
        for row in summary["fid_matrix"]:
            print("  " + "  ".join("   -  " if v is None else f"{v:6.2f}" for v in row))
    return 0


if __name__ == "__main__":
    sys.exit(main())
