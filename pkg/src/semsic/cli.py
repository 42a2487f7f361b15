"""Command line entry point: ``semsic {train,evaluate,baseline,plot,reproduce}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from . import experiments as ex

log = logging.getLogger("semsic")


def _load(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig.from_dict({})
    if args.seed is not None:
        cfg = cfg.with_overrides(seeds=[args.seed])
    return cfg


def _out(args, cfg) -> Path:
    return Path(args.out or cfg.raw["output_dir"])


def cmd_train(args) -> int:
    """Run the training stages for every semantic method (no evaluation)."""
    cfg = _load(args)
    data = ex.prepare_data(cfg)
    pipe = ex.Pipeline(cfg, data, _out(args, cfg), args.force)
    for seed in cfg.seeds:
        pipe.pretrained_all(seed)
        for case in cfg.cases:
            for method in cfg.methods:
                if method.startswith(("full", "partial")):
                    pipe.retrained(seed, case, method)
    print(f"trained {len(pipe.store.trained)} stage(s), reused {len(pipe.store.reused)} under {pipe.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    run = ex.run_experiment(cfg, _out(args, cfg), args.force)
    print(f"wrote {len(run.rows)} rows to {run.csv_path} (config {run.config_hash})")
    return 0


def cmd_baseline(args) -> int:
    cfg = _load(args).with_overrides(methods=["classical"])
    run = ex.run_experiment(cfg, _out(args, cfg), args.force)
    print(f"wrote {len(run.rows)} rows to {run.csv_path} (config {run.config_hash})")
    return 0


def cmd_plot(args) -> int:
    out = Path(args.out or ".")
    path = ex.plot_results(args.csv, out / f"{args.metric}.png", args.metric)
    print(f"wrote {path}")
    return 0


def cmd_reproduce(args) -> int:
    cfg = _load(args)
    out = Path(args.out or Path(cfg.raw["output_dir"]) / args.figure)
    for p in ex.reproduce(args.figure, cfg, out, args.force):
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semsic", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    p.add_argument("--threads", type=int, default=None, help="torch intra-op threads")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="YAML experiment config")
            sp.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
            sp.add_argument("--force", action="store_true", help="retrain even if checkpoints exist")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("train", help="run pretraining, joint training and retraining")
    common(sp)
    sp.set_defaults(func=cmd_train)
    sp = sub.add_parser("evaluate", help="train as needed, evaluate every case and write results.csv")
    common(sp)
    sp.set_defaults(func=cmd_evaluate)
    sp = sub.add_parser("baseline", help="evaluate the classical Huffman/64-QAM chain only")
    common(sp)
    sp.set_defaults(func=cmd_baseline)
    sp = sub.add_parser("plot", help="plot min-across-users metrics from result CSVs")
    sp.add_argument("csv", nargs="+", help="results.csv files")
    sp.add_argument("--metric", default="similarity", help="similarity, bleu, or bleu1..bleu4")
    common(sp, config=False)
    sp.set_defaults(func=cmd_plot)
    sp = sub.add_parser("reproduce", help="run and plot one figure")
    sp.add_argument("--figure", required=True, choices=sorted(ex.FIGURES))
    common(sp)
    sp.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except (ex.ConfigError, ex.ResultsError, ValueError, FileNotFoundError, RuntimeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else exc.__class__.__name__
        print(f"semsic: error: {msg}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("semsic: interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
