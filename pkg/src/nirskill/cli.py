"""Command-line surface.

Subcommands: synth | preprocess | pretrain | train | infer | cv | loso |
trial-curve | compare | report. Every run writes a resolved-config manifest
next to its outputs so results are reproducible from the record alone.

Exit codes: 0 success, 2 usage error, 3 invalid config, 4 I/O failure,
1 any other error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, load_config

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4


def _add_common(p: argparse.ArgumentParser, manifest: bool = True) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int, default=None, help="master seed override")
    p.add_argument(
        "--set", dest="overrides", action="append", default=[],
        metavar="SECTION.KEY=VALUE", help="config override (repeatable)",
    )
    if manifest:
        p.add_argument("--manifest", required=True, help="dataset manifest JSON")


def _add_region(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--region", help="brain region to analyse")
    g.add_argument("--all-regions", action="store_true", help="loop over all montage regions")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="nirskill",
        description="Motor-skill classification pipelines for raw fNIRS signals",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    _add_common(p, manifest=False)
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("preprocess", help="write fully processed chromophore CSVs")
    _add_common(p)
    p.add_argument("--out", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--region")
    g.add_argument("--all-regions", action="store_true")

    p = sub.add_parser("pretrain", help="self-supervised encoder-decoder pretraining")
    _add_common(p)
    p.add_argument("--out", required=True, help="artifacts directory")
    _add_region(p)
    p.add_argument("--mode", choices=["end_to_end", "baseline"], default=None)

    p = sub.add_parser("train", help="train the classifier head; report on a held-out split")
    _add_common(p)
    p.add_argument("--artifacts", required=True, help="pretrain artifacts directory")
    _add_region(p)
    p.add_argument("--mode", choices=["end_to_end", "baseline"], default=None)

    p = sub.add_parser("infer", help="score trials with a trained classifier")
    _add_common(p)
    p.add_argument("--artifacts", required=True)
    p.add_argument("--region", required=True)
    p.add_argument("--mode", choices=["end_to_end", "baseline"], default=None)
    p.add_argument("--out", default=None, help="scores CSV path")

    p = sub.add_parser("cv", help="k-fold cross-validation")
    _add_common(p)
    p.add_argument("--artifacts", required=True)
    _add_region(p)
    p.add_argument("-k", type=int, default=None, help="fold count (default from config)")
    p.add_argument("--mode", choices=["end_to_end", "baseline"], default=None)
    p.add_argument("--retention", default=None, help="retention-set manifest")

    p = sub.add_parser("loso", help="leave-one-subject-out cross-validation")
    _add_common(p)
    p.add_argument("--artifacts", required=True)
    _add_region(p)
    p.add_argument("--mode", choices=["end_to_end", "baseline"], default=None)

    p = sub.add_parser("trial-curve", help="per-trial-index balanced accuracy + trend")
    _add_common(p)
    p.add_argument("--artifacts", required=True)
    _add_region(p)
    p.add_argument("--mode", choices=["end_to_end", "baseline"], default=None)
    p.add_argument("--from-day", type=int, default=None)

    p = sub.add_parser("compare", help="one-sided Wilcoxon comparison of two runs")
    p.add_argument("results_a", help="metrics dir of run A (reference)")
    p.add_argument("results_b", help="metrics dir of run B (candidate improvement)")
    p.add_argument("--out", default=None, help="comparison CSV (default: B/comparison.csv)")
    p.add_argument("--task", default="synthetic", help="row label")

    p = sub.add_parser("report", help="re-render result CSVs from results.json")
    p.add_argument("--results", required=True, help="directory holding results.json")

    return ap


def dispatch(argv: list[str]) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors
        return int(exc.code) if exc.code is not None else EXIT_USAGE

    try:
        if args.command == "compare":
            from .pipeline import run_compare

            out = args.out or str(Path(args.results_b) / "comparison.csv")
            rows = run_compare(args.results_a, args.results_b, out, task=args.task)
            for metric, res in rows.items():
                print(f"{metric}: p={res['p']:.6g} (n={int(res['n'])})")
            print(f"wrote {out}")
            return EXIT_OK
        if args.command == "report":
            from .pipeline import run_report

            for path in run_report(args.results):
                print(f"wrote {path}")
            return EXIT_OK

        cfg = load_config(args.config, args.overrides, seed=args.seed)

        if args.command == "synth":
            from .pipeline import run_synth

            manifest = run_synth(cfg, args.out)
            print(f"wrote {manifest}")
            return EXIT_OK
        if args.command == "preprocess":
            from .pipeline import run_preprocess

            out = run_preprocess(cfg, args.manifest, args.out, args.region,
                                 args.all_regions)
            print(f"wrote processed trials under {out}")
            return EXIT_OK
        if args.command == "pretrain":
            from .pipeline import run_pretrain

            results = run_pretrain(cfg, args.manifest, args.out, args.region,
                                   args.all_regions, args.mode)
            for region, first, best in results:
                print(f"{region}: epoch0 loss {first:.6g} -> best {best:.6g}")
            return EXIT_OK
        if args.command == "train":
            from .pipeline import run_train

            metrics = run_train(cfg, args.manifest, args.artifacts, args.region,
                                args.all_regions, args.mode)
            for region, vals in metrics.items():
                print(
                    f"{region}: holdout accuracy {vals['accuracy']:.4f} "
                    f"roc_auc {vals['roc_auc']:.4f}"
                )
            return EXIT_OK
        if args.command == "infer":
            from .pipeline import run_infer

            out = run_infer(cfg, args.manifest, args.artifacts, args.region,
                            args.out, args.mode)
            print(f"wrote {out}")
            return EXIT_OK
        if args.command == "cv":
            from .pipeline import run_cv

            summaries = run_cv(cfg, args.manifest, args.artifacts, args.region,
                               args.all_regions, args.mode, args.k, args.retention)
            for region, summary in summaries.items():
                acc, sd = summary["accuracy"]
                auc, auc_sd = summary["roc_auc"]
                print(f"{region}: accuracy {acc:.4f} (SD {sd:.4f}), "
                      f"roc_auc {auc:.4f} (SD {auc_sd:.4f})")
            return EXIT_OK
        if args.command == "loso":
            from .pipeline import run_loso

            summaries = run_loso(cfg, args.manifest, args.artifacts, args.region,
                                 args.all_regions, args.mode)
            for region, summary in summaries.items():
                print(f"{region}: mean MCE {summary['mean_mce']:.4f} "
                      f"(SD {summary['sd_mce']:.4f})")
            return EXIT_OK
        if args.command == "trial-curve":
            from .pipeline import run_trial_curve

            result = run_trial_curve(cfg, args.manifest, args.artifacts, args.region,
                                     args.all_regions, args.mode, args.from_day)
            print(f"trend slope {result.slope:.6g}, intercept {result.intercept:.6g}")
            return EXIT_OK
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
