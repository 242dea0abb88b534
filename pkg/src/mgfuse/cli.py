"""Command-line entry point.

Verbs: ``gen-data``, ``run``, ``ablate``, ``eval``, ``report``. Successful
invocations exit 0; failures print one machine-readable JSON object to
stderr and exit nonzero (2 for config/validation problems, 1 otherwise).
The MGFUSE_OUTPUT_ROOT environment variable re-roots relative output dirs.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import runner
from .config import ConfigError, load_config, resolve_grid
from .synthio import DatasetIntegrityError, DatasetVersionError, load_dataset
from .trainer import AGGREGATION_MODES, NonFiniteLossError, PseudoLabelError, evaluate_checkpoint

SPLITS = ("source_train", "target_train", "target_val", "target_test")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mgfuse", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)

    gen = sub.add_parser("gen-data", help="materialize the datasets a config needs")
    gen.add_argument("config")

    run = sub.add_parser("run", help="execute one experiment config")
    run.add_argument("config")
    run.add_argument("--force", action="store_true", help="redo completed cells")

    abl = sub.add_parser("ablate", help="execute a variant grid config")
    abl.add_argument("config")
    abl.add_argument("--force", action="store_true")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    ev.add_argument("checkpoint")
    ev.add_argument("split", choices=SPLITS)
    ev.add_argument("--aggregate", choices=AGGREGATION_MODES, default="fuse+3d")
    ev.add_argument("--dataset", default=None,
                    help="dataset directory (defaults to the path recorded in the checkpoint)")

    rep = sub.add_parser("report", help="reassemble the results table of an output dir")
    rep.add_argument("output_dir")
    return p


def _fail(exc: Exception, code: int) -> int:
    record = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        record["path"] = exc.path
    print(json.dumps(record), file=sys.stderr)
    return code


def _cmd_gen_data(args) -> int:
    paths = runner.generate_datasets(load_config(args.config))
    print(json.dumps({"datasets": paths}))
    return 0


def _cmd_run(args) -> int:
    outcome = runner.run(load_config(args.config), force=args.force)
    print(outcome.table.to_markdown())
    print(json.dumps({"trained": outcome.trained_cells, "skipped": outcome.skipped_cells}))
    return 0


def _cmd_ablate(args) -> int:
    with open(args.config) as f:
        configs = resolve_grid(json.load(f))
    outcome = runner.ablate(configs, force=args.force)
    print(outcome.table.to_markdown())
    if outcome.failed_cells:
        print(json.dumps({"failed": outcome.failed_cells}), file=sys.stderr)
        return 1
    return 0


def _cmd_eval(args) -> int:
    from . import containers
    _, meta = containers.load_arrays(args.checkpoint)
    dataset_path = args.dataset or meta.get("dataset_path")
    if not dataset_path:
        raise ConfigError("checkpoint records no dataset path; pass --dataset", "$.dataset")
    dataset = load_dataset(dataset_path)
    split_ids = getattr(dataset.splits, args.split)
    report = evaluate_checkpoint(args.checkpoint, dataset, split_ids, args.aggregate)
    print(json.dumps({
        "split": args.split,
        "aggregation": args.aggregate,
        "miou": {b: report.miou(b) for b in report.branches},
        "per_class_iou": {b: [None if x != x else float(x) for x in r.per_class]
                          for b, r in report.branches.items()},
        "excluded_classes": {b: r.excluded for b, r in report.branches.items()},
    }, indent=1, sort_keys=True))
    return 0


def _cmd_report(args) -> int:
    table = runner.report(args.output_dir)
    print(table.to_markdown())
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    commands = {"gen-data": _cmd_gen_data, "run": _cmd_run, "ablate": _cmd_ablate,
                "eval": _cmd_eval, "report": _cmd_report}
    try:
        return commands[args.verb](args)
    except (ConfigError, DatasetVersionError, DatasetIntegrityError,
            json.JSONDecodeError, FileNotFoundError) as exc:
        return _fail(exc, 2)
    except (NonFiniteLossError, PseudoLabelError, runner.FingerprintError,
            ValueError, RuntimeError) as exc:
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
