"""Command-line entry point: ``chainmerge <subcommand> [flags]``.

Exit codes: 0 on success, 1 for usage errors, 2 for data or model errors.
Diagnostics go to stdout as JSON; artifacts are written to files.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .errors import ChainMergeError
from .harness import ExperimentSpec, evaluate, evaluate_arrays, prepare_models, run_experiment
from .io import dumps_json, load_checkpoint, load_matrix, save_checkpoint, save_matrix, write_json
from .mcs import mcs_report
from .merge import MergeConfig, TaskBundle, canonical_method, merge

USAGE_ERROR = 1
DATA_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _method_list(text: str) -> tuple:
    try:
        return tuple(canonical_method(v.strip()) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _method(text: str) -> str:
    try:
        return canonical_method(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_merge_flags(p):
    p.add_argument("--tikhonov", type=float, default=1e-4, help="relative Tikhonov strength (default 1e-4)")
    p.add_argument("--rank-eps", type=float, default=1e-10, help="relative eigenvalue cutoff (default 1e-10)")
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=True, help="cosine-normalize samples before Gram construction")
    p.add_argument("--max-samples", type=int, default=500, help="samples per task used for statistics (default 500)")
    p.add_argument("--weight-floor", type=float, default=1e-6, help="relative floor for sensitivity weights")


def _add_toy_flags(p):
    p.add_argument("--tasks", type=int, default=4)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--samples", type=int, default=500, help="samples per train/test split")
    p.add_argument("--activation", default="relu", choices=["identity", "relu", "tanh", "gelu"])
    p.add_argument("--seed", type=int, default=42)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chainmerge", description="Layer-wise closed-form merging of feed-forward networks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-toy", help="generate synthetic tasks and fine-tune one model per task")
    _add_toy_flags(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("merge", help="merge checkpoints into one model")
    p.add_argument("--method", type=_method, default="com", help="average|avg, regmean, com, com-weighted")
    p.add_argument("--model", action="append", default=[], required=True, help="task checkpoint directory (repeatable)")
    p.add_argument("--data", action="append", default=[], required=True, help="task sample matrix, d x n (repeatable)")
    p.add_argument("--out", required=True, help="merged checkpoint directory")
    _add_merge_flags(p)

    p = sub.add_parser("mcs", help="measure merging covariate shift of a merged model")
    p.add_argument("--merged", required=True)
    p.add_argument("--model", action="append", default=[], required=True)
    p.add_argument("--data", action="append", default=[], required=True)
    p.add_argument("--label", default="merged", help="method label stored in the report")
    p.add_argument("--max-samples", type=int, default=None)
    p.add_argument("--out", default="mcs.json")

    p = sub.add_parser("eval", help="accuracy and cross-entropy of a checkpoint on labelled data")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="inputs, d x n")
    p.add_argument("--labels", required=True, help="class indices, 1 x n")

    p = sub.add_parser("experiment", help="run the full synthetic merging experiment")
    _add_toy_flags(p)
    p.add_argument("--methods", type=_method_list, default=("average", "regmean", "com", "com_weighted"))
    p.add_argument("--sweep", type=_int_list, default=(), help="comma-separated sample counts for the sweep")
    p.add_argument("--sweep-method", type=_method, default="com")
    _add_merge_flags(p)
    p.add_argument("--out", default="report.json")
    return parser


def _merge_config(args, method: str) -> MergeConfig:
    try:
        return MergeConfig(
            method=method,
            lambda_rel=args.tikhonov,
            rank_eps=args.rank_eps,
            normalize=args.normalize,
            max_samples_per_task=args.max_samples,
            weight_floor_rel=args.weight_floor,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _paired(args):
    if len(args.model) != len(args.data):
        raise UsageError(f"got {len(args.model)} --model flags but {len(args.data)} --data flags")


def _bundles(models, datas):
    return [
        TaskBundle(load_checkpoint(m), load_matrix(d), str(m))
        for m, d in zip(models, datas)
    ]


def cmd_train_toy(args) -> dict:
    spec = ExperimentSpec(
        num_tasks=args.tasks,
        input_dim=args.dim,
        depth=args.depth,
        hidden_dim=args.hidden,
        num_classes=args.classes,
        samples_per_split=args.samples,
        seed=args.seed,
        activation=args.activation,
    )
    out = Path(args.out)
    tasks, base, fine_tuned = prepare_models(spec)
    save_checkpoint(base, out / "base")
    summary = {"tasks": []}
    for task, model in zip(tasks, fine_tuned):
        tdir = out / task.name
        save_checkpoint(model, tdir / "model")
        save_matrix(task.train_inputs, tdir / "train.cmmx")
        save_matrix(task.train_labels[None, :], tdir / "train_labels.cmmx")
        save_matrix(task.test_inputs, tdir / "test.cmmx")
        save_matrix(task.test_labels[None, :], tdir / "test_labels.cmmx")
        res = evaluate(model, task)
        summary["tasks"].append({"task": task.name, "dir": str(tdir), "accuracy": res.accuracy, "loss": res.loss})
    return summary


def cmd_merge(args) -> dict:
    _paired(args)
    cfg = _merge_config(args, args.method)
    outcome = merge(_bundles(args.model, args.data), cfg)
    save_checkpoint(outcome.merged, args.out)
    return {
        "method": outcome.method,
        "layers": [layer.name for layer in outcome.merged.layers],
        "per_layer_omega": list(outcome.per_layer_omega),
        "per_layer_weights": [list(w.per_task) for w in outcome.per_layer_weights],
        "samples_used": outcome.stats_provenance,
    }


def cmd_mcs(args) -> dict:
    _paired(args)
    report = mcs_report(_bundles(args.model, args.data), load_checkpoint(args.merged), args.label, args.max_samples)
    payload = report.to_dict()
    write_json(payload, args.out)
    return payload


def cmd_eval(args) -> dict:
    model = load_checkpoint(args.model)
    x = load_matrix(args.data)
    labels = load_matrix(args.labels)
    if labels.shape[0] != 1 or labels.shape[1] != x.shape[1]:
        raise UsageError(f"labels must be 1 x {x.shape[1]}, got {labels.shape[0]} x {labels.shape[1]}")
    y = labels[0].astype(np.int64)
    if not np.array_equal(y, labels[0]) or np.any(y < 0):
        raise UsageError("labels must be non-negative integers")
    res = evaluate_arrays(model, x, y, Path(args.model).name)
    return {"accuracy": res.accuracy, "loss": res.loss, "samples": int(x.shape[1])}


def cmd_experiment(args) -> dict:
    base_cfg = _merge_config(args, "com")
    spec = ExperimentSpec(
        num_tasks=args.tasks,
        input_dim=args.dim,
        depth=args.depth,
        hidden_dim=args.hidden,
        num_classes=args.classes,
        samples_per_split=args.samples,
        seed=args.seed,
        activation=args.activation,
        methods=args.methods,
        merge=base_cfg,
        samples_for_merging=args.max_samples,
        sweep=args.sweep,
        sweep_method=args.sweep_method,
    )
    result = run_experiment(spec)
    write_json(result.report, args.out)
    return {
        "report": str(args.out),
        "avg_normalized": {m["method"]: m["avg_normalized"] for m in result.report["methods"]},
        "mcs_grand_total": {m["method"]: m["mcs"]["grand_total"] for m in result.report["methods"]},
        "sweep": [{"samples": s["samples"], "avg_normalized": s["avg_normalized"]} for s in result.report["sweep"]],
    }


COMMANDS = {
    "train-toy": cmd_train_toy,
    "merge": cmd_merge,
    "mcs": cmd_mcs,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_ERROR
    try:
        payload = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"chainmerge {args.command}: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (ChainMergeError, OSError, ValueError) as exc:
        print(f"chainmerge {args.command}: {exc}", file=sys.stderr)
        return DATA_ERROR
    sys.stdout.write(dumps_json(payload))
    return 0


if __name__ == "__main__":
    sys.exit(main())
