"""Command-line surface: gen / train / eval / expand / check.

Exit codes: 0 on success, 1 when a check or run fails (battery failure,
divergence), 2 for usage errors (unknown flags, bad config, missing files).

``gen`` writes a JSONL dataset (gzipped if the path ends in .gz). ``train``
reads one, trains per an optional config JSON plus flag overrides, and writes
the model JSON to --out with per-epoch metrics in a sibling .metrics.csv.
``eval`` scores a saved model on a dataset and prints the metrics line.
``expand`` ranks candidate bit-vectors against the query rows marked in the
same JSONL file. ``check`` runs the property battery and prints its table.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from setnn import bayes, checks
from setnn.layers import model_from_json, model_to_json
from setnn.tasks import (
    POPULATION_KINDS,
    GaussianTaskSpec,
    TaskError,
    gen_digit_sum,
    gen_outlier_sets,
    gen_population_task,
    load_jsonl,
    save_jsonl,
)
from setnn.train import ConfigError, TrainConfig, TrainingDiverged, evaluate, metrics_to_csv, train

GEN_TASKS = POPULATION_KINDS + ("digit-sum", "outlier")

_GEN_DEFAULTS = {
    "digit-sum": {"max_set_size": 10, "set_size_at_test": 0},
    "outlier": {"set_size": 16, "d": 8, "shift": 4.0},
}

_GEN_KEYS = {
    "digit-sum": ("max_set_size", "set_size_at_test"),
    "outlier": ("set_size", "d", "shift"),
    "population": ("d", "set_size_range", "alpha_fixed"),
}


class UsageError(ValueError):
    pass


def _load_json(path: str, what: str) -> dict:
    try:
        with open(path) as f:
            obj = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {what} {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError(f"{what} {path} must hold a JSON object")
    return obj


def _gen_overrides(task: str, config_path: str | None) -> dict:
    kind = "population" if task in POPULATION_KINDS else task
    overrides = dict(_GEN_DEFAULTS.get(task, {}))
    if config_path:
        obj = _load_json(config_path, "generator config")
        unknown = set(obj) - set(_GEN_KEYS[kind])
        if unknown:
            raise UsageError(f"unknown generator config fields for {task}: {sorted(unknown)}")
        overrides.update(obj)
    return overrides


def _cmd_gen(args) -> int:
    if args.out is None:
        raise UsageError("gen requires --out")
    ov = _gen_overrides(args.task, args.config)
    try:
        if args.task in POPULATION_KINDS:
            if "set_size_range" in ov:
                ov["set_size_range"] = tuple(ov["set_size_range"])
            dataset = gen_population_task(GaussianTaskSpec(kind=args.task, num_sets=args.n,
                                                           seed=args.seed, **ov))
        elif args.task == "digit-sum":
            dataset = gen_digit_sum(args.n, ov["max_set_size"], ov["set_size_at_test"], args.seed)
        else:
            dataset = gen_outlier_sets(args.n, ov["set_size"], ov["d"], ov["shift"], args.seed)
    except (TaskError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    save_jsonl(dataset, args.out)
    print(f"wrote {len(dataset)} sets to {args.out}")
    return 0


def _metrics_path(model_path: str) -> str:
    stem = model_path[:-5] if model_path.endswith(".json") else model_path
    return stem + ".metrics.csv"


def _train_config(args, dataset) -> TrainConfig:
    obj = _load_json(args.config, "train config") if args.config else {}
    task = dataset.meta.get("task")
    if task in POPULATION_KINDS:
        task = "population"
    obj.setdefault("task", task or args.task)
    if args.task:
        obj["task"] = args.task
    if args.epochs is not None:
        obj["epochs"] = args.epochs
    if args.batch is not None:
        obj["batch_size"] = args.batch
    if args.seed is not None:
        obj["seed"] = args.seed
    if obj.get("task") is None:
        raise UsageError("dataset carries no task; pass --task or a config file")
    try:
        return TrainConfig.from_dict(obj)
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def _cmd_train(args) -> int:
    if args.data is None or args.out is None:
        raise UsageError("train requires --data and --out")
    try:
        dataset = load_jsonl(args.data)
    except (OSError, TaskError, json.JSONDecodeError, KeyError) as exc:
        raise UsageError(f"cannot load dataset {args.data}: {exc}") from exc
    config = _train_config(args, dataset)
    try:
        model, records = train(config, dataset)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    with open(args.out, "w") as f:
        f.write(model_to_json(model) + "\n")
    csv_path = _metrics_path(args.out)
    with open(csv_path, "w") as f:
        f.write(metrics_to_csv(records, include_timing=args.timing))
    print(f"wrote model to {args.out} and metrics to {csv_path}")
    print(metrics_to_csv(records[-1:], include_timing=args.timing), end="")
    return 0


def _cmd_eval(args) -> int:
    if args.model is None or args.data is None:
        raise UsageError("eval requires --model and --data")
    try:
        with open(args.model) as f:
            model = model_from_json(f.read())
        dataset = load_jsonl(args.data)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load inputs: {exc}") from exc
    task = args.task or dataset.meta.get("task")
    if task in POPULATION_KINDS:
        task = "population"
    if task is None:
        raise UsageError("dataset carries no task; pass --task")
    try:
        record = evaluate(model, dataset, task)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    text = metrics_to_csv([record], include_timing=args.timing)
    print(text, end="")
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    return 0


def _cmd_expand(args) -> int:
    if args.data is None:
        raise UsageError("expand requires --data")
    query, candidates, ids = [], [], []
    try:
        with open(args.data) as f:
            for line in f:
                if not line.strip():
                    continue
                obj = json.loads(line)
                bits = obj["bits"]
                if obj.get("query"):
                    query.append(bits)
                else:
                    ids.append(obj.get("id", len(ids)))
                    candidates.append(bits)
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot read candidates {args.data}: {exc}") from exc
    if not query:
        raise UsageError('no query rows: mark at least one line with "query": true')
    if not candidates:
        raise UsageError("no candidate rows to rank")
    d = len(query[0])
    if args.model:
        obj = _load_json(args.model, "scorer parameters")
        try:
            model = bayes.BetaBinomialModel(np.asarray(obj["beta_plus"]), np.asarray(obj["beta_minus"]))
        except (bayes.BayesSetError, KeyError, TypeError) as exc:
            raise UsageError(f"bad scorer parameters: {exc}") from exc
    else:
        model = bayes.BetaBinomialModel.uniform(d)
    k = args.k if args.k is not None else len(candidates)
    try:
        X = bayes.as_binary_matrix(query, d)
        C = bayes.as_binary_matrix(candidates, d)
        ranked = bayes.expand(model, X, C, min(k, len(candidates)))
    except bayes.BayesSetError as exc:
        raise UsageError(str(exc)) from exc
    lines = ["rank,id,score"]
    for rank, (idx, score) in enumerate(ranked, start=1):
        lines.append(f"{rank},{ids[idx]},{score!r}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    return 0


def _cmd_check(args) -> int:
    results = checks.run_all(seed=args.seed if args.seed is not None else 0)
    print(checks.summary_table(results))
    return 0 if all(r.passed for r in results) else 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="setnn", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    specs = {
        "gen": (_cmd_gen, "generate a synthetic dataset"),
        "train": (_cmd_train, "train a model on a dataset"),
        "eval": (_cmd_eval, "evaluate a saved model"),
        "expand": (_cmd_expand, "rank candidate bit-vectors against a query set"),
        "check": (_cmd_check, "run the property battery"),
    }
    for name, (fn, help_text) in specs.items():
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(fn=fn)
        if name == "gen":
            p.add_argument("--task", required=True, choices=GEN_TASKS)
            p.add_argument("--n", type=int, required=True, help="number of sets")
        else:
            p.add_argument("--task", choices=("population", "digit-sum", "outlier"))
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", help="output path")
        p.add_argument("--config", help="JSON config path")
        if name == "train":
            p.add_argument("--epochs", type=int)
            p.add_argument("--batch", type=int)
        if name in ("train", "eval"):
            p.add_argument("--timing", action="store_true",
                           help="record real wall seconds (breaks byte determinism)")
        if name in ("eval", "expand"):
            p.add_argument("--model", help="model JSON path")
        if name in ("train", "eval", "expand"):
            p.add_argument("--data", help="dataset JSONL path")
        if name == "expand":
            p.add_argument("--k", type=int, help="how many candidates to keep")
    return parser


def cli_dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    if getattr(args, "seed", None) is None:
        args.seed = 0
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
