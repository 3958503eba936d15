"""Command-line harness: dataset generation, training, evaluation, sweeps.

Subcommands
-----------
generate    write train/test jsonl splits plus a manifest from a spec file
train       run one preset/config per seed, writing metrics + checkpoints
eval        score a saved checkpoint on a dataset file
sweep       run a grid of config overrides, one summary row per cell
dump-reprs  export pooled original/counterfactual vectors as CSV

Exit codes: 0 success, 2 config error, 3 data error, 4 diverged run.
The environment variable CAT_LAB_SEED, when set, overrides the seed list.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields, is_dataclass, replace
from pathlib import Path

import numpy as np

from cat_lab import datagen
from cat_lab.adversarial import AdversarialConfig
from cat_lab.datagen import (
    CLASSIFICATION,
    SPAN,
    Dataset,
    DatasetFormatError,
    SCMSpec,
    generate_case_study,
    generate_classification,
    generate_span_task,
    load_jsonl,
    save_jsonl,
)
from cat_lab.encoder import EncoderModel, ModelConfig
from cat_lab.mixing import BetaParams, build_mix_plan, interpolate
from cat_lab.risk import RiskConfig
from cat_lab.trainer import (
    DivergenceError,
    TrainConfig,
    evaluate,
    train,
    write_metrics_csv,
    write_summary_json,
    summarize_run,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

CASE_STUDY = "case_study"
TASK_KINDS = (CLASSIFICATION, CASE_STUDY, SPAN)

PRESETS = ("erm", "cat-star", "cat")


class ConfigError(ValueError):
    """Bad config file, flag value, or referenced path."""


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------


def _build_dataclass(instance, overrides: dict, where: str):
    """Apply a (possibly nested) override dict onto a dataclass instance."""
    if not isinstance(overrides, dict):
        raise ConfigError(f"{where}: expected an object, got {overrides!r}")
    updates = {}
    valid = {f.name: f for f in fields(instance)}
    for key, value in overrides.items():
        if key not in valid:
            raise ConfigError(f"{where}: unknown field {key!r}")
        current = getattr(instance, key)
        if is_dataclass(current) and isinstance(value, dict):
            updates[key] = _build_dataclass(current, value, f"{where}.{key}")
        elif isinstance(current, tuple) and isinstance(value, list):
            updates[key] = tuple(value)
        else:
            updates[key] = value
    try:
        return replace(instance, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def preset_train_config(preset: str, task_kind: str) -> TrainConfig:
    """Calibrated defaults per task family; presets differ only in algorithm."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (choose from {PRESETS})")
    if task_kind == SPAN:
        base = TrainConfig(
            algorithm=preset,
            warmup_steps=668, max_steps=1336, batch_size=12,
            base_lr=2e-3, crm_lr=2e-3,
            beta=BetaParams(5.0, 5.0),
            adversarial=AdversarialConfig(steps=1, step_size=5e-2),
            risk=RiskConfig(lower=0.7, upper=10.0),
        )
    elif task_kind == CASE_STUDY:
        base = TrainConfig(
            algorithm=preset,
            warmup_epochs=2.0, epochs=30.0, batch_size=8,
            beta=BetaParams(0.3, 0.3),
            adversarial=AdversarialConfig(steps=3, step_size=2e-2),
            risk=RiskConfig(lower=0.0, upper=10.0),
        )
    else:
        base = TrainConfig(
            algorithm=preset,
            warmup_steps=200, max_steps=400, batch_size=8,
            beta=BetaParams(0.3, 0.3),
            adversarial=AdversarialConfig(steps=3, step_size=2e-2),
            risk=RiskConfig(lower=0.0, upper=10.0),
        )
    return base


def preset_model_config(task_kind: str) -> ModelConfig:
    if task_kind == SPAN:
        return ModelConfig(use_span_head=True, max_seq_len=24)
    return ModelConfig()


def _load_json(path: Path, what: str) -> dict:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}:{exc.lineno}:{exc.colno}: invalid JSON in {what}: {exc.msg}"
        ) from exc


def _apply_dotted(config_dict: dict, dotted: str, raw_value: str) -> None:
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value  # bare strings are convenient on the command line
    node = config_dict
    *parents, leaf = dotted.split(".")
    for part in parents:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {dotted}: {part} is not an object")
    node[leaf] = value


def _parse_seeds(value, base_seed: int) -> list[int]:
    if isinstance(value, int):
        return [base_seed + i for i in range(value)]
    if isinstance(value, list):
        return [int(v) for v in value]
    text = str(value)
    if "," in text:
        return [int(p) for p in text.split(",") if p.strip()]
    return [base_seed + i for i in range(int(text))]


def resolve_run_config(args) -> dict:
    """Merge config file, preset, flags, and --set overrides into one dict."""
    config = _load_json(Path(args.config), "run config") if args.config else {}
    for flag in ("task", "data", "preset", "out"):
        value = getattr(args, flag.replace("-", "_"), None)
        if value is not None:
            config[flag] = value
    if args.seeds is not None:
        config["seeds"] = args.seeds
    for assignment in args.set or []:
        if "=" not in assignment:
            raise ConfigError(f"--set needs key=value, got {assignment!r}")
        dotted, raw = assignment.split("=", 1)
        _apply_dotted(config, dotted, raw)
    return config


def _infer_task_kind(config: dict, data_dir: Path | None) -> str:
    kind = config.get("task")
    if kind is None and data_dir is not None:
        manifest = data_dir / "manifest.json"
        if manifest.exists():
            kind = _load_json(manifest, "manifest").get("task")
    if kind is None:
        kind = CLASSIFICATION
    if kind not in TASK_KINDS:
        raise ConfigError(f"unknown task kind {kind!r}")
    return kind


def _load_data_dir(data_dir: Path) -> tuple[Dataset, dict[str, Dataset]]:
    train_path = data_dir / "train.jsonl"
    if not train_path.exists():
        raise ConfigError(f"no train.jsonl under {data_dir}")
    train_set = load_jsonl(train_path)
    eval_sets = {}
    for path in sorted(data_dir.glob("test*.jsonl")):
        name = path.stem.removeprefix("test").lstrip("_") or "test"
        eval_sets[name] = load_jsonl(path)
    return train_set, eval_sets


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    spec_dict = _load_json(Path(args.spec), "generation spec")
    task = spec_dict.get("task", CLASSIFICATION)
    if task not in TASK_KINDS:
        raise ConfigError(f"generation spec: unknown task {task!r}")
    scm = _build_dataclass(SCMSpec(), spec_dict.get("scm", {}), "scm")
    if "seed" in spec_dict:
        scm = replace(scm, seed=int(spec_dict["seed"]))
    n_train = int(spec_dict.get("n_train", 5000))
    n_test = int(spec_dict.get("n_test", 2000))

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output dir {out}: {exc}") from exc

    extras: dict = {}
    if task == CLASSIFICATION:
        splits = dict(zip(("train", "test_iid", "test_ood"),
                          generate_classification(scm, n_train, n_test)))
    elif task == SPAN:
        splits = dict(zip(("train", "test_iid", "test_ood"),
                          generate_span_task(scm, n_train, n_test)))
    else:
        case = spec_dict.get("case_study", {})
        extras["case_study"] = {
            "train_proportions": case.get("train_proportions", [0.10, 0.80, 0.10]),
            "test_proportions": case.get("test_proportions", [0.40, 0.20, 0.40]),
            "phrase_token": case.get("phrase_token"),
        }
        train_split, test_split = generate_case_study(
            n_train=n_train, n_test=n_test,
            phrase_token=extras["case_study"]["phrase_token"],
            train_proportions=tuple(extras["case_study"]["train_proportions"]),
            test_proportions=tuple(extras["case_study"]["test_proportions"]),
            spec=scm, seed=scm.seed,
        )
        splits = {"train": train_split, "test": test_split}

    files = {}
    counts = {}
    for name, split in splits.items():
        path = out / f"{name}.jsonl"
        save_jsonl(split, path)
        files[name] = path.name
        counts[name] = len(split)
    manifest = {
        "task": task,
        "scm": asdict(scm),
        "n_train": n_train,
        "n_test": n_test,
        "files": files,
        "counts": counts,
        **extras,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"wrote {len(files)} splits + manifest to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def run_training(config: dict) -> dict:
    """One multi-seed training run from a resolved config dict."""
    data = config.get("data")
    if data is None:
        raise ConfigError("train: missing 'data' (dataset directory)")
    data_dir = Path(data)
    if not data_dir.is_dir():
        raise ConfigError(f"train: dataset directory {data_dir} does not exist")
    task_kind = _infer_task_kind(config, data_dir)
    task = SPAN if task_kind == SPAN else CLASSIFICATION

    preset = config.get("preset", "cat")
    base_train = preset_train_config(preset, task_kind)
    base_train = _build_dataclass(base_train, config.get("train", {}), "train")
    model_config = _build_dataclass(
        preset_model_config(task_kind), config.get("model", {}), "model"
    )

    env_seed = os.environ.get("CAT_LAB_SEED")
    if env_seed is not None:
        try:
            seeds = [int(env_seed)]
        except ValueError as exc:
            raise ConfigError(f"CAT_LAB_SEED must be an integer: {env_seed!r}") from exc
    else:
        seeds = _parse_seeds(config.get("seeds", [base_train.seed]), base_train.seed)
    if not seeds:
        raise ConfigError("train: empty seed list")

    out = Path(config.get("out", "runs/latest"))
    out.mkdir(parents=True, exist_ok=True)
    train_set, eval_sets = _load_data_dir(data_dir)

    per_seed = {}
    for seed in seeds:
        run_config = replace(base_train, seed=seed)
        run_dir = out / f"seed_{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        started = time.perf_counter()
        try:
            model, history = train(model_config, run_config, train_set,
                                   eval_sets, task=task)
        except DivergenceError as exc:
            write_metrics_csv(exc.history, run_dir / "metrics.csv")
            if exc.last_good is not None:
                rescue = EncoderModel(model_config, rng=None)
                rescue.load_snapshot(exc.last_good)
                rescue.save(run_dir / "model.npz")
            raise
        wall = time.perf_counter() - started
        final_eval = {name: evaluate(model, ds, task)
                      for name, ds in eval_sets.items()}
        model.save(run_dir / "model.npz")
        write_metrics_csv(history, run_dir / "metrics.csv")
        write_summary_json(
            summarize_run(model_config, run_config, history, final_eval, wall),
            run_dir / "summary.json",
        )
        per_seed[seed] = final_eval
        print(f"seed {seed}: " + "  ".join(
            f"{split} " + " ".join(f"{k}={v:.4f}" for k, v in report.items()
                                   if isinstance(v, float))
            for split, report in final_eval.items()
        ))

    aggregate = _aggregate(per_seed)
    summary = {
        "preset": preset,
        "task": task_kind,
        "data": str(data_dir),
        "model_config": asdict(model_config),
        "train_config": asdict(base_train),
        "seeds": seeds,
        "per_seed": {str(s): r for s, r in per_seed.items()},
        "aggregate": aggregate,
    }
    write_summary_json(summary, out / "summary.json")
    return summary


def _aggregate(per_seed: dict) -> dict:
    out: dict = {}
    if not per_seed:
        return out
    any_result = next(iter(per_seed.values()))
    for split, report in any_result.items():
        out[split] = {}
        for metric, value in report.items():
            if not isinstance(value, float):
                continue
            values = [per_seed[s][split][metric] for s in per_seed]
            out[split][metric] = {
                "mean": float(np.mean(values)),
                "sd": float(np.std(values)),
            }
    return out


def cmd_train(args) -> int:
    config = resolve_run_config(args)
    summary = run_training(config)
    for split, metrics in summary["aggregate"].items():
        line = "  ".join(
            f"{m}={v['mean']:.4f}±{v['sd']:.4f}" for m, v in metrics.items()
        )
        print(f"aggregate {split}: {line}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise ConfigError(f"checkpoint {checkpoint} does not exist")
    model = EncoderModel.load(checkpoint)
    dataset = load_jsonl(Path(args.data))
    task = args.task or dataset.task
    report = evaluate(model, dataset, task)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# dump-reprs
# ---------------------------------------------------------------------------


def cmd_dump_reprs(args) -> int:
    model = EncoderModel.load(Path(args.checkpoint))
    dataset = load_jsonl(Path(args.data))
    n_layers = model.config.n_layers
    layer = args.layer
    if not 1 <= layer <= n_layers:
        raise ConfigError(f"layer {layer} outside valid range [1, {n_layers}]")
    limit = min(args.limit, len(dataset)) if args.limit else len(dataset)
    subset = dataset.subset(np.arange(limit))
    rng = np.random.default_rng(args.seed)

    h0, mask = model.embed(subset.tokens)
    h_m = model.forward_layers(h0, 0, layer, mask)
    plan = build_mix_plan(limit, [layer], BetaParams(args.alpha, args.beta), rng)
    lam = np.full(limit, args.lam) if args.lam is not None else plan.lam
    mixed = interpolate(h_m, h_m.detach().data[plan.partner], lam)

    def pooled(states):
        final = model.forward_layers(states, layer, n_layers, mask)
        return model.pooled(final).data

    originals = pooled(h_m)
    counterfactuals = pooled(mixed)

    def label_text(i):
        if subset.task == SPAN:
            return f"{subset.spans[i, 0]}-{subset.spans[i, 1]}"
        return str(int(subset.labels[i]))

    out = Path(args.out)
    with open(out, "w", encoding="utf-8") as fh:
        dim = originals.shape[1]
        header = ["id", "flag", "label"] + [f"v{j}" for j in range(dim)]
        fh.write(",".join(header) + "\n")
        for flag, block in (("original", originals),
                            ("counterfactual", counterfactuals)):
            for i in range(limit):
                row = [str(i), flag, label_text(i)]
                row += [repr(float(x)) for x in block[i]]
                fh.write(",".join(row) + "\n")
    print(f"wrote {2 * limit} rows to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _run_sweep_cell(payload: tuple) -> dict:
    cell_id, config = payload
    try:
        summary = run_training(config)
        flat = {}
        for split, metrics in summary["aggregate"].items():
            for metric, value in metrics.items():
                flat[f"{split}_{metric}_mean"] = value["mean"]
                flat[f"{split}_{metric}_sd"] = value["sd"]
        return {"cell": cell_id, "status": "ok", "metrics": flat,
                "overrides": config.get("_overrides", {})}
    except Exception as exc:  # cell failures are recorded, the sweep continues
        return {"cell": cell_id, "status": f"error: {exc}",
                "metrics": {}, "overrides": config.get("_overrides", {})}


def cmd_sweep(args) -> int:
    grid_spec = _load_json(Path(args.grid), "sweep grid")
    base = grid_spec.get("base")
    if not isinstance(base, dict):
        raise ConfigError("sweep grid needs a 'base' run config object")
    grid = grid_spec.get("grid", {})
    if not isinstance(grid, dict) or not grid:
        raise ConfigError("sweep grid needs a nonempty 'grid' object")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    keys = sorted(grid)
    cells = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        overrides = dict(zip(keys, combo))
        config = json.loads(json.dumps(base))  # deep copy
        for dotted, value in overrides.items():
            _apply_dotted(config, dotted, json.dumps(value))
        cell_id = len(cells)
        config["out"] = str(out / f"cell_{cell_id}")
        config["_overrides"] = overrides
        cells.append((cell_id, config))

    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_run_sweep_cell, cells))
    else:
        results = [_run_sweep_cell(c) for c in cells]

    metric_cols = sorted({k for r in results for k in r["metrics"]})
    with open(out / "sweep.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(["cell", "overrides", "status"] + metric_cols) + "\n")
        for r in results:
            row = [str(r["cell"]), json.dumps(r["overrides"]).replace(",", ";"),
                   r["status"].replace(",", ";")]
            row += [repr(r["metrics"][c]) if c in r["metrics"] else ""
                    for c in metric_cols]
            fh.write(",".join(row) + "\n")
    failed = sum(1 for r in results if r["status"] != "ok")
    print(f"sweep finished: {len(results) - failed}/{len(results)} cells ok")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cat-lab",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate dataset splits from a spec file")
    p.add_argument("--spec", required=True, help="generation spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train one or more seeds")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--data", help="dataset directory (train.jsonl + test*.jsonl)")
    p.add_argument("--preset", choices=PRESETS, help="training preset")
    p.add_argument("--task", choices=TASK_KINDS, help="task kind override")
    p.add_argument("--seeds", help="count, or comma-separated seed list")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted config override, e.g. train.max_steps=100")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset jsonl file")
    p.add_argument("--task", choices=(CLASSIFICATION, SPAN))
    p.add_argument("--out", help="optional JSON output path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="run a hyperparameter grid")
    p.add_argument("--grid", required=True, help="sweep grid JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("dump-reprs",
                       help="export pooled original/counterfactual vectors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset jsonl file")
    p.add_argument("--layer", type=int, required=True, help="blend layer")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--limit", type=int, default=256)
    p.add_argument("--lam", type=float, default=None,
                   help="fixed coefficient (default: sample from the prior)")
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--beta", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_dump_reprs)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc} (partial artifacts kept)", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
