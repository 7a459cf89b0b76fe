"""Command-line entry point: train, eval, predict, bench, sweep, convert.

Exit codes: 0 ok, 2 configuration error, 3 I/O or corpus error,
4 label-schema mismatch between checkpoint and corpus, 5 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import statistics
import sys
from dataclasses import asdict
from pathlib import Path

from . import checkpoint as ckpt
from .bench import WARMUP, bench_latency, compare_latency, overhead_ratio
from .config import help_text, load_config, parse_overrides, replace
from .data import convert_conll, load_corpus
from .errors import ConfigError, ContractError, LabelError, NumericalError, ParseError
from .metrics import evaluate, write_predictions
from .train import predict_sessions, run_eval, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_SCHEMA, EXIT_NUMERIC = 0, 2, 3, 4, 5
OUTPUT_ENV = "SHALRT_OUTPUT_DIR"

VARIANTS = {
    "sha": {"sha_variant": "sequential"},
    "sha_p": {"sha_variant": "parallel"},
    "basic": {"sha_ablation": "off"},
    "cat_all": {"sha_ablation": "off", "cat_all": "true"},
}
SWEEP_KINDS = ("lrm_position", "lrm_count", "alpha", "lambda")
COMPARISONS = {
    "sha": {"sha_variant": "sequential"},
    "sha_p": {"sha_variant": "parallel"},
    "lrm_on": {},
    "lrm_off": {"lrm_enabled": False},
    "slg_on": {},
    "slg_off": {},
}

log = logging.getLogger("shalrt")


class SchemaMismatch(Exception):
    pass


class CorpusError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def build_id() -> str:
    """Content hash of the package sources."""
    h = hashlib.sha1()
    root = Path(__file__).parent
    for path in sorted(root.rglob("*.py")):
        h.update(path.relative_to(root).as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def write_json_atomic(path: Path, payload) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def read_corpus(path, fmt, vocab=None, labels=None):
    if not path:
        raise ConfigError("no corpus path given")
    try:
        return load_corpus(path, fmt, vocab, labels)
    except LabelError as exc:
        if labels is not None:
            raise SchemaMismatch(str(exc)) from None
        raise CorpusError(str(exc)) from None
    except (ParseError, ContractError) as exc:
        raise CorpusError(str(exc)) from None
    except OSError as exc:
        raise CorpusError(f"{path}: {exc.strerror}") from None


def resolve_config(args):
    overrides = parse_overrides(args.set)
    for key in ("train", "dev", "test"):
        value = getattr(args, key, None)
        if value:
            overrides[f"{key}_path"] = value
    if getattr(args, "variant", None):
        if args.ablation and args.variant in ("basic", "cat_all"):
            raise ConfigError(f"--ablation cannot be combined with --variant {args.variant}")
        overrides.update(VARIANTS[args.variant])
    if getattr(args, "ablation", None):
        overrides["sha_ablation"] = args.ablation
    if getattr(args, "no_slg", False):
        overrides["slg_enabled"] = "false"
    if getattr(args, "no_lrm", False):
        overrides["lrm_enabled"] = "false"
    for key in ("seed", "epochs"):
        if getattr(args, key, None) is not None:
            overrides[key] = str(getattr(args, key))
    return load_config(args.config, overrides)


def output_dir(args, cfg) -> Path:
    return Path(getattr(args, "output_dir", None) or cfg.output_dir or os.environ.get(OUTPUT_ENV) or "runs")


def train_once(cfg, out: Path) -> dict:
    """One seeded run: checkpoint, reports, predictions and an atomically written manifest."""
    train_sessions, vocab, labels = read_corpus(cfg.train_path, cfg.format)
    dev = read_corpus(cfg.dev_path, cfg.format, vocab, labels)[0] if cfg.dev_path else None
    test = read_corpus(cfg.test_path, cfg.format, vocab, labels)[0] if cfg.test_path else None
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")

    def progress(entry):
        log.info("epoch %(epoch)d  loss %(loss).4f", entry)

    result = train(cfg, train_sessions, vocab, labels, dev, on_epoch=progress)
    result.best.config = replace(result.best.config, output_dir="")
    ck_path = ckpt.save(result.best, out / "model.ckpt")
    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "build_id": build_id(),
        "log": result.log,
        "best_epoch": result.best_epoch,
        "checkpoint": str(ck_path),
        "reports": {},
    }
    for split, sessions in (("dev", dev), ("test", test)):
        if sessions:
            results = run_eval(result.model, sessions, labels)
            report = evaluate(results)
            path = out / f"report_{split}.json"
            path.write_text(report.to_json() + "\n", encoding="utf-8")
            write_predictions(results, out / f"predictions_{split}.jsonl")
            manifest["reports"][split] = str(path)
            manifest[f"{split}_metrics"] = {"intent_accuracy": report.intent_accuracy, "slot_f1": report.slot_f1,
                                            "overall_accuracy": report.overall_accuracy}
    write_json_atomic(out / "manifest.json", manifest)
    return manifest


def _final_metrics(manifest: dict) -> dict:
    return manifest.get("test_metrics") or manifest.get("dev_metrics") or {}


# ------------------------------------------------------------------ commands

def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = output_dir(args, cfg)
    if args.repeats < 1:
        raise ConfigError("--repeats must be at least 1")
    if args.repeats == 1:
        manifest = train_once(cfg, out)
        print(json.dumps({"checkpoint": manifest["checkpoint"], **_final_metrics(manifest)}, sort_keys=True))
        return EXIT_OK
    runs = []
    for r in range(args.repeats):
        seed = cfg.seed + r
        runs.append(train_once(replace(cfg, seed=seed), out / f"seed_{seed}"))
    summary = {"seeds": [m["seed"] for m in runs], "runs": [m["checkpoint"] for m in runs]}
    for key in ("intent_accuracy", "slot_f1", "overall_accuracy"):
        values = [_final_metrics(m)[key] for m in runs if _final_metrics(m)]
        if values:
            summary[key] = {"mean": statistics.fmean(values), "std": statistics.pstdev(values)}
    write_json_atomic(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = ckpt.load(args.checkpoint)
    model = ckpt.build_model(ck)
    sessions = read_corpus(args.data, ck.config.format, ck.vocab, ck.labels)[0]
    results = run_eval(model, sessions, ck.labels)
    report = evaluate(results)
    out = Path(args.output_dir) if args.output_dir else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / f"report_{args.split}.json").write_text(report.to_json() + "\n", encoding="utf-8")
    write_predictions(results, out / f"predictions_{args.split}.jsonl")
    print(report.to_json())
    return EXIT_OK


def cmd_predict(args) -> int:
    ck = ckpt.load(args.checkpoint)
    model = ckpt.build_model(ck)
    sessions = read_corpus(args.data, ck.config.format, ck.vocab, ck.labels)[0]
    lines = []
    for s, t, intent, slots in predict_sessions(model, sessions):
        lines.append(json.dumps({"id": s.id, "turn": t, "tokens": s.turns[t].words,
                                 "pred_intent": ck.labels.intent_labels[intent],
                                 "pred_slots": ck.labels.slot_names(slots)}))
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _bench_model(ck, name: str, dtype: str | None):
    overrides = dict(COMPARISONS[name])
    if dtype:
        overrides["dtype"] = dtype
    model = ckpt.build_model(ck, **overrides)
    if name == "slg_off":
        model.drop_decoder()
    return model


def cmd_bench(args) -> int:
    ck = ckpt.load(args.checkpoint)
    sessions = read_corpus(args.data, ck.config.format, ck.vocab, ck.labels)[0]
    if args.compare:
        names = [n.strip() for n in args.compare.split(",")]
        if len(names) != 2 or any(n not in COMPARISONS for n in names):
            raise ConfigError(f"--compare takes two of {sorted(COMPARISONS)}, got {args.compare!r}")
        models = [_bench_model(ck, n, args.dtype) for n in names]
        stats = compare_latency(models, sessions, args.reps, args.warmup)
        payload = {names[0]: asdict(stats[0]), names[1]: asdict(stats[1]),
                   "ratio": stats[0].mean_ms / stats[1].mean_ms,
                   "overhead": overhead_ratio(stats[1], stats[0])}
    else:
        model = ckpt.build_model(ck, **({"dtype": args.dtype} if args.dtype else {}))
        payload = asdict(bench_latency(model, sessions, args.reps, args.warmup))
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.output:
        Path(args.output).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def lrm_count_positions(count: int, n_layers: int) -> tuple[int, ...]:
    """Intervals used when refining ``count`` times: the default one first, then deeper ones, then the first."""
    order = list(range(2, n_layers)) + [1]
    return tuple(sorted(order[:count]))


def sweep_grid(kind: str, cfg, values: str | None = None) -> list:
    m = cfg.encoder_layers
    if values:
        try:
            grid = [float(v) if kind in ("alpha", "lambda") else int(v) for v in values.split(",")]
        except ValueError:
            raise ConfigError(f"cannot read sweep values {values!r}") from None
    elif kind == "alpha":
        grid = [round(0.05 * i, 2) for i in range(11)]
    elif kind == "lambda":
        grid = [0.0, 0.25, 0.5, 0.75, 1.0]
    else:
        grid = list(range(1, m))
    for v in grid:
        ok = {"alpha": 0 <= v <= 0.5, "lambda": 0 <= v <= 1}.get(kind, 1 <= v <= m - 1)
        if not ok:
            raise ConfigError(f"sweep value {v} is outside the valid {kind} range")
    return grid


def sweep_overrides(kind: str, value, cfg) -> dict:
    if kind == "alpha":
        return {"slg_alpha": value}
    if kind == "lambda":
        return {"slg_lambda": value}
    if kind == "lrm_position":
        return {"lrm_enabled": True, "lrm_positions": (value,)}
    return {"lrm_enabled": True, "lrm_positions": lrm_count_positions(value, cfg.encoder_layers)}


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    if args.kind not in SWEEP_KINDS:
        raise ConfigError(f"unknown sweep kind {args.kind!r}")
    grid = sweep_grid(args.kind, cfg, args.values)
    out = output_dir(args, cfg)
    rows = []
    for value in grid:
        run_cfg = replace(cfg, **sweep_overrides(args.kind, value, cfg)).validate()
        manifest = train_once(run_cfg, out / f"{args.kind}_{value}")
        metrics = _final_metrics(manifest)
        rows.append({"kind": args.kind, "value": value, **{k: metrics.get(k, "") for k in
                                                           ("intent_accuracy", "slot_f1", "overall_accuracy")}})
    path = Path(args.output) if args.output else out / f"sweep_{args.kind}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["kind", "value", "intent_accuracy", "slot_f1", "overall_accuracy"])
        writer.writeheader()
        writer.writerows(rows)
    print(path)
    return EXIT_OK


def cmd_convert(args) -> int:
    try:
        n = convert_conll(args.src, args.dst)
    except ParseError as exc:
        raise CorpusError(str(exc)) from None
    print(f"wrote {n} utterances to {args.dst}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="sectioned key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--train", help="training corpus (overrides train_path)")
    p.add_argument("--dev", help="validation corpus (overrides dev_path)")
    p.add_argument("--test", help="test corpus (overrides test_path)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--output-dir", help=f"run directory (default: output_dir key, ${OUTPUT_ENV}, ./runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shalrt", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--help-config", action="store_true", help="list every config key and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", help="train a model")
    _config_args(p)
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--ablation", choices=["full", "utterance_only", "result_only", "result_attention_only", "off"])
    p.add_argument("--no-slg", action="store_true", help="train without the label generation decoder")
    p.add_argument("--no-lrm", action="store_true", help="disable the layer-refined mechanism")
    p.add_argument("--repeats", type=int, default=1, help="train this many consecutive seeds")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write predicted labels as JSON lines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bench", help="single-stream latency")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--warmup", type=int, default=WARMUP)
    p.add_argument("--compare", help=f"two of {','.join(COMPARISONS)}, e.g. sha,sha_p")
    p.add_argument("--dtype", choices=["float64", "float32"])
    p.add_argument("--output")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="one training run per grid value, results as CSV")
    p.add_argument("--kind", required=True, choices=SWEEP_KINDS)
    p.add_argument("--values", help="comma list replacing the default grid")
    _config_args(p)
    p.add_argument("--output", help="CSV path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("convert", help="tab-separated conll blocks to JSON lines")
    p.add_argument("src")
    p.add_argument("dst")
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.help_config:
        print(help_text())
        return EXIT_OK
    if not args.command:
        parser.print_help()
        return EXIT_CONFIG
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc} (step {exc.step})", file=sys.stderr)
        return EXIT_NUMERIC
    except SchemaMismatch as exc:
        print(f"error: label schema mismatch: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
