"""Command line: ``atnaudit prepare|train|evaluate|audit``.

Exit codes: 0 success, 1 validation or config error, 2 I/O error,
3 numeric abort during training.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

from . import __version__, audit, corpus, metrics, trainer
from .model import ModelConfig, forward

CONFIG_KEYS = ("embedding_dim", "mlp_widths", "alpha", "beta", "learning_rate", "batch_size",
               "neg_ratio", "epochs", "class_weighting", "attention_hidden_dim")

CSV_COLUMNS = {
    "calibration": ["subset", "bin_lo", "bin_hi", "count", "mean_confidence", "accuracy"],
    "permutation": ["subset", "binned_by", "bin_lo", "bin_hi", "count", "mean_abs_delta",
                    "accuracy", "mean_confidence"],
    "stability": ["subset", "bin_lo", "bin_hi", "count", "mean_jaccard", "mean_confidence"],
}


class ConfigError(ValueError):
    pass


# -- config ----------------------------------------------------------------

def _parse_bool(key, value):
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"config key {key}: expected a boolean, got {value!r}")


_CONVERTERS = {
    "embedding_dim": int, "batch_size": int, "neg_ratio": int, "epochs": int,
    "attention_hidden_dim": int, "alpha": float, "beta": float, "learning_rate": float,
    "mlp_widths": lambda v: tuple(int(x) for x in v.replace(" ", "").split(",") if x),
}


def parse_config(text: str) -> dict:
    """Flat ``key=value`` config; every key in CONFIG_KEYS must be present."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep:
            raise ConfigError(f"config line {lineno}: expected key=value")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = (_parse_bool(key, value) if key == "class_weighting"
                           else _CONVERTERS[key](value))
        except ValueError as exc:
            raise ConfigError(f"config key {key}: {exc}") from None
    for key in CONFIG_KEYS:
        if key not in values:
            raise ConfigError(f"config is missing key {key!r}")
    return values


def default_config() -> dict:
    run, model = trainer.TrainRunConfig(), ModelConfig()
    return {"embedding_dim": model.embedding_dim, "mlp_widths": model.mlp_widths,
            "alpha": model.alpha, "beta": model.beta, "learning_rate": run.learning_rate,
            "batch_size": run.batch_size, "neg_ratio": run.neg_ratio, "epochs": run.epochs,
            "class_weighting": run.class_weighting, "attention_hidden_dim": model.hidden_dim}


def resolve_run_config(args) -> trainer.TrainRunConfig:
    values = default_config()
    if args.config:
        values = parse_config(Path(args.config).read_text(encoding="utf-8"))
    for key in CONFIG_KEYS:
        override = getattr(args, key, None)
        if override is not None:
            values[key] = override
    try:
        model = ModelConfig(values["embedding_dim"], values["mlp_widths"],
                            values["attention_hidden_dim"], values["alpha"], values["beta"])
        return trainer.TrainRunConfig(
            seed=args.seed, epochs=values["epochs"], batch_size=values["batch_size"],
            neg_ratio=values["neg_ratio"], learning_rate=values["learning_rate"],
            class_weighting=values["class_weighting"], model=model,
            eval_every=args.eval_every)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# -- output helpers --------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _clean(obj):
    """NaN -> None so the JSON stays standard."""
    if isinstance(obj, float):
        return None if math.isnan(obj) else obj
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(_clean(obj), f, indent=1, allow_nan=False)
        f.write("\n")
    return path


def write_csv(path, rows, columns) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in _clean(rows):
            w.writerow(["" if row[c] is None else row[c] for c in columns])
    return path


def write_manifest(path, command, config, seed, inputs, outputs, started) -> Path:
    manifest = {
        "tool": "atnaudit",
        "version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "duration_seconds": round(time.monotonic() - started, 3),
    }
    return write_json(path, manifest)


def _plot_svg(path, title, series, xlabel, ylabel):
    try:
        import matplotlib
        matplotlib.use("agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib is not installed; skipping --svg", file=sys.stderr)
        return None
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, xs, ys in series:
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)


def _series(rows, subset, ycol, **match):
    pick = [r for r in rows if r["subset"] == subset and r["count"]
            and all(r.get(k) == v for k, v in match.items())]
    return subset, [(r["bin_lo"] + r["bin_hi"]) / 2 for r in pick], [r[ycol] for r in pick]


# -- commands --------------------------------------------------------------

def cmd_prepare(args) -> int:
    started = time.monotonic()
    ratings = corpus.load_ratings(args.ratings)
    if args.max_users:
        ratings = corpus.subsample_users(ratings, args.max_users, args.seed)
    interactions = corpus.build_interactions(ratings)
    split = corpus.leave_one_out(interactions)
    split = corpus.sample_test_negatives(interactions, split, args.seed)
    outputs = corpus.write_split(split, args.out_dir)
    config = {"max_users": args.max_users, "n_negatives": corpus.N_TEST_NEGATIVES}
    write_manifest(Path(args.out_dir) / "manifest.json", ["prepare"], config, args.seed,
                   [args.ratings], outputs, started)
    print(f"prepared {split.num_users} users, {split.num_items} items -> {args.out_dir}")
    return 0


def cmd_train(args) -> int:
    started = time.monotonic()
    run_config = resolve_run_config(args)
    split = corpus.read_split(args.split_dir)
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    model = trainer.train(split, run_config, log=log)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trainer.save_checkpoint(model, out)
    rows = [dataclasses.asdict(r) for r in model.history]
    history = write_csv(out.parent / "history.csv", rows, ["epoch", "loss", "hr10", "ndcg10"])
    inputs = [Path(args.split_dir) / n for n in (corpus.TRAIN_FILE, corpus.TEST_FILE,
                                                 corpus.NEGATIVE_FILE, corpus.IDMAP_FILE)]
    if args.config:
        inputs.append(Path(args.config))
    write_manifest(out.parent / "train_manifest.json", ["train"], run_config.to_dict(),
                   run_config.seed, inputs, [out, history], started)
    print(f"trained {len(model.epoch_losses)} epoch(s); best epoch {model.best_epoch} -> {out}")
    return 0


def _load_pair(checkpoint, split_dir):
    model = trainer.load_checkpoint(checkpoint)
    split = corpus.read_split(split_dir)
    if model.params.num_items != split.num_items:
        raise ConfigError(f"checkpoint has {model.params.num_items} items but split has "
                          f"{split.num_items}")
    return model, split


def cmd_evaluate(args) -> int:
    started = time.monotonic()
    model, split = _load_pair(args.checkpoint, args.split_dir)
    report = dataclasses.asdict(metrics.evaluate(model, split))
    report["tie_baseline_hr_at_10"] = metrics.tie_baseline_hr(split)
    if args.explain:
        raw_user, raw_item = args.explain
        users = {int(r): d for d, r in enumerate(split.user_ids)}
        items = {int(r): d for d, r in enumerate(split.item_ids)}
        if raw_user not in users or raw_item not in items:
            raise ConfigError(f"unknown user {raw_user} or item {raw_item}")
        u, t = users[raw_user], items[raw_item]
        history = split.train_histories[u]
        if t in set(history.tolist()):
            history = history[history != t]
        prediction, _ = forward(model.params, history, t)
        report["explanation"] = audit.explain(prediction, history, split.item_ids, t)
    out_dir = Path(args.out_dir or Path(args.checkpoint).parent)
    out_dir.mkdir(parents=True, exist_ok=True)
    out = write_json(out_dir / "evaluation.json", report)
    write_manifest(out_dir / "evaluate_manifest.json", ["evaluate"], {}, model.run_config.seed,
                   [args.checkpoint], [out], started)
    print(json.dumps(_clean(report), indent=1))
    return 0


def calibration_rows(predictions, n_bins=10):
    rows, summary = [], {}
    for subset in audit.SUBSETS:
        diagram = audit.reliability_diagram(predictions, subset, n_bins)
        summary[subset] = {"ece": diagram.ece, "n": diagram.n}
        rows.extend({"subset": subset, "bin_lo": b.lo, "bin_hi": b.hi, "count": b.count,
                     "mean_confidence": b.mean_confidence, "accuracy": b.accuracy}
                    for b in diagram.bins)
    return rows, summary


def _emit(out_dir, kind, payload, rows, svg_series=None, ylabel=""):
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = [write_json(out_dir / f"{kind}.json", payload),
               write_csv(out_dir / f"{kind}.csv", rows, CSV_COLUMNS[kind])]
    if svg_series:
        svg = _plot_svg(out_dir / f"{kind}.svg", kind, svg_series, "confidence", ylabel)
        if svg:
            outputs.append(svg)
    return outputs


def cmd_audit(args) -> int:
    started = time.monotonic()
    out_dir = Path(args.out_dir)
    inputs = [Path(args.split_dir) / corpus.TRAIN_FILE]

    if args.kind == "calibration":
        model, split = _load_pair(args.checkpoint, args.split_dir)
        inputs.append(Path(args.checkpoint))
        rows, summary = calibration_rows(metrics.score_split(model.params, split), args.bins)
        svg = [_series(rows, s, "accuracy") for s in audit.SUBSETS] if args.svg else None
        outputs = _emit(out_dir, "calibration", {"kind": "calibration", "summary": summary,
                                                  "rows": rows}, rows, svg, "accuracy")
        config, seed = {"bins": args.bins}, model.run_config.seed

    elif args.kind == "permute":
        model, split = _load_pair(args.checkpoint, args.split_dir)
        inputs.append(Path(args.checkpoint))
        users = range(min(args.max_users or split.num_users, split.num_users))
        report = audit.permutation_experiment(
            model.params, split, n_shuffles=args.shuffles, seed=args.seed, users=users,
            include_negatives=not args.positives_only, n_bins=args.bins)
        payload = {"kind": "permutation", "n_shuffles": report.n_shuffles, "seed": report.seed,
                   "rows": report.per_bin, "cases": [dataclasses.asdict(c) for c in report.cases]}
        svg = None
        if args.svg:
            svg = [_series(report.per_bin, s, "mean_abs_delta", binned_by="confidence")
                   for s in ("all", "false_negatives", "false_positives")]
        outputs = _emit(out_dir, "permutation", payload, report.per_bin, svg, "mean |delta|")
        config = {"shuffles": args.shuffles, "bins": args.bins, "max_users": args.max_users,
                  "positives_only": args.positives_only}
        seed = args.seed

    else:
        split = corpus.read_split(args.split_dir)
        if args.checkpoints:
            models = [trainer.load_checkpoint(c) for c in args.checkpoints]
            seeds = [m.run_config.seed for m in models]
            inputs.extend(Path(c) for c in args.checkpoints)
            config = {"checkpoints": [str(c) for c in args.checkpoints]}
        else:
            run_config = resolve_run_config(args)
            seeds = args.seed_list or [args.seed + i for i in range(args.seeds)]
            log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
            models = [trainer.train(split, dataclasses.replace(run_config, seed=s), log=log)
                      for s in seeds]
            config = run_config.to_dict()
            if args.config:
                inputs.append(Path(args.config))
        users = range(min(args.max_users or split.num_users, split.num_users))
        report = audit.stability_experiment(split, models=models, seeds=seeds,
                                            fraction=args.top_fraction, users=users,
                                            n_bins=args.bins)
        payload = {"kind": "stability", "seeds": report.seeds, "top_fraction": report.top_fraction,
                   "rows": report.per_bin, "cases": [dataclasses.asdict(c) for c in report.cases]}
        svg = [_series(report.per_bin, "positive_predictions", "mean_jaccard")] if args.svg else None
        outputs = _emit(out_dir, "stability", payload, report.per_bin, svg, "mean Jaccard")
        config = {**config, "seeds": seeds, "top_fraction": args.top_fraction}
        seed = seeds[0]

    write_manifest(out_dir / f"{args.kind}_manifest.json", ["audit", args.kind], config, seed,
                   inputs, outputs, started)
    print(f"wrote {', '.join(p.name for p in outputs)} -> {out_dir}")
    return 0


# -- parser ----------------------------------------------------------------

def _add_training_flags(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--neg-ratio", dest="neg_ratio", type=int)
    p.add_argument("--embedding-dim", dest="embedding_dim", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--class-weighting", dest="class_weighting", action="store_const", const=True)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are validation errors (exit 1); 2 is reserved for I/O
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="atnaudit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int,
                        default=int(os.environ.get("ATNAUDIT_THREADS", "1")),
                        help="worker count (outputs never depend on it)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ratings.dat -> leave-one-out split files")
    p.add_argument("ratings")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-users", type=int, help="subsample this many users first")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on a prepared split")
    p.add_argument("split_dir")
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="HR@10 / NDCG@10 / per-class accuracy")
    p.add_argument("checkpoint")
    p.add_argument("split_dir")
    p.add_argument("--out-dir")
    p.add_argument("--explain", nargs=2, type=int, metavar=("USER", "ITEM"),
                   help="raw dataset ids; adds an explanation sentence")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("audit", help="calibration, attention permutation or stability audit")
    p.add_argument("kind", choices=["calibration", "permute", "stability"])
    p.add_argument("--split", dest="split_dir", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--checkpoints", nargs="+", help="stability: pre-trained runs")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--shuffles", type=int, default=100)
    p.add_argument("--positives-only", action="store_true")
    p.add_argument("--max-users", type=int)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--seed-list", type=lambda s: [int(x) for x in s.split(",")])
    p.add_argument("--top-fraction", type=float, default=0.1)
    p.add_argument("--svg", action="store_true")
    _add_training_flags(p)
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "audit" and args.kind in ("calibration", "permute") and not args.checkpoint:
        parser.error(f"audit {args.kind} needs --checkpoint")
    try:
        return args.func(args)
    except trainer.TrainingError as exc:
        print(f"error: numeric abort: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, corpus.CorpusError, trainer.CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
