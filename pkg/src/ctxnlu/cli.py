"""Command-line entry point: datagen, train, eval, predict, compare, ablate.

Exit codes: 0 success, 2 usage error (bad flags, unknown model, missing
files, catalog mismatch), 1 runtime failure. Errors are written to stderr as
one JSON line: {"error": "<kind>", "message": "..."}.

A config file (--config) holds ``key = value`` lines; flags given on the
command line take precedence. Recognized keys:

    seed, model, models, data, out, lambda, lr, batch_size, epochs,
    patience, dropout, weight_decay, seeds, feature_mask, split,
    train, validation, test, context_fraction, distinct_fraction, noise
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from statistics import mean

from . import checkpoint, datagen
from .featurizer import FEATURE_GROUPS, SCALAR_FEATURES, CATEGORICAL_FEATURES, feature_mask
from .metrics import TABLE_COLUMNS, CatalogMismatch, comparison_csv, format_table
from .models import MODEL_KINDS, NOT_IMPLEMENTED_KINDS, IntentCatalog, ModelConfig
from .training import LAMBDA_GRID, TrainingConfig, train

log = logging.getLogger("ctxnlu")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


CONFIG_TYPES = {
    "seed": int,
    "model": str,
    "models": str,
    "data": str,
    "out": str,
    "lambda": float,
    "lr": float,
    "batch_size": int,
    "epochs": int,
    "patience": int,
    "dropout": float,
    "weight_decay": float,
    "seeds": str,
    "feature_mask": str,
    "split": str,
    "train": int,
    "validation": int,
    "test": int,
    "context_fraction": float,
    "distinct_fraction": float,
    "noise": float,
}

DEFAULTS = {
    "seed": 0,
    "lambda": 1.0,
    "lr": 1e-4,
    "batch_size": 32,
    "epochs": 30,
    "patience": 5,
    "dropout": 0.5,
    "weight_decay": 0.01,
    "split": "test",
}


def read_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    cp = configparser.ConfigParser()
    cp.read_string("[config]\n" + text)
    out = {}
    for key, raw in cp["config"].items():
        key = key.replace("-", "_")
        if key not in CONFIG_TYPES:
            raise UsageError(f"config: unknown key {key!r}")
        try:
            out[key] = CONFIG_TYPES[key](raw)
        except ValueError:
            raise UsageError(f"config: bad value for {key}: {raw!r}") from None
    return out


def settings(args) -> dict:
    """Merge defaults < config file < command-line flags."""
    merged = dict(DEFAULTS)
    if args.config:
        merged.update(read_config(args.config))
    for key in CONFIG_TYPES:
        v = getattr(args, key, None)
        if v is not None:
            merged[key] = v
    return merged


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _check_kind(kind):
    if kind not in MODEL_KINDS:
        raise UsageError(f"unknown model {kind!r}; choose from {', '.join(MODEL_KINDS)}")


def training_config(cfg, seed=None, lam=None) -> TrainingConfig:
    try:
        return TrainingConfig(
            lr=cfg["lr"],
            batch_size=cfg["batch_size"],
            dropout=cfg["dropout"],
            lam=cfg["lambda"] if lam is None else lam,
            max_epochs=cfg["epochs"],
            patience=cfg["patience"],
            seed=cfg["seed"] if seed is None else seed,
            weight_decay=cfg["weight_decay"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def load_data(path):
    if not path or not Path(path).is_dir():
        raise UsageError(f"data directory not found: {path}")
    try:
        data, manifest, catalog = datagen.load_dataset(path)
    except FileNotFoundError as exc:
        raise UsageError(f"missing dataset file: {exc.filename}") from None
    return data, IntentCatalog.from_dict(catalog)


def _out_dir(cfg) -> Path:
    _require(cfg, "out")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seeds(cfg) -> list[int]:
    if cfg.get("seeds"):
        try:
            return [int(s) for s in str(cfg["seeds"]).split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"bad --seeds {cfg['seeds']!r}") from None
    return [cfg["seed"]]


def _names(text) -> list[str]:
    names = [n.strip() for n in str(text).split(",") if n.strip()]
    known = set(FEATURE_GROUPS) | set(SCALAR_FEATURES) | set(CATEGORICAL_FEATURES)
    bad = [n for n in names if n not in known]
    if bad:
        raise UsageError(f"unknown feature or group {bad[0]!r}; groups: {', '.join(FEATURE_GROUPS)}")
    return names


def emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------- commands


def cmd_datagen(args, cfg):
    if args.verify:
        report = datagen.verify(args.verify)
        emit({"ok": report.ok, "stats": report.stats, "violations": report.violations[:50]})
        return 0 if report.ok else 1
    out = _out_dir(cfg)
    manifest = datagen.DatasetManifest(seed=cfg["seed"])
    for key in ("train", "validation", "test", "context_fraction", "distinct_fraction", "noise"):
        if cfg.get(key) is not None:
            setattr(manifest, key, cfg[key])
    try:
        datagen.generate(manifest, out)
    except datagen.InfeasibleManifest as exc:
        raise UsageError(f"infeasible manifest: {exc}") from None
    emit({"out": str(out), "realized": manifest.realized})
    return 0


def _fit(kind, data, catalog, tc, mask_names=None):
    mc = ModelConfig()
    if mask_names:
        mc.feature_mask = feature_mask(mask_names).tolist()
    clf, history = train(kind, data["train"], data["validation"], catalog, tc, mc, progress=True)
    checkpoint.round_params(clf)
    return clf, history


def cmd_train(args, cfg):
    _require(cfg, "data", "model")
    kind = cfg["model"]
    _check_kind(kind)
    data, catalog = load_data(cfg["data"])
    out = _out_dir(cfg)
    lambdas = LAMBDA_GRID if args.lambda_grid else (cfg["lambda"],)
    rows, best = [], None
    for lam in lambdas:
        clf, history = _fit(kind, data, catalog, training_config(cfg, lam=lam))
        report = clf.evaluate(data["validation"])
        rows.append({"lambda": lam, "val_top2": report.top2, "val_micro_f1": report.utterance.micro_f1})
        key = (report.top2, report.utterance.micro_f1)
        if best is None or key > best[0]:
            best = (key, lam, clf, history, report)
    _, lam, clf, history, report = best
    checkpoint.save(clf, out / "model.ckpt")
    (out / "history.csv").write_text(history.to_csv())
    (out / "validation_report.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    if args.lambda_grid:
        lines = ["lambda,val_top2,val_micro_f1"] + [f"{r['lambda']},{r['val_top2']!r},{r['val_micro_f1']!r}" for r in rows]
        (out / "lambda_grid.csv").write_text("\n".join(lines) + "\n")
    emit({"checkpoint": str(out / "model.ckpt"), "lambda": lam, "best_epoch": history.best_epoch,
          "validation": report.summary()})
    return 0


def _load_checkpoint(path):
    if not path or not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return checkpoint.load(path)
    except checkpoint.CheckpointError as exc:
        raise UsageError(str(exc)) from None


def cmd_eval(args, cfg):
    _require(cfg, "data")
    clf = _load_checkpoint(args.checkpoint)
    data, catalog = load_data(cfg["data"])
    if catalog.to_dict() != clf.catalog.to_dict():
        raise CatalogMismatch("dataset catalog differs from the checkpoint's intent catalog")
    split = cfg["split"]
    if split not in data:
        raise UsageError(f"unknown split {split!r}")
    report = clf.evaluate(data[split])
    if cfg.get("out"):
        out = _out_dir(cfg)
        (out / f"{split}_report.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
        (out / f"{split}_report.csv").write_text(comparison_csv([report.row()]))
    emit({"split": split, "n": report.n, **report.summary()})
    return 0


def cmd_predict(args, cfg):
    clf = _load_checkpoint(args.checkpoint)
    src = Path(args.input)
    if not src.is_file():
        raise UsageError(f"input not found: {src}")
    rows = datagen.read_jsonl(src)
    for i, r in enumerate(rows):
        if "utterance" not in r:
            raise UsageError(f"{src}:{i + 1}: missing 'utterance'")
    preds = clf.predict(rows)
    lines = [json.dumps({"id": r.get("id", i), **p}, sort_keys=True) for i, (r, p) in enumerate(zip(rows, preds))]
    text = "\n".join(lines) + ("\n" if lines else "")
    if cfg.get("out"):
        Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg["out"]).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _average(reports) -> dict:
    keys = reports[0].summary().keys()
    out = {}
    for k in keys:
        vals = [r.summary()[k] for r in reports]
        out[k] = None if vals[0] is None else mean(vals)
    return out


def _row(name, avg) -> dict:
    def pct(x):
        return "-" if x is None else f"{100 * x:.2f}"

    return {
        "model": name,
        "utterance_micro_f1": pct(avg["utterance_micro_f1"]),
        "utterance_macro_f1": pct(avg["utterance_macro_f1"]),
        "conversation_micro_f1": pct(avg["conversation_micro_f1"]),
        "conversation_macro_f1": pct(avg["conversation_macro_f1"]),
        "top2_score": pct(avg["top2"]),
    }


def cmd_compare(args, cfg):
    _require(cfg, "data")
    kinds = [k.strip() for k in (cfg.get("models") or ",".join(MODEL_KINDS)).split(",") if k.strip()]
    for k in kinds:
        _check_kind(k)
    data, catalog = load_data(cfg["data"])
    out = _out_dir(cfg)
    seeds = _seeds(cfg)
    rows, raw = [], {}
    for kind in kinds:
        reports = []
        for seed in seeds:
            clf, _ = _fit(kind, data, catalog, training_config(cfg, seed=seed))
            reports.append(clf.evaluate(data[cfg["split"]]))
        avg = _average(reports)
        raw[kind] = {"mean": avg, "per_seed": [r.summary() for r in reports]}
        rows.append(_row(kind, avg))
    for kind in NOT_IMPLEMENTED_KINDS:
        rows.append({c: ("not implemented" if c != "model" else kind) for c in TABLE_COLUMNS})
    (out / "comparison.csv").write_text(comparison_csv(rows))
    (out / "comparison.json").write_text(json.dumps({"seeds": seeds, "split": cfg["split"], "models": raw},
                                                    indent=2, sort_keys=True) + "\n")
    print(format_table(rows))
    return 0


ABLATION_ROWS = [
    ("text only (baseline)", None),
    ("text + order", ["item", "handcrafted"]),
    ("text + item", ["order", "handcrafted"]),
    ("text + order + item", ["handcrafted"]),
    ("text + order + item + handcrafted", []),
    ("full - any_left_to_deliver", ["any_left_to_deliver"]),
    ("full - any_cancelled", ["any_cancelled"]),
]


def cmd_ablate(args, cfg):
    _require(cfg, "data")
    data, catalog = load_data(cfg["data"])
    out = _out_dir(cfg)
    plan = list(ABLATION_ROWS)
    if cfg.get("feature_mask"):
        names = _names(cfg["feature_mask"])
        plan = [("text + order + item + handcrafted", []), ("full - " + "+".join(names), names)]
    seeds = _seeds(cfg)
    lines = ["features,masked,top1_micro_f1"]
    table = []
    for label, masked in plan:
        kind = "baseline" if masked is None else "cawc"
        scores = []
        for seed in seeds:
            clf, _ = _fit(kind, data, catalog, training_config(cfg, seed=seed), masked)
            scores.append(clf.evaluate(data[cfg["split"]]).utterance.micro_f1)
        score = mean(scores)
        masked_txt = "-" if masked is None else ("none" if not masked else "+".join(masked))
        lines.append(f'"{label}",{masked_txt},{100 * score:.2f}')
        table.append({"features": label, "masked": masked_txt, "top1_micro_f1": f"{100 * score:.2f}"})
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    print(format_table(table, ["features", "masked", "top1_micro_f1"]))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--data", help="dataset directory")
    common.add_argument("--out", help="output directory (file for predict)")
    common.add_argument("-v", "--verbose", action="store_true")

    hp = _Parser(add_help=False)
    hp.add_argument("--lambda", dest="lambda", type=float, help="conversation loss weight")
    hp.add_argument("--lr", type=float)
    hp.add_argument("--batch-size", dest="batch_size", type=int)
    hp.add_argument("--epochs", type=int, help="maximum epochs")
    hp.add_argument("--patience", type=int)
    hp.add_argument("--dropout", type=float)
    hp.add_argument("--weight-decay", dest="weight_decay", type=float)
    hp.add_argument("--split", help="evaluation split (default test)")

    p = _Parser(prog="ctxnlu", description="Context-aware intent classification experiments.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    d = sub.add_parser("datagen", parents=[common], help="generate a synthetic dataset")
    d.add_argument("--train", type=int)
    d.add_argument("--validation", type=int)
    d.add_argument("--test", type=int)
    d.add_argument("--context-fraction", dest="context_fraction", type=float)
    d.add_argument("--distinct-fraction", dest="distinct_fraction", type=float)
    d.add_argument("--noise", type=float)
    d.add_argument("--verify", metavar="DIR", help="check an existing dataset instead of generating")

    t = sub.add_parser("train", parents=[common, hp], help="train one model and save a checkpoint")
    t.add_argument("--model")
    t.add_argument("--lambda-grid", dest="lambda_grid", action="store_true",
                   help=f"sweep lambda over {list(LAMBDA_GRID)} and keep the best on validation")

    e = sub.add_parser("eval", parents=[common, hp], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)

    pr = sub.add_parser("predict", parents=[common], help="predict intents for a JSONL file")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--input", required=True)

    c = sub.add_parser("compare", parents=[common, hp], help="train and evaluate several models")
    c.add_argument("--models", help="comma list (default: all)")
    c.add_argument("--seeds", help="comma list of seeds to average over")

    a = sub.add_parser("ablate", parents=[common, hp], help="CAWC with context feature groups masked")
    a.add_argument("--feature-mask", dest="feature_mask", help="comma list of groups/features to mask")
    a.add_argument("--seeds", help="comma list of seeds to average over")
    return p


COMMANDS = {
    "datagen": cmd_datagen,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "compare": cmd_compare,
    "ablate": cmd_ablate,
}


def _fail(kind, message, code):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        cfg = settings(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except CatalogMismatch as exc:
        return _fail("catalog_mismatch", str(exc), 2)
    except Exception as exc:  # runtime failure: one line, distinct exit code
        return _fail("runtime", f"{type(exc).__name__}: {exc}", 1)


if __name__ == "__main__":
    sys.exit(main())
