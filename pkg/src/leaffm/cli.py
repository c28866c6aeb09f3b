"""Command-line entry point: ``leaffm <command> [-c CONFIG] [--set key=value ...]``.

Every command reads the same flat ``key = value`` run configuration; flags
override file keys and unknown keys are rejected. Commands that produce
output write the fully resolved configuration next to it.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time

import numpy as np

from .config import parse_value, read_kv_file, write_kv_file
from .data import (
    CsvLayout, HashSpec, criteo_schema, criteo_tokens, csv_tokens, load_sparse, load_split,
    parse_criteo_tsv, parse_csv_with_schema, parse_sparse_line, read_lines, read_schema_description,
    split_dataset, tokenize_lines, write_sparse,
)
from .errors import ConfigError, LeafFMError
from .export import fold, read_model, stream_score, write_model
from .metrics import auc, evaluate
from .numerics import sigmoid
from .params import ModelConfig, Variant, audit
from .scoring import predict_logits
from .synth import SynthConfig, synth_generate
from .training import default_tolerance, gradcheck_grid, gradient_check, tiny_config, train

log = logging.getLogger("leaffm")

MODEL_KEYS = ("variant", "d", "r", "p", "u", "activation", "l2", "learning_rate", "batch_size", "epochs",
              "patience", "seed", "beta1", "beta2", "adam_eps", "init_sigma")

DEFAULTS = {
    # model; d = None picks 10, or 8 for ffm
    "variant": "la_fm", "d": None, "r": 1, "p": 2, "u": 1, "activation": "relu", "l2": 1e-6,
    "learning_rate": 1e-4, "batch_size": 1024, "epochs": 50, "patience": 2, "seed": 0,
    "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-8, "init_sigma": 0.01,
    # data
    "format": "synth", "data": "", "schema": "", "buckets": 1000, "numeric_fill": 0.0, "vocab": None,
    "split_seed": 0, "synth_seed": 0, "eval_split": "test",
    # outputs and runtime
    "out": "run", "model": "", "threads": 1, "unknown_policy": "skip",
    # gradcheck
    "gradcheck_grid": False, "gradcheck_cases": 1, "gradcheck_seed": 0, "tolerance": None,
    # sweep
    "sweep_axis": "u", "sweep_values": None, "sweep_seeds": [0],
}

SWEEP_GRIDS = {
    "u": [1, 3, 5, 7, 9, 11],
    "r": [1, 2, 3, 4, 5, 7],
    "p": [2, 3, 4, 5, 7, 10],
    "d": [10, 30, 50, 80, 100, 120],
}

FORMATS = ("synth", "criteo", "csv", "sparse")


class RunConfig:
    """Defaults, then a config file, then ``--set`` overrides."""

    def __init__(self, values=None):
        self.values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = value

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def load(cls, path=None, overrides=()):
        rc = cls()
        if path:
            for key, value in read_kv_file(path):
                rc.set(key, value)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, value = item.split("=", 1)
            rc.set(key.strip(), parse_value(value))
        return rc

    def model_config(self, per_field_vocab, **changes):
        kw = {k: self.values[k] for k in MODEL_KEYS}
        kw.update(changes)
        if kw["d"] is None:
            kw["d"] = 8 if kw["variant"] == "ffm" else 10
        for key in ("d", "r", "p", "u", "batch_size", "epochs", "patience", "seed"):
            kw[key] = int(kw[key])
        return ModelConfig(per_field_vocab=tuple(per_field_vocab), **kw)

    def write(self, path):
        write_kv_file(path, [(k, v) for k, v in self.values.items() if v is not None])


def _buckets(rc):
    b = rc["buckets"]
    return [int(x) for x in b] if isinstance(b, list) else int(b)


def _synth_config(rc):
    return SynthConfig.from_file(rc["data"]) if rc["data"] else SynthConfig()


def load_data(rc):
    """Read the configured dataset and split it 8:1:1.

    Returns ``(DatasetSplit, per_field_vocab, data_meta)``; ``data_meta`` holds
    what a scorer needs to parse the same format later.
    """
    fmt = rc["format"]
    seed = int(rc["split_seed"])
    if fmt == "synth":
        sc = _synth_config(rc)
        table = synth_generate(sc, int(rc["synth_seed"])).table
        return split_dataset(table, seed), sc.cardinalities, {"format": "sparse"}
    if not rc["data"]:
        raise ConfigError(f"format {fmt!r} needs a 'data' path")
    lines = read_lines(rc["data"])
    if fmt == "sparse":
        table = load_sparse(lines)
        vocab = rc["vocab"] or [int(c.max()) + 1 if (c >= 0).any() else 1 for c in table.features.T]
        return split_dataset(table, seed), vocab, {"format": "sparse"}
    spec = HashSpec(_buckets(rc), float(rc["numeric_fill"]))
    if fmt == "criteo":
        schema = criteo_schema()
        labels, rows = tokenize_lines(lines, criteo_tokens)
        meta = {"format": "criteo"}
    elif fmt == "csv":
        if not rc["schema"]:
            raise ConfigError("format 'csv' needs a 'schema' description path")
        desc = read_schema_description(rc["schema"])
        header = next(csv.reader([lines[0].rstrip("\r\n")], delimiter=desc.get("delimiter", ",")))
        layout = CsvLayout.resolve(header, desc)
        schema = layout.schema
        labels, rows = tokenize_lines(lines[1:], lambda line, no: csv_tokens(line, layout, no + 1))
        meta = {"format": "csv", "schema_path": os.path.abspath(rc["schema"]), "header": layout.header}
    else:
        raise ConfigError(f"unknown format {fmt!r}; expected one of {', '.join(FORMATS)}")
    split, fitted = load_split(labels, rows, schema, spec, seed)
    meta["hash_spec"] = fitted.to_dict()
    return split, fitted.vocab_sizes(schema), meta


def line_parser(meta, rc=None):
    """``parse_line(line, line_no)`` for the text format recorded in a model's metadata."""
    fmt = meta.get("format", "sparse")
    if fmt == "sparse":
        return parse_sparse_line
    spec = HashSpec.from_dict(meta["hash_spec"])
    if fmt == "criteo":
        schema = criteo_schema()
        return lambda line, no: parse_criteo_tsv(line, schema, spec, no)
    if fmt == "csv":
        schema_path = (rc["schema"] if rc is not None and rc["schema"] else None) or meta["schema_path"]
        layout = CsvLayout.resolve(meta["header"], read_schema_description(schema_path))
        return lambda line, no: parse_csv_with_schema(line, layout, spec, no)
    raise ConfigError(f"model metadata names unknown format {fmt!r}")


def _split_table(split, name):
    if name not in ("train", "validation", "test"):
        raise ConfigError(f"eval_split must be train, validation or test, got {name!r}")
    return getattr(split, name)


def _prepare_out(rc):
    os.makedirs(rc["out"], exist_ok=True)
    rc.write(os.path.join(rc["out"], "config.txt"))
    return rc["out"]


# ---------------------------------------------------------------------------
# commands

def cmd_train(rc, out=None):
    out = out or sys.stdout
    split, vocab, meta = load_data(rc)
    config = rc.model_config(vocab)
    outdir = _prepare_out(rc)
    print(audit_line(config), file=out)
    with open(os.path.join(outdir, "train.log"), "w", encoding="utf-8") as logf:
        def on_epoch(rec):
            print(rec, file=out, flush=True)
            logf.write(f"{rec}\n")
        run = train(config, split, threads=int(rc["threads"]), on_epoch=on_epoch)
    meta = dict(meta, best_epoch=run.best_epoch, best_val_auc=run.best_val_auc)
    write_model(run.best_params, os.path.join(outdir, "checkpoint.lffm"), config=config, meta=meta)
    if config.variant is not Variant.FFM:
        write_model(fold(run.best_params, config, meta), os.path.join(outdir, "model.lffm"))
    print(f"best_epoch={run.best_epoch}\tbest_val_auc={run.best_val_auc:.6f}\tstopped_early={run.stopped_early}",
          file=out)
    return 0


def audit_line(config):
    from .params import build_parameters
    return str(audit(build_parameters(config), config))


def _load_scorer(path):
    """Probability scorer for a folded model or a checkpoint, plus metadata."""
    loaded = read_model(path)
    if isinstance(loaded, tuple):
        params, config, header = loaded
        return (lambda t: sigmoid(predict_logits(t, params, config))), config.f, header
    from .export import score_folded_batch
    return (lambda t: sigmoid(score_folded_batch(t, loaded))), loaded.f, loaded.meta


def cmd_evaluate(rc, out=None):
    out = out or sys.stdout
    if not rc["model"]:
        raise ConfigError("evaluate needs a 'model' path")
    scorer, _, _ = _load_scorer(rc["model"])
    split, _, _ = load_data(rc)
    print(evaluate(scorer, _split_table(split, rc["eval_split"])), file=out)
    return 0


def cmd_export(rc, out=None):
    out = out or sys.stdout
    if not rc["model"]:
        raise ConfigError("export needs a 'model' checkpoint path")
    loaded = read_model(rc["model"])
    if not isinstance(loaded, tuple):
        raise ConfigError(f"{rc['model']} is already a folded model")
    params, config, header = loaded
    os.makedirs(rc["out"], exist_ok=True)
    path = os.path.join(rc["out"], "model.lffm")
    write_model(fold(params, config, header), path)
    print(f"wrote {path}", file=out)
    return 0


def cmd_score(rc, out=None, inp=None, err=None):
    if not rc["model"]:
        raise ConfigError("score needs a folded 'model' path")
    out, err = out or sys.stdout, err or sys.stderr
    model = read_model(rc["model"])
    if isinstance(model, tuple):
        raise ConfigError("score needs a folded model; run 'export' on the checkpoint first")
    model.unknown_policy = rc["unknown_policy"]
    parse = line_parser(model.meta, rc)
    inp = sys.stdin if inp is None else inp
    if model.meta.get("format") == "csv":
        inp = _skip_header(inp)
    stream_score(model, parse, inp, out, err)
    return 0


def _skip_header(stream):
    it = iter(stream)
    next(it, None)
    return it


def cmd_gradcheck(rc, out=None):
    out = out or sys.stdout
    if rc["gradcheck_grid"]:
        configs = gradcheck_grid()
    else:
        configs = [tiny_config(rc["variant"], int(rc["p"]), int(rc["r"]), int(rc["u"]), rc["activation"])]
    ok = True
    for i, config in enumerate(configs):
        tol = float(rc["tolerance"]) if rc["tolerance"] is not None else default_tolerance(config)
        report = gradient_check(config, int(rc["gradcheck_cases"]), tol, seed=int(rc["gradcheck_seed"]) + i)
        for line in report.lines():
            print(line, file=out)
        ok &= report.passed
    print("gradcheck PASS" if ok else "gradcheck FAIL", file=out)
    return 0 if ok else 1


def cmd_synth(rc, out=None):
    out = out or sys.stdout
    sc = _synth_config(rc)
    ds = synth_generate(sc, int(rc["synth_seed"]))
    outdir = _prepare_out(rc)
    sc.write(os.path.join(outdir, "synth.txt"))
    write_sparse(ds.table, os.path.join(outdir, "data.txt"))
    teacher_auc = auc(ds.teacher_logit, ds.table.labels)
    linear_auc = auc(ds.teacher.logit(ds.table, linear=True), ds.table.labels)
    print(f"instances={len(ds.table)}\tpositive_rate={ds.table.labels.mean():.4f}"
          f"\tteacher_auc={teacher_auc:.6f}\tlinear_oracle_auc={linear_auc:.6f}", file=out)
    return 0


def cmd_sweep(rc, out=None):
    out = out or sys.stdout
    axis = rc["sweep_axis"]
    if axis not in SWEEP_GRIDS:
        raise ConfigError(f"sweep_axis must be one of {', '.join(SWEEP_GRIDS)}, got {axis!r}")
    values = rc["sweep_values"] if rc["sweep_values"] is not None else SWEEP_GRIDS[axis]
    values = values if isinstance(values, list) else [values]
    seeds = rc["sweep_seeds"] if isinstance(rc["sweep_seeds"], list) else [rc["sweep_seeds"]]
    split, vocab, _ = load_data(rc)
    outdir = _prepare_out(rc)
    header = ["variant", axis, "median_val_auc", "median_test_auc", "seeds", "mean_epochs", "seconds"]
    rows = ["\t".join(header)]
    print(rows[0], file=out, flush=True)
    for value in values:
        config = rc.model_config(vocab, **{axis: int(value)})
        val_aucs, test_aucs, epochs = [], [], []
        t0 = time.perf_counter()
        for seed in seeds:
            run = train(config.with_(seed=int(seed)), split, threads=int(rc["threads"]))
            val_aucs.append(run.best_val_auc)
            test_p = sigmoid(predict_logits(split.test, run.best_params, config))
            test_aucs.append(auc(test_p, split.test.labels))
            epochs.append(len(run.records))
        row = [config.variant.value, str(value), f"{np.median(val_aucs):.6f}", f"{np.median(test_aucs):.6f}",
               str(len(seeds)), f"{np.mean(epochs):.1f}", f"{time.perf_counter() - t0:.1f}"]
        rows.append("\t".join(row))
        print(rows[-1], file=out, flush=True)
    with open(os.path.join(outdir, "sweep.tsv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
    return 0


COMMANDS = {
    "train": (cmd_train, "train a model; writes checkpoint, folded model and logs"),
    "evaluate": (cmd_evaluate, "print AUC and logloss of a model on one split"),
    "export": (cmd_export, "fold a checkpoint into a serving model"),
    "score": (cmd_score, "stream-score stdin with a folded model"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient check"),
    "synth": (cmd_synth, "generate a synthetic dataset"),
    "sweep": (cmd_sweep, "grid over one of u, r, p, d"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="leaffm", description="FM, FFM and Leaf-FM CTR models.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", help="flat key = value config file")
        p.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--data", help="shorthand for --set data=PATH")
        p.add_argument("--model", help="shorthand for --set model=PATH")
        p.add_argument("--out", help="shorthand for --set out=DIR")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = list(args.set)
    for key in ("data", "model", "out"):
        if getattr(args, key) is not None:
            overrides.append(f"{key}={getattr(args, key)}")
    try:
        rc = RunConfig.load(args.config, overrides)
        return COMMANDS[args.command][0](rc)
    except (LeafFMError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"leaffm {args.command}: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
