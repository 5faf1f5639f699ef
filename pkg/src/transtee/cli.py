"""Command-line entry point: ``transtee {generate,train,experiment,plot,params}``."""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datagen
from .experiments import (
    ConfigError,
    build_model,
    count_params,
    evaluate,
    export_attention,
    load_config,
    make_datasets,
    plot_adrf,
    run_experiment,
    write_metadata,
)
from .metrics import MetricReport, write_results
from .model import TransTEE
from .training import DivergenceError, train

log = logging.getLogger("transtee")


def _setup_logging() -> None:
    level = os.environ.get("TRANSTEE_LOG", "warning").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
        level = "WARNING"
    logging.basicConfig(level=getattr(logging, level), format="%(levelname)s %(name)s: %(message)s")


def _load(args):
    config = load_config(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "repeats", None) is not None:
        overrides["n_repeats"] = args.repeats
    return replace(config, **overrides) if overrides else config


def _pick_model(config, label):
    if label is None:
        return config.models[0]
    for spec in config.models:
        if spec.label == label:
            return spec
    raise ConfigError(f"no model labelled {label!r}")


def cmd_generate(args) -> int:
    config = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = make_datasets(config.generator, config.seed)
    datagen.save_csv(train_set, out / "train.csv")
    datagen.save_csv(test_set, out / "test.csv")
    print(f"wrote {len(train_set)} train and {len(test_set)} test rows to {out}")
    return 0


def cmd_train(args) -> int:
    config = _load(args)
    spec = _pick_model(config, args.model)
    spec = replace(spec, train=replace(spec.train, seed=config.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = make_datasets(config.generator, config.seed)
    model = build_model(spec, train_set, config.generator)
    try:
        model, history = train(spec.train, train_set, model=model, test=test_set,
                               eval_fn=lambda m, d: next(iter(evaluate(m, d, config.generator.name,
                                                                       config.grid_size).values())))
    except DivergenceError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    history.to_csv(out / "history.csv")
    metrics = evaluate(model, test_set, config.generator.name, config.grid_size)
    gen = config.generator
    reports = [
        MetricReport.aggregate(f"{spec.label}.{name}", [value], generator=gen.name,
                               h_train_low=gen.h_train[0], h_train_high=gen.h_train[1],
                               h_test_high=gen.h_test[1], seed=config.seed, config_hash=config.hash())
        for name, value in sorted(metrics.items())
    ]
    write_results(reports, out / "results.csv")
    write_metadata(config, out)
    shutil.copyfile(args.config, out / "config.toml")
    if isinstance(model, TransTEE):
        model.save(out / "model.txt")
    for name, value in sorted(metrics.items()):
        print(f"{spec.label}.{name} = {value:.6g}")
    return 0


def cmd_experiment(args) -> int:
    config = _load(args)
    out = Path(args.out)
    outcome = run_experiment(config, out, jobs=args.jobs)
    write_metadata(config, out)
    shutil.copyfile(args.config, out / "config.toml")
    for r in outcome.reports:
        std = "" if r.std is None else f" +/- {r.std:.4g}"
        print(f"{r.metric}: {r.value:.6g}{std} (n={r.n_repeats})")
    aborted = sum(r.status != "ok" for r in outcome.repeats)
    if aborted:
        print(f"{aborted} of {len(outcome.repeats)} repeats aborted", file=sys.stderr)
    return outcome.exit_code


def cmd_plot(args) -> int:
    run = Path(args.out)
    config = load_config(args.config or run / "config.toml")
    model = TransTEE.load(run / "model.txt")
    _, test_set = make_datasets(config.generator, config.seed)
    if config.generator.name in ("synthetic", "ihdp", "news"):
        grid = np.linspace(*config.generator.h_test, 101)
        plot_adrf(model, test_set, config.x_sample_count, grid, run / "adrf.svg")
    if test_set.s is None:
        weights = model.cross_attention(test_set.x, test_set.t)
        export_attention(weights, test_set.meta.get("groups"), run / "attention.csv")
    print(f"plots written to {run}")
    return 0


def cmd_params(args) -> int:
    config = _load(args)
    for spec in config.models:
        print(f"{spec.label}\t{spec.kind}\t{count_params(spec, config.generator)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transtee", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", type=Path, required=True, help="experiment TOML file")
        p.add_argument("--seed", type=int, default=None, help="override [experiment].seed")
        if out_required:
            p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("generate", help="write train/test CSVs for the configured generator")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model once and save it")
    common(p)
    p.add_argument("--model", default=None, help="model label (default: first [models.*] section)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("experiment", help="run every model for every repeat")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="concurrent repeats")
    p.add_argument("--repeats", type=int, default=None, help="override [experiment].n_repeats")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("plot", help="re-render ADRF and attention plots from a saved train run")
    p.add_argument("--out", type=Path, required=True, help="run directory written by `train`")
    p.add_argument("--config", type=Path, default=None, help="defaults to <out>/config.toml")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("params", help="print trainable parameter counts")
    common(p, out_required=False)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, datagen.SchemaError, datagen.ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
