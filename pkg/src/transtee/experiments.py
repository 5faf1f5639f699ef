"""Config-driven experiment runner, SVG plots, and attention exports.

A config is a TOML file with these sections::

    [experiment]        n_repeats, seed, grid_size, plots, attention
    [generator]         name, h_train = [lo, hi], h_test = [lo, hi], extra generator options
    [train]             TrainConfig fields shared by every model
    [models.<label>]    kind = "transtee" | "mlp" | "discretized", plus per-model overrides

Unknown keys are rejected so a config file doubles as a record of the run.
"""

from __future__ import annotations

import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from . import datagen
from .baselines import DiscretizedBaseline, DiscretizedConfig, MlpBaseline, MlpConfig
from .metrics import MetricReport, amse, amse_dosage, ate_error, config_hash, pehe_at_k, write_results
from .model import attention_summary
from .rng import INIT, RngStream
from .tensor import ContractError, NumericError
from .training import DivergenceError, TrainConfig, build_transtee, train

log = logging.getLogger(__name__)

GENERATORS = ("synthetic", "ihdp", "ihdp_binary", "news", "tcga")
MODEL_KINDS = ("transtee", "mlp", "discretized")
ABORT_FRACTION = 0.2

_EXPERIMENT_KEYS = {"n_repeats", "seed", "grid_size", "plots", "attention", "x_sample_count"}
_GENERATOR_KEYS = {
    "synthetic": {"n_train", "n_test", "noise"},
    "ihdp": {"n", "n_train", "noise", "n_noisy", "n_instruments"},
    "ihdp_binary": {"n", "n_train", "noise", "n_noisy", "n_instruments"},
    "news": {"n", "n_train", "noise", "p"},
    "tcga": {"n", "n_train", "noise", "n_treatments", "kappa", "alpha", "C", "p"},
}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_MLP_KEYS = {"hidden"}
_DISCRETIZED_KEYS = {"delta", "hidden"}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class GeneratorSpec:
    name: str
    h_train: tuple[float, float] = (0.0, 1.0)
    h_test: tuple[float, float] = (0.0, 1.0)
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in GENERATORS:
            raise ConfigError(f"unknown generator {self.name!r}; expected one of {GENERATORS}")
        for label, (lo, hi) in (("h_train", self.h_train), ("h_test", self.h_test)):
            if not lo < hi:
                raise ConfigError(f"{label}: need low < high, got [{lo}, {hi}]")
        unknown = set(self.options) - _GENERATOR_KEYS[self.name]
        if unknown:
            raise ConfigError(f"generator {self.name!r}: unknown keys {sorted(unknown)}")


@dataclass(frozen=True)
class ModelSpec:
    label: str
    kind: str
    train: TrainConfig
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"model {self.label!r}: unknown kind {self.kind!r}")
        allowed = {"mlp": _MLP_KEYS, "discretized": _DISCRETIZED_KEYS, "transtee": set()}[self.kind]
        unknown = set(self.options) - allowed
        if unknown:
            raise ConfigError(f"model {self.label!r}: unknown keys {sorted(unknown)}")
        if self.kind != "transtee" and self.train.regularizer != "none":
            raise ConfigError(f"model {self.label!r}: propensity regularizers need a transtee model")


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorSpec
    models: tuple[ModelSpec, ...]
    n_repeats: int = 10
    seed: int = 0
    grid_size: int = 65
    plots: bool = True
    attention: bool = True
    x_sample_count: int = 200
    raw: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.n_repeats < 1:
            raise ConfigError("n_repeats must be >= 1")
        if not self.models:
            raise ConfigError("at least one [models.<label>] section is required")

    def hash(self) -> str:
        return config_hash(self.raw)


def _interval(value, key: str) -> tuple[float, float]:
    if not (isinstance(value, list) and len(value) == 2):
        raise ConfigError(f"{key} must be a two-element list [low, high]")
    return float(value[0]), float(value[1])


def _train_config(table: dict, where: str) -> TrainConfig:
    unknown = set(table) - _TRAIN_KEYS
    if unknown:
        raise ConfigError(f"{where}: unknown train keys {sorted(unknown)}")
    try:
        return TrainConfig(**table)
    except (TypeError, ContractError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a parsed TOML document and build an :class:`ExperimentConfig`."""
    unknown = set(raw) - {"experiment", "generator", "train", "models"}
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")
    exp = dict(raw.get("experiment", {}))
    bad = set(exp) - _EXPERIMENT_KEYS
    if bad:
        raise ConfigError(f"[experiment]: unknown keys {sorted(bad)}")

    gen = dict(raw.get("generator", {}))
    if "name" not in gen:
        raise ConfigError("[generator] needs a name")
    name = gen.pop("name")
    h_train = _interval(gen.pop("h_train", [0.0, 1.0]), "h_train")
    h_test = _interval(gen.pop("h_test", [0.0, 1.0]), "h_test")
    generator = GeneratorSpec(name, h_train, h_test, gen)

    base = dict(raw.get("train", {}))
    _train_config(base, "[train]")
    models = []
    for label, table in raw.get("models", {}).items():
        table = dict(table)
        kind = table.pop("kind", "transtee")
        overrides = {k: table.pop(k) for k in list(table) if k in _TRAIN_KEYS}
        if "hidden" in table:
            table["hidden"] = tuple(int(w) for w in table["hidden"])
        cfg = _train_config({**base, **overrides}, f"[models.{label}]")
        models.append(ModelSpec(label, kind, cfg, table))
    return ExperimentConfig(generator=generator, models=tuple(models), raw=raw, **exp)


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return parse_config(raw)


# ---------------------------------------------------------------- data and models


def make_datasets(spec: GeneratorSpec, seed: int):
    """(train, test) for one repeat; the test interval is ``spec.h_test``."""
    opts = dict(spec.options)
    h = spec.h_test[1]
    lo, hi = spec.h_train
    train_high = None if hi >= h else hi
    if spec.name == "synthetic":
        data = datagen.gen_synthetic(h=h, seed=seed, train_low=lo, train_high=train_high, **opts)
    elif spec.name in ("ihdp", "ihdp_binary"):
        opts.setdefault("n_train", int(round(0.8 * opts.get("n", 747))))
        data = datagen.gen_ihdp_style(h=h, seed=seed, train_low=lo, train_high=train_high,
                                      binary=spec.name == "ihdp_binary", **opts)
    elif spec.name == "news":
        opts.setdefault("n_train", int(round(0.8 * opts.get("n", 3000))))
        data = datagen.gen_news_style(h=h, seed=seed, train_low=lo, train_high=train_high, **opts)
    else:
        n = opts.pop("n", 2000)
        n_train = opts.pop("n_train", int(round(0.8 * n)))
        noise = opts.pop("noise", True)
        data = datagen.gen_tcga_dosage(n=n, config=datagen.TcgaDoseConfig(**opts), seed=seed,
                                       n_train=n_train, noise=noise)
    train_set, test_set = data.split()
    if spec.name != "tcga":
        train_set.meta["t_eval"] = (lo, min(hi, h))
        test_set.meta["t_eval"] = tuple(spec.h_test)
    return train_set, test_set


def build_model(spec: ModelSpec, dataset, generator: GeneratorSpec | None = None):
    """Fresh untrained model for ``dataset``; init randomness comes from the train seed."""
    if spec.kind == "transtee":
        return build_transtee(spec.train, dataset)
    rng = RngStream(spec.train.seed, INIT).generator()
    has_dosage = dataset.s is not None
    if spec.kind == "mlp":
        cfg = MlpConfig(dataset.p, has_dosage=has_dosage, **spec.options)
        return MlpBaseline(cfg, rng)
    if has_dosage:
        raise ContractError("the discretized baseline does not take dosages")
    lo, hi = generator.h_train if generator is not None else dataset.t_interval
    if generator is not None:
        hi = min(hi, generator.h_test[1])
    return DiscretizedBaseline(DiscretizedConfig(dataset.p, low=lo, high=hi, **spec.options), rng)


def evaluate(model, test, generator: str, grid_size: int = 65) -> dict[str, float]:
    """Metric name -> value for the metrics that apply to ``generator``."""
    if generator == "ihdp_binary":
        return {"ate_error": ate_error(model, test)}
    if generator == "tcga":
        out = {"amse_d": amse_dosage(model, test, grid_size)}
        prop = test.meta.get("assign_prob")
        if prop is not None and prop.shape[1] >= 2:
            out["upehe_at_2"] = pehe_at_k(model, test, prop, 2)
            out["wpehe_at_2"] = pehe_at_k(model, test, prop, 2, weighted=True)
        return out
    return {"amse": amse(model, test, grid_size)}


# ---------------------------------------------------------------- running


@dataclass
class RepeatResult:
    model: str
    repeat: int
    seed: int
    status: str
    metrics: dict[str, float] = field(default_factory=dict)
    trained: object | None = None
    test: object | None = None


def run_repeat(config: ExperimentConfig, spec: ModelSpec, repeat: int) -> RepeatResult:
    seed = config.seed + repeat
    train_set, test_set = make_datasets(config.generator, seed)
    model_spec = replace(spec, train=replace(spec.train, seed=seed))
    model = build_model(model_spec, train_set, config.generator)
    try:
        model, _ = train(model_spec.train, train_set, model=model)
        metrics = evaluate(model, test_set, config.generator.name, config.grid_size)
    except (DivergenceError, NumericError) as exc:
        log.warning("%s repeat %d aborted: %s", spec.label, repeat, exc)
        return RepeatResult(spec.label, repeat, seed, f"aborted: {exc}")
    log.info("%s repeat %d: %s", spec.label, repeat, metrics)
    return RepeatResult(spec.label, repeat, seed, "ok", metrics, model, test_set)


@dataclass
class ExperimentOutcome:
    reports: list[MetricReport]
    repeats: list[RepeatResult]
    artifacts: list[Path]

    @property
    def abort_fraction(self) -> float:
        return sum(r.status != "ok" for r in self.repeats) / max(len(self.repeats), 1)

    @property
    def exit_code(self) -> int:
        return 1 if self.abort_fraction > ABORT_FRACTION else 0

    def values(self, model: str, metric: str) -> list[float]:
        return [r.metrics[metric] for r in self.repeats if r.model == model and r.status == "ok"]


def run_experiment(config: ExperimentConfig, out_dir, jobs: int = 1) -> ExperimentOutcome:
    """Run every model for every repeat; write results, per-repeat status, plots and exports."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(spec, r) for spec in config.models for r in range(config.n_repeats)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda task: run_repeat(config, *task), tasks))
    else:
        results = [run_repeat(config, spec, r) for spec, r in tasks]

    gen = config.generator
    meta = dict(
        generator=gen.name,
        h_train_low=gen.h_train[0],
        h_train_high=gen.h_train[1],
        h_test_high=gen.h_test[1],
        seed=config.seed,
        config_hash=config.hash(),
    )
    reports = []
    for spec in config.models:
        done = [r for r in results if r.model == spec.label and r.status == "ok"]
        for metric in (sorted(done[0].metrics) if done else []):
            values = [r.metrics[metric] for r in done]
            reports.append(MetricReport.aggregate(f"{spec.label}.{metric}", values, **meta))

    artifacts = [out_dir / "results.csv", out_dir / "repeats.csv"]
    write_results(reports, artifacts[0])
    _write_repeats(results, artifacts[1])
    for spec in config.models:
        first = next((r for r in results if r.model == spec.label and r.status == "ok"), None)
        if first is None:
            continue
        continuous = gen.name in ("synthetic", "ihdp", "news")
        if config.plots and continuous:
            path = out_dir / f"adrf_{spec.label}.svg"
            grid = np.linspace(*gen.h_test, 101)
            plot_adrf(first.trained, first.test, config.x_sample_count, grid, path)
            artifacts.append(path)
        groups = first.test.meta.get("groups")
        if config.attention and spec.kind == "transtee" and first.test.s is None:
            path = out_dir / f"attention_{spec.label}.csv"
            weights = first.trained.cross_attention(first.test.x, first.test.t)
            artifacts.extend(export_attention(weights, groups, path))
    outcome = ExperimentOutcome(reports, results, artifacts)
    aborted = sum(r.status != "ok" for r in results)
    if aborted:
        log.warning("%d of %d repeats aborted", aborted, len(results))
    return outcome


def _write_repeats(results: list[RepeatResult], path: Path) -> None:
    names = sorted({m for r in results for m in r.metrics})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "repeat", "seed", "status", *names])
        for r in results:
            w.writerow([r.model, r.repeat, r.seed, r.status,
                        *(repr(r.metrics[m]) if m in r.metrics else "" for m in names)])


# ---------------------------------------------------------------- continuity checks


def max_adjacent_jump(values: np.ndarray) -> float:
    return float(np.max(np.abs(np.diff(values))))


def count_flat_segments(values: np.ndarray, tol: float = 1e-12) -> int:
    """Number of maximal runs (length >= 2) of consecutive equal values."""
    flat = np.abs(np.diff(values)) <= tol
    runs, inside = 0, False
    for f in flat:
        if f and not inside:
            runs += 1
        inside = bool(f)
    return runs


def adrf_max_slope(model, x: np.ndarray, grid: np.ndarray, eps: float = 1e-4) -> float:
    """Largest |d/dt| of the estimated ADRF at the grid points (central differences)."""
    n, g = len(x), len(grid)
    xr = np.repeat(x, g, axis=0)
    up = model.predict(xr, np.tile(grid + eps, n)).reshape(n, g).mean(axis=0)
    down = model.predict(xr, np.tile(grid - eps, n)).reshape(n, g).mean(axis=0)
    return float(np.max(np.abs(up - down)) / (2 * eps))


# ---------------------------------------------------------------- SVG output


def _svg(width: int, height: int, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">')
    return "\n".join([head, *body, "</svg>"]) + "\n"


def _polyline(xs, ys, x_range, y_range, box, color: str, label: str) -> str:
    (x0, x1), (y0, y1) = x_range, y_range
    left, top, w, h = box
    px = left + (np.asarray(xs) - x0) / (x1 - x0) * w
    py = top + h - (np.asarray(ys) - y0) / (y1 - y0) * h
    pts = " ".join(f"{a:.6f},{b:.6f}" for a, b in zip(px, py))
    return (f'<polyline data-label="{escape(label)}" fill="none" stroke="{color}" '
            f'stroke-width="2" points="{pts}"/>')


def plot_adrf(model, dataset, x_sample_count: int, t_grid, out_path) -> tuple[np.ndarray, np.ndarray]:
    """Write the true and estimated average dose-response curves as an SVG.

    The curves average over the first ``x_sample_count`` units of ``dataset``.
    Returns ``(estimated, true)`` on ``t_grid``.
    """
    if dataset.oracle is None:
        raise ContractError("plot_adrf needs a dataset with a response oracle")
    grid = np.asarray(t_grid, dtype=np.float64)
    x = dataset.x[:x_sample_count]
    n, g = len(x), len(grid)
    xr = np.repeat(x, g, axis=0)
    tr = np.tile(grid, n)
    est = model.predict(xr, tr).reshape(n, g).mean(axis=0)
    true = dataset.oracle(xr, tr).reshape(n, g).mean(axis=0)

    lo = float(min(est.min(), true.min()))
    hi = float(max(est.max(), true.max()))
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    box = (50, 20, 500, 300)
    x_range = (float(grid[0]), float(grid[-1]))
    body = [
        '<rect x="50" y="20" width="500" height="300" fill="none" stroke="#888"/>',
        _polyline(grid, true, x_range, (lo, hi), box, "#222222", "true"),
        _polyline(grid, est, x_range, (lo, hi), box, "#d62728", "estimate"),
        f'<text x="50" y="345" font-size="12">t in [{x_range[0]:g}, {x_range[1]:g}]; '
        f'y in [{lo:.3g}, {hi:.3g}]; black: true, red: estimate</text>',
    ]
    Path(out_path).write_text(_svg(600, 360, body))
    return est, true


def _gray(v: float) -> str:
    level = int(round(255 * (1.0 - v)))
    return f"#{level:02x}{level:02x}{level:02x}"


def export_attention(weights, groups: dict | None, out_path) -> list[Path]:
    """Per-covariate mean cross-attention (plus group sums) as CSV, and a heatmap SVG.

    ``weights`` is ``[units, p]``. Without ``groups`` only per-covariate rows are written.
    Returns the written paths.
    """
    w = np.asarray(weights, dtype=np.float64)
    per_cov = w.mean(axis=0) if w.ndim == 2 else w
    out_path = Path(out_path)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["name", "weight"])
        for j, v in enumerate(per_cov):
            writer.writerow([f"x{j + 1}", repr(float(v))])
        if groups:
            for name, value in attention_summary(per_cov, groups).items():
                writer.writerow([name, repr(value)])

    cell = 20
    scale = float(per_cov.max()) if per_cov.max() > 0 else 1.0
    body = [
        f'<rect x="{10 + j * cell}" y="10" width="{cell}" height="{cell}" '
        f'fill="{_gray(v / scale)}" data-weight="{v!r}"/>'
        for j, v in enumerate(map(float, per_cov))
    ]
    svg_path = out_path.with_suffix(".svg")
    svg_path.write_text(_svg(20 + cell * len(per_cov), 40, body))
    return [out_path, svg_path]


# ---------------------------------------------------------------- parameter counts


def count_params(model_spec: ModelSpec, generator_spec: GeneratorSpec) -> int:
    """Trainable outcome-model scalars for ``model_spec`` on data shaped like ``generator_spec``."""
    train_set, _ = make_datasets(generator_spec, seed=0)
    return build_model(model_spec, train_set, generator_spec).count_params()


def write_metadata(config: ExperimentConfig, out_dir) -> Path:
    meta = {
        "config_hash": config.hash(),
        "train": {spec.label: spec.train.metadata() for spec in config.models},
        "generator": {"name": config.generator.name, "h_train": config.generator.h_train,
                      "h_test": config.generator.h_test, **config.generator.options},
        "grid_size": config.grid_size,
    }
    path = Path(out_dir) / "metadata.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "GeneratorSpec",
    "ModelSpec",
    "adrf_max_slope",
    "build_model",
    "count_flat_segments",
    "count_params",
    "evaluate",
    "export_attention",
    "load_config",
    "make_datasets",
    "max_adjacent_jump",
    "parse_config",
    "plot_adrf",
    "run_experiment",
    "run_repeat",
]
