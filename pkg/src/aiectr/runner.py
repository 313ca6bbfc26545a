"""Experiment orchestration: config loading, seeded pipelines, aggregation.

A run is fully described by a :class:`RunConfig`.  ``run`` generates (or
loads) the data, trains one model per seed, picks the epoch with the best
validation AUC and evaluates it on every test set.  Artifacts land in a
directory named after the config hash under the run root (``$AIECTR_RUN_ROOT``
or ``./runs``); an unchanged config is not recomputed unless forced.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import bcm, metrics, synth
from .am2 import AM2Config
from .data import Dataset, FeatureSchema, load_tsv, split_by_fraction
from .model import AdamConfig, BackboneConfig, CTRModel, LossSpec, save_checkpoint, train_epoch

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
RUN_ROOT_ENV = "AIECTR_RUN_ROOT"
SUMMARY_METRICS = ("auc", "cs_auc", "rev", "rev_ndcg", "predicted_bias")


class ConfigError(ValueError):
    """Every problem found in a config, reported together."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


# --------------------------------------------------------------------- config
@dataclass
class BcmConfig:
    enabled: bool = False
    a: float = 0.5
    b: float = 1.5
    quantiles: list = field(default_factory=lambda: [0.01, 0.99])
    per_scene: bool = True
    min_positives: int = 10
    scene_field: str | None = None  # default: the schema's scenario field

    def __post_init__(self):
        if self.a > self.b:
            raise ValueError(f"need a <= b, got a={self.a}, b={self.b}")
        if self.a < 0:
            raise ValueError("weights must be non-negative (a >= 0)")
        q = list(self.quantiles)
        if len(q) != 2 or not 0 <= q[0] < q[1] <= 1:
            raise ValueError(f"quantiles must be [lo, hi] with 0 <= lo < hi <= 1, got {q}")


@dataclass
class OptimConfig:
    lr: float = 1e-3
    l2: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 2000

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.l2 < 0:
            raise ValueError("need lr > 0, l2 >= 0 and batch_size >= 1")

    def adam(self) -> AdamConfig:
        return AdamConfig(lr=self.lr, l2=self.l2, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


@dataclass
class DataConfig:
    """``source`` is ``synth`` (a :class:`synth.WorldConfig` in ``world``) or
    ``tsv`` (paths plus a schema).

    For synth data the biased log is split in order into train, validation
    and a biased test holdout; an unbiased test log of ``unbiased_test_size``
    rows is drawn from the same world.  For TSV data ``train`` is split into
    train and validation the same way and ``tests`` maps names to files.
    """

    source: str = "synth"
    world: dict = field(default_factory=dict)
    split: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    unbiased_test_size: int = 50_000
    train: str | None = None
    tests: dict = field(default_factory=dict)
    schema: dict | None = None
    valid_fraction: float = 0.1

    def __post_init__(self):
        if self.source not in ("synth", "tsv"):
            raise ValueError(f"data.source must be 'synth' or 'tsv', got {self.source!r}")
        if self.source == "synth":
            synth.WorldConfig(**self.world)  # surfaces bad keys and values now
            if len(self.split) != 3 or min(self.split) <= 0 or not math.isclose(sum(self.split), 1.0):
                raise ValueError(f"data.split must be three positive fractions summing to 1, got {self.split}")
            if self.unbiased_test_size < 0:
                raise ValueError("data.unbiased_test_size must be >= 0")
        else:
            if not self.train:
                raise ValueError("data.train is required for tsv data")
            if not self.tests:
                raise ValueError("data.tests needs at least one test file")
            if self.schema is None:
                raise ValueError("data.schema is required for tsv data")
            FeatureSchema.from_dict(self.schema)
            if not 0 < self.valid_fraction < 1:
                raise ValueError("data.valid_fraction must be in (0, 1)")

    def feature_schema(self) -> FeatureSchema:
        if self.source == "synth":
            return synth.WorldConfig(**self.world).schema()
        return FeatureSchema.from_dict(self.schema)


_SECTIONS = {
    "data": DataConfig,
    "backbone": BackboneConfig,
    "am2": AM2Config,
    "bcm": BcmConfig,
    "optim": OptimConfig,
}
_TOP_LEVEL = {"version", "name", "epochs", "seeds", "metrics", *_SECTIONS}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    am2: AM2Config = field(default_factory=AM2Config)
    bcm: BcmConfig = field(default_factory=BcmConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 3
    seeds: list = field(default_factory=lambda: [0])
    metrics: list = field(default_factory=lambda: list(SUMMARY_METRICS))
    name: str = "run"
    version: int = CONFIG_VERSION

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Build and validate; raises :class:`ConfigError` listing every problem."""
        problems = []
        if not isinstance(d, dict):
            raise ConfigError(["config must be a JSON object"])
        for key in sorted(set(d) - _TOP_LEVEL):
            problems.append(f"unknown key {key!r}")
        if d.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            problems.append(f"version must be {CONFIG_VERSION}, got {d.get('version')!r}")
        sections = {}
        for name, klass in _SECTIONS.items():
            raw = d.get(name, {})
            if not isinstance(raw, dict):
                problems.append(f"{name}: must be an object")
                continue
            known = {f.name for f in dataclasses.fields(klass)}
            unknown = sorted(set(raw) - known)
            for key in unknown:
                problems.append(f"unknown key '{name}.{key}'")
            if unknown:
                continue
            try:
                sections[name] = klass(**raw)
            except (TypeError, ValueError) as exc:
                problems.append(f"{name}: {exc}")
        epochs = d.get("epochs", 3)
        if not isinstance(epochs, int) or epochs < 1:
            problems.append(f"epochs must be a positive integer, got {epochs!r}")
        seeds = d.get("seeds", [0])
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
            problems.append(f"seeds must be a nonempty list of non-negative integers, got {seeds!r}")
        elif len(set(seeds)) != len(seeds):
            problems.append("seeds must be distinct")
        wanted = d.get("metrics", list(SUMMARY_METRICS))
        bad = [m for m in wanted if m not in SUMMARY_METRICS] if isinstance(wanted, list) else [wanted]
        if bad:
            problems.append(f"unknown metrics {bad}; choose from {list(SUMMARY_METRICS)}")
        if "data" in sections:
            schema = None
            try:
                schema = sections["data"].feature_schema()
            except (TypeError, ValueError) as exc:
                problems.append(f"data.schema: {exc}")
            am2 = sections.get("am2")
            if schema is not None and am2 is not None and am2.scenario_field not in schema.field_names:
                problems.append(f"am2.scenario_field {am2.scenario_field!r} is not a schema field")
            bcm_cfg = sections.get("bcm")
            if schema is not None and bcm_cfg is not None and bcm_cfg.scene_field is not None \
                    and bcm_cfg.scene_field not in schema.field_names:
                problems.append(f"bcm.scene_field {bcm_cfg.scene_field!r} is not a schema field")
        if problems:
            raise ConfigError(problems)
        return cls(**sections, epochs=epochs, seeds=list(seeds), metrics=list(wanted),
                   name=str(d.get("name", "run")), version=CONFIG_VERSION)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: not valid JSON ({exc})"]) from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """Hash of everything that influences results (the ``name`` does not)."""
        d = self.to_dict()
        d.pop("name")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``{"am2.w": 1e-4}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            *path, leaf = key.split(".")
            for part in path:
                if not isinstance(node.get(part), dict):
                    raise ConfigError([f"override {key!r}: no section {part!r}"])
                node = node[part]
            if leaf not in node:
                raise ConfigError([f"override {key!r}: unknown key"])
            node[leaf] = value
        return RunConfig.from_dict(d)


# ----------------------------------------------------------------------- data
@dataclass
class Splits:
    train: Dataset
    valid: Dataset
    tests: dict  # name -> Dataset
    segments: dict  # test name -> {segment name: mask}


def build_splits(data: DataConfig, seed: int) -> Splits:
    if data.source == "synth":
        cfg = synth.WorldConfig(**data.world)
        world = synth.build_world(cfg)
        log_ = synth.generate_biased_log(cfg, seed, world)
        train, valid, test = split_by_fraction(log_, data.split, tags=["train", "valid", "test"])
        tests = {"test": test}
        if data.unbiased_test_size:
            tests["unbiased_test"] = synth.generate_unbiased_log(cfg, data.unbiased_test_size, seed, world)
        segments = {
            name: {"high_bid": ds.meta["high_bid"], "normal_bid": ~ds.meta["high_bid"]}
            for name, ds in tests.items()
        }
        return Splits(train, valid, tests, segments)
    schema = FeatureSchema.from_dict(data.schema)
    full = load_tsv(data.train, schema, split_tag="train")
    train, valid = split_by_fraction(full, [1 - data.valid_fraction, data.valid_fraction], tags=["train", "valid"])
    tests = {name: load_tsv(path, schema, split_tag="test") for name, path in sorted(data.tests.items())}
    return Splits(train, valid, tests, {})


# ------------------------------------------------------------------ training
@dataclass
class TrainOutcome:
    model: CTRModel
    store: object
    best_epoch: int
    valid_auc: float
    history: list  # per-epoch dicts


def build_model(cfg: RunConfig, schema: FeatureSchema) -> CTRModel:
    return CTRModel(schema, cfg.backbone, cfg.am2)


def bcm_weights(cfg: RunConfig, train: Dataset):
    if not cfg.bcm.enabled:
        return None, None
    stats = bcm.fit_stats(train, cfg.bcm.a, cfg.bcm.b, tuple(cfg.bcm.quantiles), cfg.bcm.per_scene,
                          cfg.bcm.min_positives, cfg.bcm.scene_field)
    return bcm.apply(train, stats), stats


def epoch_seed(seed: int, epoch: int) -> int:
    return seed * 100_003 + epoch


def train_one(cfg: RunConfig, splits: Splits, seed: int) -> TrainOutcome:
    """Train for ``cfg.epochs`` epochs and keep the best-validation-AUC snapshot."""
    model = build_model(cfg, splits.train.schema)
    store = model.init_params(seed)
    weights, _ = bcm_weights(cfg, splits.train)
    loss_spec = LossSpec(cfg.am2.w if cfg.am2.enabled else 0.0, weights)
    adam = cfg.optim.adam()
    best, history = None, []
    for epoch in range(cfg.epochs):
        stats = train_epoch(model, store, splits.train, loss_spec, adam, cfg.optim.batch_size,
                            epoch_seed(seed, epoch))
        v_auc = metrics.auc(model.predict(store, splits.valid.X), splits.valid.y)
        history.append({"epoch": epoch, "loss": stats.mean_loss, "ctr_loss": stats.mean_ctr_loss,
                        "price_loss": stats.mean_price_loss, "valid_auc": v_auc})
        log.info("seed %d epoch %d loss %.5f valid auc %.5f", seed, epoch, stats.mean_loss, v_auc)
        if best is None or v_auc > best[1]:
            best = (epoch, v_auc, store.copy())
    return TrainOutcome(model, best[2], best[0], best[1], history)


def evaluate_model(model: CTRModel, store, dataset: Dataset, segments: dict | None = None) -> metrics.MetricsReport:
    pctr = model.predict(store, dataset.X)
    return metrics.evaluate(metrics.ScoredSet.from_dataset(dataset, pctr), segments)


# -------------------------------------------------------------------- results
@dataclass
class SeedResult:
    seed: int
    best_epoch: int
    valid_auc: float
    reports: dict  # test name -> MetricsReport as dict
    history: list


@dataclass
class RunResult:
    config: dict
    config_hash: str
    per_seed: list  # of SeedResult
    summary: dict = field(default_factory=dict)  # test name -> metric -> {"mean", "std"}
    run_dir: str | None = None

    @property
    def seeds(self) -> list:
        return [r.seed for r in self.per_seed]

    @property
    def test_names(self) -> list:
        return list(self.per_seed[0].reports) if self.per_seed else []

    def values(self, metric: str, test: str) -> np.ndarray:
        return np.array([_metric_value(r.reports[test], metric) for r in self.per_seed])

    def mean(self, metric: str, test: str) -> float:
        return float(np.mean(self.values(metric, test)))

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "per_seed": [asdict(r) for r in self.per_seed],
            "summary": self.summary,
        }

    @classmethod
    def from_dict(cls, d: dict, run_dir: str | None = None) -> "RunResult":
        return cls(d["config"], d["config_hash"], [SeedResult(**r) for r in d["per_seed"]], d["summary"], run_dir)

    @classmethod
    def load(cls, path) -> "RunResult":
        path = Path(path)
        if path.is_dir():
            path = path / "result.json"
        return cls.from_dict(json.loads(path.read_text()), str(path.parent))


def _metric_value(report: dict, metric: str) -> float:
    if metric.startswith("segment:"):
        _, seg, name = metric.split(":")
        return report["segments"][seg][name]
    if metric.startswith("tercile:"):
        return report["tercile_shares"][metric.split(":")[1]]
    return report[metric]


def summarize(per_seed: list, metric_names) -> dict:
    """Mean and (population) std over seeds for every test set and metric."""
    out = {}
    for test in per_seed[0].reports:
        names = list(metric_names) + [f"tercile:{t}" for t in metrics.TERCILES]
        names += [f"segment:{s}:predicted_bias" for s in per_seed[0].reports[test]["segments"]]
        out[test] = {}
        for m in names:
            vals = np.array([_metric_value(r.reports[test], m) for r in per_seed])
            out[test][m] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def run_dir_for(cfg: RunConfig, root=None) -> Path:
    return Path(root or run_root()) / f"{cfg.name}-{cfg.config_hash()}"


def run(cfg: RunConfig, root=None, force: bool = False, save_artifacts: bool = True) -> RunResult:
    """Train and evaluate every seed of ``cfg``.

    With ``save_artifacts`` the result, per-seed checkpoints and train logs
    are published atomically to :func:`run_dir_for`; if that directory
    already holds a result and ``force`` is false it is loaded instead.
    """
    target = run_dir_for(cfg, root)
    if save_artifacts and not force and (target / "result.json").exists():
        log.info("reusing %s", target)
        return RunResult.load(target)
    staging = None
    if save_artifacts:
        target.parent.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=target.parent))
    try:
        per_seed = []
        for seed in cfg.seeds:
            splits = build_splits(cfg.data, seed)
            out = train_one(cfg, splits, seed)
            reports = {
                name: evaluate_model(out.model, out.store, ds, splits.segments.get(name)).to_dict()
                for name, ds in splits.tests.items()
            }
            per_seed.append(SeedResult(seed, out.best_epoch, out.valid_auc, reports, out.history))
            if staging is not None:
                save_checkpoint(staging / f"seed{seed}" / "model", out.model, out.store,
                                {"seed": seed, "best_epoch": out.best_epoch, "config_hash": cfg.config_hash()})
                (staging / f"seed{seed}" / "train_log.json").write_text(json.dumps(out.history, indent=2))
        result = RunResult(cfg.to_dict(), cfg.config_hash(), per_seed, summarize(per_seed, cfg.metrics))
        if staging is not None:
            (staging / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
            (staging / "result.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True))
            (staging / "report.txt").write_text(format_summary(result))
            _publish(staging, target)
            staging = None
            result.run_dir = str(target)
        return result
    finally:
        if staging is not None:
            shutil.rmtree(staging, ignore_errors=True)


def _publish(staging: Path, target: Path) -> None:
    """Rename ``staging`` onto ``target``; an existing target is moved aside first."""
    if target.exists():
        old = target.with_name(f".old-{target.name}-{os.getpid()}")
        os.replace(target, old)
        os.replace(staging, target)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.replace(staging, target)


# ------------------------------------------------------------------ compare
@dataclass
class RelaImprTable:
    metrics: list
    backbones: list
    measured: dict  # metric -> backbone -> value
    base: dict
    relaimpr: dict  # metric -> backbone -> percent
    average: dict  # metric -> percent

    def rows(self) -> list:
        rows = []
        for m in self.metrics:
            rows.append([m, "Baseline"] + [self.base[m][b] for b in self.backbones] + [None])
            rows.append([m, "Measured"] + [self.measured[m][b] for b in self.backbones] + [self.average[m]])
        return rows


def relaimpr_table(measured: dict, base: dict, kinds: dict | None = None) -> RelaImprTable:
    """``measured`` and ``base`` map metric -> backbone -> value.

    Each metric uses its RelaImpr kind (``auc_like`` or ``revenue_like``) and
    the per-backbone values are averaged.
    """
    kinds = kinds or metrics.METRIC_KINDS
    if set(measured) != set(base):
        raise ValueError(f"metric sets differ: {sorted(measured)} vs {sorted(base)}")
    names = list(measured)
    backbones = list(next(iter(measured.values())))
    rel, avg = {}, {}
    for m in names:
        if m not in kinds:
            raise ValueError(f"metric {m!r} has no RelaImpr kind")
        if set(measured[m]) != set(base[m]) or set(measured[m]) != set(backbones):
            raise ValueError(f"metric {m!r}: backbone sets differ")
        rel[m] = {b: metrics.relaimpr(measured[m][b], base[m][b], kinds[m]) for b in backbones}
        avg[m] = float(np.mean(list(rel[m].values())))
    return RelaImprTable(names, backbones, measured, base, rel, avg)


def compare(result, baseline, test: str | None = None, metric_names=("auc", "cs_auc", "rev", "rev_ndcg")) -> RelaImprTable:
    """RelaImpr of ``result`` over ``baseline`` using seed means.

    Either argument may be a single :class:`RunResult` or a mapping from a
    backbone label to one; the labels must match.
    """
    if isinstance(result, RunResult):
        result, baseline = {"model": result}, {"model": baseline}
    if set(result) != set(baseline):
        raise ValueError("result and baseline cover different backbones")
    any_run = next(iter(result.values()))
    test = test or ("unbiased_test" if "unbiased_test" in any_run.test_names else any_run.test_names[0])
    measured = {m: {b: r.mean(m, test) for b, r in result.items()} for m in metric_names}
    base = {m: {b: r.mean(m, test) for b, r in baseline.items()} for m in metric_names}
    return relaimpr_table(measured, base)


# -------------------------------------------------------------------- sweep
@dataclass
class SweepResult:
    points: list  # of (overrides, RunResult)
    best_index: int

    @property
    def best(self):
        return self.points[self.best_index]

    def to_dict(self) -> dict:
        return {
            "best_index": self.best_index,
            "points": [
                {"overrides": o, "run_dir": r.run_dir, "config_hash": r.config_hash,
                 "valid_auc": mean_valid_auc(r), "summary": r.summary}
                for o, r in self.points
            ],
        }


def mean_valid_auc(result: RunResult) -> float:
    return float(np.mean([r.valid_auc for r in result.per_seed]))


def grid_points(grid: dict) -> list:
    """Cartesian product of ``{"am2.w": [..], "bcm.a": [..]}`` as override dicts."""
    import itertools

    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def sweep(cfg: RunConfig, grid: dict, root=None, force: bool = False) -> SweepResult:
    """One child run per grid point; the best point has the highest mean
    validation AUC (price error is never used for selection)."""
    points = []
    for overrides in grid_points(grid):
        child = cfg.with_overrides(overrides)
        points.append((overrides, run(child, root=root, force=force)))
    best = max(range(len(points)), key=lambda i: mean_valid_auc(points[i][1]))
    return SweepResult(points, best)


# ------------------------------------------------------------------ reports
def format_summary(result: RunResult) -> str:
    lines = [f"run {result.config.get('name')} ({result.config_hash}), seeds {result.seeds}"]
    for test, table in result.summary.items():
        lines.append(f"[{test}]")
        for m, s in table.items():
            lines.append(f"  {m:<32s} {s['mean']:.6g} +- {s['std']:.3g}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "-"
    return f"{v:.4f}" if abs(v) < 10 else f"{v:.3f}"


def format_table(table: RelaImprTable) -> str:
    """Plain-text metric x model grid with a RelaImpr average column."""
    header = ["Metric", "Model", *table.backbones, "RelaImpr (Avg)"]
    body = []
    for row in table.rows():
        cells = row[:2] + [_fmt(v) for v in row[2:-1]]
        cells.append("-" if row[-1] is None else f"{row[-1]:.2f}%")
        body.append(cells)
    widths = [max(len(str(r[i])) for r in [header] + body) for i in range(len(header))]
    line = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths))
    return "\n".join([line(header), line(["-" * w for w in widths])] + [line(r) for r in body]) + "\n"


def table_csv(table: RelaImprTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "model", *table.backbones, "relaimpr_avg_percent"])
    for row in table.rows():
        w.writerow([row[0], row[1]] + [repr(v) for v in row[2:-1]] + ["" if row[-1] is None else repr(row[-1])])
    return buf.getvalue()
