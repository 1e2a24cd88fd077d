"""Experiment configs, the stage pipeline, the method matrix, sweeps and reports."""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .adapters import POLICIES, AdapterStack, pack, seal_stage
from .data import (DriftSpec, assign_codes, generate_drift, ingest_csv, make_pairs,
                   read_item_clusters, split_chronological, split_user_disjoint)
from .decode_eval import KS, evaluate_pairs
from .errors import ConfigError, PesoError, StageError
from .model import (SITES, Anchor, ModelDims, ToyRecModel, TrainConfig, encode,
                    init_stacks, prepare_inflora, stage_rng, train_stage)
from .proximal import REGULARIZERS, canonical_kind

log = logging.getLogger(__name__)

PESO_DEFAULT_REG = "softmax_kl_per_module"
METHODS = ("pretrain_only",) + POLICIES[:-1] + tuple(f"peso:{k}" for k in REGULARIZERS)


def method_spec(method: str):
    """``(policy, regularizer, trains)`` for a method id."""
    if method == "pretrain_only":
        return "single_evolving", None, False
    if method == "peso" or method.startswith("peso:"):
        kind = method.partition(":")[2] or PESO_DEFAULT_REG
        try:
            kind = canonical_kind(kind)
        except PesoError as exc:
            raise ConfigError(str(exc)) from exc
        return "peso", kind, True
    if method in POLICIES:
        return method, None, True
    raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")


# ------------------------------------------------------------------ config

@dataclass
class DataConfig:
    source: str = "drift"            # drift | csv
    csv_path: str = None
    clusters_path: str = None        # optional item -> cluster CSV for ingested logs
    n_clusters: int = 16             # hash clusters when no cluster file is given
    drift: DriftSpec = field(default_factory=DriftSpec)
    split: str = "chronological"     # chronological | user_disjoint
    n_stages: int = 5
    pretrain_frac: float = 0.6
    window: int = 20


@dataclass
class EvalConfig:
    beam_width: int = 20
    ks: tuple = KS
    validate: bool = False           # decode validation pairs after each stage
    report_stages: tuple = None      # default: all continual stages


@dataclass
class SweepConfig:
    lambda_values: tuple = (0.5, 1.0, 2.0, 5.0, 8.0)
    lr_scales: tuple = (0.1,)
    seeds: tuple = (0,)


@dataclass
class ExperimentConfig:
    method: str = "peso"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelDims = field(default_factory=ModelDims)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    out: str = "runs"

    def __post_init__(self):
        method_spec(self.method)
        if self.data.source not in ("drift", "csv"):
            raise ConfigError(f"unknown data source {self.data.source!r}")
        if self.data.source == "csv" and not self.data.csv_path:
            raise ConfigError("csv source needs data.csv_path")
        if self.data.split not in ("chronological", "user_disjoint"):
            raise ConfigError(f"unknown split {self.data.split!r}")
        if self.data.n_stages < 2:
            raise ConfigError("need at least two stages")

    def with_method(self, method, **train):
        cfg = copy.deepcopy(self)
        cfg.method = method
        for k, v in train.items():
            setattr(cfg.train, k, v)
        method_spec(method)
        return cfg

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw or {})
        try:
            data = dict(raw.pop("data", {}) or {})
            drift = _build(DriftSpec, data.pop("drift", {}))
            sections = {
                "data": _build(DataConfig, data, drift=drift),
                "model": _build(ModelDims, raw.pop("model", {})),
                "train": _build(TrainConfig, raw.pop("train", {})),
                "eval": _build(EvalConfig, raw.pop("eval", {})),
                "sweep": _build(SweepConfig, raw.pop("sweep", {})),
            }
            return _build(cls, raw, **sections)
        except PesoError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def loads(cls, text):
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"unreadable config: {exc}") from exc
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.loads(text)

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def _build(kind, raw, **nested):
    raw = dict(raw or {})
    names = {f.name: f for f in dataclasses.fields(kind)}
    unknown = set(raw) - set(names)
    if unknown:
        raise ConfigError(f"unknown {kind.__name__} keys: {sorted(unknown)}")
    for k, v in raw.items():
        if isinstance(v, list):
            raw[k] = tuple(v)
    raw.update(nested)
    try:
        return kind(**raw)
    except TypeError as exc:
        raise ConfigError(f"{kind.__name__}: {exc}") from exc


# ------------------------------------------------------------------ data

@dataclass
class StageData:
    log: object
    codes: np.ndarray
    trie: object
    blocks: list          # StageBlock per stage
    train: list           # encoded Batch per stage
    val: list


def _hash_clusters(n_items, n_clusters):
    return np.arange(n_items) % n_clusters


def build_data(config: ExperimentConfig, seed=None) -> StageData:
    dc = config.data
    seed = config.seed if seed is None else seed
    if dc.source == "drift":
        spec = dataclasses.replace(dc.drift, seed=seed, stage_sizes=tuple(dc.drift.stage_sizes))
        ilog = generate_drift(spec)
        clusters = ilog.item_clusters
    else:
        ilog = ingest_csv(dc.csv_path)
        clusters = (read_item_clusters(ilog, dc.clusters_path) if dc.clusters_path
                    else _hash_clusters(ilog.n_items, dc.n_clusters))
    dims = config.model
    codes, trie = assign_codes(clusters, dims.L, dims.K, seed)
    if dc.split == "chronological":
        inputs = split_chronological(ilog, dc.n_stages, dc.pretrain_frac)
    else:
        inputs = split_user_disjoint(ilog, dc.n_stages, dc.pretrain_frac, seed=seed)
    blocks = [make_pairs(b, ilog, dc.window) for b in inputs]
    train = [encode(b.pairs.histories, b.pairs.targets, codes, dims.ks, dc.window) for b in blocks]
    val = [encode(b.val_pairs.histories, b.val_pairs.targets, codes, dims.ks, dc.window)
           for b in blocks]
    return StageData(ilog, codes, trie, blocks, train, val)


# ------------------------------------------------------------------ reports

@dataclass
class RunReport:
    method: str
    seed: int
    config_text: str
    test: dict = field(default_factory=dict)     # stage -> {(metric, k): value}
    val: dict = field(default_factory=dict)
    logs: list = field(default_factory=list)
    wall_clock: float = 0.0
    failed: str = None
    final_params: object = None                  # ParamVector of the live adapters

    def averages(self, stages=None, which="test"):
        table = self.test if which == "test" else self.val
        stages = sorted(table) if stages is None else [s for s in stages if s in table]
        if not stages:
            return {}
        keys = table[stages[0]].keys()
        return {key: float(np.mean([table[s][key] for s in stages])) for key in keys}

    def rows(self, which="test"):
        table = self.test if which == "test" else self.val
        out = []
        for stage in sorted(table):
            for (metric, k), value in sorted(table[stage].items()):
                out.append((stage, self.method, metric, k, value))
        return out

    def payload(self):
        """Everything except wall-clock, in a JSON-friendly form."""
        def tab(t):
            return {str(s): {f"{m}@{k}": v for (m, k), v in sorted(d.items())}
                    for s, d in sorted(t.items())}
        return {"method": self.method, "seed": self.seed, "config": self.config_text,
                "test": tab(self.test), "val": tab(self.val), "logs": self.logs,
                "averages": {f"{m}@{k}": v for (m, k), v in sorted(self.averages().items())},
                "failed": self.failed}

    def to_dict(self):
        out = self.payload()
        out["wall_clock"] = self.wall_clock
        return out


CSV_COLUMNS = ("stage", "method", "metric", "k", "value")


def metrics_csv(reports, which="test") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rep in reports:
        for stage, method, metric, k, value in rep.rows(which):
            w.writerow([stage, method, metric, k, repr(float(value))])
    return buf.getvalue()


def read_metrics_csv(path):
    """(stage, method, metric, k) -> value."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[(int(row["stage"]), row["method"], row["metric"], int(row["k"]))] = float(row["value"])
    return out


def stage_range_average(table, stages):
    """Average a read_metrics_csv table over ``stages`` per (method, metric, k)."""
    acc = {}
    for (stage, method, metric, k), v in table.items():
        if stage in stages:
            acc.setdefault((method, metric, k), []).append(v)
    return {key: float(np.mean(v)) for key, v in sorted(acc.items())}


# ------------------------------------------------------------------ pipeline

@dataclass
class Pretrained:
    model: ToyRecModel
    stacks: dict
    log: dict


def pretrain(config: ExperimentConfig, data: StageData) -> Pretrained:
    rng = stage_rng(config.seed, 0)
    model = ToyRecModel.init(config.model, rng)
    stacks = init_stacks(model, "single_evolving", config.model.rank, rng)
    tc = dataclasses.replace(config.train, lam=0.0, regularizer=None, seed=config.seed)
    try:
        stacks, slog = train_stage(model, stacks, data.train[0], None, tc, 1, data.val[0])
    except PesoError as exc:
        raise StageError(1, exc) from exc
    return Pretrained(model, stacks, slog.to_dict())


def _evaluate(model, stacks, block, data, config, which):
    pairs = block.test_pairs if which == "test" else block.val_pairs
    return evaluate_pairs(model, stacks, pairs, data.trie, config.eval.ks, config.eval.beam_width)


def run_pipeline(config: ExperimentConfig, data: StageData = None, pretrained: Pretrained = None,
                 checkpoint_dir=None, resume=None) -> RunReport:
    """Pretrain on block 1, then adapt through blocks 2..T with the configured method.

    ``pretrained`` (from :func:`pretrain` on the same data/seed) skips stage 1.
    ``resume`` is a :class:`~peso_cl.checkpoint.Checkpoint` to continue from.
    """
    from .checkpoint import save_checkpoint

    t0 = time.perf_counter()
    policy, kind, trains = method_spec(config.method)
    data = data or build_data(config)
    report = RunReport(config.method, config.seed, config.dumps())
    tc = dataclasses.replace(config.train, policy=policy, regularizer=kind, seed=config.seed,
                             lam=config.train.lam if kind else 0.0)
    n_stages = len(data.blocks)
    if resume is not None:
        model, stacks, start = resume.model, resume.stacks, resume.stage + 1
        report.logs = list(resume.logs)
    else:
        pre = pretrained or pretrain(config, data)
        model = pre.model.copy()
        report.logs.append(pre.log)
        sealed = {}
        for s in SITES:
            base = AdapterStack(s, policy, pre.stacks[s].live.copy())
            sealed[s] = seal_stage(base, base.live, rng=stage_rng(config.seed, 1, 1 + SITES.index(s)))
        stacks, start = sealed, 2
        if checkpoint_dir:
            save_checkpoint(Path(checkpoint_dir) / "stage1.npz", model, stacks, config, 1,
                            report.logs)
    for t in range(start, n_stages + 1):
        block = data.blocks[t - 1]
        try:
            if trains:
                anchor = Anchor.of(stacks)
                if stacks["enc"].spec.family == "inf":
                    prepare_inflora(model, stacks, data.train[t - 1])
                stacks, slog = train_stage(model, stacks, data.train[t - 1], anchor, tc, t)
                entry = slog.to_dict()
                entry.update(displacement(pack([stacks[s] for s in SITES]), anchor.v_prev))
                report.logs.append(entry)
            report.test[t] = _evaluate(model, stacks, block, data, config, "test")
            if config.eval.validate:
                report.val[t] = _evaluate(model, stacks, block, data, config, "val")
            if trains:
                stacks = {s: seal_stage(stacks[s], stacks[s].live,
                                        rng=stage_rng(config.seed, t, 1 + SITES.index(s)),
                                        sd_magnitude=tc.sd_magnitude)
                          for s in SITES}
        except PesoError as exc:
            raise StageError(t, exc) from exc
        if checkpoint_dir:
            save_checkpoint(Path(checkpoint_dir) / f"stage{t}.npz", model, stacks, config, t,
                            report.logs)
    report.final_params = pack([stacks[s] for s in SITES])
    report.wall_clock = time.perf_counter() - t0
    return report


def displacement(v_t, v_prev):
    """|v_t - v_prev| in full and with each group's mean shift removed.

    Softmax-KL penalties cannot see a constant shift inside a group, so the
    second number is the part of the move those penalties constrain.
    """
    v_t.require_layout(v_prev)
    full = 0.0
    centred = 0.0
    for (_, a), (_, b) in zip(v_t.groups, v_prev.groups):
        d = a - b
        full += float(d @ d)
        d = d - d.mean()
        centred += float(d @ d)
    return {"displacement": float(np.sqrt(full)), "displacement_mod_shift": float(np.sqrt(centred))}


def run_methods(config: ExperimentConfig, methods, data=None, pretrained=None, **train):
    """Several methods on one seed, sharing data and the stage-1 model."""
    data = data or build_data(config)
    pretrained = pretrained or pretrain(config, data)
    return [run_pipeline(config.with_method(m, **train), data, pretrained) for m in methods]


# ------------------------------------------------------------------ sweeps

def sweep_cells(config: ExperimentConfig):
    sw = config.sweep
    if not sw.lambda_values or not sw.lr_scales or not sw.seeds:
        raise ConfigError("sweep lists must be nonempty")
    return [(float(lam), float(lrs), int(seed))
            for seed in sw.seeds for lam in sw.lambda_values for lrs in sw.lr_scales]


def _run_cell(args):
    config_text, lam, lrs, seed = args
    cfg = ExperimentConfig.loads(config_text)
    cfg.seed = seed
    cfg.train.lam = lam
    cfg.train.lr_scale = lrs
    try:
        rep = run_pipeline(cfg)
    except PesoError as exc:
        rep = RunReport(cfg.method, seed, cfg.dumps(), failed=f"{type(exc).__name__}: {exc}")
    rep.final_params = None
    return rep


@dataclass
class SweepResult:
    cells: list       # (lam, lr_scale, seed)
    reports: list

    def summary_rows(self, stages=None, which="test"):
        groups = {}
        for (lam, lrs, seed), rep in zip(self.cells, self.reports):
            g = groups.setdefault((lam, lrs), {"values": {}, "failed": 0})
            if rep.failed:
                g["failed"] += 1
                continue
            for key, v in rep.averages(stages, which).items():
                g["values"].setdefault(key, []).append(v)
        rows = []
        for (lam, lrs), g in groups.items():
            for (metric, k), vals in sorted(g["values"].items()):
                rows.append((lam, lrs, metric, k, float(np.mean(vals)), float(np.std(vals)),
                             len(vals), g["failed"]))
        return rows

    def summary_csv(self, stages=None, which="test") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("lambda", "lr_scale", "metric", "k", "mean", "std", "n", "failed"))
        for row in self.summary_rows(stages, which):
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])
        return buf.getvalue()


def run_sweep(config: ExperimentConfig, jobs=1) -> SweepResult:
    """Cartesian λ x lr_scale x seed grid; failures are recorded and the rest continue."""
    cells = sweep_cells(config)
    text = config.dumps()
    args = [(text, lam, lrs, seed) for lam, lrs, seed in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_run_cell, args))
    else:
        reports = [_run_cell(a) for a in args]
    for (lam, lrs, seed), rep in zip(cells, reports):
        if rep.failed:
            log.warning("cell lambda=%s lr_scale=%s seed=%s failed: %s", lam, lrs, seed, rep.failed)
    return SweepResult(cells, reports)


# ------------------------------------------------------------------ benchmark

BASELINES = ("pretrain_only",) + POLICIES[:-1]


@dataclass
class BenchmarkResult:
    seeds: list
    lambdas: tuple
    lr_scales: tuple
    reports: dict = field(default_factory=dict)   # (seed, label) -> RunReport

    def mean(self, label, which="test", key=("ndcg", 10), stages=None):
        vals = [self.reports[(s, label)].averages(stages, which)[key] for s in self.seeds]
        return float(np.mean(vals))

    def best_lambda(self, key=("ndcg", 10)):
        """λ with the highest seed-mean validation metric (first one on ties)."""
        scores = [self.mean(f"peso@{lam!r}", "val", key) for lam in self.lambdas]
        return self.lambdas[int(np.argmax(scores))]

    def csv(self, seed, which="test"):
        labels = sorted(lbl for s, lbl in self.reports if s == seed)
        reps = []
        for lbl in labels:
            rep = copy.copy(self.reports[(seed, lbl)])
            rep.method = lbl
            reps.append(rep)
        return metrics_csv(reps, which)


def run_benchmark(config: ExperimentConfig, seeds, lambdas=(0.5, 1.0, 2.0, 5.0, 8.0),
                  lr_scales=(0.05, 0.1, 1.0), baselines=BASELINES) -> BenchmarkResult:
    """The comparison matrix per seed, sharing the stage-1 model across methods.

    Labels: baseline method ids, ``peso@<λ>`` for the PESO λ grid and
    ``single_evolving@lr<s>`` for the lr-scale grid. Grid runs also decode
    validation pairs, which drive λ selection.
    """
    res = BenchmarkResult(list(seeds), tuple(lambdas), tuple(lr_scales))
    for seed in seeds:
        cfg = copy.deepcopy(config)
        cfg.seed = int(seed)
        data = build_data(cfg)
        pre = pretrain(cfg, data)
        for m in baselines:
            res.reports[(seed, m)] = run_pipeline(cfg.with_method(m), data, pre)
        grid = copy.deepcopy(cfg)
        grid.eval.validate = True
        for lam in lambdas:
            rep = run_pipeline(grid.with_method("peso", lam=float(lam)), data, pre)
            res.reports[(seed, f"peso@{lam!r}")] = rep
        for lrs in lr_scales:
            rep = run_pipeline(grid.with_method("single_evolving", lr_scale=float(lrs)), data, pre)
            res.reports[(seed, f"single_evolving@lr{lrs!r}")] = rep
        log.info("benchmark seed %s done", seed)
    return res
