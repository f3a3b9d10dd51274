"""Experiment orchestration: configs, single runs, sweeps, CSV reports.

Config files are flat ``key = value`` documents with dotted keys
(``palm.alpha = 0.5``) and JSON-encoded values, one key per line; ``#``
starts a comment. Every key can be overridden with ``--set key=value`` on
the command line.

Per-batch CSV columns (fixed order, LF endings, no quoting)::

    run_id,method,protocol,seed,batch,domain,severity,n_selected,
    loss_uncert,loss_entropy,loss_consist,error

``error`` is the error of the predictions made by the forward pass that also
drives that batch's adaptation step (before the parameter update).
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import itertools
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import baselines as bl
from . import network as nw
from . import shiftbench as sb
from .palm import PalmConfig, PalmState, palm_step

CSV_COLUMNS = (
    "run_id", "method", "protocol", "seed", "batch", "domain", "severity",
    "n_selected", "loss_uncert", "loss_entropy", "loss_consist", "error",
)
SUMMARY_COLUMNS = ("run_id", "method", "protocol", "seed", "params", "overall_error", "diverged")
DOMAIN_COLUMNS = ("run_id", "method", "protocol", "seed", "domain", "error")
ABLATION_COLUMNS = ("config_id", "method", "protocol", "params", "n_seeds", "mean_error", "std_error")
METHODS = ("palm", "source", "bn-stats", "tent-continual", "surgical", "law")
# the LAW baseline reproduces only the Fisher accumulation, so outputs carry a distinct label
METHOD_LABELS = {"law": "law-style"}
ETA_GRID = (0, 0.05, 0.1, 0.3, 0.5, 0.7, 1.0, 1.5, 2, 3, 4, 5)


class ConfigError(ValueError):
    pass


class SnapshotMissing(FileNotFoundError):
    pass


# ---------------------------------------------------------------- config

@dataclass
class DatasetSpec:
    num_classes: int = 5
    dim: int = 8
    n: int = 5000
    seed: int = 0
    test_fraction: float = 0.2
    separation: float = 2.5


@dataclass
class ScenarioSpec:
    protocol: str = "ctta"
    families: list = field(default_factory=lambda: list(sb.FAMILIES))
    batch_size: int = 100
    batches_per_step: int = 1


@dataclass
class SourceSpec:
    hidden: list = field(default_factory=lambda: [32, 32, 32])
    epochs: int = 200
    lr: float = 1e-2
    seed: int = 0
    snapshot: str = ""


@dataclass
class BaselineSpec:
    lr: float = 5e-4
    tent_lr: float = 1e-3
    surgical_layers: list = field(default_factory=lambda: [0, 1])


@dataclass
class RunConfig:
    method: str = "palm"
    seeds: list = field(default_factory=lambda: [0])
    out_dir: str = "palm_out"
    palm: PalmConfig = field(default_factory=lambda: PalmConfig(eta=0.03))
    baseline: BaselineSpec = field(default_factory=BaselineSpec)
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    source: SourceSpec = field(default_factory=SourceSpec)

    _SECTIONS = ("palm", "baseline", "scenario", "dataset", "source")

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")

    def to_flat(self) -> dict:
        flat = {"method": self.method, "seeds": list(self.seeds), "out_dir": self.out_dir}
        for section in self._SECTIONS:
            for k, v in dataclasses.asdict(getattr(self, section)).items():
                flat[f"{section}.{k}"] = v
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        top = {}
        sections: dict[str, dict] = {s: {} for s in cls._SECTIONS}
        for key, value in flat.items():
            if "." in key:
                section, name = key.split(".", 1)
                if section not in sections:
                    raise ConfigError(f"unknown config section in key {key!r}")
                sections[section][name] = value
            elif key in ("method", "seeds", "out_dir"):
                top[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        builders = {"palm": PalmConfig, "baseline": BaselineSpec, "scenario": ScenarioSpec,
                    "dataset": DatasetSpec, "source": SourceSpec}
        kwargs = dict(top)
        for section, values in sections.items():
            try:
                kwargs[section] = builders[section](**values)
            except TypeError as exc:
                raise ConfigError(f"bad key in section {section!r}: {exc}") from None
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if "seeds" in kwargs and isinstance(kwargs["seeds"], int):
            kwargs["seeds"] = [kwargs["seeds"]]
        return cls(**kwargs)

    def with_updates(self, updates: dict) -> "RunConfig":
        flat = self.to_flat()
        for k in updates:
            if k not in flat:
                raise ConfigError(f"unknown config key {k!r}")
        flat.update(updates)
        return RunConfig.from_flat(flat)

    def dumps(self) -> str:
        return "".join(f"{k} = {_encode(v)}\n" for k, v in self.to_flat().items())

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        flat = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            flat[key] = parse_value(value)
        defaults = cls().to_flat()
        for k in flat:
            if k not in defaults:
                raise ConfigError(f"unknown config key {k!r}")
        defaults.update(flat)
        return cls.from_flat(defaults)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text())

    def config_id(self) -> str:
        """Hash of everything that affects results except the seed list and output dir."""
        flat = self.to_flat()
        for k in ("seeds", "out_dir", "source.snapshot"):
            flat.pop(k)
        return hashlib.sha256(json.dumps(flat, sort_keys=True).encode()).hexdigest()[:10]

    def run_prefix(self) -> str:
        return f"{method_label(self.method)}-{self.scenario.protocol}-{self.config_id()}"

    def run_id(self, seed: int) -> str:
        return f"{self.run_prefix()}-s{seed}"


def _encode(v) -> str:
    return json.dumps(v)


def parse_value(text: str):
    """JSON value, falling back to the bare string (so ``protocol=ctta`` works)."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        if text in ("inf", "+inf"):
            return math.inf
        return text


def parse_set(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v.strip())
    return out


def method_label(method: str) -> str:
    return METHOD_LABELS.get(method, method)


# ---------------------------------------------------------------- resources

def make_dataset(spec: DatasetSpec) -> sb.CleanDataset:
    return sb.make_clean(spec.num_classes, spec.dim, spec.n, spec.seed,
                         test_fraction=spec.test_fraction, separation=spec.separation)


def source_key(cfg: RunConfig) -> str:
    payload = json.dumps({"dataset": dataclasses.asdict(cfg.dataset),
                          "source": {k: v for k, v in dataclasses.asdict(cfg.source).items() if k != "snapshot"}},
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:10]


def snapshot_path(cfg: RunConfig) -> Path:
    if cfg.source.snapshot:
        return Path(cfg.source.snapshot)
    return Path(output_dir(cfg)) / f"source-{source_key(cfg)}.palmnet"


def output_dir(cfg: RunConfig) -> str:
    return os.environ.get("PALM_OUT") or cfg.out_dir


def build_network(cfg: RunConfig) -> nw.Network:
    return nw.build_mlp(cfg.dataset.dim, cfg.source.hidden, cfg.dataset.num_classes, cfg.source.seed)


def train_source_model(cfg: RunConfig, dataset: sb.CleanDataset | None = None, save: bool = True) -> nw.Network:
    dataset = dataset or make_dataset(cfg.dataset)
    net = build_network(cfg)
    nw.train_source(net, dataset, cfg.source.epochs, cfg.source.lr, seed=cfg.source.seed)
    if save:
        path = snapshot_path(cfg)
        path.parent.mkdir(parents=True, exist_ok=True)
        net.save(path)
    return net


class Workspace:
    """Caches datasets, source snapshots and streams so runs in one session share them.

    Streams are cached per (dataset, scenario, seed): every method run on the
    same seed consumes the very same scenario object.
    """

    def __init__(self, train_missing: bool = False):
        self.train_missing = train_missing
        self._datasets: dict = {}
        self._sources: dict = {}
        self._streams: dict = {}

    def dataset(self, cfg: RunConfig) -> sb.CleanDataset:
        key = json.dumps(dataclasses.asdict(cfg.dataset), sort_keys=True)
        if key not in self._datasets:
            self._datasets[key] = make_dataset(cfg.dataset)
        return self._datasets[key]

    def source_snapshot(self, cfg: RunConfig) -> dict:
        key = (source_key(cfg), cfg.source.snapshot)
        if key not in self._sources:
            path = snapshot_path(cfg)
            if path.exists():
                net = build_network(cfg)
                net.load(path)
            elif self.train_missing:
                net = train_source_model(cfg, self.dataset(cfg))
            else:
                raise SnapshotMissing(
                    f"no source snapshot at {path}; run `palm train-source` with this config first "
                    "(or pass --train-source)")
            self._sources[key] = net.snapshot()
        return self._sources[key]

    def stream(self, cfg: RunConfig, seed: int) -> sb.StreamScenario:
        sc = cfg.scenario
        key = (json.dumps(dataclasses.asdict(cfg.dataset), sort_keys=True),
               json.dumps(dataclasses.asdict(sc), sort_keys=True), seed)
        if key not in self._streams:
            extra = {"batches_per_step": sc.batches_per_step} if sc.protocol == "gtta" else {}
            self._streams[key] = sb.build_stream(sc.protocol, self.dataset(cfg), sc.families,
                                                 sc.batch_size, seed, **extra)
        return self._streams[key]


# ---------------------------------------------------------------- running

@dataclass
class RunReport:
    run_id: str
    config_id: str
    method: str
    protocol: str
    seed: int
    rows: list = field(default_factory=list)
    params: dict = field(default_factory=dict)
    diverged: bool = False
    wall_time: float = 0.0

    @property
    def per_domain(self) -> dict[str, float]:
        errs: dict[str, list] = {}
        for r in self.rows:
            errs.setdefault(r["domain"], []).append(r["error"])
        return {d: float(np.mean(v)) for d, v in errs.items()}

    @property
    def overall_error(self) -> float:
        """Mean of the per-domain mean errors."""
        pd = self.per_domain
        return float(np.mean(list(pd.values()))) if pd else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n", quoting=csv.QUOTE_NONE, escapechar="\\")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def make_stepper(cfg: RunConfig, net: nw.Network, augmenter):
    """Return ``step(batch) -> StepReport`` for the configured method."""
    m = cfg.method
    b = cfg.baseline
    if m == "palm":
        state = PalmState()
        return lambda batch: palm_step(net, state, cfg.palm, batch, augmenter)
    if m == "source":
        return lambda batch: bl.source_step(net, batch)
    if m == "bn-stats":
        return lambda batch: bl.bn_stats_step(net, batch)
    if m == "tent-continual":
        return lambda batch: bl.tent_step(net, batch, b.tent_lr, cfg.palm.optimizer)
    if m == "surgical":
        return lambda batch: bl.surgical_step(net, batch, augmenter, b.lr, cfg.palm.lam,
                                              b.surgical_layers, cfg.palm.entropy_gate_factor,
                                              cfg.palm.optimizer)
    if m == "law":
        law = bl.LawState()
        return lambda batch: bl.law_step(net, law, batch, augmenter, b.lr, cfg.palm.lam,
                                         cfg.palm.entropy_gate_factor, cfg.palm.optimizer)
    raise ConfigError(f"unknown method {m!r}")


def run(cfg: RunConfig, seed: int | None = None, workspace: Workspace | None = None,
        params: dict | None = None) -> RunReport:
    """Adapt online over the configured stream for one seed."""
    seed = cfg.seeds[0] if seed is None else seed
    ws = workspace or Workspace()
    dataset = ws.dataset(cfg)
    stream = ws.stream(cfg, seed)
    net = build_network(cfg)
    net.restore(ws.source_snapshot(cfg))
    net.reset_adaptation_state()
    augmenter = sb.Augmenter(dataset.feature_std, seed)
    step = make_stepper(cfg, net, augmenter)
    report = RunReport(cfg.run_id(seed), cfg.run_prefix(), method_label(cfg.method),
                       cfg.scenario.protocol, seed, params=dict(params or {}))
    t0 = time.perf_counter()
    for batch in stream:
        try:
            out = step(batch)
        except ad.NonFiniteError:
            report.diverged = True
            break
        error = float(np.mean(out.predictions != stream.labels(batch)))
        report.rows.append({
            "run_id": report.run_id, "method": report.method, "protocol": report.protocol,
            "seed": seed, "batch": batch.index, "domain": batch.domain, "severity": batch.severity,
            "n_selected": out.n_selected, "loss_uncert": float(out.loss_uncert),
            "loss_entropy": float(out.loss_entropy), "loss_consist": float(out.loss_consist),
            "error": error,
        })
    report.wall_time = time.perf_counter() - t0
    return report


def run_all(cfg: RunConfig, workspace: Workspace | None = None) -> list[RunReport]:
    ws = workspace or Workspace()
    return [run(cfg, s, ws) for s in cfg.seeds]


def expand_grid(grid: dict) -> list[dict]:
    """Cartesian product of a ``key -> values`` mapping, keys in the given order.

    The special key ``seeds`` is kept out of the product and returned
    separately by :func:`sweep`.
    """
    keys = [k for k in grid if k != "seeds"]
    values = [list(grid[k]) if isinstance(grid[k], (list, tuple, range)) else [grid[k]] for k in keys]
    return [dict(zip(keys, combo)) for combo in itertools.product(*values)]


def sweep(base: RunConfig, grid: dict, workspace: Workspace | None = None) -> list[RunReport]:
    """Run every grid cell for every seed; cells run in grid order, seeds inner."""
    ws = workspace or Workspace()
    seeds = list(grid.get("seeds", base.seeds))
    reports = []
    for cell in expand_grid(grid):
        cfg = base.with_updates(cell)
        for seed in seeds:
            reports.append(run(cfg, seed, ws, params=cell))
    return reports


# ---------------------------------------------------------------- reporting

def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n", quoting=csv.QUOTE_NONE, escapechar="\\")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _params_text(params: dict) -> str:
    # ';' separated so the field never contains the CSV delimiter
    return ";".join(f"{k}={_encode(v)}" for k, v in params.items())


def summarize(reports) -> list[dict]:
    """Group runs by configuration and aggregate over seeds (sample std, ddof=1)."""
    groups: dict[str, list[RunReport]] = {}
    for r in reports:
        groups.setdefault(r.config_id, []).append(r)
    out = []
    for cid, rs in groups.items():
        errs = np.array([r.overall_error for r in rs])
        out.append({
            "config_id": cid, "method": rs[0].method, "protocol": rs[0].protocol,
            "params": rs[0].params, "n_seeds": len(rs), "mean_error": float(errs.mean()),
            "std_error": float(errs.std(ddof=1)) if len(rs) > 1 else 0.0,
        })
    return out


def report(reports, out_dir, prefix: str = "") -> dict[str, Path]:
    """Write run CSVs, the summary, per-domain table, ablation table and plot data.

    Returns the paths written, keyed by kind.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = list(reports)
    paths: dict[str, Path] = {}
    runs_dir = out / "runs"
    for r in reports:
        runs_dir.mkdir(exist_ok=True)
        r.write_csv(runs_dir / f"{r.run_id}.csv")
    paths["summary"] = out / f"{prefix}summary.csv"
    _write_rows(paths["summary"], SUMMARY_COLUMNS,
                [(r.run_id, r.method, r.protocol, r.seed, _params_text(r.params),
                  r.overall_error, int(r.diverged)) for r in reports])
    paths["per_domain"] = out / f"{prefix}per_domain.csv"
    _write_rows(paths["per_domain"], DOMAIN_COLUMNS,
                [(r.run_id, r.method, r.protocol, r.seed, d, e)
                 for r in reports for d, e in r.per_domain.items()])
    groups = summarize(reports)
    paths["ablation"] = out / f"{prefix}ablation.csv"
    _write_rows(paths["ablation"], ABLATION_COLUMNS,
                [(g["config_id"], g["method"], g["protocol"], _params_text(g["params"]),
                  g["n_seeds"], g["mean_error"], g["std_error"]) for g in groups])
    # one plot-data file per swept key that varies on its own
    keys = sorted({k for g in groups for k in g["params"]})
    for key in keys:
        pts = [(g["params"][key], g["mean_error"], g["std_error"]) for g in groups
               if key in g["params"] and len(g["params"]) == 1]
        if not pts:
            continue
        path = out / f"{prefix}plot_{key.replace('.', '_')}.dat"
        with open(path, "w", newline="\n") as fh:
            fh.write("# x mean_error std_error\n")
            for x, m, s in pts:
                fh.write(f"{_encode(x)} {m!r} {s!r}\n")
        paths[f"plot:{key}"] = path
    return paths


def load_run_csv(path) -> RunReport:
    """Rebuild a :class:`RunReport` from a per-batch CSV written by :meth:`RunReport.write_csv`."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no rows")
    first = rows[0]
    run_id = first["run_id"]
    config_id = run_id.rsplit("-s", 1)[0]
    parsed = []
    for r in rows:
        parsed.append({
            "run_id": r["run_id"], "method": r["method"], "protocol": r["protocol"],
            "seed": int(r["seed"]), "batch": int(r["batch"]), "domain": r["domain"],
            "severity": int(r["severity"]), "n_selected": int(r["n_selected"]),
            "loss_uncert": float(r["loss_uncert"]), "loss_entropy": float(r["loss_entropy"]),
            "loss_consist": float(r["loss_consist"]), "error": float(r["error"]),
        })
    return RunReport(run_id, config_id, first["method"], first["protocol"], int(first["seed"]), parsed)
