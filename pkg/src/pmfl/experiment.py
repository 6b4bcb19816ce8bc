"""Multi-seed comparison of direct training, FedAvg, MetaFL and PMFL."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from .data import (
    MultiLabelTable,
    TaskDataset,
    TaskFamilySpec,
    build_silos,
    generate_task_family,
    load_csv,
)
from .errors import ConfigError, DataError
from .federation import (
    ClientState,
    RoundLog,
    ServerState,
    append_round_log,
    finetune_and_test,
    run_round,
)
from .metrics import EvalReport

log = logging.getLogger(__name__)

ALL_SCHEMES = ("direct", "fedavg", "metafl", "pmfl")
METRICS = ("auc", "precision", "recall", "f1")
# fixed stream index per scheme, so dropping one scheme leaves the others untouched
_SCHEME_STREAM = {"direct": 0, "fedavg": 1, "metafl": 2, "pmfl": 3}


@dataclass
class ExperimentConfig:
    schemes: tuple[str, ...] = ALL_SCHEMES
    k_pretrain: int = 5
    rounds: int = 10
    inner_rate: float = 1e-3
    outer_rate: float = 1e-2
    local_epochs: int = 1
    batches_per_epoch: int = 32
    meta_mode: str = "exact"
    query_mode: str = "held-out"
    participation: float = 1.0
    finetune_epochs: int = 10
    finetune_batch: int = 64
    finetune_rate: float | None = None
    train_fraction: float = 0.9
    mask_fraction: float = 0.5
    mask_mode: str = "units"
    hidden_layers: tuple[int, ...] = (16,)
    activation: str = "tanh"
    repeats: int = 5
    seeds: tuple[int, ...] | None = None
    family: TaskFamilySpec | None = None
    n_tasks: int | None = None
    csv_paths: tuple[str, ...] = ()
    label_column: str = "label"
    table_path: str | None = None
    silo_labels: tuple[str, ...] = ()
    silo_order: str = "least-first"
    test_task: str | int = "last"

    def __post_init__(self):
        self.schemes = tuple(self.schemes)
        self.hidden_layers = tuple(int(h) for h in self.hidden_layers)
        self.csv_paths = tuple(str(p) for p in self.csv_paths)
        self.silo_labels = tuple(self.silo_labels)
        if isinstance(self.family, dict):
            self.family = TaskFamilySpec.from_dict(self.family)
        if self.seeds is not None:
            self.seeds = tuple(int(s) for s in self.seeds)
            self.repeats = len(self.seeds)
        self.validate()

    def validate(self) -> None:
        if not self.schemes:
            raise ConfigError("scheme set is empty")
        bad = [s for s in self.schemes if s not in ALL_SCHEMES]
        if bad:
            raise ConfigError(f"unknown schemes {bad}")
        if len(set(self.schemes)) != len(self.schemes):
            raise ConfigError("scheme listed twice")
        for name in ("k_pretrain", "repeats", "batches_per_epoch", "local_epochs", "finetune_batch"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.rounds < 0 or self.finetune_epochs < 1:
            raise ConfigError("rounds must be >= 0 and finetune_epochs >= 1")
        if self.meta_mode not in ("exact", "first-order"):
            raise ConfigError(f"meta_mode must be exact or first-order, got {self.meta_mode!r}")
        if not 0.0 < self.participation <= 1.0:
            raise ConfigError("participation must lie in (0, 1]")
        sources = sum([self.family is not None, bool(self.csv_paths), self.table_path is not None])
        if sources != 1:
            raise ConfigError("configure exactly one data source: family, csv_paths or table_path")
        if self.table_path is not None and not self.silo_labels:
            raise ConfigError("a multi-label table needs silo_labels")
        total = self.total_tasks()
        if self.k_pretrain >= total:
            raise ConfigError(f"k_pretrain={self.k_pretrain} leaves no server task among {total} silos")

    def total_tasks(self) -> int:
        if self.family is not None:
            return int(self.n_tasks or self.k_pretrain + 1)
        if self.csv_paths:
            return len(self.csv_paths)
        return len(self.silo_labels)

    @property
    def seed_list(self) -> tuple[int, ...]:
        if self.seeds is not None:
            return self.seeds
        return tuple(range(int(self.repeats)))

    @property
    def resolved_finetune_rate(self) -> float:
        return self.inner_rate if self.finetune_rate is None else float(self.finetune_rate)

    def model_spec(self, dim: int) -> M.ModelSpec:
        return M.ModelSpec(dim, self.hidden_layers, self.activation)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family"] = None if self.family is None else self.family.to_dict()
        d["seeds"] = list(self.seed_list)
        d["finetune_rate"] = self.resolved_finetune_rate
        d["n_tasks"] = self.total_tasks()
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("schemes", "hidden_layers", "csv_paths", "silo_labels", "seeds"):
            if isinstance(d.get(k), list):
                d[k] = tuple(d[k])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    """Read a YAML or JSON config; ``PMFL_SEED`` replaces the seed list."""
    import yaml

    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    base = Path(path).parent
    for key in ("csv_paths",):
        if key in raw:
            raw[key] = [str((base / p) if not Path(p).is_absolute() else p) for p in raw[key]]
    if raw.get("table_path") is not None and not Path(raw["table_path"]).is_absolute():
        raw["table_path"] = str(base / raw["table_path"])
    return apply_seed_override(ExperimentConfig.from_dict(raw))


def apply_seed_override(config: ExperimentConfig, env=None) -> ExperimentConfig:
    env = os.environ if env is None else env
    value = env.get("PMFL_SEED")
    if value is None or value.strip() == "":
        return config
    try:
        seeds = tuple(int(s) for s in value.split(","))
    except ValueError:
        raise ConfigError(f"PMFL_SEED must be an integer or comma list, got {value!r}") from None
    if len(seeds) == 1:
        seeds = tuple(range(seeds[0], seeds[0] + int(config.repeats)))
    return replace(config, seeds=seeds)


# -- data ----------------------------------------------------------------------------


def _stream(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *path]))


def _seed_int(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([int(seed), *path]).generate_state(1)[0])


def load_table_csv(path, silo_labels: Sequence[str]) -> MultiLabelTable:
    """Multi-label CSV: every column not in ``silo_labels`` is a feature."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in silo_labels if c not in header]
    if missing:
        raise DataError(f"{path}: missing label columns {missing}")
    lab_idx = [i for i, h in enumerate(header) if h in silo_labels]
    feat_idx = [i for i, h in enumerate(header) if h not in silo_labels]
    try:
        body = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    return MultiLabelTable(body[:, feat_idx], body[:, lab_idx], tuple(header[i] for i in lab_idx))


def build_tasks(config: ExperimentConfig, seed: int) -> list[TaskDataset]:
    if config.family is not None:
        fam = replace(config.family, seed=_seed_int(seed, 0, config.family.seed))
        return generate_task_family(fam, config.total_tasks())
    if config.csv_paths:
        return [load_csv(p, label_column=config.label_column) for p in config.csv_paths]
    table = load_table_csv(config.table_path, config.silo_labels)
    return build_silos(table, list(config.silo_labels), seed=_seed_int(seed, 1), order=config.silo_order)


def select_tasks(
    config: ExperimentConfig, tasks: list[TaskDataset], seed: int, k: int | None = None
) -> tuple[TaskDataset, list[TaskDataset]]:
    """The server task and the pretraining tasks for one repeat."""
    k = config.k_pretrain if k is None else k
    sel = config.test_task
    rng = _stream(seed, 2)
    if sel == "last":
        server_idx = len(tasks) - 1
    elif sel == "random":
        server_idx = int(rng.integers(len(tasks)))
    elif isinstance(sel, int) or (isinstance(sel, str) and sel.lstrip("-").isdigit()):
        server_idx = int(sel) % len(tasks)
    else:
        names = [t.task_id for t in tasks]
        if sel not in names:
            raise ConfigError(f"test_task {sel!r} names no silo (have {names})")
        server_idx = names.index(sel)
    rest = [i for i in range(len(tasks)) if i != server_idx]
    order = rng.permutation(len(rest)) if len(rest) > k else np.arange(len(rest))
    chosen = [rest[i] for i in order[:k]]
    if len(chosen) < k:
        raise ConfigError(f"only {len(chosen)} pretraining silos available, need {k}")
    for t in [tasks[server_idx], *[tasks[i] for i in chosen]]:
        try:
            t.require_both_classes()
        except DataError as exc:
            raise DataError(f"silo {t.task_id}: {exc}") from None
    log.debug("seed %d: server task %s, pretraining %s", seed, tasks[server_idx].task_id,
              [tasks[i].task_id for i in chosen])
    return tasks[server_idx], [tasks[i] for i in chosen]


# -- pretraining -----------------------------------------------------------------------


def pretrain(
    config: ExperimentConfig,
    scheme: str,
    spec: M.ModelSpec,
    theta0: np.ndarray,
    tasks: list[TaskDataset],
    seed: int,
    round_log=None,
) -> np.ndarray:
    if scheme == "direct" or config.rounds == 0:
        return theta0.copy()
    stream = _SCHEME_STREAM[scheme]
    clients = [
        ClientState(
            cid=k + 1,
            dataset=task,
            params=M.init_params(spec, _seed_int(seed, 4, k)),
            spec=spec,
            inner_rate=config.inner_rate,
            local_epochs=config.local_epochs,
            batches_per_epoch=config.batches_per_epoch,
            rng=_stream(seed, 5, stream, k),
        )
        for k, task in enumerate(tasks)
    ]
    mask = M.partition_mask(spec, config.mask_fraction, config.mask_mode) if scheme == "pmfl" else None
    server = ServerState(theta0.copy(), scheme, config.outer_rate, mask)
    sample_rng = _stream(seed, 6, stream)
    for _ in range(config.rounds):
        server, entry = run_round(
            server,
            clients,
            exact=config.meta_mode == "exact",
            query_mode=config.query_mode,
            participation=config.participation,
            rng=sample_rng,
        )
        for w in entry.warnings:
            log.warning(w)
        if round_log is not None:
            round_log(seed, entry)
    return server.params


# -- results ------------------------------------------------------------------------------


def _mean_std(values: Sequence[float]) -> tuple[float, float | None]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    if arr.shape[0] < 2:
        return mean, None
    return mean, float(np.sqrt(np.mean((arr - mean) ** 2)))


@dataclass
class ComparisonTable:
    schemes: tuple[str, ...]
    seeds: tuple[int, ...]
    metrics: tuple[str, ...] = METRICS
    reports: dict[str, list[list[EvalReport]]] = field(default_factory=dict)

    def final(self, scheme: str, metric: str) -> np.ndarray:
        return np.array([getattr(r[-1], metric) for r in self.reports[scheme]])

    def mean(self, scheme: str, metric: str = "auc") -> float:
        return _mean_std(self.final(scheme, metric))[0]

    def std(self, scheme: str, metric: str = "auc") -> float | None:
        return _mean_std(self.final(scheme, metric))[1]

    def curve(self, scheme: str, metric: str = "auc") -> np.ndarray:
        """Array of shape (repeats, epochs + 1); column 0 is the pretrained model."""
        return np.array([[getattr(e, metric) for e in r] for r in self.reports[scheme]])

    def mean_curve(self, scheme: str, metric: str = "auc") -> np.ndarray:
        return self.curve(scheme, metric).mean(axis=0)

    def summary_rows(self) -> list[dict]:
        rows = []
        for s in self.schemes:
            for m in self.metrics:
                mean, std = _mean_std(self.final(s, m))
                rows.append({"scheme": s, "metric": m, "mean": mean, "std": std, "repeats": len(self.seeds)})
        return rows

    def format(self) -> str:
        width = max(len(s) for s in self.schemes)
        lines = [" " * width + "".join(f"  {m:>17}" for m in self.metrics)]
        for s in self.schemes:
            cells = []
            for m in self.metrics:
                mean, std = _mean_std(self.final(s, m))
                cells.append(f"  {mean:.4f} +/- {std:.4f}" if std is not None else f"  {mean:17.4f}")
            lines.append(s.ljust(width) + "".join(cells))
        return "\n".join(lines)


def run_experiment(config: ExperimentConfig, round_log_path=None) -> ComparisonTable:
    config.validate()
    table = ComparisonTable(tuple(config.schemes), config.seed_list)
    sink = _round_sink(round_log_path)
    for seed in config.seed_list:
        tasks = build_tasks(config, seed)
        server_task, pre_tasks = select_tasks(config, tasks, seed)
        spec = config.model_spec(server_task.dim)
        theta0 = M.init_params(spec, _seed_int(seed, 3))
        for scheme in config.schemes:
            theta = pretrain(config, scheme, spec, theta0, pre_tasks, seed, sink(scheme))
            reports = finetune_and_test(
                spec, theta, server_task, config.finetune_epochs, config.resolved_finetune_rate,
                config.finetune_batch, _seed_int(seed, 7), config.train_fraction,
            )
            table.reports.setdefault(scheme, []).append(reports)
            log.info("seed %d %-6s auc %.4f", seed, scheme, reports[-1].auc)
    return table


def run_client_count_ablation(
    config: ExperimentConfig, counts: Sequence[int], round_log_path=None
) -> ComparisonTable:
    """PMFL pretrained with each client count, plus direct training as baseline."""
    counts = [int(c) for c in counts]
    if not counts or len(set(counts)) != len(counts):
        raise ConfigError("client counts must be a non-empty list without repeats")
    if config.family is not None and config.n_tasks is None:
        config = replace(config, n_tasks=max(counts) + 1)
    for c in counts:
        if not 1 <= c < config.total_tasks():
            raise ConfigError(f"client count {c} must lie in [1, {config.total_tasks() - 1}]")
    names = tuple(f"pmfl-{c}" for c in counts) + ("direct",)
    table = ComparisonTable(names, config.seed_list, metrics=("auc",))
    sink = _round_sink(round_log_path)
    for seed in config.seed_list:
        tasks = build_tasks(config, seed)
        server_task, pre_tasks = select_tasks(config, tasks, seed, k=max(counts))
        spec = config.model_spec(server_task.dim)
        theta0 = M.init_params(spec, _seed_int(seed, 3))
        for c, name in zip(counts + [0], names):
            scheme = "direct" if name == "direct" else "pmfl"
            theta = pretrain(config, scheme, spec, theta0, pre_tasks[:c], seed, sink(name))
            reports = finetune_and_test(
                spec, theta, server_task, config.finetune_epochs, config.resolved_finetune_rate,
                config.finetune_batch, _seed_int(seed, 7), config.train_fraction,
            )
            table.reports.setdefault(name, []).append(reports)
    return table


def _round_sink(path):
    if path is None:
        return lambda scheme: None

    def make(scheme):
        def write(seed: int, entry: RoundLog) -> None:
            append_round_log(path, entry)

        return write

    return make


# -- outputs -------------------------------------------------------------------------------


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def summary_csv(table: ComparisonTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scheme", "metric", "mean", "std", "repeats"])
    for r in table.summary_rows():
        w.writerow([r["scheme"], r["metric"], _fmt(r["mean"]), _fmt(r["std"]), r["repeats"]])
    return buf.getvalue()


def curves_csv(table: ComparisonTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "scheme", "seed", "auc"])
    for s in table.schemes:
        for seed, reports in zip(table.seeds, table.reports[s]):
            for epoch, rep in enumerate(reports[1:], start=1):
                w.writerow([epoch, s, seed, _fmt(rep.auc)])
    return buf.getvalue()


def emit_outputs(table: ComparisonTable, out_dir, config: ExperimentConfig | None = None) -> list[Path]:
    """Write summary.csv, curves.csv and (given a config) config.json."""
    if not table.schemes:
        raise ConfigError("nothing to write: empty scheme set")
    contents = {"summary.csv": summary_csv(table), "curves.csv": curves_csv(table)}
    if config is not None:
        contents["config.json"] = json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in contents.items():
        p = out / name
        p.write_text(text, encoding="utf-8")
        written.append(p)
    return written
