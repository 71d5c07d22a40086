"""Training runs, sweeps and table drivers.

A run writes into its output directory:

``config.json``   resolved configuration and build identifier
``metrics.csv``   one row per epoch plus one per rewire event (``#`` header lines)
``timing.csv``    wall-clock seconds for the same rows
``events.jsonl``  header record, then one record per rewired layer
``checkpoint.npz`` final model, optimizer state and run counters
``summary.json``  final/best accuracy and parameter counts
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data_io import DATASETS, BatchPlan, batches, load_dataset
from .dst import EventLog, RewirePolicy, dst_hook, policy_from_dict
from .errors import ConfigurationError, TrainingDiverged
from .network import MODEL_KINDS, G2GModel, ModelConfig, build_model
from .tensor_core import load_checkpoint, single_thread
from .topology import mask_stats

log = logging.getLogger(__name__)

METRICS_VERSION = 1
SWEEP_AXES = ("p", "p_prime", "grouping", "dt", "rewire_fraction", "model")
IMAGE_SHAPES = {"fashion_mnist": (1, 28, 28), "cifar10": (3, 32, 32), "cifar100": (3, 32, 32)}
CLASS_COUNTS = {"fashion_mnist": 10, "cifar10": 10, "cifar100": 100}
# keys that only say where things go; they do not change results
_LOCATION_KEYS = ("data_dir", "output_dir", "resume_from")


@dataclass
class ExperimentConfig:
    dataset: str = "cifar10"
    data_dir: str = "data"
    output_dir: str = "runs/default"
    model: str = "g2g"
    grouping: str = "mixer"
    p: float = 1.0
    p_prime: float = 0.15
    groups: int = 8
    hidden_width: int = 1024
    depth: int = 3
    patches: int = 16
    conv_channels: int = 32
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    topology_seed: int = 0
    dst: dict | None = None
    fc_v1_budget: int | None = None
    limit_train: int | None = None
    limit_test: int | None = None
    threads: int = 1
    resume_from: str | None = None

    def validate(self):
        if self.dataset not in DATASETS:
            raise ConfigurationError(f"dataset must be one of {DATASETS}")
        if self.model not in MODEL_KINDS:
            raise ConfigurationError(f"model must be one of {MODEL_KINDS}")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if self.threads < 1:
            raise ConfigurationError("threads must be positive")
        side = math.isqrt(self.patches)
        if side * side != self.patches:
            raise ConfigurationError("patches must be a perfect square (a square patch grid)")
        self.model_config().validate()
        if self.dst is not None:
            policy_from_dict(self.dst)

    def model_config(self) -> ModelConfig:
        side = math.isqrt(self.patches)
        return ModelConfig(
            image_shape=IMAGE_SHAPES.get(self.dataset, (3, 32, 32)),
            num_classes=CLASS_COUNTS.get(self.dataset, 10),
            kind=self.model,
            hidden_width=self.hidden_width,
            depth=self.depth,
            groups=self.groups,
            p=self.p,
            p_prime=self.p_prime,
            grouping=self.grouping,
            patch_grid=(side, side),
            conv_channels=self.conv_channels,
            topology_seed=self.topology_seed,
            init_seed=self.seed,
            learning_rate=self.learning_rate,
            fc_v1_budget=self.fc_v1_budget,
        )

    def policy(self) -> RewirePolicy | None:
        if self.dst is None:
            return None
        d = dict(self.dst)
        d.setdefault("seed", self.seed)
        d.setdefault("enabled_layers", tuple(range(self.depth)))
        return RewirePolicy(**d)

    def identity(self) -> dict:
        d = asdict(self)
        for k in _LOCATION_KEYS:
            d.pop(k)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.identity(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def load_config(path, **overrides) -> ExperimentConfig:
    with open(path) as f:
        raw = json.load(f)
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    cfg = ExperimentConfig(**raw)
    cfg.validate()
    return cfg


def build_id() -> str:
    try:
        sha = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=os.path.dirname(__file__),
            capture_output=True,
            text=True,
            timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        sha = ""
    return f"g2gnet-{__version__}" + (f"+g{sha}" if sha else "")


@dataclass
class MetricsRecord:
    run_id: str
    record: str
    epoch: int
    iteration: int
    train_loss: float | None
    train_accuracy: float | None
    test_accuracy: float | None
    best_test_accuracy: float | None
    densities: list
    rewire_events: int
    wall_time: float = field(default=0.0, compare=False)

    def row(self):
        fmt = lambda v: "" if v is None else repr(float(v))
        return [
            self.run_id,
            self.record,
            self.epoch,
            self.iteration,
            fmt(self.train_loss),
            fmt(self.train_accuracy),
            fmt(self.test_accuracy),
            fmt(self.best_test_accuracy),
            *[repr(float(d)) for d in self.densities],
            self.rewire_events,
        ]


def metrics_columns(depth):
    return (
        ["run_id", "record", "epoch", "iteration", "train_loss", "train_accuracy", "test_accuracy", "best_test_accuracy"]
        + [f"density_l{i}" for i in range(depth)]
        + ["rewire_events"]
    )


class MetricsWriter:
    def __init__(self, out_dir: Path, cfg: ExperimentConfig, build: str, append=False):
        mode = "a" if append else "w"
        self._f = open(out_dir / "metrics.csv", mode, newline="")
        self._t = open(out_dir / "timing.csv", mode, newline="")
        self._w = csv.writer(self._f, lineterminator="\n")
        self._tw = csv.writer(self._t, lineterminator="\n")
        if not append:
            self._f.write(f"# g2gnet metrics v{METRICS_VERSION} build={build}\n")
            self._f.write("# config=" + json.dumps(cfg.identity(), sort_keys=True) + "\n")
            self._w.writerow(metrics_columns(cfg.depth))
            self._tw.writerow(["run_id", "record", "epoch", "iteration", "wall_time"])

    def write(self, rec: MetricsRecord):
        self._w.writerow(rec.row())
        self._tw.writerow([rec.run_id, rec.record, rec.epoch, rec.iteration, f"{rec.wall_time:.3f}"])
        self._f.flush()
        self._t.flush()

    def close(self):
        self._f.close()
        self._t.close()


def read_metrics(path):
    with open(path) as f:
        rows = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(rows))


def _densities(model):
    return [float(np.count_nonzero(l.bits) / l.bits.size) for l in model.hidden]


def run_training(cfg: ExperimentConfig, data=None) -> dict:
    """Train and evaluate one configuration; see the module docstring for outputs.

    ``data`` may supply already-normalized ``(train, test)`` splits.
    """
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    build = build_id()
    run_id = cfg.config_hash()
    with open(out / "config.json", "w") as f:
        json.dump({"config": asdict(cfg), "build": build, "run_id": run_id}, f, indent=2, sort_keys=True)

    if data is None:
        data = load_dataset(cfg.dataset, cfg.data_dir, cfg.limit_train, cfg.limit_test)
    train, test = data
    if cfg.limit_train:
        train = train.subset(cfg.limit_train)
    if cfg.limit_test:
        test = test.subset(cfg.limit_test)

    ctx = single_thread() if cfg.threads == 1 else _threads(cfg.threads)
    with ctx:
        return _train_loop(cfg, train, test, out, run_id, build)


def _threads(n):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _train_loop(cfg, train, test, out, run_id, build):
    policy = cfg.policy()
    start_epoch, iteration, n_events, best = 0, 0, 0, None
    history = {}
    if cfg.resume_from:
        model, meta = G2GModel.load(cfg.resume_from)
        run = meta.get("run", {})
        start_epoch, iteration = run.get("epoch", 0), run.get("iteration", 0)
        n_events, best = run.get("rewire_events", 0), run.get("best_test_accuracy")
        history = run.get("rewire_history", {})
    else:
        model = build_model(cfg.model_config())
    plan = BatchPlan(cfg.seed, cfg.batch_size)
    header = {"config": cfg.identity(), "build": build, "run_id": run_id}
    metrics = MetricsWriter(out, cfg, build, append=bool(cfg.resume_from))
    events = EventLog(out / "events.jsonl", header)
    t0 = time.perf_counter()
    last = {"train_loss": None, "train_accuracy": None, "test_accuracy": None}
    try:
        if not cfg.resume_from:
            acc = model.evaluate(test.images, test.labels)
            best = acc
            last["test_accuracy"] = acc
            metrics.write(MetricsRecord(run_id, "epoch", 0, 0, None, None, acc, best, _densities(model), 0, 0.0))
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            loss_sum, acc_sum, seen = 0.0, 0.0, 0
            for images, labels in batches(train, plan, epoch):
                try:
                    loss, acc, snaps = model.train_step(images, labels, iteration + 1)
                except TrainingDiverged as e:
                    diag = {"type": "diverged", "epoch": epoch, "iteration": e.iteration, "loss": repr(e.loss)}
                    events.write(diag)
                    with open(out / "diagnostic.json", "w") as f:
                        json.dump(diag, f, indent=2)
                    raise
                iteration += 1
                b = len(labels)
                loss_sum += loss * b
                acc_sum += acc * b
                seen += b
                fired = dst_hook(iteration, model, policy, snaps)
                if fired:
                    n_events += 1
                    for ev in fired:
                        events.write(ev.to_record())
                        h = history.setdefault(str(ev.layer), {"events": 0, "pruned": 0, "grown": 0})
                        h["events"] += 1
                        h["pruned"] += len(ev.pruned)
                        h["grown"] += len(ev.grown)
                        h["last_iteration"] = iteration
                    metrics.write(
                        MetricsRecord(
                            run_id, "rewire", epoch, iteration, loss_sum / seen, acc_sum / seen,
                            None, best, _densities(model), n_events, time.perf_counter() - t0,
                        )
                    )
            acc = model.evaluate(test.images, test.labels)
            best = acc if best is None else max(best, acc)
            last = {"train_loss": loss_sum / seen, "train_accuracy": acc_sum / seen, "test_accuracy": acc}
            metrics.write(
                MetricsRecord(
                    run_id, "epoch", epoch, iteration, last["train_loss"], last["train_accuracy"],
                    acc, best, _densities(model), n_events, time.perf_counter() - t0,
                )
            )
            log.info("epoch %d  loss %.4f  train %.4f  test %.4f", epoch, last["train_loss"], last["train_accuracy"], acc)
    finally:
        metrics.close()
        events.close()

    run_meta = {
        "epoch": max(cfg.epochs, start_epoch),
        "iteration": iteration,
        "rewire_events": n_events,
        "best_test_accuracy": best,
        "rewire_history": history,
        "train_seed": cfg.seed,
        "topology_seed": cfg.topology_seed,
    }
    model.save(out / "checkpoint.npz", {"run": run_meta, "experiment_config": asdict(cfg), "build": build})
    summary = {
        "run_id": run_id,
        "dataset": cfg.dataset,
        "model": cfg.model,
        "grouping": cfg.grouping,
        "seed": cfg.seed,
        "final_test_accuracy": last["test_accuracy"],
        "best_test_accuracy": best,
        "final_train_loss": last["train_loss"],
        "final_train_accuracy": last["train_accuracy"],
        "iterations": iteration,
        "rewire_events": n_events,
        "parameters": model.param_counts(),
        "densities": _densities(model),
        "build": build,
        "config": cfg.identity(),
    }
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return summary


def _set_axis(cfg: ExperimentConfig, axis: str, value):
    if axis == "p":
        return cfg.replace(p=float(value))
    if axis == "p_prime":
        return cfg.replace(p_prime=float(value))
    if axis == "grouping":
        return cfg.replace(grouping=str(value))
    if axis == "model":
        return cfg.replace(model=str(value))
    dst = dict(cfg.dst) if cfg.dst is not None else {"prune_criterion": "hebbian", "grow_criterion": "hebbian"}
    if axis == "dt":
        dst["update_interval"] = int(value)
    elif axis == "rewire_fraction":
        dst["rewire_fraction"] = float(value)
    else:
        raise ConfigurationError(f"cannot sweep {axis!r}; choose one of {SWEEP_AXES}")
    return cfg.replace(dst=dst)


def _run_one(cfg):
    return run_training(cfg)


def run_many(configs, jobs=1, data=None):
    """Run configs (in parallel processes when ``jobs > 1``); results keyed by config hash."""
    if jobs > 1 and data is None:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_one, configs))
    else:
        results = [run_training(c, data) for c in configs]
    return {c.config_hash(): r for c, r in zip(configs, results)}


def _mean_std(values):
    a = np.asarray(values, dtype=np.float64)
    std = float(a.std(ddof=1)) if len(a) > 1 else 0.0
    return float(a.mean()), std


def sweep(base: ExperimentConfig, axis: str, values, seeds, jobs=1, data=None, out_csv=None):
    """Cartesian runs over ``values x seeds``; the topology seed stays fixed."""
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"cannot sweep {axis!r}; choose one of {SWEEP_AXES}")
    root = Path(base.output_dir)
    plan = []
    for v in values:
        for s in seeds:
            c = _set_axis(base, axis, v).replace(seed=int(s), output_dir=str(root / f"{axis}={v}" / f"seed={s}"))
            c.validate()
            plan.append((v, c))
    results = run_many([c for _, c in plan], jobs, data)
    rows = []
    for v in values:
        runs = [results[c.config_hash()] for val, c in plan if val == v]
        fm, fs = _mean_std([r["final_test_accuracy"] for r in runs])
        bm, bs = _mean_std([r["best_test_accuracy"] for r in runs])
        rows.append(
            {
                "axis": axis,
                "value": v,
                "runs": len(runs),
                "mean_final_accuracy": fm,
                "std_final_accuracy": fs,
                "mean_best_accuracy": bm,
                "std_best_accuracy": bs,
                "mean_masked_parameters": float(np.mean([r["parameters"]["masked_weights"] for r in runs])),
            }
        )
    _write_csv(out_csv or root / f"sweep_{axis}.csv", rows)
    return rows


def _write_csv(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(f"# g2gnet build={build_id()}\n")
        if rows:
            w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)


TABLE1_ROWS = (
    ("Fully-Connected v1", {"model": "fc_v1"}),
    ("Fully-Connected v2", {"model": "fc_v2"}),
    ("ER Random Graph", {"model": "er"}),
    ("G2GNet (Index Grouping)", {"model": "g2g", "grouping": "index"}),
    ("G2GNet (Mixer Grouping)", {"model": "g2g", "grouping": "mixer"}),
)


def table1(base: ExperimentConfig, datasets, seeds, jobs=1, out_csv=None):
    root = Path(base.output_dir)
    rows = []
    plan = []
    for name, kw in TABLE1_ROWS:
        for ds in datasets:
            for s in seeds:
                slug = name.split(" (")[0].replace(" ", "_").lower() + ("_" + kw["grouping"] if "grouping" in kw else "")
                c = base.replace(dataset=ds, seed=int(s), output_dir=str(root / ds / slug / f"seed={s}"), **kw)
                c.validate()
                plan.append((name, ds, c))
    results = run_many([c for *_, c in plan], jobs)
    for name, _ in TABLE1_ROWS:
        row = {"pattern": name}
        params = []
        for ds in datasets:
            runs = [results[c.config_hash()] for n, d, c in plan if n == name and d == ds]
            m, s = _mean_std([100 * r["final_test_accuracy"] for r in runs])
            bm, _ = _mean_std([100 * r["best_test_accuracy"] for r in runs])
            row[f"{ds}_accuracy"] = m
            row[f"{ds}_std"] = s
            row[f"{ds}_best_accuracy"] = bm
            params += [r["parameters"]["masked_weights"] for r in runs]
        row["parameters"] = float(np.mean(params))
        rows.append(row)
    _write_csv(out_csv or root / "table1.csv", rows)
    return rows


def table2(base: ExperimentConfig, dataset, seeds, jobs=1, out_csv=None, dst_defaults=None):
    if dataset not in ("cifar10", "cifar100"):
        raise ConfigurationError("the DST grid is defined for cifar10 and cifar100")
    root = Path(base.output_dir)
    cells = [("static", None)]
    for prune in ("magnitude", "random", "hebbian"):
        for grow in ("random", "hebbian"):
            cells.append((f"{prune}+{grow}", {"prune_criterion": prune, "grow_criterion": grow, **(dst_defaults or {})}))
    plan = []
    for label, dst in cells:
        for s in seeds:
            c = base.replace(dataset=dataset, dst=dst, seed=int(s), output_dir=str(root / dataset / label / f"seed={s}"))
            c.validate()
            plan.append((label, c))
    results = run_many([c for _, c in plan], jobs)
    rows = []
    for label, dst in cells:
        runs = [results[c.config_hash()] for l, c in plan if l == label]
        m, s = _mean_std([100 * r["final_test_accuracy"] for r in runs])
        prune, _, grow = label.partition("+")
        rows.append(
            {
                "dataset": dataset,
                "prune": prune if dst else "none",
                "grow": grow if dst else "none",
                "mean_accuracy": m,
                "std_accuracy": s,
                "runs": len(runs),
            }
        )
    _write_csv(out_csv or root / f"table2_{dataset}.csv", rows)
    return rows


def inspect_checkpoint(path) -> dict:
    arrays, meta = load_checkpoint(path)
    model = G2GModel.from_state(arrays, meta)
    layers = []
    for i, layer in enumerate(model.hidden):
        st = mask_stats(layer.mask)
        prov = layer.mask.provenance
        st["grouping"] = {"src": prov["src"]["strategy"], "dst": prov["dst"]["strategy"]} if "src" in prov else None
        layers.append(dict(st, index=i))
    run = meta.get("run", {})
    return {
        "build": meta.get("build"),
        "format_version": meta.get("version"),
        "model": model.describe(),
        "layers": layers,
        "parameters": model.param_counts(),
        "rewire_history": {
            "events": run.get("rewire_events", 0),
            "iterations": run.get("iteration", 0),
            "per_layer": run.get("rewire_history", {}),
        },
    }
