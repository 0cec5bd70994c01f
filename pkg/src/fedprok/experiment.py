"""Experiment driver: config parsing, the federated round loop, suites and result files."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

from . import __version__
from .client import ClientState, ClientUpdate, LocalHyper, local_train_round
from .data import (DatasetSpec, PartitionConfig, Samples, TaskStream, build_task_streams, consensus_split,
                   generate_dataset, partition, round_to_task)
from .errors import ConfigurationError, RunError
from .metrics import (AccuracySnapshot, AttackResult, EfficiencyLedger, TrustReport, continual_utility,
                      efficiency_score, evaluate, gradient_inversion_attack, privacy_score,
                      prototype_inversion_attack)
from .nn import ModelParams, grow_classifier, init_params, loss_and_grads
from .server import GlobalState, distribute, fedavg, fuse_prototypes

VARIANTS = ("fedprok", "wo_ft", "wo_pkf", "fedavg")
FREEZE_MODES = ("after_first_task", "always", "never")
BASE_RULES = ("argmax_similarity", "literal_argmin")
DEFAULT_SEEDS = (42, 1999, 2024)

CSV_COLUMNS = ("run_id", "variant", "mode", "alpha_or_gamma", "seed", "round", "task", "acc_prev", "acc_cur",
               "acc_all", "bytes_up", "bytes_down", "compute_s")
WALL_CLOCK_COLUMNS = ("compute_s",)


@dataclass(frozen=True)
class ModelSpec:
    hidden: tuple[int, ...] = (32,)
    feature_dim: int = 16


@dataclass(frozen=True)
class PrivacySpec:
    targets_per_client: int = 1
    attack_iters: int = 300
    attack_lr: float = 0.1


@dataclass(frozen=True)
class Seeds:
    master: int = 42
    data: int | None = None
    partition: int | None = None
    model: int | None = None
    training: int | None = None
    attack: int | None = None

    def resolve(self, name: str) -> int:
        explicit = getattr(self, name)
        if explicit is not None:
            return explicit
        index = ("data", "partition", "model", "training", "attack").index(name)
        return int(np.random.SeedSequence([self.master, index]).generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = DatasetSpec()
    partition: PartitionConfig = PartitionConfig()
    model: ModelSpec = ModelSpec()
    rounds: int = 20
    local_epochs: int = 2
    lr: float = 0.1
    batch_size: int = 16
    pseudo_per_class: int | None = None
    beta: float = 0.5
    lam: float = 0.5
    variant: str = "fedprok"
    freeze_extractor: str = "after_first_task"
    base_class_rule: str = "argmax_similarity"
    weighted_fedavg: bool = False
    bandwidth: float = 1e6
    privacy: PrivacySpec = PrivacySpec()
    seeds: Seeds = Seeds()

    def validate(self) -> "ExperimentConfig":
        self.dataset.validate()
        self.partition.validate()
        T = self.partition.num_tasks
        if self.rounds < 1 or self.rounds % T:
            raise ConfigurationError(f"rounds={self.rounds} must be a positive multiple of num_tasks={T}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.freeze_extractor not in FREEZE_MODES:
            raise ConfigurationError(f"freeze_extractor must be one of {FREEZE_MODES}")
        if self.base_class_rule not in BASE_RULES:
            raise ConfigurationError(f"base_class_rule must be one of {BASE_RULES}")
        if self.local_epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigurationError("local_epochs, batch_size and lr must be positive")
        if self.pseudo_per_class is not None and self.pseudo_per_class < 0:
            raise ConfigurationError("pseudo_per_class must be >= 0 or null")
        if not 0 <= self.beta <= 1 or not 0 <= self.lam <= 1:
            raise ConfigurationError("beta and lambda must lie in [0, 1]")
        if not self.bandwidth > 0:
            raise ConfigurationError("bandwidth must be positive")
        if self.model.feature_dim < 1 or any(h < 1 for h in self.model.hidden):
            raise ConfigurationError("model widths must be >= 1")
        if self.privacy.targets_per_client < 0 or self.privacy.attack_iters < 0:
            raise ConfigurationError("privacy counts must be non-negative")
        M, K = self.dataset.num_classes, self.partition.num_clients
        if self.partition.mode == "synchronous":
            per_client = M
            if self.dataset.train_per_class < K:
                raise ConfigurationError(f"train_per_class must be >= num_clients={K}")
        else:
            common, unique = consensus_split(M, K, self.partition.gamma, self.partition.gamma_rounding)
            per_client = common + unique
        if per_client % T:
            raise ConfigurationError(f"each client holds {per_client} classes, not divisible by num_tasks={T}")
        return self

    @property
    def heterogeneity(self) -> float:
        p = self.partition
        return p.alpha if p.mode == "synchronous" else p.gamma

    @property
    def run_id(self) -> str:
        tag = "a" if self.partition.mode == "synchronous" else "g"
        return f"{self.variant}-{self.partition.mode[:4]}-{tag}{self.heterogeneity:g}-s{self.seeds.master}"

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seeds=dataclasses.replace(self.seeds, master=seed))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dataset"].pop("seed")
        d["partition"].pop("seed")
        d["model"]["hidden"] = list(self.model.hidden)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        if "lambda" in raw:
            if "lam" in raw:
                raise ConfigurationError("config: give 'lambda' once")
            raw["lam"] = raw.pop("lambda")
        nested = {"dataset": DatasetSpec, "partition": PartitionConfig, "model": ModelSpec,
                  "privacy": PrivacySpec, "seeds": Seeds}
        kwargs = _strict(cls, raw, "config", skip=set(nested))
        for key, typ in nested.items():
            if key in raw:
                if not isinstance(raw[key], dict):
                    raise ConfigurationError(f"config.{key} must be an object")
                sub = _strict(typ, raw[key], f"config.{key}", forbid={"seed"} if key in ("dataset", "partition") else ())
                if key == "model" and "hidden" in sub:
                    sub["hidden"] = tuple(sub["hidden"])
                kwargs[key] = typ(**sub)
        return cls(**kwargs)


def _strict(cls, raw: dict, where: str, skip=(), forbid=()) -> dict:
    names = {f.name for f in dataclasses.fields(cls)} - set(forbid)
    unknown = set(raw) - names - set(skip)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {sorted(unknown)}")
    return {k: v for k, v in raw.items() if k in names and k not in skip}


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: expected a JSON object")
    try:
        return ExperimentConfig.from_dict(raw).validate()
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def load_configs(path) -> list[ExperimentConfig]:
    """One config object, a list of them, or ``{"configs": [...]}``."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(raw, dict) and set(raw) == {"configs"}:
        raw = raw["configs"]
    items = raw if isinstance(raw, list) else [raw]
    if not items:
        raise ConfigurationError(f"{path}: no configs")
    out = []
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            raise ConfigurationError(f"{path}: config #{i} is not an object")
        try:
            out.append(ExperimentConfig.from_dict(item).validate())
        except TypeError as exc:
            raise ConfigurationError(f"{path}: config #{i}: {exc}") from exc
    return out


@dataclass
class World:
    """Everything fixed before round 1: data, partitions, task streams."""

    cfg: ExperimentConfig
    train: Samples
    test: Samples
    streams: list[TaskStream]

    def task_classes(self, t: int) -> set[int]:
        return {c for s in self.streams for c in s.task(t).classes}

    def classes_upto(self, t: int) -> set[int]:
        return set().union(*(self.task_classes(i) for i in range(1, t + 1)))


def build_world(cfg: ExperimentConfig) -> World:
    s = cfg.seeds
    spec = dataclasses.replace(cfg.dataset, seed=s.resolve("data"))
    pcfg = dataclasses.replace(cfg.partition, seed=s.resolve("partition"))
    train, test = generate_dataset(spec)
    parts = partition(train, pcfg)
    streams = build_task_streams(parts, pcfg, cfg.rounds // pcfg.num_tasks, spec.num_classes)
    return World(cfg, train, test, streams)


@dataclass
class RoundState:
    round: int
    task: int
    world: World
    global_state: GlobalState
    clients: list[ClientState]
    updates: list[ClientUpdate]
    snapshot: AccuracySnapshot
    bytes_up: int
    bytes_down: int
    compute_s: float
    received: list[ModelParams] = field(default_factory=list)


def _hyper(cfg: ExperimentConfig, r: int, t: int) -> LocalHyper:
    per_task = cfg.rounds // cfg.partition.num_tasks
    # The last round of task 1 already runs frozen, so the task-1 prototypes it
    # uploads are computed under exactly the extractor that stays frozen.
    first_task_training = t == 1 and (per_task == 1 or r < per_task)
    train_f = {"after_first_task": first_task_training, "always": False, "never": True}[cfg.freeze_extractor]
    return LocalHyper(epochs=cfg.local_epochs, lr=cfg.lr, batch_size=cfg.batch_size,
                      pseudo_per_class=cfg.pseudo_per_class,
                      translate=cfg.variant in ("fedprok", "wo_pkf"),
                      share_prototypes=cfg.variant in ("fedprok", "wo_ft"),
                      train_extractor=train_f, base_class_rule=cfg.base_class_rule)


def simulate(cfg: ExperimentConfig) -> Iterator[RoundState]:
    """Run the round loop, yielding the full state after every round."""
    cfg.validate()
    world = build_world(cfg)
    R, T, K = cfg.rounds, cfg.partition.num_tasks, cfg.partition.num_clients
    model_seed, train_seed = cfg.seeds.resolve("model"), cfg.seeds.resolve("training")
    first = sorted(world.task_classes(1))
    params = init_params(cfg.dataset.input_dim, cfg.model.hidden, cfg.model.feature_dim, max(first) + 1,
                         [model_seed, 0])
    glob = GlobalState(params, {}, 0)
    clients = [ClientState(k, params, {}) for k in range(K)]
    prev_task = 0
    for r in range(1, R + 1):
        t = round_to_task(r, R, T)
        started = time.perf_counter()
        if t != prev_task:
            needed = max(world.classes_upto(t)) + 1
            init_scale = 1.0 / math.sqrt(cfg.model.feature_dim)
            glob = GlobalState(grow_classifier(glob.params, needed, init_scale, [model_seed, t]), glob.kb, glob.round)
            prev_task = t
        hyper = _hyper(cfg, r, t)
        g_params, g_protos, down = distribute(glob, hyper.share_prototypes)
        updates, new_clients = [], []
        for k, state in enumerate(clients):
            state = dataclasses.replace(state, params=g_params)
            rng = np.random.default_rng([train_seed, r, k])
            try:
                state, update = local_train_round(state, world.streams[k].task(t),
                                                  g_protos if hyper.share_prototypes else None, hyper, rng)
            except (ArithmeticError, ValueError, RuntimeError) as exc:
                raise RunError(r, k, exc) from exc
            new_clients.append(state)
            updates.append(update)
        clients = new_clients
        try:
            kb = fuse_prototypes(glob.kb, updates, t, cfg.beta) if hyper.share_prototypes else glob.kb
            glob = GlobalState(fedavg(updates, cfg.weighted_fedavg), kb, r)
        except (ArithmeticError, ValueError) as exc:
            raise RunError(r, None, exc) from exc
        elapsed = time.perf_counter() - started

        cur = world.task_classes(t)
        prev = world.classes_upto(t - 1) if t > 1 else set()
        snap = AccuracySnapshot(
            r, t,
            evaluate(glob.params, world.test, prev) if prev else None,
            evaluate(glob.params, world.test, cur),
            evaluate(glob.params, world.test, prev | cur),
        )
        yield RoundState(r, t, world, glob, clients, updates, snap, sum(u.bytes_uploaded for u in updates),
                         K * down, elapsed, [g_params] * K)


def continual_utility_of(snapshots: Sequence[AccuracySnapshot], rounds_per_task: int, lam: float) -> float | None:
    """Utility from stability/plasticity averaged over the end of every task after the first."""
    ends = [s for s in snapshots if s.round % rounds_per_task == 0 and s.acc_previous is not None]
    if not ends:
        return None
    a_prev = float(np.mean([s.acc_previous for s in ends]))
    a_cur = float(np.mean([s.acc_current for s in ends]))
    return continual_utility(a_prev, a_cur, lam)


def attack_client(state: RoundState, client: int, cfg: ExperimentConfig, target_index: int = 0
                  ) -> dict[str, AttackResult]:
    """Attack one private sample of ``client`` through every channel its variant exposes.

    The weight channel is modelled by the single-sample gradient of the model
    the client received this round (strongest attacker: label known, full
    gradient). The prototype channel inverts the extractor against the shared
    prototype of the sample's class.
    """
    world = state.world
    task = world.streams[client].task(state.task)
    rng = np.random.default_rng([cfg.seeds.resolve("attack"), state.round, client, target_index])
    i = int(rng.integers(len(task.samples)))
    x, label = task.samples.X[i], int(task.samples.y[i])
    params = state.received[client]
    p = cfg.privacy
    seed = [cfg.seeds.resolve("attack"), state.round, client, target_index, 1]
    _, grads = loss_and_grads(params, x[None, :], [label], train_extractor=True)
    out = {"gradient": gradient_inversion_attack(params, grads, x.shape, label, p.attack_iters, p.attack_lr,
                                                 seed, ground_truth=x)}
    update = state.updates[client]
    if label in update.prototypes:
        out["prototype"] = prototype_inversion_attack(params, update.prototypes[label].prototype, x.size,
                                                      p.attack_iters, p.attack_lr, seed, ground_truth=x)
    return {k: dataclasses.replace(v, target_client=client, round=state.round) for k, v in out.items()}


def privacy_of(state: RoundState, cfg: ExperimentConfig) -> tuple[float | None, dict]:
    """Mean over targets of the weakest-channel privacy score, plus per-channel means."""
    n = cfg.privacy.targets_per_client
    if n == 0:
        return None, {}
    worst, channels = [], {}
    for k in range(cfg.partition.num_clients):
        for j in range(n):
            res = attack_client(state, k, cfg, j)
            scores = {ch: privacy_score(a.mse) for ch, a in res.items()}
            for ch, s in scores.items():
                channels.setdefault(ch, []).append(s)
            worst.append(min(scores.values()))
    return float(np.mean(worst)), {ch: float(np.mean(v)) for ch, v in channels.items()}


@dataclass
class RunRecord:
    run_id: str
    config: dict
    seed: int
    snapshots: list[AccuracySnapshot]
    final_acc_all: float
    trust: TrustReport
    ledger: EfficiencyLedger
    version: str = __version__
    started_at: str = ""
    wall_s: float = 0.0
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "seed": self.seed,
            "version": self.version,
            "config": self.config,
            "final_acc_all": self.final_acc_all,
            "trust": {"U": self.trust.U, "P": self.trust.P, "E": self.trust.E, "lambda": self.trust.lam,
                      "P_by_channel": self.trust.P_by_channel},
            "rounds": [dataclasses.asdict(s) for s in self.snapshots],
            "ledger": {"bandwidth": self.ledger.bandwidth, "bytes_up": self.ledger.bytes_up,
                       "bytes_down": self.ledger.bytes_down, "compute_s": self.ledger.compute_s},
            "wall_clock": {"started_at": self.started_at, "wall_s": self.wall_s},
        }


def run_experiment(cfg: ExperimentConfig) -> RunRecord:
    """Execute every round of ``cfg`` and summarise the run."""
    cfg.validate()
    started_at = time.strftime("%Y-%m-%dT%H:%M:%S")
    t0 = time.perf_counter()
    ledger = EfficiencyLedger(cfg.bandwidth)
    snaps, last = [], None
    for state in simulate(cfg):
        ledger.record(state.bytes_up, state.bytes_down, state.compute_s)
        snaps.append(state.snapshot)
        last = state
    P, by_channel = privacy_of(last, cfg)
    per_task = cfg.rounds // cfg.partition.num_tasks
    trust = TrustReport(continual_utility_of(snaps, per_task, cfg.lam), P, efficiency_score(ledger, cfg.rounds),
                        cfg.lam, tuple(snaps), by_channel)
    return RunRecord(cfg.run_id, cfg.to_dict(), cfg.seeds.master, snaps, snaps[-1].acc_all, trust, ledger,
                     started_at=started_at, wall_s=time.perf_counter() - t0)


def attack_round(cfg: ExperimentConfig, round: int, client: int, target_index: int = 0) -> dict[str, AttackResult]:
    """Replay a run deterministically up to ``round`` and attack ``client`` there."""
    cfg.validate()
    if not 1 <= round <= cfg.rounds:
        raise ConfigurationError(f"round {round} outside [1, {cfg.rounds}]")
    if not 0 <= client < cfg.partition.num_clients:
        raise ConfigurationError(f"client {client} outside [0, {cfg.partition.num_clients})")
    for state in simulate(cfg):
        if state.round == round:
            return attack_client(state, client, cfg, target_index)
    raise AssertionError("unreachable")


@dataclass
class SuiteResult:
    records: list[RunRecord]
    aggregates: list[dict]
    failures: list[dict]


def _run_one(cfg: ExperimentConfig):
    try:
        return run_experiment(cfg), None
    except Exception as exc:  # a failed run is recorded and the suite continues
        return None, {"run_id": cfg.run_id, "error": f"{type(exc).__name__}: {exc}"}


def run_suite(configs: Sequence[ExperimentConfig], seeds: Sequence[int] = DEFAULT_SEEDS,
              workers: int = 1) -> SuiteResult:
    """Every config under every seed, plus mean/stddev of the headline metrics per config."""
    if not configs:
        raise ConfigurationError("run_suite needs at least one config")
    jobs = [cfg.with_seed(s) for cfg in configs for s in seeds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    records = [r for r, _ in results if r is not None]
    failures = [f for _, f in results if f is not None]
    aggregates = []
    for i, cfg in enumerate(configs):
        mine = [r for r, _ in results[i * len(seeds):(i + 1) * len(seeds)] if r is not None]
        if not mine:
            continue
        entry = {"config_index": i, "run_id": cfg.run_id.rsplit("-s", 1)[0], "seeds": [r.seed for r in mine]}
        for name, get in (("final_acc_all", lambda r: r.final_acc_all), ("U", lambda r: r.trust.U),
                          ("P", lambda r: r.trust.P), ("E", lambda r: r.trust.E)):
            vals = [get(r) for r in mine if get(r) is not None]
            entry[name] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))} if vals else None
        aggregates.append(entry)
    return SuiteResult(records, aggregates, failures)


def _num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return format(float(v), ".17g")


def csv_text(records: Sequence[RunRecord], include_wall_clock: bool = True) -> str:
    cols = [c for c in CSV_COLUMNS if include_wall_clock or c not in WALL_CLOCK_COLUMNS]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for rec in records:
        part = rec.config["partition"]
        het = part["alpha"] if part["mode"] == "synchronous" else part["gamma"]
        for i, s in enumerate(rec.snapshots):
            row = {"run_id": rec.run_id, "variant": rec.config["variant"], "mode": part["mode"],
                   "alpha_or_gamma": _num(het), "seed": str(rec.seed), "round": str(s.round),
                   "task": str(s.task), "acc_prev": _num(s.acc_previous), "acc_cur": _num(s.acc_current),
                   "acc_all": _num(s.acc_all), "bytes_up": _num(rec.ledger.bytes_up[i]),
                   "bytes_down": _num(rec.ledger.bytes_down[i]), "compute_s": _num(rec.ledger.compute_s[i])}
            w.writerow([row[c] for c in cols])
    return buf.getvalue()


def emit_csv(records: Sequence[RunRecord], path) -> Path:
    if not records:
        raise ConfigurationError("emit_csv needs at least one record")
    path = Path(path)
    path.write_text(csv_text(records))
    return path


def _jsonable(obj: Any):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def emit_summary(records: Sequence[RunRecord], path, aggregates: Sequence[dict] = (),
                 failures: Sequence[dict] = ()) -> Path:
    if not records and not failures:
        raise ConfigurationError("emit_summary needs at least one record")
    doc = {"runs": [r.to_dict() for r in records]}
    if aggregates:
        doc["aggregates"] = list(aggregates)
    if failures:
        doc["failures"] = list(failures)
    path = Path(path)
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=False) + "\n")
    return path
