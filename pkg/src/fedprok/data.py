"""Synthetic class-structured data and per-client class-incremental task streams."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, FormatError


@dataclass(frozen=True, eq=False)
class Samples:
    """A labelled sample set: ``X`` is ``(n, input_dim)``, ``y`` holds class indices."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError(f"inconsistent sample arrays: X {X.shape}, y {y.shape}")
        if y.size and y.min() < 0:
            raise ValueError("labels must be non-negative")
        if not np.isfinite(X).all():
            raise ValueError("sample features must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.y.shape[0]

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(int(c) for c in np.unique(self.y))

    def subset(self, idx) -> "Samples":
        idx = np.asarray(idx, dtype=np.int64)
        return Samples(self.X[idx], self.y[idx])

    def of_classes(self, classes) -> "Samples":
        return self.subset(np.flatnonzero(np.isin(self.y, list(classes))))

    def __eq__(self, other):
        if not isinstance(other, Samples):
            return NotImplemented
        return np.array_equal(self.X, other.X) and np.array_equal(self.y, other.y)

    __hash__ = None


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 8
    input_dim: int = 16
    train_per_class: int = 200
    test_per_class: int = 50
    class_center_scale: float = 1.0
    within_class_stddev: float = 0.5
    seed: int = 0

    def validate(self):
        for name in ("num_classes", "input_dim", "train_per_class", "test_per_class"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"dataset.{name} must be >= 1")
        if not self.within_class_stddev > 0:
            raise ConfigurationError("dataset.within_class_stddev must be > 0")
        if not self.class_center_scale >= 0:
            raise ConfigurationError("dataset.class_center_scale must be >= 0")


@dataclass(frozen=True)
class PartitionConfig:
    mode: str = "synchronous"
    alpha: float | None = 0.5
    gamma: float | None = None
    num_clients: int = 3
    num_tasks: int = 4
    gamma_rounding: str = "exact"
    seed: int = 0

    def validate(self):
        if self.mode not in ("synchronous", "asynchronous"):
            raise ConfigurationError(f"partition.mode must be 'synchronous' or 'asynchronous', got {self.mode!r}")
        if self.num_clients < 1:
            raise ConfigurationError("partition.num_clients must be >= 1")
        if self.num_tasks < 1:
            raise ConfigurationError("partition.num_tasks must be >= 1")
        if self.mode == "synchronous" and not (self.alpha is not None and self.alpha > 0):
            raise ConfigurationError("synchronous partition needs alpha > 0")
        if self.mode == "asynchronous" and not (self.gamma is not None and 0 <= self.gamma <= 1):
            raise ConfigurationError("asynchronous partition needs gamma in [0, 1]")
        if self.gamma_rounding not in ("exact", "nearest"):
            raise ConfigurationError("partition.gamma_rounding must be 'exact' or 'nearest'")


def generate_dataset(spec: DatasetSpec) -> tuple[Samples, Samples]:
    """Gaussian clusters around seeded uniform class centres; train and test drawn independently."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    centers = rng.uniform(-spec.class_center_scale, spec.class_center_scale, (spec.num_classes, spec.input_dim))

    def draw(per_class):
        X = np.concatenate([
            centers[c] + rng.normal(0.0, spec.within_class_stddev, (per_class, spec.input_dim))
            for c in range(spec.num_classes)
        ])
        return Samples(X, np.repeat(np.arange(spec.num_classes), per_class))

    train = draw(spec.train_per_class)
    test = draw(spec.test_per_class)
    return train, test


def class_centers(spec: DatasetSpec) -> np.ndarray:
    """The centres :func:`generate_dataset` draws for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    return rng.uniform(-spec.class_center_scale, spec.class_center_scale, (spec.num_classes, spec.input_dim))


def _dirichlet_cuts(rng, alpha, k, n, max_tries=100_000):
    for _ in range(max_tries):
        g = rng.gamma(alpha, 1.0, k)
        total = g.sum()
        if not total > 0:
            continue
        cuts = (np.cumsum(g / total) * n).astype(np.int64)[:-1]
        sizes = np.diff(np.concatenate([[0], cuts, [n]]))
        if (sizes >= 1).all():
            return cuts
    raise ConfigurationError(f"could not draw a Dirichlet({alpha}) split giving every client a sample in {max_tries} tries")


def partition_synchronous(train: Samples, cfg: PartitionConfig) -> list[Samples]:
    """Per-class Dirichlet(alpha) label skew; every client keeps at least one sample of every class."""
    cfg.validate()
    if cfg.mode != "synchronous":
        raise ConfigurationError("partition_synchronous needs mode 'synchronous'")
    rng = np.random.default_rng(cfg.seed)
    owned = [[] for _ in range(cfg.num_clients)]
    for c in train.classes:
        idx = np.flatnonzero(train.y == c)
        if idx.size < cfg.num_clients:
            raise ConfigurationError(
                f"class {c} has {idx.size} samples; need >= {cfg.num_clients} so every client gets one")
        idx = rng.permutation(idx)
        for k, part in enumerate(np.split(idx, _dirichlet_cuts(rng, cfg.alpha, cfg.num_clients, idx.size))):
            owned[k].append(part)
    return [train.subset(np.sort(np.concatenate(parts))) for parts in owned]


def consensus_rate(common: int, unique: int) -> float:
    """Share of a client's classes that every client holds."""
    return common / (common + unique)


def consensus_split(num_classes: int, num_clients: int, gamma: float, rounding: str = "exact") -> tuple[int, int]:
    """Number of common classes and of unique classes per client for a consensus rate.

    Each client holds ``common + unique`` classes and ``common + K * unique``
    must equal ``num_classes``. ``rounding='nearest'`` snaps to the closest
    achievable rate (ties go to fewer common classes).
    """
    options = [(c, (num_classes - c) // num_clients) for c in range(num_classes + 1)
               if (num_classes - c) % num_clients == 0]
    options = [(c, u) for c, u in options if c + u >= 1]
    target = Fraction(gamma).limit_denominator(10**6)
    for c, u in options:
        if Fraction(c, c + u) == target:
            return c, u
    if rounding == "nearest":
        return min(options, key=lambda cu: (abs(consensus_rate(*cu) - gamma), cu[0]))
    achievable = sorted({round(consensus_rate(c, u), 6) for c, u in options})
    raise ConfigurationError(
        f"gamma={gamma} is not achievable with {num_classes} classes and {num_clients} clients: "
        f"num_classes - common must be divisible by {num_clients}; achievable rates are {achievable}")


def partition_asynchronous(train: Samples, cfg: PartitionConfig) -> list[Samples]:
    """Common classes split round-robin across clients, unique classes wholly owned by one client."""
    cfg.validate()
    if cfg.mode != "asynchronous":
        raise ConfigurationError("partition_asynchronous needs mode 'asynchronous'")
    classes = np.array(train.classes)
    common, unique = consensus_split(len(classes), cfg.num_clients, cfg.gamma, cfg.gamma_rounding)
    rng = np.random.default_rng(cfg.seed)
    order = classes[rng.permutation(len(classes))]
    owned = [[] for _ in range(cfg.num_clients)]
    for c in order[:common]:
        idx = rng.permutation(np.flatnonzero(train.y == c))
        if idx.size < cfg.num_clients:
            raise ConfigurationError(f"common class {c} has {idx.size} samples; need >= {cfg.num_clients}")
        for k in range(cfg.num_clients):
            owned[k].append(idx[k::cfg.num_clients])
    for k in range(cfg.num_clients):
        for c in order[common + k * unique: common + (k + 1) * unique]:
            owned[k].append(np.flatnonzero(train.y == c))
    return [train.subset(np.sort(np.concatenate(parts))) for parts in owned]


def partition(train: Samples, cfg: PartitionConfig) -> list[Samples]:
    if cfg.mode == "synchronous":
        return partition_synchronous(train, cfg)
    return partition_asynchronous(train, cfg)


@dataclass(frozen=True, eq=False)
class Task:
    index: int
    classes: tuple[int, ...]
    samples: Samples


@dataclass(frozen=True, eq=False)
class TaskStream:
    client_id: int
    tasks: tuple[Task, ...]
    rounds_per_task: int

    def task(self, t: int) -> Task:
        return self.tasks[t - 1]

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(c for task in self.tasks for c in task.classes)


def class_order(num_classes: int, seed) -> np.ndarray:
    """Seeded global class permutation shared by every client."""
    return np.random.default_rng(seed).permutation(num_classes)


def build_task_stream(client_id: int, samples: Samples, cfg: PartitionConfig, rounds_per_task: int,
                      order: Sequence[int], common: Sequence[int] = ()) -> TaskStream:
    """Slice the client's classes into ``num_tasks`` contiguous, disjoint class sets.

    Classes follow ``order``; classes listed in ``common`` come first, which
    lines shared classes up at the same task position on every client.
    """
    rank = {int(c): i for i, c in enumerate(order)}
    held = samples.classes
    missing = [c for c in held if c not in rank]
    if missing:
        raise ConfigurationError(f"classes {missing} are absent from the class order")
    common = set(int(c) for c in common)
    ranked = sorted(held, key=lambda c: (c not in common, rank[c]))
    T = cfg.num_tasks
    if len(ranked) % T:
        raise ConfigurationError(
            f"client {client_id} holds {len(ranked)} classes, not divisible by num_tasks={T}")
    per = len(ranked) // T
    tasks = []
    for t in range(T):
        cls = tuple(ranked[t * per:(t + 1) * per])
        tasks.append(Task(t + 1, cls, samples.of_classes(cls)))
    return TaskStream(client_id, tuple(tasks), rounds_per_task)


def build_task_streams(parts: Sequence[Samples], cfg: PartitionConfig, rounds_per_task: int,
                       num_classes: int) -> list[TaskStream]:
    order = class_order(num_classes, [cfg.seed, 1])
    common = ()
    if cfg.mode == "asynchronous":
        common = sorted(set.intersection(*[set(p.classes) for p in parts]))
    return [build_task_stream(k, p, cfg, rounds_per_task, order, common) for k, p in enumerate(parts)]


def round_to_task(r: int, R: int, T: int) -> int:
    """Task active at 1-indexed round ``r`` of ``R``, each of ``T`` tasks lasting ``R / T`` rounds."""
    if T < 1 or R < 1 or R % T:
        raise ConfigurationError(f"rounds R={R} must be a positive multiple of num_tasks T={T}")
    if not 1 <= r <= R:
        raise ConfigurationError(f"round {r} outside [1, {R}]")
    return (r - 1) // (R // T) + 1


# Sample dump: b"FPKS", u32 n, u32 input_dim, n x u32 labels, n*input_dim x f64. Little-endian.
_MAGIC = b"FPKS"


def samples_to_bytes(samples: Samples) -> bytes:
    n, d = samples.X.shape
    return (_MAGIC + struct.pack("<II", n, d) + samples.y.astype("<u4").tobytes()
            + samples.X.astype("<f8").tobytes())


def samples_from_bytes(data: bytes) -> Samples:
    if len(data) < 12 or data[:4] != _MAGIC:
        raise FormatError("not a sample dump (bad magic or short header)", 0)
    n, d = struct.unpack_from("<II", data, 4)
    need = 12 + 4 * n + 8 * n * d
    if len(data) != need:
        raise FormatError(f"expected {need} bytes for {n}x{d} samples, got {len(data)}", min(len(data), need))
    y = np.frombuffer(data, dtype="<u4", count=n, offset=12).astype(np.int64)
    X = np.frombuffer(data, dtype="<f8", count=n * d, offset=12 + 4 * n).reshape(n, d).astype(np.float64)
    return Samples(X, y)


def save_samples(path, samples: Samples):
    Path(path).write_bytes(samples_to_bytes(samples))


def load_samples(path) -> Samples:
    return samples_from_bytes(Path(path).read_bytes())
