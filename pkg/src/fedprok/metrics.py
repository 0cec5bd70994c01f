"""Trustworthiness measures: accuracy splits, continual utility, privacy under attack, efficiency."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .data import Samples
from .errors import ArgumentError, DimensionError, FormatError, NumericError
from .nn import GradientSet, ModelParams, extractor_vjp, forward_features, forward_logits, grad_input_jacobian


@dataclass(frozen=True)
class AccuracySnapshot:
    round: int
    task: int
    acc_previous: float | None
    acc_current: float
    acc_all: float


@dataclass
class EfficiencyLedger:
    bandwidth: float = 1e6
    bytes_up: list[int] = field(default_factory=list)
    bytes_down: list[int] = field(default_factory=list)
    compute_s: list[float] = field(default_factory=list)

    def record(self, up: int, down: int, seconds: float):
        if up < 0 or down < 0 or seconds < 0:
            raise ArgumentError("ledger entries must be non-negative")
        self.bytes_up.append(int(up))
        self.bytes_down.append(int(down))
        self.compute_s.append(float(seconds))

    @property
    def rounds(self) -> int:
        return len(self.bytes_up)


@dataclass(frozen=True, eq=False)
class AttackResult:
    reconstructed_input: np.ndarray
    ground_truth: np.ndarray
    mse: float
    iterations_used: int
    losses: tuple[float, ...] = ()
    target_client: int | None = None
    round: int | None = None
    channel: str = "gradient"


@dataclass(frozen=True)
class TrustReport:
    U: float | None
    P: float | None
    E: float
    lam: float
    snapshots: tuple[AccuracySnapshot, ...] = ()
    P_by_channel: dict = field(default_factory=dict)


def evaluate(params: ModelParams, test: Samples, class_filter: Iterable[int]) -> float:
    """Top-1 accuracy over test samples whose label is in ``class_filter``.

    The argmax runs over every allocated class, not just the filter.
    """
    keep = sorted(set(int(c) for c in class_filter))
    if not keep:
        raise ArgumentError("class_filter is empty")
    sub = test.of_classes(keep)
    if len(sub) == 0:
        raise ArgumentError(f"no test samples for classes {keep}")
    pred = forward_logits(params, forward_features(params, sub.X)).argmax(axis=1)
    return float(np.mean(pred == sub.y))


def continual_utility(acc_previous: float, acc_current: float, lam: float = 0.5) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ArgumentError(f"lambda must lie in [0, 1], got {lam}")
    for a in (acc_previous, acc_current):
        if not 0.0 <= a <= 1.0:
            raise ArgumentError(f"accuracy {a} outside [0, 1]")
    return lam * acc_previous + (1.0 - lam) * acc_current


def privacy_score(mse: float) -> float:
    if not mse >= 0:
        raise ArgumentError(f"mse must be non-negative, got {mse}")
    return 1.0 - 1.0 / (1.0 + mse)


def efficiency_score(ledger: EfficiencyLedger, R: int) -> float:
    """Seconds per round: simulated transfer time plus summed compute time, over ``R``."""
    if R < 1:
        raise ArgumentError("R must be >= 1")
    if ledger.rounds < R:
        raise ArgumentError(f"ledger covers {ledger.rounds} rounds, need {R}")
    if not ledger.bandwidth > 0:
        raise ArgumentError("bandwidth must be positive")
    tau1 = (sum(ledger.bytes_up) + sum(ledger.bytes_down)) / ledger.bandwidth
    tau2 = float(sum(ledger.compute_s))
    return (tau1 + tau2) / R


def mse(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"mse of shapes {a.shape} and {b.shape}")
    return float(np.mean((a - b) ** 2))


def _descend(objective: Callable, gradient: Callable, x0: np.ndarray, iters: int, lr: float,
             max_halvings: int = 60):
    """Gradient descent that halves the step until the loss does not increase.

    The accepted loss sequence is therefore non-increasing. A successful step
    lets the next one grow by half again.
    """
    x = x0.copy()
    loss = objective(x)
    if not np.isfinite(loss):
        raise NumericError(f"attack loss is non-finite at iteration 0")
    losses = [loss]
    step = lr
    used = 0
    for it in range(iters):
        if loss == 0.0:
            break
        g = gradient(x)
        if not np.isfinite(g).all():
            raise NumericError(f"attack gradient is non-finite at iteration {it}")
        used = it + 1
        for _ in range(max_halvings):
            cand = x - step * g
            cand_loss = objective(cand)
            if np.isfinite(cand_loss) and cand_loss <= loss:
                x, loss = cand, cand_loss
                step *= 1.5
                break
            step *= 0.5
        else:
            break
        losses.append(loss)
    return x, losses, used


def _flat_grads(g: GradientSet) -> list[np.ndarray]:
    return [a for pair in g.layers() for a in pair]


def gradient_inversion_attack(params: ModelParams, observed_grads: GradientSet, input_shape, label: int,
                              attack_iters: int, attack_lr: float, seed, ground_truth=None,
                              init=None) -> AttackResult:
    """Reconstruct a single private sample from its parameter gradients.

    A dummy input drawn from N(0, 1) is moved by gradient descent to minimise
    the squared distance between its own gradients (under the known ``label``)
    and ``observed_grads``.
    """
    target = _flat_grads(observed_grads)
    shape = tuple(np.atleast_1d(input_shape))
    x0 = np.random.default_rng(seed).standard_normal(shape) if init is None else np.asarray(init, np.float64)
    if not np.isfinite(x0).all():
        raise NumericError("attack initialisation must be finite")

    def objective(x):
        g, _ = grad_input_jacobian(params, x, label)
        return float(sum(np.sum((a - b) ** 2) for a, b in zip(_flat_grads(g), target)))

    def gradient(x):
        g, jac = grad_input_jacobian(params, x, label)
        out = np.zeros(x.size)
        for a, b, j in zip(_flat_grads(g), target, jac):
            out += 2.0 * np.tensordot(j, a - b, axes=a.ndim)
        return out.reshape(shape)

    x, losses, used = _descend(objective, gradient, x0.reshape(shape), attack_iters, attack_lr)
    truth = x0 if ground_truth is None else np.asarray(ground_truth, dtype=np.float64).reshape(shape)
    return AttackResult(x, truth, mse(x, truth), used, tuple(losses), channel="gradient")


def prototype_inversion_attack(params: ModelParams, prototype, input_dim: int, attack_iters: int,
                               attack_lr: float, seed, ground_truth=None) -> AttackResult:
    """Search for an input whose features match a shared class prototype."""
    target = np.asarray(prototype, dtype=np.float64)
    if target.shape != (params.feature_dim,):
        raise DimensionError(f"prototype shape {target.shape} does not match feature_dim {params.feature_dim}")
    x0 = np.random.default_rng(seed).standard_normal(input_dim)

    def objective(x):
        return float(np.sum((forward_features(params, x[None, :])[0] - target) ** 2))

    def gradient(x):
        resid = forward_features(params, x[None, :]) - target
        return extractor_vjp(params, x[None, :], 2.0 * resid)[0]

    x, losses, used = _descend(objective, gradient, x0, attack_iters, attack_lr)
    truth = x0 if ground_truth is None else np.asarray(ground_truth, dtype=np.float64)
    return AttackResult(x, truth, mse(x, truth), used, tuple(losses), channel="prototype")


# Array dump: u32 ndim, ndim x u32 shape, values as f64. Little-endian.
def array_to_bytes(a) -> bytes:
    a = np.asarray(a, dtype=np.float64)
    head = np.array([a.ndim, *a.shape], dtype="<u4").tobytes()
    return head + a.astype("<f8").tobytes()


def array_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 4:
        raise FormatError("missing ndim", len(data))
    ndim = int(np.frombuffer(data, dtype="<u4", count=1)[0])
    if len(data) < 4 + 4 * ndim:
        raise FormatError("shape header truncated", len(data))
    shape = tuple(int(s) for s in np.frombuffer(data, dtype="<u4", count=ndim, offset=4))
    start = 4 + 4 * ndim
    need = start + 8 * int(np.prod(shape, dtype=np.int64))
    if len(data) != need:
        raise FormatError(f"expected {need} bytes for shape {shape}, got {len(data)}", min(len(data), need))
    return np.frombuffer(data, dtype="<f8", offset=start).reshape(shape).astype(np.float64)


def save_array(path, a):
    Path(path).write_bytes(array_to_bytes(a))


def load_array(path) -> np.ndarray:
    return array_from_bytes(Path(path).read_bytes())
