"""Client side: local prototypes, base-class selection, feature translation, local training."""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from .data import Samples, Task
from .errors import ArgumentError, DimensionError, FormatError, NumericError
from .nn import (GradientSet, ModelParams, apply_sgd, forward_features, grow_classifier, loss_and_grads,
                 serialize_params)


@dataclass(frozen=True, eq=False)
class PrototypeEntry:
    class_id: int
    prototype: np.ndarray
    sample_count: int
    task_of_origin: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ArgumentError(f"class {self.class_id}: sample_count must be >= 1")
        vec = np.array(self.prototype, dtype=np.float64)
        if vec.ndim != 1 or not np.isfinite(vec).all():
            raise NumericError(f"class {self.class_id}: prototype must be a finite vector")
        vec.flags.writeable = False
        object.__setattr__(self, "prototype", vec)


# class_id -> entry; at most one entry per class by construction.
PrototypeList = dict[int, PrototypeEntry]


def compute_prototypes(params: ModelParams, samples: Samples, task_index: int = 1) -> PrototypeList:
    """Mean feature of each class present in ``samples``."""
    if len(samples) == 0:
        raise ArgumentError("cannot compute prototypes of an empty sample set")
    feats = forward_features(params, samples.X)
    out = {}
    for c in samples.classes:
        rows = feats[samples.y == c]
        out[c] = PrototypeEntry(c, rows.mean(axis=0), rows.shape[0], task_index)
    return out


def cosine_relation(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"cosine of vectors with shapes {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise NumericError("cosine relation undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _vector(v) -> np.ndarray:
    return v.prototype if isinstance(v, PrototypeEntry) else np.asarray(v, dtype=np.float64)


def select_base_class(prev_proto, new_prototypes: Mapping, rule: str = "argmax_similarity") -> int:
    """New class whose prototype is angularly nearest to ``prev_proto``.

    ``rule='literal_argmin'`` instead picks the least similar class. Ties go to
    the smallest class id.
    """
    if not new_prototypes:
        raise ArgumentError("no candidate base classes")
    if rule not in ("argmax_similarity", "literal_argmin"):
        raise ArgumentError(f"unknown base-class rule {rule!r}")
    sign = 1.0 if rule == "argmax_similarity" else -1.0
    best, best_score = None, -np.inf
    for c in sorted(new_prototypes):
        score = sign * cosine_relation(prev_proto, _vector(new_prototypes[c]))
        if score > best_score:
            best, best_score = c, score
    return int(best)


def translate_features(real_features, mu_n, mu_p) -> np.ndarray:
    """Shift base-class features by ``mu_p - mu_n`` to imitate previous class ``p``."""
    f = np.asarray(real_features, dtype=np.float64)
    mu_n = np.asarray(mu_n, dtype=np.float64)
    mu_p = np.asarray(mu_p, dtype=np.float64)
    if f.ndim != 2 or mu_n.shape != (f.shape[1],) or mu_p.shape != (f.shape[1],):
        raise DimensionError(f"features {f.shape}, mu_n {mu_n.shape}, mu_p {mu_p.shape} do not agree")
    return f + (mu_p - mu_n)


# Prototype record: u32 class_id, u32 sample_count, feature_dim x f64. Little-endian, no list header.
def prototype_record_size(feature_dim: int) -> int:
    return 8 + 8 * feature_dim


def serialize_prototypes(protos: PrototypeList) -> bytes:
    return b"".join(
        struct.pack("<II", c, protos[c].sample_count) + protos[c].prototype.astype("<f8").tobytes()
        for c in sorted(protos)
    )


def deserialize_prototypes(data: bytes, feature_dim: int, task_of_origin: int = 0) -> PrototypeList:
    size = prototype_record_size(feature_dim)
    if len(data) % size:
        raise FormatError(f"payload is not a whole number of {size}-byte records", len(data) - len(data) % size)
    out = {}
    for off in range(0, len(data), size):
        c, count = struct.unpack_from("<II", data, off)
        vec = np.frombuffer(data, dtype="<f8", count=feature_dim, offset=off + 8).astype(np.float64)
        if c in out:
            raise FormatError(f"duplicate class {c}", off)
        out[c] = PrototypeEntry(c, vec, count, task_of_origin)
    return out


@dataclass(frozen=True, eq=False)
class ClientState:
    client_id: int
    params: ModelParams
    prototypes: PrototypeList
    seen_classes: tuple[int, ...] = ()
    current_task: int = 0
    current_classes: tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class ClientUpdate:
    client_id: int
    params: ModelParams
    prototypes: PrototypeList
    num_samples: int
    bytes_uploaded: int


@dataclass(frozen=True)
class LocalHyper:
    epochs: int = 2
    lr: float = 0.1
    batch_size: int = 16
    pseudo_per_class: int | None = None
    translate: bool = True
    share_prototypes: bool = True
    train_extractor: bool = True
    base_class_rule: str = "argmax_similarity"


def _pseudo_count(hyper: LocalHyper, task_samples: Samples) -> int:
    if hyper.pseudo_per_class is not None:
        return hyper.pseudo_per_class
    return int(round(len(task_samples) / len(task_samples.classes)))


def _step(params, X_real, y_real, F_pseudo, y_pseudo, train_extractor, lr):
    """One SGD step on the mean loss over real samples and pseudo features."""
    n_r, n_p = len(y_real), len(y_pseudo)
    n = n_r + n_p
    if not train_extractor:
        feats = np.concatenate([X_real, F_pseudo]) if n_p else X_real
        labels = np.concatenate([y_real, y_pseudo]) if n_p else y_real
        _, g = loss_and_grads(params, feats, labels, train_extractor=False)
        return apply_sgd(params, g, lr)
    parts = []
    if n_r:
        parts.append((n_r / n, loss_and_grads(params, X_real, y_real, train_extractor=True)[1]))
    if n_p:
        parts.append((n_p / n, loss_and_grads(params, F_pseudo, y_pseudo, train_extractor=False)[1]))
    if len(parts) == 1:
        return apply_sgd(params, parts[0][1], lr)
    (a, ga), (b, gb) = parts
    mix = lambda u, v: (a * u[0] + b * v[0], a * u[1] + b * v[1])
    layers = [mix(u, v) for u, v in zip(ga.layers(), gb.layers())]
    return apply_sgd(params, GradientSet(tuple(layers[:-1]), layers[-1]), lr)


def local_train_round(state: ClientState, task: Task, global_prototypes: PrototypeList | None,
                      hyper: LocalHyper, rng: np.random.Generator) -> tuple[ClientState, ClientUpdate]:
    """One round of local work on the active task.

    Stored prototypes are overwritten by the received global list, prototypes
    of the task's classes are recomputed with the current extractor, and from
    the second task on every previous class is rehearsed with translated
    features of its nearest new class. ``rng`` drives batch shuffling; pseudo
    feature sampling uses an independent child stream so that disabling
    translation leaves the shuffles untouched.
    """
    samples = task.samples
    if len(samples) == 0:
        raise ArgumentError(f"client {state.client_id}: task {task.index} has no samples")
    t = task.index
    seen, current = state.seen_classes, state.current_classes
    if t != state.current_task:
        seen = tuple(sorted(set(seen) | set(current)))
        current = tuple(task.classes)
    clash = set(seen) & set(task.classes)
    if clash:
        raise ArgumentError(f"client {state.client_id}: classes {sorted(clash)} reappear in task {t}")

    params = state.params
    needed = max([*task.classes, *(global_prototypes or {})], default=-1) + 1
    if needed > params.num_classes:
        params = grow_classifier(params, needed, 0.0, None)

    protos = dict(state.prototypes)
    if global_prototypes is not None:
        protos.update(global_prototypes)
    fresh = compute_prototypes(params, samples, t)
    protos.update(fresh)

    pseudo_rng, shuffle_rng = rng.spawn(2)
    plan = []
    if t > 1 and hyper.translate:
        missing = [p for p in seen if p not in protos]
        if missing:
            raise RuntimeError(f"client {state.client_id}: no stored prototype for previous classes {missing}")
        previous = [c for c in sorted(protos) if protos[c].task_of_origin < t and c not in fresh]
        count = _pseudo_count(hyper, samples)
        if count > 0:
            for p in previous:
                n = select_base_class(protos[p].prototype, fresh, hyper.base_class_rule)
                plan.append((p, n, min(count, fresh[n].sample_count)))

    X, y = samples.X, samples.y
    frozen_feats = None if hyper.train_extractor else forward_features(params, X)
    for _ in range(hyper.epochs):
        feats = frozen_feats
        pseudo_F, pseudo_y = [], []
        if plan:
            base = feats if feats is not None else forward_features(params, X)
            for p, n, m in plan:
                rows = np.flatnonzero(y == n)
                pick = np.sort(pseudo_rng.choice(rows, size=m, replace=False))
                pseudo_F.append(translate_features(base[pick], fresh[n].prototype, protos[p].prototype))
                pseudo_y.append(np.full(m, p, dtype=np.int64))
        pseudo_F = np.concatenate(pseudo_F) if pseudo_F else np.zeros((0, params.feature_dim))
        pseudo_y = np.concatenate(pseudo_y) if pseudo_y else np.zeros(0, dtype=np.int64)
        real_in = feats if feats is not None else X
        n_real = len(y)
        order = shuffle_rng.permutation(n_real + len(pseudo_y))
        for start in range(0, order.size, hyper.batch_size):
            batch = order[start:start + hyper.batch_size]
            r_idx = batch[batch < n_real]
            p_idx = batch[batch >= n_real] - n_real
            params = _step(params, real_in[r_idx], y[r_idx], pseudo_F[p_idx], pseudo_y[p_idx],
                           hyper.train_extractor, hyper.lr)

    upload = fresh if hyper.share_prototypes else {}
    nbytes = len(serialize_params(params)) + len(serialize_prototypes(upload))
    new_state = replace(state, params=params, prototypes=protos, seen_classes=seen, current_task=t,
                        current_classes=current)
    return new_state, ClientUpdate(state.client_id, params, upload, len(samples), nbytes)
