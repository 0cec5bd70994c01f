"""Server side: FedAvg over client weights and prototypical knowledge fusion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .client import ClientUpdate, PrototypeEntry, PrototypeList, serialize_prototypes
from .errors import ArgumentError
from .nn import ModelParams, average_params, grow_classifier, serialize_params


@dataclass(frozen=True, eq=False)
class KnowledgeEntry:
    """Fused prototype of one class.

    ``anchor`` is the prototype as it stood when the current task began; the
    temporal blend always mixes against it, so repeated fusion within a task
    does not compound.
    """

    prototype: np.ndarray
    total_count: int
    first_task: int
    last_fused_task: int
    anchor: np.ndarray | None = None


# class_id -> entry
KnowledgeBase = dict[int, KnowledgeEntry]


@dataclass(frozen=True, eq=False)
class GlobalState:
    params: ModelParams
    kb: KnowledgeBase
    round: int = 0


def align_heads(models: Sequence[ModelParams]) -> list[ModelParams]:
    """Zero-pad every classifier head to the largest class count."""
    width = max(m.num_classes for m in models)
    return [grow_classifier(m, width, 0.0, None) for m in models]


def fedavg(updates: Sequence[ClientUpdate], weighted: bool = False) -> ModelParams:
    """Mean of client weights in client-id order; sample-weighted when ``weighted``."""
    if not updates:
        raise ArgumentError("fedavg needs at least one client update")
    ordered = sorted(updates, key=lambda u: u.client_id)
    weights = [u.num_samples for u in ordered] if weighted else None
    return average_params(align_heads([u.params for u in ordered]), weights)


def fuse_prototypes(kb: KnowledgeBase, updates: Sequence[ClientUpdate], t: int, beta: float) -> KnowledgeBase:
    """Count-weighted horizontal mean per class, blended with the previous-task prototype for known classes."""
    if not 0.0 <= beta <= 1.0:
        raise ArgumentError(f"beta must lie in [0, 1], got {beta}")
    uploads: dict[int, list[PrototypeEntry]] = {}
    for u in sorted(updates, key=lambda u: u.client_id):
        for c, entry in u.prototypes.items():
            if entry.sample_count < 1:
                raise ArgumentError(f"client {u.client_id} uploaded class {c} with no samples")
            uploads.setdefault(c, []).append(entry)

    out = dict(kb)
    for c in sorted(uploads):
        entries = uploads[c]
        total = sum(e.sample_count for e in entries)
        if total <= 0:
            raise ArgumentError(f"class {c}: zero total sample count")
        mean = np.zeros_like(entries[0].prototype)
        for e in entries:
            mean += (e.sample_count / total) * e.prototype
        old = kb.get(c)
        if old is None or old.first_task >= t:
            out[c] = KnowledgeEntry(mean, total, t if old is None else old.first_task, t)
        else:
            anchor = old.prototype if old.last_fused_task < t else old.anchor
            out[c] = KnowledgeEntry(beta * mean + (1.0 - beta) * anchor, total, old.first_task, t, anchor)
    return out


def knowledge_as_prototypes(kb: KnowledgeBase) -> PrototypeList:
    return {c: PrototypeEntry(c, e.prototype, e.total_count, e.first_task) for c, e in sorted(kb.items())}


def distribute(state: GlobalState, share_prototypes: bool = True) -> tuple[ModelParams, PrototypeList, int]:
    """Snapshot of the global model and knowledge base with the bytes one client downloads."""
    protos = knowledge_as_prototypes(state.kb) if share_prototypes else {}
    nbytes = len(serialize_params(state.params)) + len(serialize_prototypes(protos))
    return state.params, protos, nbytes
