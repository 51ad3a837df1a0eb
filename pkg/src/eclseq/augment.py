"""Sequence-level (invasive) and feature-level (mild) augmentation operators.

All operators are pure functions of ``(input, spec, rng)``. Counts derived from
ratios use round-half-up with a floor of one, except substitution which uses
``max(1, floor(ratio * n))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .data import Sequence, pad_left
from .tensor import Tensor

SEQUENCE_KINDS = ("insert", "delete", "substitute_random", "crop", "reorder")
FEATURE_KINDS = ("dropout", "perturb", "normalize")
KINDS = SEQUENCE_KINDS + ("mask_plan",) + FEATURE_KINDS

DEFAULT_RATIOS = {
    "insert": 0.1,
    "delete": 0.1,
    "substitute_random": 0.2,
    "crop": 0.8,
    "reorder": 0.2,
    "mask_plan": 0.2,
    "dropout": 0.2,
    "perturb": 0.1,
    "normalize": 1.0,
}


class AugmentError(ValueError):
    pass


@dataclass
class AugSpec:
    kind: str
    ratio: float = None
    epsilon: float = 0.1
    repeat: int = None  # insert/delete; None -> max(1, floor(0.1 * n))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise AugmentError(f"unknown augmentation kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.ratio is None:
            self.ratio = DEFAULT_RATIOS[self.kind]
        if not 0.0 < self.ratio <= 1.0:
            raise AugmentError(f"{self.kind}: ratio must lie in (0, 1], got {self.ratio}")
        if self.kind == "perturb" and not self.epsilon > 0:
            raise AugmentError(f"perturb: epsilon must be positive, got {self.epsilon}")
        if self.repeat is not None and self.repeat < 1:
            raise AugmentError(f"{self.kind}: repeat must be >= 1, got {self.repeat}")


def round_count(x):
    return max(1, int(math.floor(x + 0.5)))


def _repeat(spec, n):
    return spec.repeat if spec.repeat is not None else max(1, int(math.floor(0.1 * n)))


def _negatives(active, item_count):
    pool = np.setdiff1d(np.arange(1, item_count + 1), active)
    if pool.size == 0:
        raise AugmentError("every catalog item already occurs in the sequence; nothing to draw from")
    return pool


def augment_sequence(seq, spec, rng, item_count):
    """Apply one sequence-level operator; returns a new left-padded ``Sequence``."""
    if spec.kind not in SEQUENCE_KINDS:
        raise AugmentError(f"{spec.kind!r} is not a sequence-level augmentation")
    if seq.true_length < 2:
        raise AugmentError(f"{spec.kind}: sequence needs at least 2 items, has {seq.true_length}")
    L = len(seq.items)
    cur = [int(v) for v in seq.active]
    n = len(cur)

    if spec.kind == "insert":
        pool = _negatives(np.asarray(cur), item_count)
        for _ in range(_repeat(spec, n)):
            pos = int(rng.integers(len(cur) + 1))
            cur.insert(pos, int(pool[rng.integers(len(pool))]))
        cur = cur[-L:]
    elif spec.kind == "delete":
        for _ in range(min(_repeat(spec, n), n - 1)):
            del cur[int(rng.integers(len(cur)))]
    elif spec.kind == "substitute_random":
        count = max(1, int(math.floor(spec.ratio * n)))
        pool = _negatives(np.asarray(cur), item_count)
        positions = rng.choice(n, size=count, replace=False)
        for p in positions:
            cur[int(p)] = int(pool[rng.integers(len(pool))])
    elif spec.kind == "crop":
        span = min(n, round_count(spec.ratio * n))
        start = int(rng.integers(n - span + 1))
        cur = cur[start:start + span]
    else:  # reorder
        span = min(n, round_count(spec.ratio * n))
        start = int(rng.integers(n - span + 1))
        block = cur[start:start + span]
        cur[start:start + span] = [block[i] for i in rng.permutation(span)]

    return Sequence(seq.user_id, pad_left(cur, L), len(cur))


@dataclass
class MaskPlan:
    positions: np.ndarray  # bool, same frame as the sequence; True = masked
    gamma: float

    @property
    def count(self):
        return int(self.positions.sum())


def mask_count(gamma, true_length):
    return min(true_length, round_count(gamma * true_length))


def make_mask_plan(seq, gamma, rng):
    """Choose ``round(gamma * n)`` (at least one) real slots uniformly without replacement."""
    if not 0.0 < gamma < 1.0:
        raise AugmentError(f"mask ratio gamma must lie in (0, 1), got {gamma}")
    if seq.true_length < 1:
        raise AugmentError("cannot mask an empty sequence")
    L = len(seq.items)
    offset = L - seq.true_length
    chosen = rng.choice(seq.true_length, size=mask_count(gamma, seq.true_length), replace=False)
    positions = np.zeros(L, dtype=bool)
    positions[offset + chosen] = True
    return MaskPlan(positions, gamma)


def batch_mask_plan(items, lengths, gamma, rng):
    """Row-wise :func:`make_mask_plan` over a padded batch; returns a (B, L) bool array."""
    rows = [make_mask_plan(Sequence(0, items[b], int(lengths[b])), gamma, rng).positions
            for b in range(len(items))]
    return np.stack(rows)


def augment_feature(h, spec, rng):
    """Apply a feature-level operator to a vector or a batch of row vectors."""
    if spec.kind not in FEATURE_KINDS:
        raise AugmentError(f"{spec.kind!r} is not a feature-level augmentation")
    h = h if isinstance(h, Tensor) else Tensor(h)
    if spec.kind == "normalize":
        norms = np.linalg.norm(h.data, axis=-1)
        if np.any(norms == 0):
            raise AugmentError("normalize: zero vector has no direction")
        return ops.normalize(h)
    if spec.kind == "dropout":
        return ops.dropout(h, ops.dropout_mask(rng, h.shape, spec.ratio))
    # perturb: delta = eps * (u * h) / ||u * h||, u ~ U(0, 1) fresh per vector; delta is a constant
    u = rng.random(h.shape)
    raw = u * h.data
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise AugmentError("perturb: noise direction is undefined for a zero vector")
    delta = spec.epsilon * raw / norms
    return ops.add(h, Tensor(delta))
