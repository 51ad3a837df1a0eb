"""Next-item, contrastive, masked-item and replaced-item-detection losses and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .model import item_logits
from .tensor import ShapeError, Tensor

TERMS = ("rec", "icl", "gen", "rid")
BCE_CLAMP = 1e-7


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    tau: float = 0.05
    lambda_icl: float = 0.3
    lambda_gen: float = 0.2
    lambda_rid: float = 0.1
    icl_positive_source: str = "dropout"  # or "generator"
    include_first_rid: bool = False
    # set from the training mode, not from config files
    active_terms: frozenset = field(default_factory=lambda: frozenset(TERMS))
    icl_generator_role: str = "none"  # none | extra_positive | extra_negative

    def __post_init__(self):
        if not self.tau > 0:
            raise LossError(f"temperature tau must be positive, got {self.tau}")
        for name in ("lambda_icl", "lambda_gen", "lambda_rid"):
            if getattr(self, name) < 0:
                raise LossError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.icl_positive_source not in ("dropout", "generator"):
            raise LossError(f"icl_positive_source must be 'dropout' or 'generator', got {self.icl_positive_source!r}")
        if self.icl_generator_role not in ("none", "extra_positive", "extra_negative"):
            raise LossError(f"unknown icl_generator_role {self.icl_generator_role!r}")
        self.active_terms = frozenset(self.active_terms)
        unknown = self.active_terms - set(TERMS)
        if unknown or "rec" not in self.active_terms:
            raise LossError(f"active_terms must include 'rec' and draw from {TERMS}, got {sorted(self.active_terms)}")

    def weight(self, term):
        return {"rec": 1.0, "icl": self.lambda_icl, "gen": self.lambda_gen, "rid": self.lambda_rid}[term]


@dataclass
class LossReport:
    total: float
    per_term: dict
    tensor: Tensor = None


def cross_entropy(logits, targets):
    """Mean of ``-log softmax(logits)[target]`` over rows; ``targets`` are column indices."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != len(targets):
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    if len(targets) == 0:
        raise LossError("cross_entropy over zero rows")
    picked = ops.take(ops.log_softmax(logits), (np.arange(len(targets)), targets))
    return ops.mul(ops.mean(picked), -1.0)


def rec_loss(hidden, targets, model):
    """Full-catalog next-item cross-entropy over every slot whose target is a real item."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
    if targets.shape != hidden.shape[:2]:
        raise ShapeError("rec_loss", hidden.shape, targets.shape)
    bi, pi = np.nonzero(targets)
    if len(bi) == 0:
        raise LossError("rec_loss: no position has a next-item target")
    logits = item_logits(model, ops.take(hidden, (bi, pi)))
    return cross_entropy(logits, targets[bi, pi] - 1)


def icl_loss(anchors, positives, tau, extra=None, extra_role="none"):
    """InfoNCE with cosine similarity; negatives are the other anchors in the batch.

    ``extra`` (B, d) joins the numerator (``extra_positive``) or the denominator
    (``extra_negative``) of each row.
    """
    if anchors.shape != positives.shape:
        raise ShapeError("icl_loss", anchors.shape, positives.shape)
    B = anchors.shape[0]
    if B < 2:
        raise LossError(f"icl_loss needs at least 2 rows for in-batch negatives, got {B}")
    inv_tau = 1.0 / tau
    pos = ops.reshape(ops.mul(ops.cosine_similarity(anchors, positives), inv_tau), (B, 1))
    unit = ops.normalize(anchors)
    sims = ops.mul(ops.matmul(unit, ops.transpose(unit, 0, 1)), inv_tau)
    negs = ops.where(~np.eye(B, dtype=bool), sims, ops.NEG_INF)
    cols = [pos]
    if extra is not None and extra_role != "none":
        if extra.shape != anchors.shape:
            raise ShapeError("icl_loss", anchors.shape, extra.shape, detail="extra view")
        ext = ops.reshape(ops.mul(ops.cosine_similarity(anchors, extra), inv_tau), (B, 1))
        if extra_role == "extra_positive":
            cols.append(ext)
        elif extra_role == "extra_negative":
            negs = ops.concat([negs, ext], axis=-1)
        else:
            raise LossError(f"unknown extra_role {extra_role!r}")
    n_pos = len(cols)
    lsm = ops.log_softmax(ops.concat(cols + [negs], axis=-1))
    if n_pos == 1:
        per_row = ops.take(lsm, (slice(None), 0))
    else:
        per_row = ops.log(ops.sum(ops.exp(ops.take(lsm, (slice(None), slice(0, n_pos)))), axis=-1))
    return ops.mul(ops.mean(per_row), -1.0)


def gen_loss(gen_logits, originals):
    """Mean masked-item cross-entropy; ``originals`` are item ids (1-based)."""
    originals = np.asarray(originals, dtype=np.int64).reshape(-1)
    if len(originals) == 0:
        raise LossError("gen_loss: empty mask set")
    return cross_entropy(gen_logits, originals - 1)


def rid_positions(lengths, L, include_first=False):
    """(B, L) bool of slots scored by the detection loss: real slots, minus the oldest unless asked."""
    lengths = np.asarray(lengths).reshape(-1)
    slots = np.arange(L)[None, :]
    start = (L - lengths)[:, None]
    keep = slots >= start
    if not include_first:
        keep &= slots > start
    return keep


def rid_loss(scores, substituted, original, lengths=None, include_first=False):
    """Binary cross-entropy: label 1 where S'' kept the original item, 0 where it was replaced."""
    substituted = np.atleast_2d(np.asarray(substituted))
    original = np.atleast_2d(np.asarray(original))
    if substituted.shape != original.shape or scores.shape != original.shape:
        raise ShapeError("rid_loss", scores.shape, substituted.shape, original.shape)
    if lengths is None:
        lengths = (original != 0).sum(axis=1)
    keep = rid_positions(lengths, original.shape[1], include_first)
    bi, pi = np.nonzero(keep)
    if len(bi) == 0:
        raise LossError("rid_loss: no scored positions")
    labels = (substituted[bi, pi] == original[bi, pi]).astype(np.float64)
    p = ops.clip(ops.take(scores, (bi, pi)), BCE_CLAMP, 1.0 - BCE_CLAMP)
    ll = ops.add(ops.mul(ops.log(p), Tensor(labels)),
                 ops.mul(ops.log(ops.sub(1.0, p)), Tensor(1.0 - labels)))
    return ops.mul(ops.mean(ll), -1.0)


def combine(per_term, weights):
    """``rec + lambda_icl*icl + lambda_gen*gen + lambda_rid*rid`` over the active terms."""
    missing = [t for t in TERMS if t in weights.active_terms and t not in per_term]
    if missing:
        raise LossError(f"active loss terms missing: {missing}")
    total = None
    values = {}
    for term in TERMS:
        if term not in weights.active_terms:
            continue
        t = per_term[term]
        t = t if isinstance(t, Tensor) else Tensor(t)
        values[term] = float(t.data)
        contrib = t if term == "rec" else ops.mul(t, weights.weight(term))
        total = contrib if total is None else ops.add(total, contrib)
    return LossReport(float(total.data), values, total)
