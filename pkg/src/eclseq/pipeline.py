"""Joint training loop, full-catalog ranking evaluation and the experiment driver.

Randomness in a training step comes from per-purpose generators keyed by
``(seed, purpose, epoch, step)``. A mode that skips a branch therefore never
shifts the draws of the branches it does run, which is what makes the
``sasrec`` and zero-weight ``ecl_sr`` trajectories coincide.
"""
from __future__ import annotations

import contextlib
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .augment import AugSpec, augment_feature, augment_sequence, batch_mask_plan
from .config import RunConfig, dump_config, to_dict, weights_for_mode
from .data import Sequence, batch_iter, eval_frames
from .model import (DropoutMasks, EclsrModel, aggregate_last_k, discriminate, encode_causal,
                    generate_substituted)
from .optim import Adam
from .tensor import no_grad

log = logging.getLogger(__name__)

_STREAMS = {"ube": 1, "ube_view": 2, "ube_extra": 3, "mask": 4, "gen": 5, "sample": 6,
            "cd": 7, "mild": 8, "invasive": 9}


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, step, per_term):
        self.per_term = per_term
        terms = ", ".join(f"{k}={v!r}" for k, v in per_term.items())
        super().__init__(f"non-finite loss at epoch {epoch} step {step}: {terms}")


def step_rng(seed, epoch, step, purpose):
    return np.random.default_rng([seed, _STREAMS[purpose], epoch, step])


@dataclass
class MetricsReport:
    recall_at: dict
    ndcg_at: dict
    losses: list = field(default_factory=list)  # per epoch: term -> mean value
    seconds: float = 0.0
    best_epoch: int = 0
    users: int = 0


def make_model(cfg, item_count, max_len):
    m = cfg.model
    return EclsrModel(item_count, max_len, d=m.d, n_layers=m.n_layers, n_heads=m.n_heads,
                      dropout_rate=m.dropout_rate, seed=cfg.train.seed, init_std=m.init_std)


def _random_substitution(items, lengths, ratio, rng, item_count):
    out = items.copy()
    spec = AugSpec("substitute_random", ratio=ratio)
    for b in range(len(items)):
        seq = Sequence(0, items[b], int(lengths[b]))
        if seq.true_length >= 2:
            out[b] = augment_sequence(seq, spec, rng, item_count).items
    return out


def train_step(model, optimizer, batch, cfg, epoch=0, step=0):
    """One joint update on ``batch``; returns the loss report (values before the update)."""
    tc = cfg.train
    weights = weights_for_mode(tc.mode, tc.weights)
    active = weights.active_terms
    role = weights.icl_generator_role
    rate = model.dropout_rate

    def rng(purpose):
        return step_rng(tc.seed, epoch, step, purpose)

    terms = {}
    hidden = encode_causal(model, batch.inputs, dropout=DropoutMasks(rng("ube"), rate)).hidden
    terms["rec"] = losses.rec_loss(hidden, batch.targets, model)

    frozen = epoch >= tc.gen_freeze_epoch
    wants_view = "icl" in active and (role != "none" or weights.icl_positive_source == "generator")
    substituted = None
    if "gen" in active or "rid" in active or wants_view:
        plan = batch_mask_plan(batch.inputs, batch.lengths, tc.gamma, rng("mask"))
        with no_grad() if frozen else contextlib.nullcontext():
            gen = generate_substituted(model, batch.inputs, plan, rng("sample"), tc.sampling,
                                       dropout=DropoutMasks(rng("gen"), rate))
        if "gen" in active:
            terms["gen"] = losses.gen_loss(gen.logits, gen.originals)
        substituted = gen.items
        if cfg.aug.invasive.kind == "substitute_random":
            substituted = _random_substitution(batch.inputs, batch.lengths, cfg.aug.invasive.ratio,
                                               rng("invasive"), model.item_count)

    if "icl" in active:
        k = tc.k_window
        anchor = aggregate_last_k(hidden, batch.lengths, k)
        mild = cfg.aug.mild
        if weights.icl_positive_source == "generator":
            positive = encode_causal(model, substituted, DropoutMasks(rng("ube_view"), rate), k).aggregated
        elif mild.kind == "dropout":
            positive = encode_causal(model, batch.inputs, DropoutMasks(rng("ube_view"), rate), k).aggregated
        else:
            positive = augment_feature(anchor, mild, rng("mild"))
        extra = None
        if role != "none":
            extra = encode_causal(model, substituted, DropoutMasks(rng("ube_extra"), rate), k).aggregated
        terms["icl"] = losses.icl_loss(anchor, positive, weights.tau, extra, role)

    if "rid" in active:
        scores = discriminate(model, substituted, hidden, DropoutMasks(rng("cd"), rate))
        terms["rid"] = losses.rid_loss(scores, substituted, batch.inputs, batch.lengths,
                                       weights.include_first_rid)

    report = losses.combine(terms, weights)
    if not math.isfinite(report.total):
        raise TrainingDiverged(epoch, step, report.per_term)
    optimizer.zero_grad()
    report.tensor.backward()
    optimizer.step(exclude=set(model.generator_param_names()) if frozen else ())
    optimizer.zero_grad()
    report.tensor = None
    return report


def target_ranks(scores, targets):
    """Pessimistic 1-based rank of each target: number of candidates scoring at least as high."""
    tgt = scores[np.arange(len(targets)), targets]
    return (scores >= tgt[:, None]).sum(axis=1)


def metrics_from_ranks(ranks, Ks):
    """Recall@K and NDCG@K; sums are correctly rounded so the result ignores user order."""
    ranks = np.asarray(ranks)
    n = len(ranks)
    gains = 1.0 / np.log2(ranks + 1.0)
    recall, ndcg = {}, {}
    for k in Ks:
        hit = ranks <= k
        recall[k] = int(hit.sum()) / n
        ndcg[k] = math.fsum(gains[hit].tolist()) / n
    return recall, ndcg


def eval_workers():
    raw = os.environ.get("ECLSEQ_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"ECLSEQ_THREADS must be an integer, got {raw!r}") from None


def _rank_chunk(model, items, targets):
    with no_grad():
        hidden = encode_causal(model, items).hidden.data
    table = model.item_embed.data[1:model.item_count + 1]
    scores = hidden[:, -1] @ table.T
    return target_ranks(scores, targets - 1)


def evaluate(model, split, phase, Ks, workers=None, chunk=256):
    """Rank each user's held-out item against the whole catalog (history items included)."""
    items, _, targets = eval_frames(split, phase)
    if len(items) == 0:
        raise ValueError("cannot evaluate an empty split")
    workers = workers or eval_workers()
    spans = [(lo, min(lo + chunk, len(items))) for lo in range(0, len(items), chunk)]
    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda s: _rank_chunk(model, items[s[0]:s[1]], targets[s[0]:s[1]]), spans))
    else:
        parts = [_rank_chunk(model, items[a:b], targets[a:b]) for a, b in spans]
    ranks = np.concatenate(parts)
    recall, ndcg = metrics_from_ranks(ranks, Ks)
    return MetricsReport(recall, ndcg, users=len(ranks))


def _metric_fields(report):
    out = {}
    for k in sorted(report.recall_at):
        out[f"recall@{k}"] = report.recall_at[k]
        out[f"ndcg@{k}"] = report.ndcg_at[k]
    return out


def _selection_key(report):
    k = 10 if 10 in report.recall_at else min(report.recall_at)
    return (report.recall_at[k], report.ndcg_at[k])


class MetricsLog:
    def __init__(self, path=None):
        self.path = path
        self.records = []
        if path:
            open(path, "w").close()

    def write(self, record):
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def run_experiment(cfg: RunConfig, dataset, output_dir=None, epoch_callback=None):
    """Train ``cfg.train.epochs`` epochs, keep the best-validation parameters, report test metrics.

    Writes ``metrics.jsonl``, ``config.yaml``, ``best.ckpt`` and ``final.ckpt``
    into ``output_dir`` when given. Returns ``(test MetricsReport, model)``; the
    model holds the final parameters.
    """
    split = dataset.split
    tc = cfg.train
    Ks = sorted(set(cfg.eval.Ks))
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        with open(os.path.join(output_dir, "config.yaml"), "w", encoding="utf-8") as fh:
            fh.write(dump_config(cfg))
    mlog = MetricsLog(os.path.join(output_dir, "metrics.jsonl") if output_dir else None)

    t0 = time.perf_counter()
    model = make_model(cfg, split.item_count, split.max_len)
    optimizer = Adam(model.params, lr=tc.lr)
    weights = weights_for_mode(tc.mode, tc.weights)

    valid = evaluate(model, split, "valid", Ks)
    mlog.write({"epoch": 0, "split": "valid", "mode": tc.mode, "weights": to_dict(tc.weights),
                "active_terms": sorted(weights.active_terms), "losses": {},
                **_metric_fields(valid), "seconds": time.perf_counter() - t0})
    best_key, best_epoch, best = _selection_key(valid), 0, model.snapshot()
    history = []

    for epoch in range(tc.epochs):
        sums, steps = {}, 0
        for step, batch in enumerate(batch_iter(split, tc.batch_size, tc.seed, epoch)):
            report = train_step(model, optimizer, batch, cfg, epoch, step)
            for term, value in report.per_term.items():
                sums[term] = sums.get(term, 0.0) + value
            sums["total"] = sums.get("total", 0.0) + report.total
            steps += 1
        mean_losses = {k: v / max(steps, 1) for k, v in sums.items()}
        history.append(mean_losses)
        valid = evaluate(model, split, "valid", Ks)
        mlog.write({"epoch": epoch + 1, "split": "valid", "losses": mean_losses,
                    **_metric_fields(valid), "seconds": time.perf_counter() - t0})
        key = _selection_key(valid)
        if key > best_key:
            best_key, best_epoch, best = key, epoch + 1, model.snapshot()
        if epoch_callback is not None:
            epoch_callback(epoch + 1, model, valid, mean_losses)

    final = model.snapshot()
    if output_dir:
        model.save(os.path.join(output_dir, "final.ckpt"), {"epoch": tc.epochs})
    model.restore(best)
    test = evaluate(model, split, "test", Ks)
    if output_dir:
        model.save(os.path.join(output_dir, "best.ckpt"), {"epoch": best_epoch})
    model.restore(final)

    test.losses = history
    test.best_epoch = best_epoch
    test.seconds = time.perf_counter() - t0
    mlog.write({"epoch": best_epoch, "split": "test", **_metric_fields(test), "seconds": test.seconds})
    return test, model


def detection_auc(model, split, ratio=0.2, seed=0, include_first=False, phase="test"):
    """Position-level AUC of the discriminator on randomly substituted held-out histories.

    Positives are slots whose item was replaced; the detector's "replaced" score
    is ``1 - p(original)``. Conditions come from the encoder on the unedited
    history, as in training.
    """
    items, lengths, _ = eval_frames(split, phase)
    keep = lengths >= 2
    items, lengths = items[keep], lengths[keep]
    rng = np.random.default_rng([seed, 0xA0C])
    edited = _random_substitution(items, lengths, ratio, rng, model.item_count)
    with no_grad():
        condition = encode_causal(model, items).hidden
        scores = discriminate(model, edited, condition).data
    mask = losses.rid_positions(lengths, items.shape[1], include_first)
    replaced = (edited != items)[mask]
    return roc_auc(replaced, 1.0 - scores[mask])


def roc_auc(labels, scores):
    """Mann-Whitney AUC with ties counted as one half."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    pos, neg = scores[labels], scores[~labels]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs both positive and negative examples")
    order = np.sort(neg)
    below = np.searchsorted(order, pos, side="left")
    ties = np.searchsorted(order, pos, side="right") - below
    return float((below + 0.5 * ties).sum() / (len(pos) * len(neg)))


__all__ = ["train_step", "evaluate", "run_experiment", "detection_auc", "roc_auc", "MetricsReport",
           "target_ranks", "metrics_from_ranks", "TrainingDiverged"]
