"""Shared-embedding transformer stack: causal encoder, bidirectional generator, conditional discriminator.

The discriminator re-uses the encoder's blocks by reference (same Tensor
objects), so every update to one is an update to the other. Only the
condition projection and the detection head belong to the discriminator.

Position ids count back from the newest slot (last slot = 0). With left
padding this makes real-item states independent of how much padding precedes
them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .checkpoint import load_into, save_tensors
from .tensor import ShapeError, Tensor, no_grad, parameter


class DropoutMasks:
    """Draws inverted-dropout masks in call order from one generator; ``None`` rng = eval mode."""

    def __init__(self, rng, rate):
        self.rng = rng
        self.rate = rate

    def __call__(self, shape):
        if self.rng is None or self.rate == 0.0:
            return None
        return ops.dropout_mask(self.rng, shape, self.rate)


def _no_dropout(shape):
    return None


@dataclass
class EncoderOutput:
    hidden: Tensor  # (B, L, d)
    aggregated: Tensor  # (B, d)


@dataclass
class GeneratorOutput:
    items: np.ndarray  # substituted sequences S'' (B, L)
    logits: Tensor  # (M, item_count) at the masked positions, row-major order
    positions: tuple  # (batch index, slot index) of masked positions
    originals: np.ndarray  # ground-truth ids at those positions


BLOCK_PARAMS = ("attn.q", "attn.k", "attn.v", "attn.o", "ffn.in", "ffn.out")


class EclsrModel:
    def __init__(self, item_count, max_len, d=64, n_layers=2, n_heads=2, dropout_rate=0.2,
                 seed=0, init_std=0.02):
        if d % n_heads:
            raise ValueError(f"hidden size {d} is not divisible by {n_heads} heads")
        self.item_count = item_count
        self.max_len = max_len
        self.d = d
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.dropout_rate = dropout_rate
        self.init_std = init_std
        self.params = {}

        rng = {name: np.random.default_rng([seed, code, 0x1417])
               for code, name in enumerate(("embed", "ube", "gen", "cd"))}
        table = rng["embed"].normal(0.0, init_std, (item_count + 2, d))
        table[0] = 0.0
        self._add("item_embed", table)
        self.ube_layers = self._stack("ube", rng["ube"])
        self.gen_layers = self._stack("gen", rng["gen"])
        self.cd_layers = self.ube_layers
        r = rng["cd"]
        self._add("cd.condition_proj.weight", r.normal(0.0, init_std, (2 * d, d)))
        self._add("cd.condition_proj.bias", np.zeros(d))
        self._add("cd.head.weight", r.normal(0.0, init_std, (d, 1)))
        self._add("cd.head.bias", np.zeros(1))

    def _add(self, name, value):
        t = parameter(value, name=name)
        self.params[name] = t
        return t

    def _stack(self, prefix, rng):
        d, std = self.d, self.init_std
        self._add(f"{prefix}.pos_embed", rng.normal(0.0, std, (self.max_len, d)))
        self._add(f"{prefix}.embed_ln.gamma", np.ones(d))
        self._add(f"{prefix}.embed_ln.beta", np.zeros(d))
        layers = []
        for i in range(self.n_layers):
            base = f"{prefix}.layer{i}"
            layer = {}
            for name in BLOCK_PARAMS:
                fan_out = 4 * d if name == "ffn.in" else d
                fan_in = 4 * d if name == "ffn.out" else d
                layer[name + ".weight"] = self._add(f"{base}.{name}.weight", rng.normal(0.0, std, (fan_in, fan_out)))
                layer[name + ".bias"] = self._add(f"{base}.{name}.bias", np.zeros(fan_out))
            for ln in ("ln1", "ln2"):
                layer[ln + ".gamma"] = self._add(f"{base}.{ln}.gamma", np.ones(d))
                layer[ln + ".beta"] = self._add(f"{base}.{ln}.beta", np.zeros(d))
            layers.append(layer)
        return layers

    @property
    def mask_id(self):
        return self.item_count + 1

    @property
    def item_embed(self):
        return self.params["item_embed"]

    def names(self, group):
        prefix = {"gen": "gen.", "ube": "ube.", "cd": "cd."}[group]
        return [n for n in self.params if n.startswith(prefix)]

    def generator_param_names(self):
        return self.names("gen")

    def snapshot(self):
        return {n: p.data.copy() for n, p in self.params.items()}

    def restore(self, snap):
        for n, p in self.params.items():
            p.data[...] = snap[n]

    def config(self):
        return {"item_count": self.item_count, "max_len": self.max_len, "d": self.d,
                "n_layers": self.n_layers, "n_heads": self.n_heads,
                "dropout_rate": self.dropout_rate, "init_std": self.init_std}

    def save(self, path, meta=None):
        save_tensors(path, self.params, {"model": self.config(), **(meta or {})})

    def load(self, path):
        return load_into(path, self.params)


def _attention_bias(items, causal):
    """Additive (B, 1, L, L) mask: real keys only, causal if asked; every slot may see itself."""
    B, L = items.shape
    allowed = np.broadcast_to((items != 0)[:, None, :], (B, L, L)).copy()
    if causal:
        allowed &= np.tril(np.ones((L, L), dtype=bool))[None]
    allowed |= np.eye(L, dtype=bool)[None]
    return Tensor(np.where(allowed, 0.0, ops.NEG_INF)[:, None])


def _block(layer, x, bias, n_heads, drop):
    B, L, d = x.shape
    dh = d // n_heads

    def heads(t):
        return ops.transpose(ops.reshape(t, (B, L, n_heads, dh)), 1, 2)

    q = heads(ops.linear(x, layer["attn.q.weight"], layer["attn.q.bias"]))
    k = heads(ops.linear(x, layer["attn.k.weight"], layer["attn.k.bias"]))
    v = heads(ops.linear(x, layer["attn.v.weight"], layer["attn.v.bias"]))
    scores = ops.add(ops.mul(ops.matmul(q, ops.transpose(k)), 1.0 / np.sqrt(dh)), bias)
    probs = ops.softmax(scores)
    probs = ops.dropout(probs, drop(probs.shape))
    ctx = ops.reshape(ops.transpose(ops.matmul(probs, v), 1, 2), (B, L, d))
    out = ops.linear(ctx, layer["attn.o.weight"], layer["attn.o.bias"])
    out = ops.dropout(out, drop(out.shape))
    x = ops.layer_norm(ops.add(x, out), layer["ln1.gamma"], layer["ln1.beta"])
    ff = ops.gelu(ops.linear(x, layer["ffn.in.weight"], layer["ffn.in.bias"]))
    ff = ops.linear(ff, layer["ffn.out.weight"], layer["ffn.out.bias"])
    ff = ops.dropout(ff, drop(ff.shape))
    return ops.layer_norm(ops.add(x, ff), layer["ln2.gamma"], layer["ln2.beta"])


def _encode(model, items, prefix, layers, causal, dropout):
    items = np.atleast_2d(np.asarray(items, dtype=np.int64))
    B, L = items.shape
    if L > model.max_len:
        raise ShapeError("encode", items.shape, (model.max_len,), detail="frame longer than the position table")
    drop = dropout or _no_dropout
    p = model.params
    pos_ids = np.arange(L - 1, -1, -1)
    x = ops.add(ops.embedding(p["item_embed"], items, padding_idx=0),
                ops.embedding(p[f"{prefix}.pos_embed"], pos_ids))
    x = ops.layer_norm(x, p[f"{prefix}.embed_ln.gamma"], p[f"{prefix}.embed_ln.beta"])
    x = ops.dropout(x, drop(x.shape))
    bias = _attention_bias(items, causal)
    for layer in layers:
        x = _block(layer, x, bias, model.n_heads, drop)
    return x


def lengths_of(items):
    return (np.atleast_2d(items) != 0).sum(axis=1)


def encode_causal(model, items, dropout=None, k=1):
    """Per-position states of the user behavior encoder plus their last-``k`` average."""
    items = np.atleast_2d(np.asarray(items, dtype=np.int64))
    hidden = _encode(model, items, "ube", model.ube_layers, True, dropout)
    return EncoderOutput(hidden, aggregate_last_k(hidden, lengths_of(items), k))


def encode_generator(model, items, dropout=None):
    return _encode(model, items, "gen", model.gen_layers, False, dropout)


def aggregate_last_k(hidden, lengths, k):
    """Mean of the last ``min(k, length)`` real states of each row of a left-padded (B, L, d) frame."""
    if k < 1:
        raise ValueError(f"window size k must be >= 1, got {k}")
    B, L, _ = hidden.shape
    lengths = np.asarray(lengths).reshape(-1)
    weights = np.zeros((B, L, 1))
    for b in range(B):
        w = max(1, min(k, int(lengths[b])))
        weights[b, L - w:, 0] = 1.0 / w
    return ops.sum(ops.mul(hidden, Tensor(weights)), axis=1)


def item_logits(model, h):
    """Inner products with real item rows only (ids 1..item_count); last axis index = id - 1."""
    real = ops.take(model.item_embed, slice(1, model.item_count + 1))
    return ops.matmul(h if h.ndim >= 2 else ops.reshape(h, (1, -1)), ops.transpose(real, 0, 1))


def score_items(model, h):
    """Ranking scores over the full id space; pad (0) and mask (last) ids are -inf."""
    h = h.data if isinstance(h, Tensor) else np.asarray(h, dtype=np.float64)
    scores = h @ model.item_embed.data.T
    scores[..., 0] = -np.inf
    scores[..., model.mask_id] = -np.inf
    return scores


def generate_substituted(model, items, plan, rng=None, sampling="argmax", dropout=None):
    """Fill the masked slots of ``items`` with the generator's predictions.

    Unmasked slots are copied. The fill is discrete, so no gradient reaches the
    generator through the returned sequence; its logits are returned for the
    masked-item loss.
    """
    items = np.atleast_2d(np.asarray(items, dtype=np.int64))
    plan = np.atleast_2d(np.asarray(plan, dtype=bool))
    if plan.shape != items.shape:
        raise ShapeError("generate_substituted", items.shape, plan.shape)
    if np.any(plan & (items == 0)):
        raise ValueError("mask plan covers padding slots")
    masked = np.where(plan, model.mask_id, items)
    hidden = encode_generator(model, masked, dropout)
    bi, pi = np.nonzero(plan)
    logits = item_logits(model, ops.take(hidden, (bi, pi)))
    if sampling == "argmax":
        fill = logits.data.argmax(axis=-1) + 1
    elif sampling == "categorical":
        if rng is None:
            raise ValueError("categorical sampling needs an rng")
        z = logits.data - logits.data.max(axis=-1, keepdims=True)
        prob = np.exp(z)
        prob /= prob.sum(axis=-1, keepdims=True)
        cdf = np.cumsum(prob, axis=-1)
        draws = rng.random(len(bi))[:, None]
        fill = np.minimum((cdf < draws).sum(axis=-1), model.item_count - 1) + 1
    else:
        raise ValueError(f"sampling must be 'argmax' or 'categorical', got {sampling!r}")
    out = items.copy()
    out[bi, pi] = fill
    return GeneratorOutput(out, logits, (bi, pi), items[bi, pi])


def discriminator_features(model, substituted, condition, dropout=None):
    """Shared causal stack over S'', concatenated with the condition states, projected 2d -> d."""
    substituted = np.atleast_2d(np.asarray(substituted, dtype=np.int64))
    hd = _encode(model, substituted, "ube", model.cd_layers, True, dropout)
    if condition.shape != hd.shape:
        raise ShapeError("discriminate", hd.shape, condition.shape, detail="condition must match the substituted frame")
    p = model.params
    z = ops.concat([hd, condition], axis=-1)
    return ops.gelu(ops.linear(z, p["cd.condition_proj.weight"], p["cd.condition_proj.bias"]))


def detection_scores(model, features):
    p = model.params
    B, L, _ = features.shape
    logit = ops.linear(features, p["cd.head.weight"], p["cd.head.bias"])
    return ops.sigmoid(ops.reshape(logit, (B, L)))


def discriminate(model, substituted, condition, dropout=None):
    """Per-slot probability that the item in S'' is the original one."""
    return detection_scores(model, discriminator_features(model, substituted, condition, dropout))


def encode_inference(model, items):
    with no_grad():
        return encode_causal(model, items).hidden.data
