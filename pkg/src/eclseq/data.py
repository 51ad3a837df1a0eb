"""Interaction logs, k-core filtering, leave-two-out splits and padded training batches.

Item and user ids are dense and start at 1. Item id 0 is padding, item id
``item_count + 1`` is the mask token. Sequences are left-padded so the most
recent interaction always sits in the last slot.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import read_blob, write_blob

log = logging.getLogger(__name__)

CACHE_VERSION = 1
DELIMITERS = {"tab": "\t", "comma": ",", "space": None, "whitespace": None, "ml1m": "::"}
MALFORMED_LIMIT = 0.01


class DataError(ValueError):
    pass


@dataclass
class InteractionLog:
    records: list  # (user_key, item_key, timestamp), sorted by user then time
    malformed: int = 0
    duplicates: int = 0
    header: bool = False

    def __len__(self):
        return len(self.records)


@dataclass
class Catalog:
    user_keys: list  # user_keys[i] is the raw key of dense user id i + 1
    item_keys: list

    def __post_init__(self):
        self.user_index = {k: i + 1 for i, k in enumerate(self.user_keys)}
        self.item_index = {k: i + 1 for i, k in enumerate(self.item_keys)}

    @property
    def user_count(self):
        return len(self.user_keys)

    @property
    def item_count(self):
        return len(self.item_keys)

    @property
    def pad_id(self):
        return 0

    @property
    def mask_id(self):
        return self.item_count + 1

    def item_key(self, item_id):
        return self.item_keys[item_id - 1]

    def user_key(self, user_id):
        return self.user_keys[user_id - 1]


@dataclass
class Sequence:
    user_id: int
    items: np.ndarray  # int64, length L_max, left-padded with 0
    true_length: int

    @classmethod
    def from_items(cls, items, max_len, user_id=0):
        items = list(items)[-max_len:]
        return cls(user_id, pad_left(items, max_len), len(items))

    @property
    def active(self):
        return self.items[len(self.items) - self.true_length:]

    def check(self):
        n = len(self.items)
        ok = (0 <= self.true_length <= n and np.all(self.items[: n - self.true_length] == 0)
              and np.all(self.items[n - self.true_length:] != 0))
        if not ok:
            raise DataError(f"padding invariant violated for user {self.user_id}: "
                            f"true_length={self.true_length}, items={self.items.tolist()}")
        return self


@dataclass
class SplitSet:
    users: np.ndarray  # dense user ids
    train: list  # per user, int64 array of training items (most recent max_len kept)
    valid_target: np.ndarray
    test_target: np.ndarray
    max_len: int
    item_count: int
    dropped_users: int = 0

    def __len__(self):
        return len(self.users)


@dataclass
class Batch:
    users: np.ndarray
    inputs: np.ndarray  # (B, L) train[:-1], left-padded
    targets: np.ndarray  # (B, L) train[1:], aligned with inputs
    lengths: np.ndarray  # real items per row of ``inputs``

    def __len__(self):
        return len(self.users)


def pad_left(items, max_len):
    out = np.zeros(max_len, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)[-max_len:] if len(items) else np.zeros(0, np.int64)
    if len(items):
        out[max_len - len(items):] = items
    return out


def _parse_ts(raw):
    return int(float(raw)) if "." in raw or "e" in raw.lower() else int(raw)


def ingest(path, delimiter="tab", columns=(0, 1, 2)):
    """Read ``user item timestamp`` lines; dedup exact triples; sort by (user, time).

    ``delimiter`` is a name from ``DELIMITERS`` or a literal separator string.
    A first line whose timestamp field does not parse is treated as a header.
    Timestamp ties keep file order.
    """
    sep = DELIMITERS.get(delimiter, delimiter)
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read interaction file {path}: {exc}") from exc

    ucol, icol, tcol = columns
    need = max(columns) + 1
    parsed = []
    bad = []
    header = False
    for lineno, line in enumerate(lines):
        if not line.strip():
            continue
        parts = [p.strip() for p in (line.split(sep) if sep is not None else line.split())]
        try:
            if len(parts) < need:
                raise ValueError("too few columns")
            rec = (parts[ucol], parts[icol], _parse_ts(parts[tcol]))
            if not rec[0] or not rec[1]:
                raise ValueError("empty key")
        except ValueError:
            if not parsed and not bad and not header:
                header = True
                continue
            bad.append((lineno + 1, line))
            continue
        parsed.append(rec)

    total = len(parsed) + len(bad)
    if total == 0:
        raise DataError(f"{path}: no interaction records")
    if len(bad) > MALFORMED_LIMIT * total:
        sample = "; ".join(f"line {n}: {text!r}" for n, text in bad[:5])
        raise DataError(f"{path}: {len(bad)}/{total} malformed lines exceed 1%; e.g. {sample}")
    if bad:
        log.warning("%s: skipped %d malformed lines", path, len(bad))

    seen = set()
    unique = []
    for rec in parsed:
        if rec in seen:
            continue
        seen.add(rec)
        unique.append(rec)
    order = sorted(range(len(unique)), key=lambda i: (unique[i][0], unique[i][2], i))
    return InteractionLog([unique[i] for i in order], malformed=len(bad),
                          duplicates=len(parsed) - len(unique), header=header)


def kcore_filter(log_, k):
    """Drop users and items with fewer than ``k`` records until nothing changes."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    records = list(log_.records)
    while True:
        users = Counter(r[0] for r in records)
        items = Counter(r[1] for r in records)
        kept = [r for r in records if users[r[0]] >= k and items[r[1]] >= k]
        if len(kept) == len(records):
            break
        records = kept
    if not records:
        raise DataError(f"{k}-core filtering removed every record; try a smaller k")
    return InteractionLog(records, malformed=log_.malformed, duplicates=log_.duplicates, header=log_.header)


def _key_sort(keys):
    keys = list(keys)
    try:
        return sorted(keys, key=int)
    except ValueError:
        return sorted(keys)


def build_catalog(log_):
    return Catalog(_key_sort({r[0] for r in log_.records}), _key_sort({r[1] for r in log_.records}))


def user_histories(log_, catalog):
    hist = {}
    for u, i, _ in log_.records:
        hist.setdefault(catalog.user_index[u], []).append(catalog.item_index[i])
    return hist


def build_splits(log_, max_len):
    """Leave-two-out split: last item is the test target, second-to-last validation.

    Training histories keep the most recent ``max_len`` of the remaining items.
    Users with fewer than 3 interactions are dropped and counted.
    """
    counts = Counter(r[0] for r in log_.records)
    short = {u for u, c in counts.items() if c < 3}
    dropped = len(short)
    if short:
        log_ = InteractionLog([r for r in log_.records if r[0] not in short], log_.malformed,
                              log_.duplicates, log_.header)
    if not log_.records:
        raise DataError("no user has the 3 interactions a leave-two-out split needs")
    catalog = build_catalog(log_)
    hist = user_histories(log_, catalog)
    users, train, valid, test = [], [], [], []
    for uid in sorted(hist):
        seq = hist[uid]
        users.append(uid)
        train.append(np.asarray(seq[:-2][-max_len:], dtype=np.int64))
        valid.append(seq[-2])
        test.append(seq[-1])
    if dropped:
        log.warning("dropped %d users with fewer than 3 interactions", dropped)
    split = SplitSet(np.asarray(users, dtype=np.int64), train, np.asarray(valid, dtype=np.int64),
                     np.asarray(test, dtype=np.int64), max_len, catalog.item_count, dropped)
    return catalog, split


def training_frames(split, users_idx=None):
    """Shifted input/target frames for rows of ``split`` (default: all users)."""
    rows = range(len(split)) if users_idx is None else users_idx
    L = split.max_len
    inputs, targets, lengths, users = [], [], [], []
    for r in rows:
        tr = split.train[r]
        inputs.append(pad_left(tr[:-1], L))
        targets.append(pad_left(tr[1:], L))
        lengths.append(min(len(tr) - 1, L))
        users.append(split.users[r])
    return Batch(np.asarray(users, dtype=np.int64), np.stack(inputs), np.stack(targets),
                 np.asarray(lengths, dtype=np.int64))


def trainable_rows(split):
    """Rows whose training history yields at least one (input, target) pair."""
    return np.asarray([r for r in range(len(split)) if len(split.train[r]) >= 2], dtype=np.int64)


def eval_frames(split, phase):
    """Input frames and targets for ranking. ``test`` appends the validation item to the history."""
    if phase not in ("valid", "test"):
        raise ValueError(f"phase must be 'valid' or 'test', got {phase!r}")
    L = split.max_len
    rows = []
    for r in range(len(split)):
        hist = split.train[r]
        if phase == "test":
            hist = np.append(hist, split.valid_target[r])
        rows.append(pad_left(hist, L))
    items = np.stack(rows) if rows else np.zeros((0, L), dtype=np.int64)
    lengths = (items != 0).sum(axis=1)
    targets = split.valid_target if phase == "valid" else split.test_target
    return items, lengths, np.asarray(targets, dtype=np.int64)


def batch_iter(split, batch_size, seed, epoch=0):
    """Yield training batches in a permutation seeded by ``(seed, epoch)``.

    The final partial batch is emitted; a lone leftover user is folded into the
    previous batch so every batch has the two rows in-batch negatives need.
    """
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2 for in-batch negatives, got {batch_size}")
    rows = trainable_rows(split)
    rng = np.random.default_rng([seed, epoch, 0xB47C])
    order = rows[rng.permutation(len(rows))]
    bounds = list(range(0, len(order), batch_size)) + [len(order)]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        bounds.pop(-2)
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        yield training_frames(split, order[lo:hi])


def log_stats(log_):
    users = len({r[0] for r in log_.records})
    items = len({r[1] for r in log_.records})
    actions = len(log_.records)
    return {
        "users": users,
        "items": items,
        "actions": actions,
        "avg_actions_per_user": actions / users,
        "avg_actions_per_item": actions / items,
        "sparsity": 1.0 - actions / (users * items),
    }


@dataclass
class Dataset:
    catalog: Catalog
    split: SplitSet
    stats: dict = field(default_factory=dict)


def save_cache(path, catalog, split, stats=None):
    lengths = np.asarray([len(t) for t in split.train], dtype=np.int64)
    flat = np.concatenate(split.train) if split.train else np.zeros(0, np.int64)
    meta = {
        "version": CACHE_VERSION,
        "kind": "eclseq-dataset",
        "max_len": split.max_len,
        "dropped_users": split.dropped_users,
        "user_keys": catalog.user_keys,
        "item_keys": catalog.item_keys,
        "stats": stats or {},
    }
    write_blob(path, {"users": split.users, "train_lengths": lengths, "train_items": flat,
                      "valid_target": split.valid_target, "test_target": split.test_target}, meta)


def load_cache(path):
    arrays, meta = read_blob(path)
    if meta.get("kind") != "eclseq-dataset" or meta.get("version") != CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache (kind={meta.get('kind')}, version={meta.get('version')})")
    catalog = Catalog(meta["user_keys"], meta["item_keys"])
    bounds = np.concatenate([[0], np.cumsum(arrays["train_lengths"])])
    train = [arrays["train_items"][a:b].copy() for a, b in zip(bounds[:-1], bounds[1:])]
    split = SplitSet(arrays["users"], train, arrays["valid_target"], arrays["test_target"],
                     meta["max_len"], catalog.item_count, meta["dropped_users"])
    return Dataset(catalog, split, meta.get("stats", {}))


def preprocess(path, delimiter="tab", columns=(0, 1, 2), k=5, max_len=50):
    raw = ingest(path, delimiter, columns)
    filtered = kcore_filter(raw, k)
    catalog, split = build_splits(filtered, max_len)
    stats = log_stats(filtered)
    stats.update(malformed=raw.malformed, duplicates=raw.duplicates)
    return Dataset(catalog, split, stats)
