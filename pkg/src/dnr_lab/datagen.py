"""Interaction logs, synthetic worlds and the two-stage dataset builders."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .retriever import MfModel

CSV_COLUMNS = ("user_id", "item_id", "timestamp", "label")


class DataError(ValueError):
    """Malformed input data or an infeasible dataset request."""


@dataclass
class InteractionLog:
    """Events as parallel arrays over dense ids ``0..n_users-1`` / ``0..n_items-1``.

    ``user_ids``/``item_ids`` map each dense id back to the id it had in the
    source (CSV id or synthetic-world index).
    """

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    labels: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.user_ids = np.asarray(self.user_ids, dtype=np.int64)
        self.item_ids = np.asarray(self.item_ids, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.users.size)

    def subset(self, mask_or_index) -> "InteractionLog":
        idx = np.asarray(mask_or_index)
        return InteractionLog(
            self.n_users, self.n_items,
            self.users[idx], self.items[idx], self.timestamps[idx], self.labels[idx],
            self.user_ids, self.item_ids,
        )

    def chronological(self) -> np.ndarray:
        """Event order by (user, timestamp), stable within equal timestamps."""
        return np.lexsort((np.arange(len(self)), self.timestamps, self.users))

    def by_user(self) -> dict[int, np.ndarray]:
        """Chronologically sorted event indices for every user with events."""
        order = self.chronological()
        users = self.users[order]
        cuts = np.flatnonzero(np.diff(users)) + 1
        return {int(users[g[0]]): g for g in np.split(order, cuts) if g.size} if order.size else {}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for u, i, t, y in zip(self.users, self.items, self.timestamps, self.labels):
                w.writerow([int(self.user_ids[u]), int(self.item_ids[i]), int(t), int(y)])


@dataclass
class SyntheticTruth:
    """Ground truth behind a synthetic log.

    Each event's retriever-visible preference is ``clip(sigmoid(u.v) + perturbation, 0, 1)``
    and its label is a Bernoulli draw of that preference.
    """

    user_factors: np.ndarray
    item_factors: np.ndarray
    noise_kind: str
    noise_scale: float
    perturbation: np.ndarray

    def preference(self, users, items) -> np.ndarray:
        logits = np.einsum("ij,ij->i", self.user_factors[users], self.item_factors[items])
        return 0.5 * (1.0 + np.tanh(0.5 * logits))

    def to_json(self) -> dict:
        return {
            "user_factors": self.user_factors.tolist(),
            "item_factors": self.item_factors.tolist(),
            "noise_kind": self.noise_kind,
            "noise_scale": self.noise_scale,
            "perturbation": self.perturbation.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticTruth":
        return cls(
            np.asarray(d["user_factors"], dtype=np.float64),
            np.asarray(d["item_factors"], dtype=np.float64),
            d["noise_kind"],
            float(d["noise_scale"]),
            np.asarray(d["perturbation"], dtype=np.float64),
        )


def generate_synthetic(
    n_users: int,
    n_items: int,
    latent_dim: int,
    seed: int = 0,
    events_per_user: int = 60,
    exposure_bias: float = 1.0,
    factor_scale: float = 1.5,
    noise_kind: str = "none",
    noise_scale: float = 0.0,
) -> tuple[InteractionLog, SyntheticTruth]:
    """Latent-factor Bernoulli world.

    Every user is exposed to ``events_per_user`` distinct items drawn with
    probability proportional to ``exp(exposure_bias * u.v)`` (0 gives uniform
    exposure), in that order.  Factor entries are normal with standard deviation
    ``factor_scale / latent_dim**0.25`` so ``u.v`` has standard deviation
    ``factor_scale**2``.
    """
    if n_users < 10 or n_items < 10:
        raise DataError("synthetic world needs at least 10 users and 10 items")
    if latent_dim < 2:
        raise DataError("latent_dim must be >= 2")
    if not 1 <= events_per_user <= n_items:
        raise DataError("events_per_user must lie in [1, n_items]")
    if noise_kind not in ("none", "gaussian", "uniform"):
        raise DataError(f"unknown noise channel {noise_kind!r}")
    rng = np.random.default_rng(seed)
    std = factor_scale / latent_dim**0.25
    uf = rng.normal(0.0, std, size=(n_users, latent_dim))
    vf = rng.normal(0.0, std, size=(n_items, latent_dim))
    logits = uf @ vf.T

    gumbel = rng.gumbel(size=(n_users, n_items))
    keys = exposure_bias * logits + gumbel
    exposed = np.argsort(-keys, axis=1, kind="stable")[:, :events_per_user]

    users = np.repeat(np.arange(n_users), events_per_user)
    items = exposed.reshape(-1)
    stamps = np.tile(np.arange(events_per_user), n_users)
    pref = 0.5 * (1.0 + np.tanh(0.5 * logits[users, items]))
    if noise_kind == "gaussian":
        pert = noise_scale * rng.standard_normal(users.size)
    elif noise_kind == "uniform":
        pert = noise_scale * rng.uniform(-1.0, 1.0, users.size)
    else:
        pert = np.zeros(users.size)
    visible = np.clip(pref + pert, 0.0, 1.0)
    labels = (rng.random(users.size) < visible).astype(np.int64)

    log = InteractionLog(
        n_users, n_items, users, items, stamps, labels,
        np.arange(n_users), np.arange(n_items),
    )
    truth = SyntheticTruth(uf, vf, noise_kind, float(noise_scale), pert)
    return log, truth


def load_csv(path) -> InteractionLog:
    """Read ``user_id,item_id,timestamp,label``; ids are re-indexed by first appearance."""
    users, items, stamps, labels = [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        pos = [header.index(c) for c in CSV_COLUMNS]
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                u, i, t, y = (int(row[p].strip()) for p in pos)
            except (ValueError, IndexError):
                raise DataError(f"{path}: line {lineno}: expected integer user_id, item_id, timestamp, label") from None
            if y not in (0, 1):
                raise DataError(f"{path}: line {lineno}: label must be 0 or 1, got {y}")
            users.append(u)
            items.append(i)
            stamps.append(t)
            labels.append(y)
    if not users:
        raise DataError(f"{path}: no events")
    uid, udense = _dense_ids(users)
    iid, idense = _dense_ids(items)
    return InteractionLog(len(uid), len(iid), udense, idense, stamps, labels, uid, iid)


def _dense_ids(raw: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    mapping: dict[int, int] = {}
    dense = [mapping.setdefault(r, len(mapping)) for r in raw]
    return np.fromiter(mapping, dtype=np.int64, count=len(mapping)), np.asarray(dense, dtype=np.int64)


def filter_min_interactions(log: InteractionLog, threshold: int = 20) -> InteractionLog:
    """Drop users and items with fewer than ``threshold`` events until nothing changes.

    Surviving ids are re-indexed densely in their original order.
    """
    keep = np.ones(len(log), dtype=bool)
    while True:
        ucount = np.bincount(log.users[keep], minlength=log.n_users)
        icount = np.bincount(log.items[keep], minlength=log.n_items)
        bad = keep & ((ucount[log.users] < threshold) | (icount[log.items] < threshold))
        if not bad.any():
            break
        keep &= ~bad
    if not keep.any():
        raise DataError("dataset vanished under filter")
    users_alive = np.flatnonzero(np.bincount(log.users[keep], minlength=log.n_users))
    items_alive = np.flatnonzero(np.bincount(log.items[keep], minlength=log.n_items))
    umap = np.full(log.n_users, -1)
    umap[users_alive] = np.arange(users_alive.size)
    imap = np.full(log.n_items, -1)
    imap[items_alive] = np.arange(items_alive.size)
    return InteractionLog(
        users_alive.size, items_alive.size,
        umap[log.users[keep]], imap[log.items[keep]],
        log.timestamps[keep], log.labels[keep],
        log.user_ids[users_alive], log.item_ids[items_alive],
    )


def train_count(n_events: int, ratio: float) -> int:
    return min(n_events, math.ceil(ratio * n_events - 1e-9))


def build_retriever_split(log: InteractionLog, ratio: float = 0.8) -> tuple[InteractionLog, InteractionLog]:
    """Per-user chronological split; users with fewer than 2 events stay in train."""
    if len(log) == 0:
        raise DataError("cannot split an empty log")
    if not 0.0 < ratio <= 1.0:
        raise DataError("split ratio must lie in (0, 1]")
    in_train = np.zeros(len(log), dtype=bool)
    for idx in log.by_user().values():
        cut = idx.size if idx.size < 2 else train_count(idx.size, ratio)
        in_train[idx[:cut]] = True
    if in_train.all():
        warnings.warn("retriever split produced an empty test set", stacklevel=2)
    return log.subset(np.flatnonzero(in_train)), log.subset(np.flatnonzero(~in_train))


@dataclass
class RerankSample:
    user: int
    history: list[int]
    candidates: np.ndarray
    x: np.ndarray
    z: np.ndarray
    flagged: bool = False

    def to_json(self) -> dict:
        return {
            "user": int(self.user),
            "history": [int(h) for h in self.history],
            "candidates": [int(c) for c in self.candidates],
            "x": [float(v) for v in self.x],
            "z": [int(v) for v in self.z],
            "flagged": bool(self.flagged),
        }

    @classmethod
    def from_json(cls, d: dict) -> "RerankSample":
        z = np.asarray(d["z"], dtype=np.int64)
        return cls(
            int(d["user"]),
            [int(h) for h in d["history"]],
            np.asarray(d["candidates"], dtype=np.int64),
            np.asarray(d["x"], dtype=np.float64),
            z,
            bool(d.get("flagged", z.sum() == 0)),
        )


def build_rerank_dataset(
    log: InteractionLog,
    retriever: "MfModel",
    n: int = 50,
    k: int = 6,
    history: int = 20,
    ratio: float = 0.8,
) -> list[RerankSample]:
    """One reranking request per user, in user-id order.

    The last ``k`` events are the exposure; ``history`` holds the most recent
    positive training-split items; candidates are the retriever's top ``n``
    items with every training-split positive excluded.
    """
    from .retriever import score, top_n

    if n > log.n_items:
        raise DataError(f"n={n} exceeds the item count {log.n_items}")
    samples = []
    for user, idx in sorted(log.by_user().items()):
        exposure = idx[-k:]
        cut = idx.size if idx.size < 2 else train_count(idx.size, ratio)
        train_idx = idx[: min(cut, idx.size - exposure.size)]
        train_pos = log.items[train_idx][log.labels[train_idx] == 1]
        hist = [int(i) for i in train_pos[-history:]] if history > 0 else []
        exclude = set(int(i) for i in train_pos)
        if log.n_items - len(exclude) < n:
            continue
        cands = top_n(retriever, user, n, exclude)
        positives = set(int(i) for i in log.items[exposure][log.labels[exposure] == 1])
        z = np.array([1 if int(c) in positives else 0 for c in cands], dtype=np.int64)
        x = score(retriever, user, cands)
        samples.append(RerankSample(user, hist, cands, x, z, flagged=bool(z.sum() == 0)))
    return samples


def split_samples(samples: Sequence[RerankSample], val_fraction: float, seed: int) -> tuple[list, list]:
    """Seeded user-level train/validation partition; both keep user order."""
    order = np.random.default_rng(seed).permutation(len(samples))
    n_val = int(round(val_fraction * len(samples)))
    val = set(order[:n_val].tolist())
    train = [s for j, s in enumerate(samples) if j not in val]
    valid = [s for j, s in enumerate(samples) if j in val]
    return train, valid


def write_jsonl(samples: Sequence[RerankSample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), separators=(",", ":")) + "\n")


def read_jsonl(path) -> list[RerankSample]:
    with open(path, encoding="utf-8") as fh:
        return [RerankSample.from_json(json.loads(line)) for line in fh if line.strip()]


@dataclass
class DatasetStats:
    users: int
    items: int
    actions: int
    sequences: int
    flagged: int = 0
    extra: dict = field(default_factory=dict)

    def table(self) -> str:
        head = f"{'#users':>8} {'#items':>8} {'#actions':>10} {'#sequences':>11} {'#flagged':>9}"
        row = f"{self.users:>8} {self.items:>8} {self.actions:>10} {self.sequences:>11} {self.flagged:>9}"
        return head + "\n" + row
