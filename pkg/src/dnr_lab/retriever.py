"""Matrix-factorization retriever: BCE with uniform negative sampling."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .datagen import InteractionLog
from .metrics import mann_whitney_auc


@dataclass
class MfModel:
    params: ad.ParamStore

    @property
    def user_emb(self) -> np.ndarray:
        return self.params["user_emb"]

    @property
    def item_emb(self) -> np.ndarray:
        return self.params["item_emb"]

    @property
    def n_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_emb.shape[0]

    @property
    def dim(self) -> int:
        return self.user_emb.shape[1]

    def save(self, path) -> None:
        self.params.save(path)

    @classmethod
    def load(cls, path) -> "MfModel":
        store = ad.ParamStore.load(path)
        if "user_emb" not in store or "item_emb" not in store:
            raise ValueError(f"{path}: retriever checkpoint needs user_emb and item_emb")
        return cls(store)


def init_mf(n_users: int, n_items: int, dim: int, rng: np.random.Generator, std: float = 0.1) -> MfModel:
    store = ad.ParamStore()
    store.add("user_emb", rng.normal(0.0, std, size=(n_users, dim)))
    store.add("item_emb", rng.normal(0.0, std, size=(n_items, dim)))
    return MfModel(store)


def _sample_negatives(users, seen: np.ndarray, per_positive: int, rng) -> tuple[np.ndarray, np.ndarray]:
    n_items = seen.shape[1]
    u = np.repeat(users, per_positive)
    cand = rng.integers(0, n_items, size=u.size)
    bad = seen[u, cand]
    while bad.any():
        cand[bad] = rng.integers(0, n_items, size=int(bad.sum()))
        bad = seen[u, cand]
    return u, cand


def train_mf(
    train: InteractionLog,
    dim: int = 16,
    lr: float = 0.001,
    negatives_per_positive: int = 4,
    epochs: int = 20,
    seed: int = 0,
    batch_size: int = 256,
    weight_decay: float = 0.0,
) -> MfModel:
    """Fit user/item embeddings so sigmoid(u.i) predicts positives vs sampled negatives.

    Negatives are redrawn every epoch, uniformly among items the user has no
    event with.  Users who have an event with every item get no negatives.
    """
    if len(train) == 0:
        raise ValueError("train_mf: empty training split")
    rng = np.random.default_rng(seed)
    model = init_mf(train.n_users, train.n_items, dim, rng)
    seen = np.zeros((train.n_users, train.n_items), dtype=bool)
    seen[train.users, train.items] = True
    saturated = seen.all(axis=1)
    if saturated.any():
        warnings.warn(
            f"{int(saturated.sum())} user(s) interacted with every item; no negatives sampled for them",
            stacklevel=2,
        )
    pos = train.labels == 1
    pu, pi = train.users[pos], train.items[pos]
    sampled = ~saturated[pu]
    store = model.params
    ones = np.ones((dim, 1))
    for _ in range(epochs):
        nu, ni = _sample_negatives(pu[sampled], seen, negatives_per_positive, rng)
        users = np.concatenate([pu, nu])
        items = np.concatenate([pi, ni])
        labels = np.concatenate([np.ones(pu.size), np.zeros(nu.size)])
        order = rng.permutation(users.size)
        for start in range(0, order.size, batch_size):
            b = order[start : start + batch_size]
            ue = ad.gather_rows(store.node("user_emb"), users[b])
            ie = ad.gather_rows(store.node("item_emb"), items[b])
            p = ad.sigmoid(ad.matmul(ad.mul(ue, ie), ones))
            ad.backward(ad.bce_loss(p, labels[b, None]))
            ad.adam_step(store, lr, weight_decay=weight_decay)
    return model


def _check_ids(model: MfModel, user: int, items) -> None:
    if not 0 <= user < model.n_users:
        raise IndexError(f"user {user} out of range [0, {model.n_users})")
    items = np.asarray(items)
    if items.size and (items.min() < 0 or items.max() >= model.n_items):
        raise IndexError(f"item id out of range [0, {model.n_items})")


def score(model: MfModel, user: int, items) -> np.ndarray:
    items = np.asarray(items, dtype=np.int64)
    _check_ids(model, user, items)
    dots = model.item_emb[items] @ model.user_emb[user]
    return 0.5 * (1.0 + np.tanh(0.5 * dots))


def top_n(model: MfModel, user: int, n: int, exclude=()) -> np.ndarray:
    """The ``n`` best non-excluded items, score-descending, ties by ascending id."""
    _check_ids(model, user, [])
    allowed = np.ones(model.n_items, dtype=bool)
    ex = np.fromiter((int(e) for e in exclude), dtype=np.int64)
    allowed[ex] = False
    pool = np.flatnonzero(allowed)
    if n > pool.size or n < 0:
        raise ValueError(f"top_n: cannot pick {n} of {pool.size} available items")
    s = score(model, user, pool)
    order = np.lexsort((pool, -s))
    return pool[order[:n]]


def auc(model: MfModel, test: InteractionLog, seed: int = 0, seen: InteractionLog | None = None) -> float:
    """Rank AUC of test positives against as many uniformly sampled unseen items.

    Items count as seen for a user when they appear in ``test`` or ``seen``.
    """
    pos = test.labels == 1
    if not pos.any():
        raise ValueError("auc: test split has no positives")
    rng = np.random.default_rng(seed)
    mask = np.zeros((model.n_users, model.n_items), dtype=bool)
    mask[test.users, test.items] = True
    if seen is not None:
        mask[seen.users, seen.items] = True
    pu, pi = test.users[pos], test.items[pos]
    ok = ~mask[pu].all(axis=1)
    nu, ni = _sample_negatives(pu[ok], mask, 1, rng)
    dots_p = np.einsum("ij,ij->i", model.user_emb[pu], model.item_emb[pi])
    dots_n = np.einsum("ij,ij->i", model.user_emb[nu], model.item_emb[ni])
    scores = np.concatenate([dots_p, dots_n])
    labels = np.concatenate([np.ones(dots_p.size), np.zeros(dots_n.size)])
    return mann_whitney_auc(scores, labels)


def bayes_auc(truth_pref_pos: np.ndarray, truth_pref_neg: np.ndarray) -> float:
    """AUC of the ground-truth preference on the same positive/negative pairs."""
    scores = np.concatenate([truth_pref_pos, truth_pref_neg])
    labels = np.concatenate([np.ones(truth_pref_pos.size), np.zeros(truth_pref_neg.size)])
    return mann_whitney_auc(scores, labels)
