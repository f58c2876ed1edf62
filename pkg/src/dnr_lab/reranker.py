"""List-wise reranker q(z | x, u) with MLP and self-attention backbones.

Per-candidate features are ``[item embedding, user state]`` with the incoming
score folded in according to ``integration``:

* ``none``    - scores ignored
* ``concat``  - score appended as an extra feature column
* ``add``     - score projected to the hidden width and added to the user state
* ``weight``  - item embedding multiplied by its score
* ``denoise`` - same wiring as ``concat``; reserved for denoising training

Batches are flattened to ``B * n`` rows.  The attention backbone keeps lists
apart with a block-diagonal additive mask.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .metrics import rank_order

BACKBONES = ("mlp", "attention")
INTEGRATIONS = ("none", "concat", "add", "weight", "denoise")
MASK_OFF = -1e9


@dataclass
class RerankerConfig:
    backbone: str = "mlp"
    integration: str = "concat"
    hidden: int = 32
    heads: int = 2
    layers: int = 1

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValueError(f"reranker.backbone must be one of {BACKBONES}")
        if self.integration not in INTEGRATIONS:
            raise ValueError(f"reranker.integration must be one of {INTEGRATIONS}")
        if self.hidden < 1 or self.layers < 1 or self.heads < 1:
            raise ValueError("reranker.hidden, layers and heads must be >= 1")
        if self.backbone == "attention" and self.hidden % self.heads:
            raise ValueError("reranker.hidden must be divisible by reranker.heads")


@dataclass
class RerankerModel:
    params: ad.ParamStore
    config: RerankerConfig
    n_items: int
    n_positions: int

    def save(self, path) -> None:
        path = Path(path)
        self.params.save(path)
        sidecar = dict(asdict(self.config), n_items=self.n_items, n_positions=self.n_positions)
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RerankerModel":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        n_items, n_positions = meta.pop("n_items"), meta.pop("n_positions")
        return cls(ad.ParamStore.load(path), RerankerConfig(**meta), n_items, n_positions)


def _dense(rng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


def feature_width(config: RerankerConfig) -> int:
    extra = 1 if config.integration in ("concat", "denoise") else 0
    return 2 * config.hidden + extra


def init_reranker(config: RerankerConfig, n_items: int, n_positions: int, seed: int | np.random.Generator = 0) -> RerankerModel:
    config.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    h = config.hidden
    s = ad.ParamStore()
    s.add("item_emb", rng.normal(0.0, 0.1, size=(n_items, h)))
    s.add("hist_w", _dense(rng, h, h))
    s.add("hist_b", np.zeros((1, h)))
    if config.integration == "add":
        s.add("score_proj", rng.normal(0.0, 0.1, size=(1, h)))
    f = feature_width(config)
    s.add("in_w", _dense(rng, f, h))
    s.add("in_b", np.zeros((1, h)))
    if config.backbone == "mlp":
        for layer in range(config.layers):
            s.add(f"mlp{layer}_w", _dense(rng, h, h))
            s.add(f"mlp{layer}_b", np.zeros((1, h)))
    else:
        s.add("pos_emb", rng.normal(0.0, 0.1, size=(n_positions, h)))
        for layer in range(config.layers):
            for name in ("q", "k", "v", "o"):
                s.add(f"att{layer}_{name}", _dense(rng, h, h))
            s.add(f"ffn{layer}_w", _dense(rng, h, h))
            s.add(f"ffn{layer}_b", np.zeros((1, h)))
    s.add("out_w", _dense(rng, h, 1))
    s.add("out_b", np.zeros((1, 1)))
    return RerankerModel(s, config, n_items, n_positions)


class _Params:
    """Parameter nodes for one forward pass; one node per name so fan-out sums."""

    def __init__(self, store: ad.ParamStore, frozen: bool):
        self.store, self.frozen, self.cache = store, frozen, {}

    def __getitem__(self, name: str) -> ad.Node:
        if name not in self.cache:
            self.cache[name] = self.store.node(name, self.frozen)
        return self.cache[name]


def _check_items(model: RerankerModel, ids: np.ndarray) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= model.n_items):
        raise IndexError(f"item id out of range [0, {model.n_items})")


def _user_state(model: RerankerModel, p: _Params, histories: Sequence[Sequence[int]]) -> ad.Node:
    b = len(histories)
    h = model.config.hidden
    flat = np.asarray([i for hist in histories for i in hist], dtype=np.int64)
    _check_items(model, flat)
    if flat.size == 0:
        return ad.constant(np.zeros((b, h)))
    pool = np.zeros((b, flat.size))
    nonempty = np.zeros((b, 1))
    pos = 0
    for r, hist in enumerate(histories):
        if len(hist):
            pool[r, pos : pos + len(hist)] = 1.0 / len(hist)
            nonempty[r, 0] = 1.0
            pos += len(hist)
    pooled = ad.matmul(pool, ad.gather_rows(p["item_emb"], flat))
    state = ad.relu(ad.add(ad.matmul(pooled, p["hist_w"]), p["hist_b"]))
    return ad.mul(state, nonempty)


def encode_user(model: RerankerModel, history: Sequence[int]) -> np.ndarray:
    """Mean-pooled history embedding through one dense ReLU layer (zeros if empty)."""
    return _user_state(model, _Params(model.params, True), [list(history)]).value[0]


def _attention_block(model: RerankerModel, p: _Params, hid: ad.Node, b: int, n: int, layer: int) -> ad.Node:
    h = model.config.hidden
    heads = model.config.heads
    dk = h // heads
    block = np.kron(np.eye(b), np.ones((n, n)))
    mask = np.where(block > 0, 0.0, MASK_OFF)
    q = ad.matmul(hid, p[f"att{layer}_q"])
    k = ad.matmul(hid, p[f"att{layer}_k"])
    v = ad.matmul(hid, p[f"att{layer}_v"])
    outs = []
    for j in range(heads):
        lo, hi = j * dk, (j + 1) * dk
        logits = ad.scale(ad.matmul(ad.slice_cols(q, lo, hi), ad.transpose(ad.slice_cols(k, lo, hi))), 1.0 / math.sqrt(dk))
        att = ad.softmax_rows(ad.add(logits, mask))
        outs.append(ad.matmul(att, ad.slice_cols(v, lo, hi)))
    mixed = ad.matmul(ad.concat_cols(outs) if heads > 1 else outs[0], p[f"att{layer}_o"])
    hid = ad.add(hid, mixed)
    ffn = ad.relu(ad.add(ad.matmul(hid, p[f"ffn{layer}_w"]), p[f"ffn{layer}_b"]))
    return ad.add(hid, ffn)


def score_batch(
    model: RerankerModel,
    histories: Sequence[Sequence[int]],
    candidates,
    scores_in,
    frozen: bool = False,
) -> ad.Node:
    """Probabilities for a ``(B, n)`` candidate block as a ``(B * n, 1)`` node.

    ``scores_in`` is a ``(B, n)`` array or a ``(B * n, 1)`` node; with a node
    gradients flow back into whatever produced the scores.
    """
    cfg = model.config
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.ndim == 1:
        candidates = candidates[None, :]
    b, n = candidates.shape
    rows = b * n
    if isinstance(scores_in, ad.Node):
        if scores_in.shape != (rows, 1):
            raise ad.ShapeError("score_list", scores_in.shape, (rows, 1))
        x = scores_in
    else:
        arr = np.asarray(scores_in, dtype=np.float64)
        if arr.size != rows:
            raise ad.ShapeError("score_list", arr.shape, candidates.shape)
        x = ad.constant(arr.reshape(rows, 1))
    if cfg.backbone == "attention" and n > model.n_positions:
        raise ValueError(f"list length {n} exceeds {model.n_positions} position embeddings")
    _check_items(model, candidates)
    p = _Params(model.params, frozen)

    item = ad.gather_rows(p["item_emb"], candidates.reshape(-1))
    user = ad.gather_rows(_user_state(model, p, histories), np.repeat(np.arange(b), n))
    mode = cfg.integration
    if mode in ("concat", "denoise"):
        feats = ad.concat_cols([item, user, x])
    elif mode == "add":
        feats = ad.concat_cols([item, ad.add(user, ad.matmul(x, p["score_proj"]))])
    elif mode == "weight":
        feats = ad.concat_cols([ad.mul(item, x), user])
    else:
        feats = ad.concat_cols([item, user])

    hid = ad.relu(ad.add(ad.matmul(feats, p["in_w"]), p["in_b"]))
    if cfg.backbone == "mlp":
        for layer in range(cfg.layers):
            hid = ad.relu(ad.add(ad.matmul(hid, p[f"mlp{layer}_w"]), p[f"mlp{layer}_b"]))
    else:
        hid = ad.add(hid, ad.gather_rows(p["pos_emb"], np.tile(np.arange(n), b)))
        for layer in range(cfg.layers):
            hid = _attention_block(model, p, hid, b, n, layer)
    return ad.sigmoid(ad.add(ad.matmul(hid, p["out_w"]), p["out_b"]))


def score_list(model: RerankerModel, sample, scores_in=None) -> np.ndarray:
    """Predicted feedback probabilities for one request (defaults to its own scores)."""
    scores = sample.x if scores_in is None else np.asarray(scores_in, dtype=np.float64)
    if scores.size != len(sample.candidates):
        raise ad.ShapeError("score_list", scores.shape, np.shape(sample.candidates))
    out = score_batch(model, [sample.history], sample.candidates[None, :], scores[None, :], frozen=True)
    return out.value[:, 0].copy()


def predict(model: RerankerModel, samples: Sequence, batch_size: int = 64) -> list[np.ndarray]:
    preds = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        cands = np.stack([s.candidates for s in chunk])
        xs = np.stack([s.x for s in chunk])
        out = score_batch(model, [s.history for s in chunk], cands, xs, frozen=True).value
        preds.extend(out.reshape(len(chunk), -1))
    return preds


def rank_top_k(zhat, k: int) -> np.ndarray:
    zhat = np.asarray(zhat).ravel()
    if not 1 <= k <= zhat.size:
        raise ValueError(f"K={k} must lie in [1, {zhat.size}]")
    return rank_order(zhat)[:k]
