"""Training objectives and the warm-up / adversarial training schedule.

``L_theta = L_direct + lambda_m * L_z`` trains the reranker; the generator
minimises ``L_adv + L_x`` against the frozen reranker once the warm-up epochs
are over.  ``L_x`` is an RBF-kernel MMD^2 between synthesized and real scores.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import noise as nz
from . import reranker as rr
from .metrics import evaluate_lists, median_bandwidth

HISTORY_COLUMNS = ("epoch", "phase", "l_direct", "l_z", "l_theta", "l_adv", "l_x", "val_ndcg")


@dataclass
class DnrConfig:
    lambda_c: float = 0.4
    lambda_m: float = 0.4
    lambda_e: int = 5
    heuristic: nz.NoiseSpec = field(default_factory=nz.NoiseSpec)
    epochs: int = 30
    batch_size: int = 32
    lr_theta: float = 0.005
    lr_phi: float | None = None
    weight_decay: float = 0.0
    seed: int = 0
    mmd_bandwidth: str | float = "median"
    mmd_points: int = 512
    d_noise: int = 8
    gen_hidden: int = 64
    k: int = 6

    def __post_init__(self):
        if isinstance(self.heuristic, dict):
            self.heuristic = nz.NoiseSpec(**self.heuristic)

    @property
    def phi_rate(self) -> float:
        return self.lr_theta if self.lr_phi is None else self.lr_phi

    def validate(self) -> None:
        if not 0.0 <= self.lambda_c <= 1.0:
            raise ValueError("dnr.lambda_c must lie in [0, 1]")
        if not 0.0 <= self.lambda_m <= 1.0:
            raise ValueError("dnr.lambda_m must lie in [0, 1]")
        if self.epochs < 1:
            raise ValueError("dnr.epochs must be >= 1")
        if not 0 <= self.lambda_e <= self.epochs:
            raise ValueError("dnr.lambda_e must lie in [0, epochs]")
        if self.lr_theta <= 0 or self.phi_rate <= 0:
            raise ValueError("dnr.lr_theta and dnr.lr_phi must be > 0")
        if self.batch_size < 1:
            raise ValueError("dnr.batch_size must be >= 1")
        if self.heuristic.kind not in ("gaussian", "beta"):
            raise ValueError("dnr.heuristic.kind must be gaussian or beta")
        self.heuristic.validate()
        if isinstance(self.mmd_bandwidth, str):
            if self.mmd_bandwidth != "median":
                raise ValueError("dnr.mmd_bandwidth must be 'median' or a positive number")
        elif not self.mmd_bandwidth > 0:
            raise ValueError("dnr.mmd_bandwidth must be 'median' or a positive number")
        if self.mmd_points < 2:
            raise ValueError("dnr.mmd_points must be >= 2")

    def to_json(self) -> dict:
        d = asdict(self)
        d["heuristic"] = self.heuristic.to_json()
        return d


# -- batches ------------------------------------------------------------------


@dataclass
class Batch:
    users: np.ndarray
    histories: list[list[int]]
    candidates: np.ndarray
    x: np.ndarray
    z: np.ndarray

    @property
    def size(self) -> int:
        return self.candidates.shape[0]

    @property
    def cells(self) -> int:
        return self.candidates.size


def make_batch(samples: Sequence) -> Batch:
    if not samples:
        raise ValueError("empty batch")
    lengths = {len(s.candidates) for s in samples}
    if len(lengths) != 1:
        raise ValueError("all samples in a batch need the same candidate count")
    return Batch(
        users=np.array([s.user for s in samples], dtype=np.int64),
        histories=[list(s.history) for s in samples],
        candidates=np.stack([np.asarray(s.candidates, dtype=np.int64) for s in samples]),
        x=np.stack([np.asarray(s.x, dtype=np.float64) for s in samples]),
        z=np.stack([np.asarray(s.z, dtype=np.float64) for s in samples]),
    )


def _as_batch(batch) -> Batch:
    return batch if isinstance(batch, Batch) else make_batch(batch)


def _labels(batch: Batch) -> np.ndarray:
    return batch.z.reshape(-1, 1)


# -- losses -------------------------------------------------------------------


def loss_direct(model: rr.RerankerModel, batch, frozen: bool = False) -> ad.Node:
    """Masked-mean BCE of the reranker on the real retriever scores."""
    batch = _as_batch(batch)
    pred = rr.score_batch(model, batch.histories, batch.candidates, batch.x, frozen)
    return ad.bce_loss(pred, _labels(batch))


def loss_z(model: rr.RerankerModel, batch, x_syn, frozen: bool = False) -> ad.Node:
    """BCE on synthesized scores; ``x_syn`` is detached so only the reranker learns."""
    batch = _as_batch(batch)
    values = x_syn.value if isinstance(x_syn, ad.Node) else np.asarray(x_syn, dtype=np.float64)
    if values.size != batch.cells:
        raise ad.ShapeError("loss_z", values.shape, batch.candidates.shape)
    pred = rr.score_batch(model, batch.histories, batch.candidates, values.reshape(batch.candidates.shape), frozen)
    return ad.bce_loss(pred, _labels(batch))


def loss_theta(model: rr.RerankerModel, batch, x_syn, lambda_m: float, frozen: bool = False) -> ad.Node:
    batch = _as_batch(batch)
    direct = loss_direct(model, batch, frozen)
    if lambda_m == 0:
        return direct
    return ad.add(direct, ad.scale(loss_z(model, batch, x_syn, frozen), lambda_m))


def loss_adv(model: rr.RerankerModel, batch, x_syn: ad.Node, phase: str = "adversarial") -> ad.Node:
    """Mean over requests of log q(z | x') under the frozen reranker.

    Equals minus the per-request BCE sum, averaged over the batch; the
    generator minimises it, i.e. pushes the reranker's loss up.
    """
    if phase != "adversarial":
        raise RuntimeError("adversarial phase not active")
    batch = _as_batch(batch)
    if not isinstance(x_syn, ad.Node):
        x_syn = ad.constant(np.asarray(x_syn, dtype=np.float64).reshape(-1, 1))
    pred = rr.score_batch(model, batch.histories, batch.candidates, x_syn, frozen=True)
    bce = ad.bce_loss(pred, _labels(batch))
    return ad.scale(bce, -batch.cells / batch.size)


def _pairwise_kernel_mean(a: ad.Node, b, gamma: float) -> ad.Node:
    """Mean of exp(gamma * (a_i - b_j)^2) over all pairs; ``a`` is a column node."""
    m = a.shape[0]
    if isinstance(b, ad.Node):
        nb = b.shape[0]
        right = ad.matmul(np.ones((m, 1)), ad.transpose(b))
    else:
        b = np.asarray(b, dtype=np.float64).reshape(-1, 1)
        nb = b.shape[0]
        right = ad.constant(np.ones((m, 1)) @ b.T)
    diff = ad.sub(ad.matmul(a, np.ones((1, nb))), right)
    return ad.mean(ad.exp(ad.scale(ad.mul(diff, diff), gamma)))


def loss_x(
    x_syn,
    x_real,
    bandwidth: str | float = "median",
    max_points: int | None = None,
    rng: np.random.Generator | None = None,
) -> ad.Node:
    """Biased RBF MMD^2 between pooled synthesized and real score cells.

    The median bandwidth is taken from the real sample and held constant for
    gradients.  With ``max_points`` both sides are subsampled (same count).
    """
    a = x_syn if isinstance(x_syn, ad.Node) else ad.constant(np.asarray(x_syn, dtype=np.float64).reshape(-1, 1))
    if a.shape[1] != 1:
        raise ad.ShapeError("loss_x", a.shape, (a.shape[0], 1))
    b = np.asarray(x_real, dtype=np.float64).reshape(-1, 1)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("loss_x needs batches of size >= 2")
    if max_points is not None:
        rng = rng if rng is not None else np.random.default_rng(0)
        if a.shape[0] > max_points:
            a = ad.gather_rows(a, np.sort(rng.choice(a.shape[0], size=max_points, replace=False)))
        if b.shape[0] > max_points:
            b = b[np.sort(rng.choice(b.shape[0], size=max_points, replace=False))]
    h = median_bandwidth(b) if bandwidth == "median" else float(bandwidth)
    gamma = -1.0 / (2.0 * h * h)
    kbb = float(np.exp(gamma * (b - b.T) ** 2).mean())
    kaa = _pairwise_kernel_mean(a, a, gamma)
    kab = _pairwise_kernel_mean(a, b, gamma)
    return ad.add(ad.sub(kaa, ad.scale(kab, 2.0)), ad.constant([[kbb]]))


# -- history ------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    l_direct: float
    l_z: float
    l_theta: float
    l_adv: float
    l_x: float
    val_ndcg: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def phases(self) -> list[str]:
        return [r.phase for r in self.records]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.records:
                row = asdict(r)
                w.writerow([r.epoch, r.phase] + [repr(float(row[c])) for c in HISTORY_COLUMNS[2:]])

    def summary(self) -> dict:
        last = self.records[-1]
        return {
            "epochs": len(self.records),
            "final": {k: (v if isinstance(v, str) or math.isfinite(v) else None) for k, v in asdict(last).items()},
            "best_val_ndcg": float(np.max(self.column("val_ndcg"))),
        }

    def write_summary(self, path, extra: dict | None = None) -> None:
        out = self.summary()
        if extra:
            out.update(extra)
        Path(path).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- training -----------------------------------------------------------------


@dataclass
class RunResult:
    reranker: rr.RerankerModel
    history: TrainHistory
    generator: nz.GeneratorModel | None = None
    generator_init_digest: str | None = None


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("theta", "phi", "shuffle", "noise", "mmd")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def validation_ndcg(model: rr.RerankerModel, samples: Sequence, k: int) -> float:
    if not samples:
        return float("nan")
    preds = rr.predict(model, samples)
    return evaluate_lists(preds, [s.z for s in samples], k).ndcg_k


def _check_finite(value: float, epoch: int, batch: int, what: str) -> None:
    if not math.isfinite(value):
        raise ad.NumericalError("train", f"{what} is not finite at epoch {epoch}, batch {batch}")


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def _init_theta(rconf: rr.RerankerConfig, train: Sequence, n_items: int, rng) -> rr.RerankerModel:
    n_positions = max(len(s.candidates) for s in train)
    return rr.init_reranker(rconf, n_items, n_positions, rng)


def train_baseline(
    config: DnrConfig,
    train: Sequence,
    valid: Sequence,
    n_items: int,
    rconf: rr.RerankerConfig,
) -> RunResult:
    """Plain direct-loss training; random streams match :func:`train_dnr`."""
    config.validate()
    if not train:
        raise ValueError("empty training set")
    streams = _streams(config.seed)
    model = _init_theta(rconf, train, n_items, streams["theta"])
    history = TrainHistory()
    nan = float("nan")
    for epoch in range(1, config.epochs + 1):
        losses = []
        for bi, idx in enumerate(_batches(len(train), config.batch_size, streams["shuffle"])):
            batch = make_batch([train[i] for i in idx])
            loss = loss_direct(model, batch)
            value = float(loss.value[0, 0])
            _check_finite(value, epoch, bi, "l_direct")
            ad.backward(loss)
            ad.adam_step(model.params, config.lr_theta, weight_decay=config.weight_decay)
            losses.append(value)
        ld = float(np.mean(losses))
        history.append(EpochRecord(epoch, "warmup", ld, nan, ld, nan, nan, validation_ndcg(model, valid, config.k)))
    return RunResult(model, history)


def train_dnr(
    config: DnrConfig,
    train: Sequence,
    valid: Sequence,
    n_items: int,
    rconf: rr.RerankerConfig,
    user_emb: np.ndarray,
    item_emb: np.ndarray,
) -> RunResult:
    """Warm-up epochs on heuristic noise, then alternate reranker and generator steps.

    In the adversarial phase every batch takes one reranker step on
    ``L_theta`` (model noise, detached) followed by one generator step on
    ``L_adv + L_x`` with the reranker frozen.
    """
    config.validate()
    if not train:
        raise ValueError("empty training set")
    streams = _streams(config.seed)
    model = _init_theta(rconf, train, n_items, streams["theta"])
    gen = nz.init_generator(user_emb, item_emb, config.d_noise, config.gen_hidden, streams["phi"])
    gen_digest = gen.params.digest()
    noise_rng, mmd_rng = streams["noise"], streams["mmd"]
    lc = config.lambda_c
    history = TrainHistory()
    for epoch in range(1, config.epochs + 1):
        phase = "warmup" if epoch <= config.lambda_e else "adversarial"
        sums = {k: [] for k in ("l_direct", "l_z", "l_theta", "l_adv", "l_x")}
        for bi, idx in enumerate(_batches(len(train), config.batch_size, streams["shuffle"])):
            batch = make_batch([train[i] for i in idx])
            if phase == "warmup":
                eps = nz.sample_heuristic(config.heuristic, batch.z.shape, noise_rng).reshape(-1, 1)
            else:
                eps = nz.generate_model_noise(gen, batch.users, batch.candidates, batch.z, noise_rng, frozen=True).value
            x_syn = nz.synthesize_scores(_labels(batch), eps, lc)

            direct = loss_direct(model, batch)
            if config.lambda_m == 0:
                lz_value = float(loss_z(model, batch, x_syn, frozen=True).value[0, 0])
                theta = direct
            else:
                lz = loss_z(model, batch, x_syn)
                lz_value = float(lz.value[0, 0])
                theta = ad.add(direct, ad.scale(lz, config.lambda_m))
            lt = float(theta.value[0, 0])
            _check_finite(lt, epoch, bi, "l_theta")
            ad.backward(theta)
            ad.adam_step(model.params, config.lr_theta, weight_decay=config.weight_decay)

            if phase == "warmup":
                # proxies: what the generator losses would read on heuristic noise
                l_adv = -lz_value * batch.cells / batch.size
                l_x = float(loss_x(x_syn, batch.x, config.mmd_bandwidth, config.mmd_points, mmd_rng).value[0, 0])
            else:
                eps_node = nz.generate_model_noise(gen, batch.users, batch.candidates, batch.z, noise_rng)
                x_node = nz.synthesize_scores(_labels(batch), eps_node, lc)
                adv = loss_adv(model, batch, x_node, phase)
                lx = loss_x(x_node, batch.x, config.mmd_bandwidth, config.mmd_points, mmd_rng)
                phi_loss = ad.add(adv, lx)
                l_adv, l_x = float(adv.value[0, 0]), float(lx.value[0, 0])
                _check_finite(l_adv + l_x, epoch, bi, "generator loss")
                ad.backward(phi_loss)
                ad.adam_step(gen.params, config.phi_rate, weight_decay=config.weight_decay)

            for k, v in zip(sums, (float(direct.value[0, 0]), lz_value, lt, l_adv, l_x)):
                sums[k].append(v)
        means = {k: float(np.mean(v)) for k, v in sums.items()}
        history.append(EpochRecord(epoch, phase, val_ndcg=validation_ndcg(model, valid, config.k), **means))
    return RunResult(model, history, gen, gen_digest)


def sample_generator_noise(gen: nz.GeneratorModel, samples: Sequence, seed: int = 0) -> np.ndarray:
    """Pooled generator noise over every (request, candidate) cell."""
    rng = np.random.default_rng(seed)
    b = make_batch(samples)
    return nz.generate_model_noise(gen, b.users, b.candidates, b.z, rng, frozen=True).value.ravel()
