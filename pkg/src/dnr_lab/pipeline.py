"""End-to-end plumbing shared by the CLI and the acceptance experiments.

Artifacts live under one output directory::

    data/interactions.csv   filtered interaction log
    data/truth.json         synthetic ground truth (synthetic worlds only)
    data/samples.jsonl      one reranking request per user
    data/stats.json
    retriever/retriever.dnrw, retriever/summary.json
    baseline-<integration>/ and dnr/   reranker runs
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datagen as dg
from . import objectives as ob
from . import reranker as rr
from . import retriever as rt
from .config import ExperimentConfig
from .metrics import MetricsReport, evaluate_lists


class MissingArtifact(FileNotFoundError):
    pass


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"missing prerequisite: {p}")
    return p


@dataclass
class World:
    log: dg.InteractionLog
    truth: dg.SyntheticTruth | None
    retriever: rt.MfModel
    retriever_auc: float
    samples: list[dg.RerankSample]

    def split(self, cfg: ExperimentConfig) -> tuple[list, list]:
        return dg.split_samples(self.samples, cfg.data.val_fraction, cfg.data.seed)

    def stats(self) -> dg.DatasetStats:
        return dg.DatasetStats(
            users=self.log.n_users,
            items=self.log.n_items,
            actions=len(self.log),
            sequences=len(self.samples),
            flagged=sum(s.flagged for s in self.samples),
            extra={"retriever_auc": self.retriever_auc},
        )


def make_log(cfg: ExperimentConfig) -> tuple[dg.InteractionLog, dg.SyntheticTruth | None]:
    d = cfg.data
    if d.csv_path is not None:
        log, truth = dg.load_csv(d.csv_path), None
    else:
        log, truth = dg.generate_synthetic(
            d.users,
            d.items,
            d.latent_dim,
            seed=d.seed,
            events_per_user=d.events_per_user,
            exposure_bias=d.exposure_bias,
            noise_kind=d.noise_kind,
            noise_scale=d.noise_scale,
        )
    return dg.filter_min_interactions(log, d.min_interactions), truth


def fit_retriever(cfg: ExperimentConfig, log: dg.InteractionLog) -> tuple[rt.MfModel, float]:
    train, test = dg.build_retriever_split(log, cfg.data.split_ratio)
    r = cfg.retriever
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = rt.train_mf(train, r.dim, r.lr, r.negatives, r.epochs, seed=cfg.data.seed, batch_size=r.batch_size)
    score = rt.auc(model, test, seed=cfg.data.seed, seen=train) if (test.labels == 1).any() else float("nan")
    return model, float(score)


def build_world(cfg: ExperimentConfig) -> World:
    log, truth = make_log(cfg)
    return rebuild_world(cfg, log, truth)


def write_world(world: World, out: Path) -> None:
    data = out / "data"
    data.mkdir(parents=True, exist_ok=True)
    world.log.write_csv(data / "interactions.csv")
    write_json(data / "id_map.json", {"user_ids": world.log.user_ids.tolist(), "item_ids": world.log.item_ids.tolist()})
    if world.truth is not None:
        write_json(data / "truth.json", world.truth.to_json())
    dg.write_jsonl(world.samples, data / "samples.jsonl")
    st = world.stats()
    write_json(data / "stats.json", {**{k: v for k, v in st.__dict__.items() if k != "extra"}, **st.extra})
    write_retriever(world, out)


def write_retriever(world: World, out: Path) -> None:
    ret = out / "retriever"
    ret.mkdir(parents=True, exist_ok=True)
    world.retriever.save(ret / "retriever.dnrw")
    write_json(ret / "summary.json", {"auc": world.retriever_auc, "dim": world.retriever.dim, "digest": world.retriever.params.digest()})


def load_log(out: Path) -> dg.InteractionLog:
    """Reload the filtered log with the dense ids it had when written."""
    raw = dg.load_csv(require(out / "data" / "interactions.csv"))
    ids = json.loads(require(out / "data" / "id_map.json").read_text(encoding="utf-8"))
    umap = {int(u): k for k, u in enumerate(ids["user_ids"])}
    imap = {int(i): k for k, i in enumerate(ids["item_ids"])}
    users = np.array([umap[int(u)] for u in raw.user_ids[raw.users]], dtype=np.int64)
    items = np.array([imap[int(i)] for i in raw.item_ids[raw.items]], dtype=np.int64)
    return dg.InteractionLog(
        len(umap), len(imap), users, items, raw.timestamps, raw.labels,
        np.asarray(ids["user_ids"]), np.asarray(ids["item_ids"]),
    )


def rebuild_world(cfg: ExperimentConfig, log: dg.InteractionLog, truth=None) -> World:
    model, auc = fit_retriever(cfg, log)
    d = cfg.data
    samples = dg.build_rerank_dataset(log, model, d.n, d.k, d.history, d.split_ratio)
    if not samples:
        raise dg.DataError("no reranking requests could be built")
    return World(log, truth, model, auc, samples)


def load_samples(out: Path) -> list[dg.RerankSample]:
    return dg.read_jsonl(require(out / "data" / "samples.jsonl"))


def load_retriever(out: Path) -> rt.MfModel:
    return rt.MfModel.load(require(out / "retriever" / "retriever.dnrw"))


def n_items_of(samples, retriever: rt.MfModel | None = None) -> int:
    if retriever is not None:
        return retriever.n_items
    return 1 + max(max(int(c) for c in s.candidates) for s in samples)


def evaluate(model: rr.RerankerModel | None, samples, k: int) -> MetricsReport:
    """Metrics of a reranker on ``samples``; ``None`` ranks by the retriever scores."""
    preds = [s.x for s in samples] if model is None else rr.predict(model, samples)
    return evaluate_lists(preds, [s.z for s in samples], k)


def run_baseline(cfg: ExperimentConfig, train, valid, n_items: int) -> ob.RunResult:
    rconf = rr.RerankerConfig(**{**cfg.reranker.__dict__})
    if rconf.integration == "denoise":
        raise ValueError("integration=denoise is only valid inside DNR training")
    return ob.train_baseline(cfg.dnr, train, valid, n_items, rconf)


def run_dnr(cfg: ExperimentConfig, train, valid, retriever: rt.MfModel) -> ob.RunResult:
    rconf = rr.RerankerConfig(**{**cfg.reranker.__dict__, "integration": "denoise"})
    return ob.train_dnr(cfg.dnr, train, valid, retriever.n_items, rconf, retriever.user_emb, retriever.item_emb)


def synthetic_true_noise(samples, lambda_c: float) -> np.ndarray:
    """Noise that carries each request's feedback onto its observed retriever scores."""
    b = ob.make_batch(samples)
    return ob.nz.recover_true_noise(b.x, b.z, lambda_c).ravel()
