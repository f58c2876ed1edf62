"""Ranking metrics for the reranker stage and noise-distribution diagnostics.

All ``*_at_k`` functions take the 0/1 labels of a list already sorted by the
model (best first) plus the number of positives in the whole candidate list.
HR@K is recall@K; MAP@K divides by ``min(K, total_positives)``; F1@K is the
per-list harmonic mean of precision@K and recall@K.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


def _topk(ranked_labels, k: int) -> np.ndarray:
    if k < 1:
        raise ValueError("K must be >= 1")
    return np.asarray(ranked_labels, dtype=np.float64)[:k]


def ndcg_at_k(ranked_labels, total_positives: int, k: int) -> float:
    if total_positives <= 0:
        return 0.0
    top = _topk(ranked_labels, k)
    dcg = float(np.sum(top / np.log2(np.arange(2, top.size + 2))))
    ideal = min(k, int(total_positives))
    idcg = float(np.sum(1.0 / np.log2(np.arange(2, ideal + 2))))
    return dcg / idcg


def hit_ratio_at_k(ranked_labels, total_positives: int, k: int) -> float:
    if total_positives <= 0:
        return 0.0
    return float(_topk(ranked_labels, k).sum()) / total_positives


def map_at_k(ranked_labels, total_positives: int, k: int) -> float:
    if total_positives <= 0:
        return 0.0
    top = _topk(ranked_labels, k)
    hits = np.cumsum(top)
    precision = hits / np.arange(1, top.size + 1)
    return float(np.sum(precision * top)) / min(k, int(total_positives))


def f1_at_k(ranked_labels, total_positives: int, k: int) -> float:
    if total_positives <= 0:
        return 0.0
    hits = float(_topk(ranked_labels, k).sum())
    if hits == 0:
        return 0.0
    precision = hits / k
    recall = hits / total_positives
    return 2.0 * precision * recall / (precision + recall)


def mann_whitney_auc(scores, labels) -> float:
    """Rank AUC with average ranks on ties."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    return (ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_listwise(scores: Sequence, labels: Sequence) -> float:
    """Mean per-list AUC over lists holding both classes (NaN if none do)."""
    values = []
    for s, z in zip(scores, labels):
        z = np.asarray(z)
        if 0 < z.sum() < z.size:
            values.append(mann_whitney_auc(s, z))
    return float(np.mean(values)) if values else float("nan")


def rank_order(scores) -> np.ndarray:
    """Indices sorted by descending score, ties by ascending index."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    return np.lexsort((np.arange(scores.size), -scores))


@dataclass
class MetricsReport:
    k: int
    hr_k: float
    ndcg_k: float
    map_k: float
    f1_k: float
    auc: float
    per_sample: dict[str, list[float]] = field(default_factory=dict, repr=False)

    def summary(self) -> dict:
        return {
            "k": self.k,
            "hr_k": self.hr_k,
            "ndcg_k": self.ndcg_k,
            "map_k": self.map_k,
            "f1_k": self.f1_k,
            "auc": self.auc,
            "samples": len(self.per_sample.get("ndcg", [])),
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def write_per_sample_csv(self, path, users: Sequence[int] | None = None) -> None:
        cols = ["hr", "ndcg", "map", "f1", "auc"]
        n = len(self.per_sample["ndcg"])
        users = list(users) if users is not None else list(range(n))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user"] + cols)
            for i in range(n):
                w.writerow([users[i]] + [repr(float(self.per_sample[c][i])) for c in cols])


def evaluate_lists(predictions: Sequence, labels: Sequence, k: int) -> MetricsReport:
    """Score every list by ranking its candidates on ``predictions``."""
    per = {"hr": [], "ndcg": [], "map": [], "f1": [], "auc": []}
    for pred, z in zip(predictions, labels):
        z = np.asarray(z)
        if k > z.size:
            raise ValueError(f"K={k} exceeds list length {z.size}")
        ranked = z[rank_order(pred)]
        total = int(z.sum())
        per["hr"].append(hit_ratio_at_k(ranked, total, k))
        per["ndcg"].append(ndcg_at_k(ranked, total, k))
        per["map"].append(map_at_k(ranked, total, k))
        per["f1"].append(f1_at_k(ranked, total, k))
        per["auc"].append(mann_whitney_auc(pred, z) if 0 < total < z.size else float("nan"))
    aucs = [a for a in per["auc"] if not math.isnan(a)]
    return MetricsReport(
        k=k,
        hr_k=float(np.mean(per["hr"])),
        ndcg_k=float(np.mean(per["ndcg"])),
        map_k=float(np.mean(per["map"])),
        f1_k=float(np.mean(per["f1"])),
        auc=float(np.mean(aucs)) if aucs else float("nan"),
        per_sample=per,
    )


# -- noise diagnostics --------------------------------------------------------


def smoothed_histogram(values, bins: int = 32) -> np.ndarray:
    """Laplace-smoothed bin probabilities over [0, 1]."""
    values = np.clip(np.asarray(values, dtype=np.float64).ravel(), 0.0, 1.0)
    counts, _ = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return (counts + 1.0) / (counts.sum() + bins)


def histogram_kl(reference, generated, bins: int = 32) -> float:
    p = smoothed_histogram(reference, bins)
    q = smoothed_histogram(generated, bins)
    return float(np.sum(p * np.log(p / q)))


def median_bandwidth(values) -> float:
    """Median pairwise distance; 1.0 when the sample is degenerate."""
    v = np.asarray(values, dtype=np.float64).ravel()
    iu = np.triu_indices(v.size, k=1)
    d = np.abs(v[:, None] - v[None, :])[iu]
    h = float(np.median(d)) if d.size else 0.0
    return h if h > 0 else 1.0


def mmd2(a, b, bandwidth: float | None = None) -> float:
    """Biased (V-statistic) squared MMD with an RBF kernel; always >= 0."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    h = median_bandwidth(b) if bandwidth is None else float(bandwidth)
    g = -1.0 / (2.0 * h * h)

    def k(x, y):
        return np.exp(g * (x[:, None] - y[None, :]) ** 2).mean()

    return max(0.0, float(k(a, a) + k(b, b) - 2.0 * k(a, b)))


@dataclass
class NoiseDiagnostics:
    kl: float
    mmd2: float
    edges: np.ndarray
    reference_hist: np.ndarray
    generated_hist: np.ndarray

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "reference", "generated"])
            for lo, hi, r, g in zip(self.edges[:-1], self.edges[1:], self.reference_hist, self.generated_hist):
                w.writerow([repr(float(lo)), repr(float(hi)), repr(float(r)), repr(float(g))])


def noise_diagnostics(generated, reference, bins: int = 32, max_points: int = 2000, seed: int = 0) -> NoiseDiagnostics:
    """Binned KL(reference || generated) and MMD^2 between two noise samples.

    MMD is computed on at most ``max_points`` seeded draws from each side.
    """
    generated = np.asarray(generated, dtype=np.float64).ravel()
    reference = np.asarray(reference, dtype=np.float64).ravel()
    if generated.size == 0 or reference.size == 0:
        raise ValueError("noise_diagnostics needs two nonempty samples")

    def thin(v):
        # same seed on both sides: identical inputs thin to identical subsets
        if v.size <= max_points:
            return v
        return np.random.default_rng(seed).choice(v, size=max_points, replace=False)

    return NoiseDiagnostics(
        kl=histogram_kl(reference, generated, bins),
        mmd2=mmd2(thin(generated), thin(reference)),
        edges=np.linspace(0.0, 1.0, bins + 1),
        reference_hist=smoothed_histogram(reference, bins),
        generated_hist=smoothed_histogram(generated, bins),
    )
