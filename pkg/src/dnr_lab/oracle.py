"""Exact checks of the likelihood decompositions on small enumerable worlds.

A world has a finite score grid, list length ``n`` and two tables: the prior
``p_x`` over grid^n and the feedback likelihood ``p_z|x`` over {0,1}^n.  Score
vectors are indexed row-major over grid^n; feedback vectors by their bits
(first item is the most significant bit).

For a feedback vector ``z``::

    -log p(z) = L_direct + L1 + L2
    -log p(z) = L_z + L_adv + L_x + delta_x,   delta_x <= 0
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

NORM_TOL = 1e-12
RESIDUAL_TOL = 1e-9
FLOOR = 1e-6


@dataclass
class DiscreteWorld:
    grid: np.ndarray
    n: int
    p_x: np.ndarray  # (G**n,)
    p_z_given_x: np.ndarray  # (G**n, 2**n)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.p_x = np.asarray(self.p_x, dtype=np.float64)
        self.p_z_given_x = np.asarray(self.p_z_given_x, dtype=np.float64)
        g = self.grid.size
        if self.p_x.shape != (g**self.n,) or self.p_z_given_x.shape != (g**self.n, 2**self.n):
            raise ValueError("table shapes do not match grid and n")
        if (self.p_x < 0).any() or (self.p_z_given_x < 0).any():
            raise ValueError("probability tables must be nonnegative")
        if abs(self.p_x.sum() - 1.0) > NORM_TOL:
            raise ValueError("p_x must sum to 1")
        if np.abs(self.p_z_given_x.sum(axis=1) - 1.0).max() > NORM_TOL:
            raise ValueError("every p_z|x row must sum to 1")

    def score_vectors(self) -> np.ndarray:
        return np.array(list(itertools.product(self.grid, repeat=self.n)))

    def feedback_vectors(self) -> np.ndarray:
        return np.array(list(itertools.product((0, 1), repeat=self.n)))


@dataclass
class TableModel:
    q: np.ndarray  # (G**n, 2**n): q(z | x)
    p_phi: np.ndarray  # (2**n, G**n): p_phi(x | z)

    def normalization_error(self) -> float:
        return float(max(np.abs(self.q.sum(axis=1) - 1.0).max(), np.abs(self.p_phi.sum(axis=1) - 1.0).max()))


def z_index(z, n: int) -> int:
    bits = [int(b) for b in np.atleast_1d(z)]
    if len(bits) != n or any(b not in (0, 1) for b in bits):
        raise ValueError(f"z must be a 0/1 vector of length {n}")
    return int("".join(map(str, bits)), 2)


def _normalized(rng, shape, floor=FLOOR) -> np.ndarray:
    t = rng.random(shape) + floor
    return t / t.sum(axis=-1, keepdims=True)


def random_world(rng: np.random.Generator, n: int | None = None, grid_size: int | None = None) -> DiscreteWorld:
    n = int(rng.integers(1, 4)) if n is None else n
    g = int(rng.integers(2, 5)) if grid_size is None else grid_size
    if not (1 <= n <= 3 and 1 <= g <= 4):
        raise ValueError("worlds are limited to n <= 3 and grid size <= 4")
    grid = np.sort(rng.random(g))
    return DiscreteWorld(grid, n, _normalized(rng, g**n), _normalized(rng, (g**n, 2**n)))


def random_table_model(world: DiscreteWorld, rng: np.random.Generator) -> TableModel:
    m = world.p_x.size
    return TableModel(_normalized(rng, (m, 2**world.n)), _normalized(rng, (2**world.n, m)))


def _evidence(world: DiscreteWorld, zi: int) -> float:
    pz = float(world.p_x @ world.p_z_given_x[:, zi])
    if pz <= 0:
        raise ValueError("p(z) = 0 for this feedback vector")
    return pz


def marginal_loglik(world: DiscreteWorld, z) -> float:
    """-log p(z) with p(z) = sum_x p_x(x) p_z|x(z | x)."""
    return -math.log(_evidence(world, z_index(z, world.n)))


def bayes_posterior(world: DiscreteWorld, z) -> np.ndarray:
    zi = z_index(z, world.n)
    return world.p_x * world.p_z_given_x[:, zi] / _evidence(world, zi)


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    live = p > 0
    return float(np.sum(p[live] * np.log(p[live] / q[live])))


@dataclass
class DirectSplit:
    l_direct: float
    l1: float
    l2: float
    residual: float


@dataclass
class SynthSplit:
    l_z: float
    l_adv: float
    l_x: float
    delta_x: float
    residual: float


def decompose_direct(world: DiscreteWorld, q: np.ndarray, z) -> DirectSplit:
    """Split -log p(z) into the direct loss, the alignment error and -KL(p_x || p_x|z)."""
    zi = z_index(z, world.n)
    qz = np.asarray(q, dtype=np.float64)[:, zi]
    lik = world.p_z_given_x[:, zi]
    px = world.p_x
    l_direct = -float(px @ np.log(qz))
    l1 = float(px @ (np.log(qz) - np.log(lik)))
    l2 = -_kl(px, bayes_posterior(world, z))
    lhs = marginal_loglik(world, z)
    return DirectSplit(l_direct, l1, l2, abs(lhs - (l_direct + l1 + l2)))


def decompose_synthetic(world: DiscreteWorld, q: np.ndarray, p_phi: np.ndarray, z) -> SynthSplit:
    """Split -log p(z) under a synthetic posterior ``p_phi(. | z)``."""
    zi = z_index(z, world.n)
    qz = np.asarray(q, dtype=np.float64)[:, zi]
    r = np.asarray(p_phi, dtype=np.float64)
    r = r[zi] if r.ndim == 2 else r
    lik = world.p_z_given_x[:, zi]
    l_z = -float(r @ np.log(qz))
    l_adv = float(r @ (np.log(qz) - np.log(lik)))
    l_x = _kl(r, world.p_x)
    delta_x = -_kl(r, bayes_posterior(world, z))
    lhs = marginal_loglik(world, z)
    return SynthSplit(l_z, l_adv, l_x, delta_x, abs(lhs - (l_z + l_adv + l_x + delta_x)))


# -- batch verification -------------------------------------------------------


@dataclass
class WorldCheck:
    world: int
    n: int
    grid_size: int
    z: str
    direct_residual: float
    synth_residual: float
    delta_x: float
    delta_x_at_posterior: float
    split_gap: float
    normalization_error: float


@dataclass
class TheoryReport:
    rows: list[WorldCheck] = field(default_factory=list)

    @property
    def max_direct(self) -> float:
        return max(r.direct_residual for r in self.rows)

    @property
    def max_synth(self) -> float:
        return max(r.synth_residual for r in self.rows)

    @property
    def max_delta_x(self) -> float:
        return max(r.delta_x for r in self.rows)

    @property
    def max_posterior_delta(self) -> float:
        return max(abs(r.delta_x_at_posterior) for r in self.rows)

    @property
    def max_normalization_error(self) -> float:
        return max(r.normalization_error for r in self.rows)

    @property
    def passed(self) -> bool:
        return (
            self.max_direct < RESIDUAL_TOL
            and self.max_synth < RESIDUAL_TOL
            and self.max_delta_x <= 0.0
            and self.max_posterior_delta <= NORM_TOL
            and max(r.split_gap for r in self.rows) < RESIDUAL_TOL
            and self.max_normalization_error <= NORM_TOL
        )

    def summary(self) -> dict:
        return {
            "worlds": len({r.world for r in self.rows}),
            "checks": len(self.rows),
            "max_direct_residual": self.max_direct,
            "max_synth_residual": self.max_synth,
            "max_delta_x": self.max_delta_x,
            "max_abs_delta_x_at_posterior": self.max_posterior_delta,
            "max_normalization_error": self.max_normalization_error,
            "passed": self.passed,
        }

    def write_csv(self, path) -> None:
        cols = list(WorldCheck.__dataclass_fields__)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                d = asdict(r)
                w.writerow([repr(d[c]) if isinstance(d[c], float) else d[c] for c in cols])


def verify_theory(worlds: int = 100, seed: int = 0, tamper=None) -> TheoryReport:
    """Run both decompositions on every feedback vector of ``worlds`` random worlds.

    ``tamper(model, rng)`` may return a modified TableModel; it is a test hook
    for negative controls such as an unnormalized ``q``.
    """
    rng = np.random.default_rng(seed)
    report = TheoryReport()
    for w in range(worlds):
        world = random_world(rng)
        model = random_table_model(world, rng)
        if tamper is not None:
            model = tamper(model, rng)
        norm_err = model.normalization_error()
        for zvec in world.feedback_vectors():
            e3 = decompose_direct(world, model.q, zvec)
            e5 = decompose_synthetic(world, model.q, model.p_phi, zvec)
            at_post = decompose_synthetic(world, model.q, bayes_posterior(world, zvec), zvec)
            at_prior = decompose_synthetic(world, model.q, world.p_x, zvec)
            gap = max(abs(at_prior.l_z - e3.l_direct), abs(at_prior.l_adv - e3.l1))
            report.rows.append(
                WorldCheck(
                    w,
                    world.n,
                    world.grid.size,
                    "".join(str(int(b)) for b in zvec),
                    e3.residual,
                    e5.residual,
                    e5.delta_x,
                    at_post.delta_x,
                    gap,
                    norm_err,
                )
            )
    return report
