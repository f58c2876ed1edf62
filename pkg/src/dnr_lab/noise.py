"""Noise generators for synthetic retriever scores.

Heuristic generators draw ``eps`` from a fixed distribution (clipped Gaussian
or Beta); the model-based generator is a small MLP fed with the feedback bit,
frozen retriever embeddings and a block of uniform randoms, so its samples are
differentiable in its weights.  ``synthesize_scores`` mixes feedback and noise
into a plausible score vector ``(1 - lambda_c) * z + lambda_c * eps``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad

NOISE_KINDS = ("gaussian", "beta", "model")


@dataclass
class NoiseSpec:
    kind: str = "beta"
    mu: float = 0.5
    sigma: float = 0.25
    alpha: float = 0.5
    beta: float = 0.5
    d_noise: int = 8
    lambda_c: float = 0.4

    def validate(self) -> None:
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise.kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if self.sigma <= 0:
            raise ValueError("noise.sigma must be > 0")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("noise.alpha and noise.beta must be > 0")
        if self.d_noise < 1:
            raise ValueError("noise.d_noise must be >= 1")
        if not 0.0 <= self.lambda_c <= 1.0:
            raise ValueError("noise.lambda_c must lie in [0, 1]")

    def to_json(self) -> dict:
        return asdict(self)


# -- heuristic samplers -------------------------------------------------------


def standard_normal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Box-Muller normals from ``rng.random`` uniforms."""
    half = (n + 1) // 2
    u1 = 1.0 - rng.random(half)  # (0, 1], keeps log finite
    u2 = rng.random(half)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * math.pi * u2
    return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]


def gaussian_raw(n: int, mu: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return mu + sigma * standard_normal(n, rng)


def sample_gaussian(n: int, mu: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    return np.clip(gaussian_raw(n, mu, sigma, rng), 0.0, 1.0)


def sample_gamma(shape: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-scale Gamma draws: Marsaglia-Tsang squeeze, boosted for shape < 1."""
    if shape <= 0:
        raise ValueError("gamma shape must be > 0")
    if shape < 1.0:
        boost = (1.0 - rng.random(n)) ** (1.0 / shape)
        return sample_gamma(shape + 1.0, n, rng) * boost
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(n)
    pending = np.arange(n)
    while pending.size:
        m = pending.size
        x = standard_normal(m, rng)
        u = 1.0 - rng.random(m)
        v = (1.0 + c * x) ** 3
        ok = v > 0
        vs = np.where(ok, v, 1.0)
        squeeze = u < 1.0 - 0.0331 * x**4
        accept = ok & (squeeze | (np.log(u) < 0.5 * x * x + d * (1.0 - vs + np.log(vs))))
        out[pending[accept]] = d * vs[accept]
        pending = pending[~accept]
    return out


def sample_beta(n: int, alpha: float, beta: float, rng: np.random.Generator) -> np.ndarray:
    if alpha <= 0 or beta <= 0:
        raise ValueError("Beta shapes must be > 0")
    ga = sample_gamma(alpha, n, rng)
    gb = sample_gamma(beta, n, rng)
    s = ga + gb
    return np.where(s > 0, ga / np.where(s > 0, s, 1.0), 0.5)


def sample_heuristic(spec: NoiseSpec, size: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    n = int(np.prod(size))
    if spec.kind == "gaussian":
        eps = sample_gaussian(n, spec.mu, spec.sigma, rng)
    elif spec.kind == "beta":
        eps = sample_beta(n, spec.alpha, spec.beta, rng)
    else:
        raise ValueError(f"{spec.kind!r} is not a heuristic generator")
    return eps.reshape(size)


# -- score synthesis ----------------------------------------------------------


def synthesize_scores(z, eps, lambda_c: float):
    """``(1 - lambda_c) * z + lambda_c * eps``; stays a graph node when ``eps`` is one."""
    if not 0.0 <= lambda_c <= 1.0:
        raise ValueError("lambda_c must lie in [0, 1]")
    if isinstance(eps, ad.Node):
        zc = ad.as_array2(z)
        return ad.add(ad.constant((1.0 - lambda_c) * zc), ad.scale(eps, lambda_c))
    z = np.asarray(z, dtype=np.float64)
    return (1.0 - lambda_c) * z + lambda_c * np.asarray(eps, dtype=np.float64)


def recover_true_noise(x, z, lambda_c: float) -> np.ndarray:
    """The noise that carries feedback ``z`` onto observed scores ``x``, clipped to [0, 1]."""
    if not 0.0 < lambda_c <= 1.0:
        raise ValueError("lambda_c must lie in (0, 1]")
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    return np.clip((x - (1.0 - lambda_c) * z) / lambda_c, 0.0, 1.0)


# -- model-based generator ----------------------------------------------------


@dataclass
class GeneratorModel:
    """Two-layer MLP noise generator over per-item inputs.

    Input row for candidate ``i`` of user ``u``: ``[z_i, user_emb[u], item_emb[i], uniforms]``.
    The embeddings are the frozen retriever tables and never receive gradient.
    """

    params: ad.ParamStore
    user_emb: np.ndarray
    item_emb: np.ndarray
    d_noise: int

    @property
    def input_dim(self) -> int:
        return 1 + self.user_emb.shape[1] + self.item_emb.shape[1] + self.d_noise


def init_generator(
    user_emb: np.ndarray,
    item_emb: np.ndarray,
    d_noise: int = 8,
    hidden: int = 64,
    seed: int | np.random.Generator = 0,
    init_std: float = 0.01,
) -> GeneratorModel:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    gen = GeneratorModel(ad.ParamStore(), np.array(user_emb, copy=True), np.array(item_emb, copy=True), d_noise)
    fan_in = gen.input_dim
    gen.params.add("gen_w1", rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, hidden)))
    gen.params.add("gen_b1", np.zeros((1, hidden)))
    gen.params.add("gen_w2", rng.normal(0.0, init_std, size=(hidden, 1)))
    gen.params.add("gen_b2", np.zeros((1, 1)))
    return gen


def generator_inputs(gen: GeneratorModel, users, candidates, z, rng: np.random.Generator) -> np.ndarray:
    """Rows ``[z_i, user, item, uniforms]`` for a ``(B, n)`` candidate block, row-major."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.ndim == 1:
        candidates = candidates[None, :]
    users = np.atleast_1d(np.asarray(users, dtype=np.int64))
    z = np.asarray(z, dtype=np.float64).reshape(candidates.shape)
    if users.size != candidates.shape[0]:
        raise ad.ShapeError("generate_model_noise", users.shape, candidates.shape)
    if candidates.max() >= gen.item_emb.shape[0] or users.max() >= gen.user_emb.shape[0]:
        raise ad.ShapeError("generate_model_noise", candidates.shape, gen.item_emb.shape)
    b, n = candidates.shape
    rows = b * n
    uniforms = rng.random((rows, gen.d_noise))
    return np.concatenate(
        [
            z.reshape(rows, 1),
            np.repeat(gen.user_emb[users], n, axis=0),
            gen.item_emb[candidates.reshape(-1)],
            uniforms,
        ],
        axis=1,
    )


def generator_forward(gen: GeneratorModel, inputs: np.ndarray, frozen: bool = False) -> ad.Node:
    p = gen.params
    h = ad.relu(ad.add(ad.matmul(inputs, p.node("gen_w1", frozen)), p.node("gen_b1", frozen)))
    return ad.sigmoid(ad.add(ad.matmul(h, p.node("gen_w2", frozen)), p.node("gen_b2", frozen)))


def generate_model_noise(gen: GeneratorModel, users, candidates, z, rng: np.random.Generator, frozen: bool = False) -> ad.Node:
    """Noise column (one row per candidate) connected to the generator weights."""
    return generator_forward(gen, generator_inputs(gen, users, candidates, z, rng), frozen)
