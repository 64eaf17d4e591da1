"""Exact teacher distributions and the training noise schedule.

Teachers are isotropic Gaussian mixtures: density, score, sampling, and the
noise perturbation p_sigma = p * N(0, sigma^2 I) are all closed form, so any
quantity the training loop approximates (ratios, scores, divergences) can be
checked against this module exactly.

`AffineGenerator` is the oracle-side student: pushing a standard normal
latent through x = A z + b gives an exactly Gaussian output law, which keeps
the student's perturbed density and score in closed form too.
"""

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.special import logsumexp

from . import rng as rngmod
from .errors import DomainError

__all__ = [
    "IsotropicGaussianMixture",
    "NoiseSchedule",
    "AffineGenerator",
    "FullGaussian",
    "log_density",
    "score",
    "perturb",
    "sample",
    "affine_pushforward",
    "particle_log_density",
    "ring8",
    "grid25",
    "make_teacher",
    "TEACHER_PRESETS",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class IsotropicGaussianMixture:
    """Mixture of isotropic Gaussians: weights (K,), means (K, d), variances (K,)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.asarray(self.means, dtype=float)
        v = np.asarray(self.variances, dtype=float)
        if mu.ndim != 2:
            raise DomainError("means must have shape (K, dim)")
        if w.shape != (mu.shape[0],) or v.shape != (mu.shape[0],):
            raise DomainError("weights, means, variances must agree on component count")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(v))):
            raise DomainError("mixture parameters must be finite")
        if np.any(w < 0.0) or abs(float(w.sum()) - 1.0) > 1e-12:
            raise DomainError("weights must be non-negative and sum to 1 within 1e-12")
        if np.any(v <= 0.0):
            raise DomainError("variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", v)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def per_coord_std(self) -> float:
        """Marginal per-coordinate standard deviation of the mixture."""
        mean = self.weights @ self.means
        second = float(
            self.weights @ (self.variances * self.dim + np.sum(self.means**2, axis=1))
        )
        return math.sqrt(max((second - float(np.sum(mean**2))) / self.dim, 1e-12))

    # Convenience wrappers over the module-level operations.
    def log_density(self, x, sigma=0.0):
        return log_density(self, x, sigma)

    def score(self, x, sigma=0.0):
        return score(self, x, sigma)

    def perturb(self, sigma):
        return perturb(self, sigma)

    def sample(self, n, seed, counter=0):
        return sample(self, n, seed, counter)


def _check_points(gm_dim: int, x) -> tuple:
    a = np.asarray(x, dtype=float)
    single = a.ndim == 1
    if single:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != gm_dim:
        raise DomainError(f"points must have dimension {gm_dim}, got shape {np.shape(x)}")
    if not np.all(np.isfinite(a)):
        raise DomainError("points must be finite")
    return a, single


def _component_logs(gm: IsotropicGaussianMixture, x: np.ndarray, sigma) -> np.ndarray:
    """Per-component log joint log(w_k) + log N(x; mu_k, (v_k + sigma^2) I), shape (n, K)."""
    sig = np.asarray(sigma, dtype=float)
    if np.any(sig < 0.0) or not np.all(np.isfinite(sig)):
        raise DomainError("sigma must be finite and >= 0")
    var = gm.variances[None, :] + (sig**2).reshape(-1, 1) if sig.ndim else gm.variances[None, :] + sig**2
    sq = (
        np.sum(x**2, axis=1, keepdims=True)
        - 2.0 * x @ gm.means.T
        + np.sum(gm.means**2, axis=1)[None, :]
    )
    d = gm.dim
    with np.errstate(divide="ignore"):
        logw = np.log(gm.weights)[None, :]
    return logw - 0.5 * d * (_LOG_2PI + np.log(var)) - 0.5 * sq / var


def log_density(gm: IsotropicGaussianMixture, x, sigma=0.0):
    """log p_sigma(x); `sigma` may be a scalar or per-point array."""
    pts, single = _check_points(gm.dim, x)
    comp = _component_logs(gm, pts, sigma)
    out = logsumexp(comp, axis=1)
    return float(out[0]) if single else out


def score(gm: IsotropicGaussianMixture, x, sigma=0.0):
    """grad_x log p_sigma(x): responsibility-weighted pull towards the means."""
    pts, single = _check_points(gm.dim, x)
    sig = np.asarray(sigma, dtype=float)
    comp = _component_logs(gm, pts, sigma)
    resp = np.exp(comp - logsumexp(comp, axis=1, keepdims=True))
    var = gm.variances[None, :] + (sig**2).reshape(-1, 1) if sig.ndim else gm.variances[None, :] + sig**2
    pull = (gm.means[None, :, :] - pts[:, None, :]) / var[..., None]
    out = np.einsum("nk,nkd->nd", resp, pull)
    return out[0] if single else out


def perturb(gm: IsotropicGaussianMixture, sigma: float) -> IsotropicGaussianMixture:
    """Convolve with N(0, sigma^2 I): adds sigma^2 to every component variance."""
    s = float(sigma)
    if s < 0.0 or not math.isfinite(s):
        raise DomainError(f"sigma must be finite and >= 0, got {sigma!r}")
    if s == 0.0:
        return gm
    return IsotropicGaussianMixture(
        weights=gm.weights, means=gm.means, variances=gm.variances + s**2
    )


def sample(gm: IsotropicGaussianMixture, n: int, seed: int, counter: int = 0) -> np.ndarray:
    """n i.i.d. draws; component choice by inverse CDF over the weights.

    Deterministic in (seed, counter); disjoint counters give independent
    parallel streams.
    """
    if n < 1:
        raise DomainError(f"sample count must be >= 1, got {n}")
    gen = rngmod.stream(seed, counter, 0xFD)
    u = gen.random(n)
    idx = np.searchsorted(np.cumsum(gm.weights), u, side="right")
    idx = np.minimum(idx, gm.n_components - 1)
    eps = gen.standard_normal((n, gm.dim))
    return gm.means[idx] + np.sqrt(gm.variances[idx])[:, None] * eps


@dataclass(frozen=True)
class NoiseSchedule:
    """Log-uniform sigma ladder with per-level time weights w_t = sigma^2."""

    sigma_min: float = 0.002
    sigma_max: float = 80.0
    n_levels: int = 64

    def __post_init__(self):
        if not (0.0 < self.sigma_min < self.sigma_max):
            raise DomainError("schedule requires 0 < sigma_min < sigma_max")
        if self.n_levels < 1:
            raise DomainError("schedule requires n_levels >= 1")

    @property
    def levels(self) -> np.ndarray:
        return np.geomspace(self.sigma_min, self.sigma_max, self.n_levels)

    def time_weight(self, sigma):
        return np.asarray(sigma, dtype=float) ** 2

    def draw_levels(self, gen: np.random.Generator, size: int):
        """Uniformly sampled level indices and their sigmas."""
        idx = gen.integers(0, self.n_levels, size=size)
        return idx, self.levels[idx]

    def bin_ids(self, level_idx, n_bins: int):
        """Map level indices to equal-width bins in log-sigma."""
        idx = np.asarray(level_idx)
        return np.minimum(idx * n_bins // self.n_levels, n_bins - 1)


class FullGaussian:
    """Dense-covariance Gaussian used only on oracle paths."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        self._prec = np.linalg.inv(self.cov)
        sign, logdet = np.linalg.slogdet(self.cov)
        if sign <= 0:
            raise DomainError("covariance must be positive definite")
        self._logdet = logdet

    @property
    def dim(self):
        return self.mean.shape[0]

    def log_density(self, x, sigma=0.0):
        pts, single = _check_points(self.dim, x)
        if np.ndim(sigma) or float(sigma) != 0.0:
            raise DomainError("FullGaussian density is evaluated pre-perturbed")
        diff = pts - self.mean
        quad = np.einsum("ni,ij,nj->n", diff, self._prec, diff)
        out = -0.5 * (self.dim * _LOG_2PI + self._logdet + quad)
        return float(out[0]) if single else out

    def score(self, x, sigma=0.0):
        pts, single = _check_points(self.dim, x)
        if np.ndim(sigma) or float(sigma) != 0.0:
            raise DomainError("FullGaussian score is evaluated pre-perturbed")
        out = -(pts - self.mean) @ self._prec.T
        return out[0] if single else out


@dataclass
class AffineGenerator:
    """Student map x = A z + b with standard normal latent z.

    The pushforward is exactly N(b, A A^T), so perturbed densities, scores
    and ratios against an analytic teacher stay closed form. Training paths
    require isotropic A = a I; anything else is oracle-only.
    """

    matrix: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.matrix.ndim != 2 or self.bias.ndim != 1:
            raise DomainError("affine generator needs matrix (d, latent) and bias (d,)")
        if self.matrix.shape[0] != self.bias.shape[0]:
            raise DomainError("matrix rows must match bias length")

    @property
    def dim(self) -> int:
        return self.bias.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.matrix.shape[1]

    def forward(self, z: np.ndarray) -> np.ndarray:
        return z @ self.matrix.T + self.bias

    def isotropic_scale(self) -> Optional[float]:
        """a such that A = a I, or None if A is not an isotropic square map."""
        if self.matrix.shape[0] != self.matrix.shape[1]:
            return None
        a = self.matrix[0, 0]
        if np.allclose(self.matrix, a * np.eye(self.dim), rtol=0.0, atol=1e-12):
            return float(a)
        return None

    # Flat parameter interface used by the training loop.
    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.matrix.ravel(), self.bias])

    @params.setter
    def params(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=float)
        n = self.matrix.size
        self.matrix = flat[:n].reshape(self.matrix.shape)
        self.bias = flat[n:].copy()

    def param_grad(self, z: np.ndarray, out_grad: np.ndarray) -> np.ndarray:
        """Gradient of sum_i out_grad_i . x_i with respect to (A, b)."""
        g_a = out_grad.T @ z
        g_b = out_grad.sum(axis=0)
        return np.concatenate([g_a.ravel(), g_b])


def affine_pushforward(
    gen: AffineGenerator, sigma: float
) -> Union[IsotropicGaussianMixture, FullGaussian]:
    """Exact law of G(z) + sigma * eps for standard normal z, eps.

    Isotropic A yields a single-component IsotropicGaussianMixture usable on
    every code path; non-isotropic A returns a FullGaussian handle meant for
    oracles only.
    """
    s = float(sigma)
    if s < 0.0:
        raise DomainError("sigma must be >= 0")
    a = gen.isotropic_scale()
    if a is not None:
        return IsotropicGaussianMixture(
            weights=np.array([1.0]),
            means=gen.bias[None, :],
            variances=np.array([a**2 + s**2]),
        )
    cov = gen.matrix @ gen.matrix.T + s**2 * np.eye(gen.dim)
    return FullGaussian(mean=gen.bias, cov=cov)


def particle_log_density(centers: np.ndarray, x: np.ndarray, sigma) -> np.ndarray:
    """Unbiased Monte-Carlo estimate of log q_sigma(x) for a pushforward law.

    q_sigma(x) = E_z[N(x; G(z), sigma^2 I)] is estimated with the m given
    centers G(z_j). Exact in expectation; the only approximation is the
    finite particle count.
    """
    centers = np.asarray(centers, dtype=float)
    pts = np.asarray(x, dtype=float)
    sig = np.asarray(sigma, dtype=float)
    if np.any(sig <= 0.0):
        raise DomainError("particle density estimate requires sigma > 0")
    m, d = centers.shape
    sq = (
        np.sum(pts**2, axis=1, keepdims=True)
        - 2.0 * pts @ centers.T
        + np.sum(centers**2, axis=1)[None, :]
    )
    var = (sig**2).reshape(-1, 1) if sig.ndim else np.full((1, 1), sig**2)
    comp = -0.5 * d * (_LOG_2PI + np.log(var)) - 0.5 * sq / var
    return logsumexp(comp, axis=1) - math.log(m)


def ring8(radius: float = 4.0, variance: float = 0.09) -> IsotropicGaussianMixture:
    """Eight equal components on a circle; the standard mode-coverage teacher."""
    angles = 2.0 * np.pi * np.arange(8) / 8.0
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return IsotropicGaussianMixture(
        weights=np.full(8, 1.0 / 8.0), means=means, variances=np.full(8, variance)
    )


def grid25(spacing: float = 2.0, variance: float = 0.01) -> IsotropicGaussianMixture:
    """5 x 5 lattice of equal components centered on the origin."""
    axis = spacing * (np.arange(5) - 2.0)
    xs, ys = np.meshgrid(axis, axis, indexing="ij")
    means = np.stack([xs.ravel(), ys.ravel()], axis=1)
    return IsotropicGaussianMixture(
        weights=np.full(25, 1.0 / 25.0), means=means, variances=np.full(25, variance)
    )


TEACHER_PRESETS = {"ring8": ring8, "grid25": grid25}


def make_teacher(spec) -> IsotropicGaussianMixture:
    """Build a teacher from a preset name or an explicit component dict."""
    if isinstance(spec, IsotropicGaussianMixture):
        return spec
    if isinstance(spec, str):
        if spec not in TEACHER_PRESETS:
            raise DomainError(
                f"unknown teacher preset {spec!r} (known: {', '.join(TEACHER_PRESETS)})"
            )
        return TEACHER_PRESETS[spec]()
    if isinstance(spec, dict):
        try:
            return IsotropicGaussianMixture(
                weights=np.asarray(spec["weights"], dtype=float),
                means=np.asarray(spec["means"], dtype=float),
                variances=np.asarray(spec["variances"], dtype=float),
            )
        except KeyError as exc:
            raise DomainError(f"teacher dict missing key {exc}") from exc
    raise DomainError(f"cannot build a teacher from {type(spec).__name__}")
