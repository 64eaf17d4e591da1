"""Discriminator: auxiliary GAN losses and the density-ratio estimate.

The scalar head output is interpreted as a logit, so D = sigmoid(logit) and

    exp(logit) = D / (1 - D)

is the density-ratio estimate; at the Bayes optimum the logit converges to
log p_sigma(x) - log q_sigma(x). Ratios are clipped in log space before any
exponentiation.

The discriminator objective is the noised logistic GAN loss plus an R1
gradient penalty on real inputs. The generator side defaults to the
non-saturating form -log D; the literal minimax form log(1 - D) is kept
behind a switch.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericsError
from .nets import (
    EMBED_DIM,
    FeedForwardNet,
    backward,
    forward,
    init_net,
    input_grad_param_grad,
    sigma_embedding,
)

__all__ = [
    "Discriminator",
    "RatioClip",
    "disc_init",
    "logit",
    "ratio_estimate",
    "clipped_log_ratio",
    "disc_update",
    "gan_generator_grad",
]


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class RatioClip:
    r_min: float = 1e-3
    r_max: float = 1e3

    def __post_init__(self):
        if not (0.0 < self.r_min <= 1.0 <= self.r_max):
            raise DomainError(
                f"ratio clip must satisfy 0 < r_min <= 1 <= r_max, got "
                f"({self.r_min}, {self.r_max})"
            )

    @property
    def log_bounds(self):
        return np.log(self.r_min), np.log(self.r_max)


@dataclass
class Discriminator:
    net: FeedForwardNet
    sigma_data: float = 1.0
    precondition: bool = True

    @property
    def dim(self) -> int:
        return self.net.widths[0] - EMBED_DIM


def disc_init(dim, gen, sigma_data=1.0, hidden=(128, 128), activation="silu",
              precondition=True) -> Discriminator:
    # zero-initialized head: the initial ratio estimate is exactly 1
    net = init_net((dim + EMBED_DIM, *hidden, 1), activation, gen, final="zero")
    return Discriminator(net=net, sigma_data=float(sigma_data), precondition=precondition)


def _sigma_batch(sigma, n):
    sig = np.atleast_1d(np.asarray(sigma, dtype=float))
    if sig.shape == (1,):
        sig = np.full(n, sig[0])
    if sig.shape != (n,):
        raise DomainError(f"sigma batch must have shape ({n},), got {sig.shape}")
    if np.any(sig <= 0.0):
        raise DomainError("discriminator conditioning requires sigma > 0")
    return sig


def _c_in(disc: Discriminator, sig: np.ndarray):
    if not disc.precondition:
        return np.ones_like(sig)
    return 1.0 / np.sqrt(sig**2 + disc.sigma_data**2)


def _logit_cached(disc: Discriminator, x: np.ndarray, sig: np.ndarray):
    c_in = _c_in(disc, sig)
    inp = np.concatenate([c_in[:, None] * x, sigma_embedding(sig)], axis=1)
    out, cache = forward(disc.net, inp)
    return out[:, 0], inp, cache, c_in


def logit(disc: Discriminator, x, sigma) -> np.ndarray:
    """Raw logit of D(x, sigma), shape (B,)."""
    x = np.asarray(x, dtype=float)
    sig = _sigma_batch(sigma, x.shape[0])
    ell, _, _, _ = _logit_cached(disc, x, sig)
    return ell


def clipped_log_ratio(disc: Discriminator, x, sigma, clip: RatioClip) -> np.ndarray:
    """log of the clipped ratio estimate; stays in log space throughout."""
    ell = logit(disc, x, sigma)
    if not np.all(np.isfinite(ell)):
        raise NumericsError("non-finite discriminator logit")
    lo, hi = clip.log_bounds
    return np.clip(ell, lo, hi)


def ratio_estimate(disc: Discriminator, x, sigma, clip: RatioClip):
    """clamp(exp(logit), r_min, r_max); equals clipped D/(1-D)."""
    return np.exp(clipped_log_ratio(disc, x, sigma, clip))


def disc_update(disc: Discriminator, adam, real, fake, sigma, noise_real,
                noise_fake, r1_gamma: float = 0.0) -> float:
    """One Adam step on the noised logistic loss with R1 on real inputs.

    Loss: mean softplus(-l(real + sigma e1)) + mean softplus(l(fake + sigma e2))
          + (gamma/2) mean ||grad_x l(real + sigma e1)||^2.
    Real and fake batches share the sigma batch but use independent noise.
    Returns the pre-step loss.
    """
    real = np.asarray(real, dtype=float)
    fake = np.asarray(fake, dtype=float)
    if real.shape != fake.shape:
        raise DomainError("real and fake batches must have equal shapes")
    n = real.shape[0]
    sig = _sigma_batch(sigma, n)
    x_real = real + sig[:, None] * np.asarray(noise_real, dtype=float)
    x_fake = fake + sig[:, None] * np.asarray(noise_fake, dtype=float)

    ell_r, inp_r, cache_r, c_in = _logit_cached(disc, x_real, sig)
    ell_f, _, cache_f, _ = _logit_cached(disc, x_fake, sig)
    loss = float(np.mean(_softplus(-ell_r)) + np.mean(_softplus(ell_f)))

    g_real = (-_sigmoid(-ell_r) / n)[:, None]
    g_fake = (_sigmoid(ell_f) / n)[:, None]
    pgrad_r, _ = backward(disc.net, cache_r, g_real)
    pgrad_f, _ = backward(disc.net, cache_f, g_fake)
    pgrad = pgrad_r + pgrad_f

    if r1_gamma > 0.0:
        dim = disc.dim
        _, input_grad = backward(disc.net, cache_r, np.ones((n, 1)))
        g_net = input_grad[:, :dim]
        # ||grad_x l||^2 = c_in^2 ||grad_inp l||^2 because of input whitening
        sq = np.sum(g_net**2, axis=1) * c_in**2
        loss += float(0.5 * r1_gamma * np.mean(sq))
        v = np.zeros_like(inp_r)
        v[:, :dim] = (r1_gamma / n) * (c_in**2)[:, None] * g_net
        _, pgrad_r1 = input_grad_param_grad(disc.net, inp_r, v)
        pgrad = pgrad + pgrad_r1

    if not np.isfinite(loss):
        raise NumericsError("non-finite discriminator loss")
    disc.net.params = adam.step(disc.net.params, pgrad)
    return loss


def gan_generator_grad(disc: Discriminator, y, sigma, noise,
                       form: str = "nonsaturating") -> np.ndarray:
    """Gradient w.r.t. clean generator outputs y of the generator GAN loss.

    nonsaturating: mean -log D(y + sigma eps); minimax: mean log(1 - D(...)).
    The discriminator is frozen; gradients flow through it only.
    """
    y = np.asarray(y, dtype=float)
    sig = _sigma_batch(sigma, y.shape[0])
    x = y + sig[:, None] * np.asarray(noise, dtype=float)
    ell, _, cache, c_in = _logit_cached(disc, x, sig)
    n = y.shape[0]
    if form == "nonsaturating":
        dldell = -_sigmoid(-ell) / n
    elif form == "minimax":
        dldell = -_sigmoid(ell) / n
    else:
        raise DomainError(f"unknown generator GAN loss form {form!r}")
    _, input_grad = backward(disc.net, cache, dldell[:, None])
    return input_grad[:, : disc.dim] * c_in[:, None]
