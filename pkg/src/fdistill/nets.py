"""Fixed-topology MLP with explicit forward/backward passes and Adam.

This is the whole network stack: the generator, the denoiser and the
discriminator are all instances of `FeedForwardNet` with different heads.
Gradients are closed-form reverse mode for the scalar objective
sum_batch output . output_grad; there is no autodiff graph. A second-order
routine (`input_grad_param_grad`) differentiates the input gradient with
respect to the parameters, which is what the R1 penalty needs.
"""

from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

from .errors import DomainError, NumericsError

__all__ = [
    "FeedForwardNet",
    "ForwardCache",
    "AdamState",
    "param_count",
    "init_net",
    "forward",
    "backward",
    "input_grad_param_grad",
    "adam_init",
    "adam_step",
    "sigma_embedding",
    "EMBED_DIM",
]

EMBED_DIM = 16
# Frequency band tops out near period ~2 in log sigma: conditioning targets
# are smooth in log sigma, and finer bands let per-level noise imprint as
# wiggles on the sigma response.
_EMBED_FREQS = np.geomspace(0.2, 3.0, EMBED_DIM // 2)


def _tanh(z):
    return np.tanh(z)


def _tanh_d1(z):
    t = np.tanh(z)
    return 1.0 - t * t


def _tanh_d2(z):
    t = np.tanh(z)
    return -2.0 * t * (1.0 - t * t)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _silu(z):
    return z * _sigmoid(z)


def _silu_d1(z):
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def _silu_d2(z):
    s = _sigmoid(z)
    return s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))


_ACTIVATIONS = {
    "tanh": (_tanh, _tanh_d1, _tanh_d2),
    "silu": (_silu, _silu_d1, _silu_d2),
}


def param_count(widths) -> int:
    return int(sum((win + 1) * wout for win, wout in zip(widths[:-1], widths[1:])))


@dataclass
class FeedForwardNet:
    """widths = (in, hidden..., out); activation on all but the last layer."""

    widths: Tuple[int, ...]
    activation: str
    params: np.ndarray

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise DomainError(f"invalid layer widths {self.widths}")
        if self.activation not in _ACTIVATIONS:
            raise DomainError(f"unknown activation {self.activation!r}")
        self.params = np.asarray(self.params, dtype=float)
        if self.params.shape != (param_count(self.widths),):
            raise DomainError(
                f"parameter vector must have length {param_count(self.widths)}, "
                f"got {self.params.shape}"
            )
        if not np.all(np.isfinite(self.params)):
            raise DomainError("parameters must be finite")

    def layers(self):
        """Yield (W, b) views into the flat parameter vector."""
        offset = 0
        for win, wout in zip(self.widths[:-1], self.widths[1:]):
            w = self.params[offset : offset + win * wout].reshape(wout, win)
            offset += win * wout
            b = self.params[offset : offset + wout]
            offset += wout
            yield w, b


def init_net(widths, activation, gen: np.random.Generator, final="he") -> FeedForwardNet:
    """He-scaled normal init; `final` is "he", "zero", or a scale multiplier
    for a Xavier-scaled last layer (biases always start at zero)."""
    chunks = []
    n_layers = len(widths) - 1
    for i, (win, wout) in enumerate(zip(widths[:-1], widths[1:])):
        if i == n_layers - 1 and final == "zero":
            w = np.zeros((wout, win))
        elif i == n_layers - 1 and not isinstance(final, str):
            w = float(final) * gen.standard_normal((wout, win)) / np.sqrt(win)
        else:
            w = gen.standard_normal((wout, win)) * np.sqrt(2.0 / win)
        chunks.append(w.ravel())
        chunks.append(np.zeros(wout))
    return FeedForwardNet(
        widths=tuple(widths), activation=activation, params=np.concatenate(chunks)
    )


@dataclass
class ForwardCache:
    params_ref: np.ndarray      # identity-checked against net.params in backward
    inputs: list                # a_{l-1} per layer
    preacts: list               # z_l per layer


def forward(net: FeedForwardNet, x: np.ndarray):
    """Batched forward pass; returns (output (B, out), cache for backward)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != net.widths[0]:
        raise DomainError(
            f"input must have shape (batch, {net.widths[0]}), got {x.shape}"
        )
    act, _, _ = _ACTIVATIONS[net.activation]
    n_layers = len(net.widths) - 1
    a = x
    inputs, preacts = [], []
    for i, (w, b) in enumerate(net.layers()):
        inputs.append(a)
        z = a @ w.T + b
        preacts.append(z)
        a = act(z) if i < n_layers - 1 else z
    return a, ForwardCache(params_ref=net.params, inputs=inputs, preacts=preacts)


def backward(net: FeedForwardNet, cache: ForwardCache, out_grad: np.ndarray):
    """Exact gradients of sum_batch output . out_grad.

    Returns (param_grad flat, input_grad (B, in)). The cache must come from a
    forward pass on the current parameters.
    """
    if cache.params_ref is not net.params:
        raise DomainError("stale forward cache: parameters changed since forward()")
    gy = np.asarray(out_grad, dtype=float)
    if gy.shape != cache.preacts[-1].shape:
        raise DomainError(
            f"out_grad shape {gy.shape} does not match output {cache.preacts[-1].shape}"
        )
    _, act_d1, _ = _ACTIVATIONS[net.activation]
    weights = [w for w, _ in net.layers()]
    grads = [None] * len(weights)
    delta = gy
    for l in reversed(range(len(weights))):
        gw = delta.T @ cache.inputs[l]
        gb = delta.sum(axis=0)
        grads[l] = (gw, gb)
        delta = delta @ weights[l]
        if l > 0:
            delta = delta * act_d1(cache.preacts[l - 1])
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    return flat, delta


def input_grad_param_grad(net: FeedForwardNet, x: np.ndarray, v: np.ndarray):
    """Parameter gradient of J = sum_i v_i . grad_x out(x_i), out scalar.

    v is treated as constant. Runs a forward-mode pass with tangent v, then
    reverse mode over the combined primal/tangent graph; needs the second
    derivative of the activation. Returns (per-sample v_i . grad_x out_i,
    flat parameter gradient of J).
    """
    if net.widths[-1] != 1:
        raise DomainError("input_grad_param_grad requires a scalar-output net")
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if v.shape != x.shape:
        raise DomainError(f"tangent shape {v.shape} must match input shape {x.shape}")
    act, act_d1, act_d2 = _ACTIVATIONS[net.activation]
    weights = [w for w, _ in net.layers()]
    n_layers = len(weights)

    # Primal and tangent forward passes.
    a, u = x, v
    inputs, preacts, tangents_in, tangents_pre = [], [], [], []
    for i, (w, b) in enumerate(net.layers()):
        inputs.append(a)
        tangents_in.append(u)
        z = a @ w.T + b
        t = u @ w.T
        preacts.append(z)
        tangents_pre.append(t)
        if i < n_layers - 1:
            a = act(z)
            u = act_d1(z) * t
        else:
            a = z
            u = t
    dots = u[:, 0].copy()

    # Reverse over the combined graph.
    du = np.ones_like(u)
    da = np.zeros_like(a)
    grads = [None] * n_layers
    for l in reversed(range(n_layers)):
        if l == n_layers - 1:
            dt = du
            dz = da
        else:
            phi1 = act_d1(preacts[l])
            dt = phi1 * du
            dz = act_d2(preacts[l]) * tangents_pre[l] * du + phi1 * da
        gw = dt.T @ tangents_in[l] + dz.T @ inputs[l]
        gb = dz.sum(axis=0)
        grads[l] = (gw, gb)
        du = dt @ weights[l]
        da = dz @ weights[l]
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    return dots, flat


def sigma_embedding(sigma) -> np.ndarray:
    """Sinusoidal features of log sigma: (B, 16), log-spaced frequencies."""
    sig = np.atleast_1d(np.asarray(sigma, dtype=float))
    if np.any(sig <= 0.0) or not np.all(np.isfinite(sig)):
        raise DomainError("sigma embedding requires sigma > 0")
    phase = np.log(sig)[:, None] * _EMBED_FREQS[None, :]
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def adam_init(n_params: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8,
              weight_decay=0.0) -> AdamState:
    return AdamState(
        m=np.zeros(n_params), v=np.zeros(n_params), step=0,
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
    )


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray):
    """One Adam update with bias correction and decoupled weight decay.

    Functional: returns (new_params, new_state) with fresh arrays, so stale
    forward caches can be detected by identity.
    """
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise DomainError("params, grads and moments must have equal length")
    bad = ~np.isfinite(grads)
    if np.any(bad):
        raise NumericsError(
            f"non-finite gradient at index {int(np.argmax(bad))}"
        )
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads**2
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    update = m_hat / (np.sqrt(v_hat) + state.eps)
    if state.weight_decay:
        update = update + state.weight_decay * params
    new_params = params - state.lr * update
    return new_params, replace(state, m=m, v=v, step=step)


class Adam:
    """Mutable handle around AdamState for single-owner update loops."""

    def __init__(self, n_params: int, lr: float, **kwargs):
        self.state = adam_init(n_params, lr, **kwargs)

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        new_params, self.state = adam_step(self.state, params, grads)
        return new_params
