"""Weighted score-difference distillation: objective, normalizations, loop.

The generator follows the exact divergence gradient

    grad_theta D_f(p_t || q_t) = -E[ h(r_t(x)) (s_teacher(x) - s_student(x)) grad_theta G ]

with x = G(z) + sigma eps and r_t the teacher/student density ratio. The
per-sample signal g_i = w_t h(r_i) (s_teacher - s_student) is treated as a
constant; parameters move along -grad_theta D_f, i.e. the loop ascends the
surrogate mean_i g_i . x_i. (Descent on the divergence is the convention that
makes a Gaussian student provably shrink its mean gap for every catalog
divergence; see tests.)

Ratios come from the discriminator logit or from an exact oracle (closed form
for affine students, particle Monte one for MLP students), are clipped in log
space, bin-normalized over noise levels (their expectation under the student
is 1), passed through h, and batch-normalized again so the weighting keeps a
stable scale relative to the GAN term.

Every iteration updates either the generator (iteration % tau == 0) or the
denoiser plus discriminator, mirroring the two time-scale schedule.
"""

import math
from dataclasses import dataclass, fields
from typing import Optional, Tuple, Union

import numpy as np

from . import rng as rngmod
from .divergence import KINDS, DivergenceSpec, catalog, weight_h
from .errors import ConfigError, DomainError, NumericsError, TrainingDiverged
from .nets import Adam, FeedForwardNet, backward, forward, init_net
from .ratio_gan import (
    Discriminator,
    RatioClip,
    clipped_log_ratio,
    disc_init,
    disc_update,
    gan_generator_grad,
    logit,
)
from .scorematch import Denoiser, denoiser_init, dsm_update, fake_score
from .teacher import (
    AffineGenerator,
    IsotropicGaussianMixture,
    NoiseSchedule,
    affine_pushforward,
    log_density,
    make_teacher,
    particle_log_density,
    sample,
    score,
)

__all__ = [
    "RunConfig",
    "TrainState",
    "StepReport",
    "Batch",
    "MLPGenerator",
    "AffineStudent",
    "fdistill_generator_signal",
    "normalize_stage1",
    "normalize_stage2",
    "init_state",
    "draw_batch",
    "train_step",
    "train",
    "compute_metrics",
]

HIDDEN_WIDTHS = (128, 128)
ACTIVATION = "silu"

_ENUMS = {
    "stage1_mode": ("bin-mean", "batch-sum"),
    "ratio_source": ("discriminator", "exact-oracle"),
    "score_source": ("denoiser", "exact-oracle"),
    "generator_kind": ("mlp", "affine"),
    "gan_loss_form": ("nonsaturating", "minimax"),
}


@dataclass
class RunConfig:
    """Every hyperparameter of a training run. JSON round-trippable except
    that `divergence` may also hold a custom DivergenceSpec when driven from
    code."""

    divergence: Union[str, DivergenceSpec] = "jensen-shannon"
    batch_size: int = 128
    total_iters: int = 20000
    tau: int = 5
    gan_weight: float = 1e-3
    r_min: float = 1e-3
    r_max: float = 1e3
    time_bins: int = 8
    normalize_stage1: bool = True
    normalize_stage2: bool = True
    stage1_mode: str = "bin-mean"
    lr_generator: float = 2e-3
    lr_denoiser: float = 2e-3
    lr_discriminator: float = 2e-3
    weight_decay: float = 0.0
    r1_gamma: float = 1.0
    seed: int = 0
    teacher: Union[str, dict] = "ring8"
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    n_levels: int = 64
    ratio_source: str = "discriminator"
    score_source: str = "denoiser"
    generator_kind: str = "mlp"
    latent_dim: Optional[int] = None
    gan_loss_form: str = "nonsaturating"
    ratio_at_clean: bool = False
    time_weight_rescale: bool = False
    oracle_ratio_particles: int = 512
    metrics_interval: int = 100
    metrics_samples: int = 512
    metrics_centers: int = 1024
    metrics_sigma: float = 0.1
    checkpoint_interval: int = 0
    coverage_k: float = 3.0
    coverage_threshold: float = 0.02

    def __post_init__(self):
        self.validate()

    def validate(self):
        if isinstance(self.divergence, str):
            if self.divergence not in KINDS:
                raise ConfigError(
                    "divergence", f"unknown kind {self.divergence!r} (known: {', '.join(KINDS)})"
                )
        elif not isinstance(self.divergence, DivergenceSpec):
            raise ConfigError("divergence", "must be a catalog name or DivergenceSpec")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.time_bins < 1:
            raise ConfigError("time_bins", "must be >= 1")
        if self.batch_size < 2 * self.time_bins:
            raise ConfigError(
                "batch_size",
                f"must average >= 2 samples per time bin ({2 * self.time_bins} for "
                f"{self.time_bins} bins)",
            )
        if self.tau < 1:
            raise ConfigError("tau", "must be >= 1")
        if self.total_iters < 0:
            raise ConfigError("total_iters", "must be >= 0")
        if self.gan_weight < 0.0:
            raise ConfigError("gan_weight", "must be >= 0")
        if self.r1_gamma < 0.0:
            raise ConfigError("r1_gamma", "must be >= 0")
        try:
            RatioClip(self.r_min, self.r_max)
        except DomainError as exc:
            raise ConfigError("r_min", str(exc)) from exc
        for name in ("lr_generator", "lr_denoiser", "lr_discriminator"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(name, "must be > 0")
        if self.weight_decay < 0.0:
            raise ConfigError("weight_decay", "must be >= 0")
        if not (0.0 < self.sigma_min < self.sigma_max):
            raise ConfigError("sigma_min", "requires 0 < sigma_min < sigma_max")
        if self.n_levels < 1:
            raise ConfigError("n_levels", "must be >= 1")
        for name, allowed in _ENUMS.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(name, f"must be one of {allowed}")
        if self.score_source == "exact-oracle" and self.generator_kind != "affine":
            raise ConfigError(
                "score_source", "exact-oracle fake scores require an affine generator"
            )
        if (
            self.ratio_at_clean
            and self.ratio_source == "exact-oracle"
            and self.generator_kind != "affine"
        ):
            raise ConfigError(
                "ratio_at_clean",
                "exact clean-sample ratios need an analytic student (affine generator); "
                "the particle density estimate is undefined at sigma=0",
            )
        if self.latent_dim is not None and self.latent_dim < 1:
            raise ConfigError("latent_dim", "must be >= 1 when given")
        for name in ("oracle_ratio_particles", "metrics_samples", "metrics_centers"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.metrics_interval < 0:
            raise ConfigError("metrics_interval", "must be >= 0")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval", "must be >= 0")
        if self.metrics_sigma <= 0.0:
            raise ConfigError("metrics_sigma", "must be > 0")
        if self.coverage_k <= 0.0:
            raise ConfigError("coverage_k", "must be > 0")
        if not (0.0 < self.coverage_threshold < 1.0):
            raise ConfigError("coverage_threshold", "must be in (0, 1)")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        """Strict construction: unknown keys are rejected, not ignored."""
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in known:
                raise ConfigError(key, "unknown config key")
            kwargs[key] = value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError("<root>", str(exc)) from exc

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, DivergenceSpec):
                value = value.kind
            out[f.name] = value
        return out

    def divergence_spec(self) -> DivergenceSpec:
        if isinstance(self.divergence, DivergenceSpec):
            return self.divergence
        return catalog(self.divergence)

    def ratio_clip(self) -> RatioClip:
        return RatioClip(self.r_min, self.r_max)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.sigma_min, self.sigma_max, self.n_levels)


class MLPGenerator:
    """One-step student G(z) backed by a FeedForwardNet."""

    def __init__(self, net: FeedForwardNet):
        self.net = net

    @property
    def latent_dim(self):
        return self.net.widths[0]

    @property
    def dim(self):
        return self.net.widths[-1]

    @property
    def params(self):
        return self.net.params

    @params.setter
    def params(self, value):
        self.net.params = np.asarray(value, dtype=float)

    def forward_cached(self, z):
        return forward(self.net, z)

    def forward(self, z):
        return forward(self.net, z)[0]

    def backward(self, ctx, out_grad):
        pgrad, _ = backward(self.net, ctx, out_grad)
        return pgrad

    def exact_law(self):
        return None


class AffineStudent:
    """Trainable isotropic affine student x = a z + b.

    Restricting the matrix to a scalar multiple of the identity keeps the
    pushforward law closed form throughout training, which is what the
    exact-oracle ratio and score sources require.
    """

    def __init__(self, scale: float, bias: np.ndarray):
        self.scale = float(scale)
        self.bias = np.asarray(bias, dtype=float)

    @property
    def latent_dim(self):
        return self.bias.shape[0]

    @property
    def dim(self):
        return self.bias.shape[0]

    @property
    def params(self):
        return np.concatenate([[self.scale], self.bias])

    @params.setter
    def params(self, value):
        flat = np.asarray(value, dtype=float)
        self.scale = float(flat[0])
        self.bias = flat[1:].copy()

    def forward_cached(self, z):
        return self.scale * z + self.bias, z

    def forward(self, z):
        return self.scale * z + self.bias

    def backward(self, ctx, out_grad):
        z = ctx
        return np.concatenate([[float(np.sum(out_grad * z))], out_grad.sum(axis=0)])

    def exact_law(self) -> IsotropicGaussianMixture:
        if self.scale == 0.0:
            raise DomainError("affine student degenerated to zero scale")
        return affine_pushforward(
            AffineGenerator(matrix=self.scale * np.eye(self.dim), bias=self.bias), 0.0
        )


@dataclass
class TrainState:
    generator: Union[MLPGenerator, AffineStudent]
    denoiser: Denoiser
    discriminator: Discriminator
    opt_generator: Adam
    opt_denoiser: Adam
    opt_discriminator: Adam
    iteration: int = 0


@dataclass
class StepReport:
    iteration: int
    updated: Tuple[str, ...]
    fdistill_loss: Optional[float] = None
    gan_loss: Optional[float] = None
    dsm_loss: Optional[float] = None
    disc_loss: Optional[float] = None
    mean_h: Optional[float] = None
    var_h: Optional[float] = None
    mean_ratio: Optional[float] = None


@dataclass
class Batch:
    t_idx: np.ndarray
    sigma: np.ndarray
    z: np.ndarray
    eps: np.ndarray


def fdistill_generator_signal(x, teacher_score, fake_score, h, w_t) -> np.ndarray:
    """Per-sample stop-gradient signal g_i = w_i h_i (teacher_i - fake_i).

    The generator descends the divergence by ascending mean_i g_i . x_i; the
    caller backpropagates -g/B through the generator.
    """
    x = np.asarray(x, dtype=float)
    ts = np.asarray(teacher_score, dtype=float)
    fs = np.asarray(fake_score, dtype=float)
    h = np.asarray(h, dtype=float)
    w = np.asarray(w_t, dtype=float)
    if not (x.shape == ts.shape == fs.shape):
        raise DomainError("sample and score batches must be aligned")
    if h.shape != (x.shape[0],) or w.shape != (x.shape[0],):
        raise DomainError("h and w_t must be per-sample vectors aligned with x")
    if np.any(h < 0.0) or not np.all(np.isfinite(h)):
        raise DomainError("weighting h must be finite and non-negative")
    return (w * h)[:, None] * (ts - fs)


def _unit_mean(values: np.ndarray, what: str) -> np.ndarray:
    """Divide by the mean, then polish until np.mean is bitwise 1.0.

    A single division leaves the recomputed mean a few ulps off. Repeated
    division usually lands exactly; if rounding makes it cycle, nudging one
    element by the remaining sum deficit finishes the job.
    """
    out = np.array(values, dtype=float)
    if out.size == 0:
        raise DomainError(f"cannot normalize an empty {what} batch")
    mean = float(np.mean(out))
    if not math.isfinite(mean) or mean <= 0.0:
        raise DomainError(f"degenerate {what} batch: mean {mean}")
    for _ in range(8):
        if mean == 1.0:
            return out
        out = out / mean
        mean = float(np.mean(out))
    # Division alone can cycle one ulp around 1. Finish by moving the exact
    # sum deficit into a single element: try each candidate (finest ulp
    # first), keep the first that makes np.mean land on 1.0 bitwise.
    order = np.argsort(out)
    for _ in range(16):
        if mean == 1.0:
            return out
        deficit = float(out.size) - float(np.sum(out))
        landed = False
        for j in order:
            trial = out[j] + deficit
            if trial <= 0.0:
                continue
            old = out[j]
            out[j] = trial
            if float(np.mean(out)) == 1.0:
                landed = True
                break
            out[j] = old
        if landed:
            return out
        j = int(order[0]) if out[order[0]] + deficit > 0.0 else int(order[-1])
        out[j] = out[j] + deficit
        mean = float(np.mean(out))
    raise NumericsError(f"unit-mean normalization of {what} did not converge")


def normalize_stage1(ratios, time_bin_ids, mode: str = "bin-mean") -> np.ndarray:
    """Normalize clipped ratios within noise-level bins to mean 1.

    Exploits E_q[r_t] = 1: each bin's empirical mean is rescaled to exactly 1.
    mode="batch-sum" is the r_i / sum_i r_i variant over the whole batch.
    """
    r = np.asarray(ratios, dtype=float)
    ids = np.asarray(time_bin_ids)
    if r.size == 0:
        raise DomainError("cannot normalize an empty ratio batch")
    if r.shape != ids.shape:
        raise DomainError("ratios and time_bin_ids must be aligned")
    if np.any(r < 0.0) or not np.all(np.isfinite(r)):
        raise DomainError("ratios must be finite and non-negative")
    if mode == "batch-sum":
        total = math.fsum(r.tolist())
        if total <= 0.0:
            raise DomainError("degenerate ratio batch: non-positive sum")
        return r / total
    if mode != "bin-mean":
        raise DomainError(f"unknown stage-1 mode {mode!r}")
    out = np.empty_like(r)
    for b in np.unique(ids):
        mask = ids == b
        out[mask] = _unit_mean(r[mask], f"ratio (bin {b})")
    return out


def normalize_stage2(h) -> np.ndarray:
    """Normalize weights to batch mean exactly 1."""
    values = np.asarray(h, dtype=float)
    if values.size == 0:
        raise DomainError("cannot normalize an empty weighting batch")
    if not np.all(np.isfinite(values)) or np.any(values < 0.0):
        raise DomainError("weighting batch must be finite and non-negative")
    if math.fsum(values.tolist()) <= 0.0:
        raise DomainError("degenerate weighting batch")
    return _unit_mean(values, "weighting")


def init_state(cfg: RunConfig, teacher: IsotropicGaussianMixture) -> TrainState:
    dim = teacher.dim
    latent = cfg.latent_dim if cfg.latent_dim is not None else dim
    sigma_data = teacher.per_coord_std()
    if cfg.generator_kind == "affine":
        if latent != dim:
            raise ConfigError("latent_dim", "affine students require latent_dim == dim")
        generator = AffineStudent(scale=1.0, bias=np.zeros(dim))
    else:
        net = init_net(
            (latent, *HIDDEN_WIDTHS, dim),
            ACTIVATION,
            rngmod.stream(cfg.seed, rngmod.INIT_GENERATOR),
            final=0.1,
        )
        generator = MLPGenerator(net)
    denoiser = denoiser_init(
        dim, rngmod.stream(cfg.seed, rngmod.INIT_DENOISER), sigma_data=sigma_data,
        hidden=HIDDEN_WIDTHS, activation=ACTIVATION,
    )
    disc = disc_init(
        dim, rngmod.stream(cfg.seed, rngmod.INIT_DISCRIMINATOR), sigma_data=sigma_data,
        hidden=HIDDEN_WIDTHS, activation=ACTIVATION,
    )
    wd = cfg.weight_decay
    return TrainState(
        generator=generator,
        denoiser=denoiser,
        discriminator=disc,
        opt_generator=Adam(generator.params.size, cfg.lr_generator, weight_decay=wd),
        opt_denoiser=Adam(denoiser.net.params.size, cfg.lr_denoiser, weight_decay=wd),
        opt_discriminator=Adam(disc.net.params.size, cfg.lr_discriminator, weight_decay=wd),
    )


def draw_batch(cfg: RunConfig, schedule: NoiseSchedule, iteration: int,
               latent_dim: int, dim: int) -> Batch:
    t_idx, sigma = schedule.draw_levels(
        rngmod.stream(cfg.seed, iteration, rngmod.STEP_TIME), cfg.batch_size
    )
    z = rngmod.stream(cfg.seed, iteration, rngmod.STEP_LATENT).standard_normal(
        (cfg.batch_size, latent_dim)
    )
    eps = rngmod.stream(cfg.seed, iteration, rngmod.STEP_NOISE).standard_normal(
        (cfg.batch_size, dim)
    )
    return Batch(t_idx=t_idx, sigma=sigma, z=z, eps=eps)


def _oracle_log_ratio(state: TrainState, cfg: RunConfig,
                      teacher: IsotropicGaussianMixture, points, sigma,
                      iteration: int) -> np.ndarray:
    law = state.generator.exact_law()
    if law is not None:
        log_q = log_density(law, points, sigma)
    else:
        gen = rngmod.stream(cfg.seed, iteration, rngmod.STEP_PARTICLES)
        z = gen.standard_normal((cfg.oracle_ratio_particles, state.generator.latent_dim))
        centers = state.generator.forward(z)
        log_q = particle_log_density(centers, points, sigma)
    return log_density(teacher, points, sigma) - log_q


def _ratio_batch(state, cfg, teacher, y, x, sigma, iteration) -> np.ndarray:
    """Clipped density-ratio estimates for the weighting function."""
    clip = cfg.ratio_clip()
    points = y if cfg.ratio_at_clean else x
    if cfg.ratio_source == "discriminator":
        # Clean-sample reading still conditions the head on the drawn sigma.
        log_r = clipped_log_ratio(state.discriminator, points, sigma, clip)
    else:
        ratio_sigma = 0.0 if cfg.ratio_at_clean else sigma
        log_r = _oracle_log_ratio(state, cfg, teacher, points, ratio_sigma, iteration)
        lo, hi = clip.log_bounds
        log_r = np.clip(log_r, lo, hi)
    return np.exp(log_r)


def _fake_score_batch(state, cfg, x, sigma) -> np.ndarray:
    if cfg.score_source == "exact-oracle":
        return score(state.generator.exact_law(), x, sigma)
    return fake_score(state.denoiser, x, sigma)


def _check_finite_params(state: TrainState, names, report: StepReport):
    nets = {
        "generator": lambda: state.generator.params,
        "denoiser": lambda: state.denoiser.net.params,
        "discriminator": lambda: state.discriminator.net.params,
    }
    for name in names:
        if not np.all(np.isfinite(nets[name]())):
            raise TrainingDiverged(
                f"non-finite {name} parameters at iteration {report.iteration}",
                report=report,
            )


def generator_step(state: TrainState, cfg: RunConfig,
                   teacher: IsotropicGaussianMixture, schedule: NoiseSchedule,
                   batch: Batch) -> StepReport:
    """The iteration % tau == 0 branch: one weighted-score update of G."""
    it = state.iteration
    n = cfg.batch_size
    y, ctx = state.generator.forward_cached(batch.z)
    x = y + batch.sigma[:, None] * batch.eps
    ts = score(teacher, x, batch.sigma)
    fs = _fake_score_batch(state, cfg, x, batch.sigma)

    r = _ratio_batch(state, cfg, teacher, y, x, batch.sigma, it)
    if cfg.normalize_stage1:
        bins = schedule.bin_ids(batch.t_idx, cfg.time_bins)
        r_used = normalize_stage1(r, bins, mode=cfg.stage1_mode)
    else:
        r_used = r
    h = weight_h(cfg.divergence_spec(), r_used)
    h_used = normalize_stage2(h) if cfg.normalize_stage2 else h

    w = schedule.time_weight(batch.sigma)
    if cfg.time_weight_rescale:
        scale = float(np.mean(np.abs(w[:, None] * (ts - fs))))
        w = w / (scale + 1e-12)

    g = fdistill_generator_signal(x, ts, fs, h_used, w)
    out_grad = -g / n
    gan_loss = None
    if cfg.gan_weight > 0.0:
        eps2 = rngmod.stream(cfg.seed, it, rngmod.STEP_GAN_NOISE).standard_normal(
            (n, teacher.dim)
        )
        gg = gan_generator_grad(
            state.discriminator, y, batch.sigma, eps2, form=cfg.gan_loss_form
        )
        out_grad = out_grad + cfg.gan_weight * gg
        ell = logit(state.discriminator, y + batch.sigma[:, None] * eps2, batch.sigma)
        if cfg.gan_loss_form == "nonsaturating":
            gan_loss = float(np.mean(np.logaddexp(0.0, -ell)))
        else:
            gan_loss = float(np.mean(-np.logaddexp(0.0, ell)))

    pgrad = state.generator.backward(ctx, out_grad)
    state.generator.params = state.opt_generator.step(state.generator.params, pgrad)

    report = StepReport(
        iteration=it,
        updated=("generator",),
        fdistill_loss=float(-np.mean(np.sum(g * x, axis=1))),
        gan_loss=gan_loss,
        mean_h=float(np.mean(h_used)),
        var_h=float(np.var(h_used)),
        mean_ratio=float(np.mean(r)),
    )
    _check_finite_params(state, ("generator",), report)
    return report


def auxiliary_step(state: TrainState, cfg: RunConfig,
                   teacher: IsotropicGaussianMixture, schedule: NoiseSchedule,
                   batch: Batch) -> StepReport:
    """The other branch: one DSM step and one discriminator step."""
    it = state.iteration
    n = cfg.batch_size
    y, _ = state.generator.forward_cached(batch.z)

    eps_dsm = rngmod.stream(cfg.seed, it, rngmod.STEP_DSM_NOISE).standard_normal(y.shape)
    dsm_loss = dsm_update(
        state.denoiser, state.opt_denoiser, y, batch.sigma, eps_dsm,
        sigma_cap=cfg.sigma_min,
    )

    real = sample(teacher, n, cfg.seed, counter=(it << 2) | 1)
    eps_r = rngmod.stream(cfg.seed, it, rngmod.STEP_REAL_NOISE).standard_normal(y.shape)
    eps_f = rngmod.stream(cfg.seed, it, rngmod.STEP_FAKE_NOISE).standard_normal(y.shape)
    disc_loss = disc_update(
        state.discriminator, state.opt_discriminator, real, y, batch.sigma,
        eps_r, eps_f, r1_gamma=cfg.r1_gamma,
    )

    report = StepReport(
        iteration=it,
        updated=("denoiser", "discriminator"),
        dsm_loss=dsm_loss,
        disc_loss=disc_loss,
    )
    _check_finite_params(state, ("denoiser", "discriminator"), report)
    return report


def train_step(state: TrainState, cfg: RunConfig,
               teacher: IsotropicGaussianMixture, schedule: NoiseSchedule) -> StepReport:
    """One Algorithm-style iteration; increments the counter afterwards.

    Any non-finite loss, gradient or parameter surfaces as TrainingDiverged
    carrying the partial step report.
    """
    it = state.iteration
    batch = draw_batch(cfg, schedule, it, state.generator.latent_dim, teacher.dim)
    try:
        if it % cfg.tau == 0:
            report = generator_step(state, cfg, teacher, schedule, batch)
        else:
            report = auxiliary_step(state, cfg, teacher, schedule, batch)
    except TrainingDiverged:
        raise
    except NumericsError as exc:
        raise TrainingDiverged(
            f"iteration {it}: {exc}",
            report=StepReport(iteration=it, updated=()),
        ) from exc
    state.iteration += 1
    return report


def _student_log_density(state, cfg, points, sigma, center_stream):
    law = state.generator.exact_law()
    if law is not None:
        return log_density(law, points, sigma)
    z = center_stream.standard_normal(
        (cfg.metrics_centers, state.generator.latent_dim)
    )
    centers = state.generator.forward(z)
    return particle_log_density(centers, points, sigma)


def compute_metrics(state: TrainState, cfg: RunConfig,
                    teacher: IsotropicGaussianMixture,
                    last: Optional[StepReport] = None) -> dict:
    """Monte-Carlo forward/reverse KL against the teacher at metrics_sigma,
    mode coverage of clean samples, and the latest weighting statistics."""
    from .oracle import mode_coverage  # local import: oracle depends on teacher only

    it = state.iteration
    s = cfg.metrics_sigma
    n = cfg.metrics_samples

    xs_p = sample(teacher, n, cfg.seed, counter=(it << 2) | 2) + s * rngmod.stream(
        cfg.seed, it, rngmod.METRICS, 1
    ).standard_normal((n, teacher.dim))
    log_p = log_density(teacher, xs_p, s)
    log_q = _student_log_density(
        state, cfg, xs_p, s, rngmod.stream(cfg.seed, it, rngmod.METRICS, 2)
    )
    fwd = log_p - log_q
    forward_kl = float(np.mean(fwd))
    forward_kl_se = float(np.std(fwd, ddof=1) / math.sqrt(n))

    z = rngmod.stream(cfg.seed, it, rngmod.METRICS, 3).standard_normal(
        (n, state.generator.latent_dim)
    )
    y = state.generator.forward(z)
    xs_q = y + s * rngmod.stream(cfg.seed, it, rngmod.METRICS, 4).standard_normal(
        (n, teacher.dim)
    )
    log_q2 = _student_log_density(
        state, cfg, xs_q, s, rngmod.stream(cfg.seed, it, rngmod.METRICS, 5)
    )
    rev = log_q2 - log_density(teacher, xs_q, s)
    reverse_kl = float(np.mean(rev))
    reverse_kl_se = float(np.std(rev, ddof=1) / math.sqrt(n))

    try:
        coverage = mode_coverage(y, teacher, k=cfg.coverage_k,
                                 threshold=cfg.coverage_threshold)
        modes_covered = coverage.n_covered
        min_mode_mass = float(np.min(coverage.per_mode_mass))
    except DomainError:
        modes_covered = -1
        min_mode_mass = float("nan")

    row = {
        "iteration": it,
        "forward_kl": forward_kl,
        "forward_kl_se": forward_kl_se,
        "reverse_kl": reverse_kl,
        "reverse_kl_se": reverse_kl_se,
        "modes_covered": modes_covered,
        "min_mode_mass": min_mode_mass,
        "fdistill_loss": float("nan"),
        "gan_loss": float("nan"),
        "dsm_loss": float("nan"),
        "disc_loss": float("nan"),
        "mean_h": float("nan"),
        "var_h": float("nan"),
        "mean_ratio": float("nan"),
    }
    if last is not None:
        for key in ("fdistill_loss", "gan_loss", "dsm_loss", "disc_loss",
                    "mean_h", "var_h", "mean_ratio"):
            value = getattr(last, key, None)
            if value is not None:
                row[key] = value
    return row


def state_payloads(state: TrainState):
    """Serializable (name, widths, params, adam) tuples for checkpointing."""
    from .checkpoint import NetworkPayload

    if isinstance(state.generator, AffineStudent):
        gen_widths = (state.generator.latent_dim, state.generator.dim)
    else:
        gen_widths = state.generator.net.widths
    return [
        NetworkPayload("generator", gen_widths, state.generator.params,
                       state.opt_generator.state),
        NetworkPayload("denoiser", state.denoiser.net.widths,
                       state.denoiser.net.params, state.opt_denoiser.state),
        NetworkPayload("discriminator", state.discriminator.net.widths,
                       state.discriminator.net.params, state.opt_discriminator.state),
    ]


def restore_state(cfg: RunConfig, iteration: int, payloads) -> TrainState:
    """Rebuild a TrainState from checkpoint payloads; exact inverse of
    state_payloads given the same config."""
    from .errors import CheckpointError

    by_name = {p.name: p for p in payloads}
    missing = {"generator", "denoiser", "discriminator"} - set(by_name)
    if missing:
        raise CheckpointError(f"checkpoint missing networks: {sorted(missing)}")
    teacher = make_teacher(cfg.teacher)
    state = init_state(cfg, teacher)
    for name, setter in (
        ("generator", lambda p: setattr(state.generator, "params", p)),
        ("denoiser", lambda p: setattr(state.denoiser.net, "params", p)),
        ("discriminator", lambda p: setattr(state.discriminator.net, "params", p)),
    ):
        payload = by_name[name]
        current = {
            "generator": state.generator.params,
            "denoiser": state.denoiser.net.params,
            "discriminator": state.discriminator.net.params,
        }[name]
        if payload.params.shape != current.shape:
            raise CheckpointError(
                f"checkpoint {name} has {payload.params.size} parameters, "
                f"config implies {current.size}"
            )
        setter(payload.params.copy())
    state.opt_generator.state = by_name["generator"].adam
    state.opt_denoiser.state = by_name["denoiser"].adam
    state.opt_discriminator.state = by_name["discriminator"].adam
    state.iteration = int(iteration)
    return state


def train(cfg: RunConfig, checkpoint_callback=None):
    """Run total_iters steps; returns (state, metrics rows).

    Metrics are logged every metrics_interval iterations and at the end.
    `checkpoint_callback(state, iteration)` fires every checkpoint_interval
    iterations when set.
    """
    teacher = make_teacher(cfg.teacher)
    schedule = cfg.schedule()
    state = init_state(cfg, teacher)
    metrics = []
    merged = StepReport(iteration=0, updated=())
    for _ in range(cfg.total_iters):
        report = train_step(state, cfg, teacher, schedule)
        for f in ("fdistill_loss", "gan_loss", "dsm_loss", "disc_loss",
                  "mean_h", "var_h", "mean_ratio"):
            value = getattr(report, f)
            if value is not None:
                setattr(merged, f, value)
        done = state.iteration
        if cfg.metrics_interval > 0 and (
            done % cfg.metrics_interval == 0 or done == cfg.total_iters
        ):
            metrics.append(compute_metrics(state, cfg, teacher, merged))
        if (
            checkpoint_callback is not None
            and cfg.checkpoint_interval > 0
            and done % cfg.checkpoint_interval == 0
        ):
            checkpoint_callback(state, done)
    return state, metrics
