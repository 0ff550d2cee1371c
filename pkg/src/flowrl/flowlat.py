"""Flow-matching latent model: interpolation, FM loss, ODE/SDE/CPS samplers
with exact Gaussian transition log-probs, closed-form KL, and windowed
trajectory collection.

Time convention: t=0 is data and t=1 is noise. States interpolate as
x_t = (1-t)·x0 + t·x1 with x1 ~ N(0, I), and the regression target for the
velocity field is x1 - x0. Sampling integrates t from 1 down to 0.

Latent blocks are (B, D) float grids; group-level code flattens them to
(n, B·D) rows. The stochastic kernels are factored into pure mean/sigma
functions so that rollout sampling and loss-time recomputation execute the
identical arithmetic (importance ratios are exactly 1 on-policy).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import container
from .guidance import guided_update
from .nets import ConfigError, MlpSpec, mlp_forward
from .tape import Tensor, concat, data_of, no_grad, tsum

TIME_FEATURES = 5

MODES = ("ode", "sde", "cps")


class DomainError(ValueError):
    """Argument outside the operation's domain."""


class DegenerateKernelError(ValueError):
    """Normalized log-prob requested for a zero-variance transition."""


def time_features(t, batch: int | None = None) -> np.ndarray:
    """Fourier time embedding [t, sin 2πt, cos 2πt, sin 4πt, cos 4πt]."""
    t = np.asarray(t, dtype=np.float64)
    f = np.stack([t, np.sin(2 * np.pi * t), np.cos(2 * np.pi * t),
                  np.sin(4 * np.pi * t), np.cos(4 * np.pi * t)], axis=-1)
    if batch is not None and f.ndim == 1:
        f = np.broadcast_to(f, (batch, TIME_FEATURES))
    return f


@dataclass(frozen=True)
class VelocityField:
    """Conditional velocity network v(x, t, cond) over flattened blocks."""

    spec: MlpSpec
    block_shape: tuple[int, int]
    cond_dim: int = 0

    @property
    def flat_dim(self) -> int:
        return self.block_shape[0] * self.block_shape[1]

    @property
    def input_dim(self) -> int:
        return self.flat_dim + TIME_FEATURES + self.cond_dim

    def __call__(self, params, x, t, cond=None):
        """x: (.., B·D); t: scalar or (batch,); cond: (cond_dim,) or (batch, ·)."""
        batched = len(x.shape) == 2
        batch = x.shape[0] if batched else None
        parts = [x, time_features(t, batch)]
        if self.cond_dim:
            cond = np.asarray(cond, dtype=np.float64)
            if batched and cond.ndim == 1:
                cond = np.broadcast_to(cond, (batch, self.cond_dim))
            parts.append(cond)
        return mlp_forward(self.spec, params, concat(parts, axis=-1))


def velocity_field(block_shape: tuple[int, int], cond_dim: int,
                   hidden: tuple[int, ...]) -> VelocityField:
    flat = block_shape[0] * block_shape[1]
    widths = (flat + TIME_FEATURES + cond_dim, *hidden, flat)
    acts = tuple(["tanh"] * len(hidden) + ["identity"])
    return VelocityField(MlpSpec(widths, acts), tuple(block_shape), cond_dim)


# -- formulas ------------------------------------------------------------------


def interpolate(x0, x1, t: float):
    """(1-t)·x0 + t·x1 for t in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"interpolation time {t} outside [0, 1]")
    if data_of(x0).shape != data_of(x1).shape:
        raise ConfigError("interpolate endpoints must share a shape")
    return x0 * (1.0 - t) + x1 * t


def clamp_time(t: float, t_clamp: float = 1e-3) -> float:
    return min(max(float(t), t_clamp), 1.0 - t_clamp)


def noise_scale(a: float, t: float, t_clamp: float = 1e-3) -> float:
    """sigma_t = a·sqrt(t/(1-t)) with t clamped into [eps, 1-eps]."""
    t = clamp_time(t, t_clamp)
    return a * math.sqrt(t / (1.0 - t))


def score(v_out, x, t: float, t_clamp: float = 1e-3):
    """Score of the rectified-flow marginal: -x/t - ((1-t)/t)·v."""
    t = max(float(t), t_clamp)
    return x * (-1.0 / t) + v_out * (-(1.0 - t) / t)


def fm_loss(field: VelocityField, params, x0, cond, rng: np.random.Generator,
            t_clamp: float = 1e-3, t: np.ndarray | None = None,
            x1: np.ndarray | None = None):
    """Mean over the batch of ||(x1 - x0) - v(x_t, t, cond)||^2.

    x0 may be an ndarray (batch, B, D)/(batch, B·D) or a Tensor of encoded
    latents; t ~ U(eps, 1-eps) per sample and x1 ~ N(0, I) unless supplied.
    """
    flat = field.flat_dim
    if isinstance(x0, Tensor):
        x0 = x0.reshape((-1, flat))
    else:
        x0 = np.asarray(x0, dtype=np.float64).reshape(-1, flat)
    batch = x0.shape[0]
    if batch == 0:
        raise ConfigError("fm_loss requires a non-empty batch")
    if t is None:
        t = rng.uniform(t_clamp, 1.0 - t_clamp, size=batch)
    if x1 is None:
        x1 = rng.standard_normal((batch, flat))
    tcol = t[:, None]
    x_t = x0 * (1.0 - tcol) + x1 * tcol
    target = x1 - x0
    v = field(params, x_t, t, cond)
    diff = target - v
    return tsum(diff * diff, axis=-1).mean()


def ode_step(field: VelocityField, params, x, t: float, dt: float, cond=None):
    """Reverse-time Euler step x - v(x, t, cond)·dt."""
    if t - dt < -1e-12:
        raise DomainError("ode_step would integrate past t=0")
    return x - field(params, x, t, cond) * dt


def sde_mean_sigma(x, v, t: float, dt: float, a: float):
    """Euler-Maruyama transition mean/std toward t -> 0.

    mu = x - (v + (sigma_t^2/(2t))·(x + (1-t)·v))·dt, sigma = sigma_t·sqrt(dt).
    Caller supplies an already-clamped t.
    """
    sig_t = a * math.sqrt(t / (1.0 - t))
    coef = sig_t * sig_t / (2.0 * t)
    drift = v + (x + v * (1.0 - t)) * coef
    mu = x - drift * dt
    return mu, sig_t * math.sqrt(dt)


def sde_step(field: VelocityField, params, x, t: float, dt: float, a: float,
             noise, cond=None, t_clamp: float = 1e-3):
    """Stochastic kernel step; returns (next state, mean, sigma)."""
    t = clamp_time(t, t_clamp)
    v = field(params, x, t, cond)
    mu, sigma = sde_mean_sigma(x, v, t, dt, a)
    return mu + noise * sigma, mu, sigma


def cps_predict(x, t: float, v_out):
    """Invert the interpolant: x0_hat = x - t·v, x1_hat = x + (1-t)·v."""
    return x - v_out * t, x + v_out * (1.0 - t)


def cps_mean_sigma(x, v, t: float, dt: float, eta: float):
    """Coefficient-preserving transition mean/std for strength eta in [0, 1].

    mu = (1-s)·x0_hat + s·cos(eta·pi/2)·x1_hat with s = t - dt; the noise
    scale s·sin(eta·pi/2) keeps sqrt(s^2 - sigma^2) = s·cos(eta·pi/2).
    """
    s = t - dt
    x0_hat, x1_hat = cps_predict(x, t, v)
    mu = x0_hat * (1.0 - s) + x1_hat * (s * math.cos(eta * math.pi / 2.0))
    sigma = s * math.sin(eta * math.pi / 2.0)
    return mu, sigma


def cps_step(field: VelocityField, params, x, t: float, dt: float, eta: float,
             noise, cond=None):
    """CPS kernel step; returns (next state, mean, sigma)."""
    if not 0.0 <= eta <= 1.0:
        raise DomainError("cps strength eta must lie in [0, 1]")
    if t - dt < -1e-12:
        raise DomainError("cps_step would integrate past t=0")
    v = field(params, x, t, cond)
    mu, sigma = cps_mean_sigma(x, v, t, dt, eta)
    return mu + noise * sigma, mu, sigma


def transition_logprob(x_next, mu, sigma: float, simplified: bool = True):
    """Gaussian transition log-likelihood over the last axis.

    simplified=True drops the 1/(2·sigma^2) normalization (the form that
    shifts learning signal toward the earlier, noisier steps); the full form
    is the exact isotropic Gaussian log-density.
    """
    diff = x_next - mu
    sq = tsum(diff * diff, axis=-1)
    if simplified:
        return sq * -1.0
    if sigma <= 0.0:
        raise DegenerateKernelError("full log-prob undefined for sigma=0")
    dim = data_of(x_next).shape[-1]
    const = dim * (math.log(sigma) + 0.5 * math.log(2.0 * math.pi))
    return sq * (-1.0 / (2.0 * sigma * sigma)) - const


def kl_term(v_out, v_ref_out, t: float, a: float, dt: float,
            t_clamp: float = 1e-3):
    """Closed-form Gaussian KL between current and reference transitions."""
    if a <= 0.0:
        raise DomainError("kl_term undefined for a=0 (1/sigma_t diverges)")
    t = clamp_time(t, t_clamp)
    sig_t = a * math.sqrt(t / (1.0 - t))
    coef = (dt / 2.0) * (sig_t * (1.0 - t) / (2.0 * t) + 1.0 / sig_t) ** 2
    diff = v_out - v_ref_out
    return tsum(diff * diff, axis=-1) * coef


def cps_eta_matching_sde(a: float, steps: int) -> float:
    """Strength eta whose CPS std matches the EM sigma at mid-trajectory."""
    dt = 1.0 / steps
    s_mid = 0.5 - dt
    if s_mid <= 0.0:
        return 1.0
    ratio = min(1.0, a * math.sqrt(dt) / s_mid)
    return (2.0 / math.pi) * math.asin(ratio)


# -- trajectory sampling -------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    """Denoising schedule: uniform grid t = 1, (K-1)/K, ..., 0."""

    steps: int
    mode: str = "cps"
    noise_level: float = 0.8            # a; also calibrates eta when unset
    eta: float | None = None
    window_size: int | None = None      # None: every step stochastic
    window_range: tuple[int, int] = (0, 1)
    t_clamp: float = 1e-3
    simplified_logprob: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.noise_level < 0:
            raise ConfigError("noise level a must be >= 0")
        if self.eta is not None and not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")
        if self.window_size is not None:
            lo, hi = self.window_range
            if not (0 <= lo < hi <= self.steps):
                raise ConfigError("window range must satisfy 0 <= lo < hi <= steps")
            if not 0 < self.window_size <= self.steps:
                raise ConfigError("window size must lie in (0, steps]")

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    def time_grid(self) -> np.ndarray:
        """t_K=1 > ... > t_0=0."""
        return np.linspace(1.0, 0.0, self.steps + 1)

    def resolved_eta(self) -> float:
        if self.eta is not None:
            return self.eta
        return cps_eta_matching_sde(self.noise_level, self.steps)

    def effective_time(self, t: float) -> float:
        """Kernel-evaluation time: clamped and capped at the next-to-last
        grid point so the EM drift stays bounded at the t=1 step."""
        return min(max(t, self.t_clamp), 1.0 - self.dt, 1.0 - self.t_clamp)

    def draw_window_start(self, rng: np.random.Generator) -> int | None:
        if self.mode == "ode" or self.window_size is None:
            return None
        lo, hi = self.window_range
        return int(rng.integers(lo, hi))

    def is_stochastic_step(self, index: int, window_start: int | None) -> bool:
        if self.mode == "ode":
            return False
        if self.window_size is None or window_start is None:
            return True
        return window_start <= index < window_start + self.window_size


@dataclass
class TrajStep:
    """One denoising transition; states are flattened (B·D,) vectors."""

    index: int
    t: float
    state: np.ndarray
    mean: np.ndarray
    sigma: float
    stochastic: bool
    offset: np.ndarray
    logprob_old: float | None


@dataclass
class DenoisingTrajectory:
    condition: np.ndarray | None
    final: np.ndarray               # (B, D) latent at t=0
    steps: list[TrajStep] = dc_field(default_factory=list)
    window_start: int | None = None

    def stochastic_steps(self) -> list[TrajStep]:
        return [s for s in self.steps if s.stochastic]


def sample_group(field: VelocityField, params, cond, config: SamplerConfig,
                 n: int, rng: np.random.Generator, guidance_config=None,
                 window_start: int | None = None) -> list[DenoisingTrajectory]:
    """Sample n trajectories in lockstep, applying group repulsion guidance.

    The stochastic window placement is shared by the whole group (pass
    window_start to share it across several groups of one rollout batch).
    Initial noise is independent per trajectory; classifier-free guidance is
    never applied.
    """
    K = config.steps
    dt = config.dt
    eta = config.resolved_eta() if config.mode == "cps" else None
    if window_start is None:
        window_start = config.draw_window_start(rng)
    flat = field.flat_dim
    with no_grad():
        z = rng.standard_normal((n, flat))
        records: list[list[TrajStep]] = [[] for _ in range(n)]
        for j in range(K):
            t = (K - j) / K
            stochastic = config.is_stochastic_step(j, window_start)
            v = data_of(field(params, z, t, cond))
            if stochastic and config.mode == "sde":
                mu, sigma = sde_mean_sigma(z, v, config.effective_time(t), dt,
                                           config.noise_level)
            elif stochastic and config.mode == "cps":
                mu, sigma = cps_mean_sigma(z, v, t, dt, eta)
                if sigma == 0.0:
                    stochastic = False
            else:
                mu, sigma = z - v * dt, 0.0
            if guidance_config is not None and getattr(guidance_config, "enabled", False):
                mu, offsets = guided_update(mu, z, K - j, K, guidance_config)
            else:
                offsets = np.zeros_like(mu)
            if stochastic:
                noise = rng.standard_normal((n, flat))
                z_next = mu + sigma * noise
                logprobs = transition_logprob(z_next, mu, sigma,
                                              config.simplified_logprob)
            else:
                z_next = mu
                logprobs = None
            for i in range(n):
                records[i].append(TrajStep(
                    index=j, t=t, state=z[i].copy(), mean=mu[i].copy(),
                    sigma=float(sigma) if stochastic else 0.0,
                    stochastic=stochastic, offset=offsets[i].copy(),
                    logprob_old=float(logprobs[i]) if stochastic else None))
            z = z_next
        B, D = field.block_shape
        return [DenoisingTrajectory(
            condition=None if cond is None else np.asarray(cond, dtype=np.float64),
            final=z[i].reshape(B, D).copy(), steps=records[i],
            window_start=window_start) for i in range(n)]


def sample_trajectory(field: VelocityField, params, cond, config: SamplerConfig,
                      rng: np.random.Generator,
                      window_start: int | None = None) -> DenoisingTrajectory:
    """Single-trajectory sampling (no group, hence no repulsion guidance)."""
    return sample_group(field, params, cond, config, 1, rng,
                        guidance_config=None, window_start=window_start)[0]


# -- serialization -------------------------------------------------------------


def save_trajectory(path, traj: DenoisingTrajectory) -> None:
    steps = traj.steps
    meta = {
        "kind": "trajectory",
        "window_start": traj.window_start,
        "block_shape": list(traj.final.shape),
        "stochastic": [s.stochastic for s in steps],
        "indices": [s.index for s in steps],
    }
    arrays = {
        "times": np.array([s.t for s in steps]),
        "states": np.stack([s.state for s in steps]),
        "means": np.stack([s.mean for s in steps]),
        "sigmas": np.array([s.sigma for s in steps]),
        "offsets": np.stack([s.offset for s in steps]),
        "logprobs": np.array([np.nan if s.logprob_old is None else s.logprob_old
                              for s in steps]),
        "final": traj.final,
    }
    if traj.condition is not None:
        arrays["condition"] = traj.condition
    container.save_container(path, meta, arrays)


def load_trajectory(path) -> DenoisingTrajectory:
    meta, arrays = container.load_container(path)
    if meta.get("kind") != "trajectory":
        raise container.ContainerError("not a trajectory container")
    steps = []
    for i, (idx, stoch) in enumerate(zip(meta["indices"], meta["stochastic"])):
        lp = arrays["logprobs"][i]
        steps.append(TrajStep(
            index=int(idx), t=float(arrays["times"][i]),
            state=arrays["states"][i], mean=arrays["means"][i],
            sigma=float(arrays["sigmas"][i]), stochastic=bool(stoch),
            offset=arrays["offsets"][i],
            logprob_old=None if np.isnan(lp) else float(lp)))
    return DenoisingTrajectory(
        condition=arrays.get("condition"), final=arrays["final"],
        steps=steps, window_start=meta["window_start"])
