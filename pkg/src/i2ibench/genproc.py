"""Latent generative-process math: toy codec, schedules and samplers.

Latent tensors are plain float arrays shaped (channels, x, y, z); the toy
codec stands in for the trained autoencoder with the same geometry (x4
spatial compression, 96^3 patches to 24^3 latents). Samplers take a
:class:`Predictor`, which is how real networks plug in; analytic oracle
predictors below make every sampler exactly testable.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .volume import ParameterError, ShapeError

LATENT_CHANNELS = 3
COMPRESSION = 4


class ContractError(TypeError):
    """A Predictor with the wrong prediction kind was supplied."""


@dataclass(frozen=True)
class Predictor:
    """Pluggable network contract: predict(z_t, t, condition) -> tensor.

    kind is one of "noise" (epsilon prediction), "target" (z0 prediction)
    or "velocity" (flow field); samplers enforce the kind they need.
    """

    kind: str
    fn: Callable[[np.ndarray, float, np.ndarray | None], np.ndarray]

    def __call__(self, z, t, condition=None):
        out = np.asarray(self.fn(z, t, condition))
        if out.shape != np.shape(z):
            raise ShapeError(f"predictor returned shape {out.shape}, expected {np.shape(z)}")
        return out


def toy_encode(patch: np.ndarray, channels: int = LATENT_CHANNELS) -> np.ndarray:
    """Blockwise 4^3 average pooling, replicated across latent channels."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 3 or any(d % COMPRESSION for d in patch.shape):
        raise ShapeError(f"patch dims {patch.shape} must be divisible by {COMPRESSION}")
    nx, ny, nz = (d // COMPRESSION for d in patch.shape)
    pooled = patch.reshape(nx, COMPRESSION, ny, COMPRESSION, nz, COMPRESSION).mean(axis=(1, 3, 5))
    return np.broadcast_to(pooled, (channels,) + pooled.shape).copy()


def toy_decode(z: np.ndarray) -> np.ndarray:
    """Channel mean, then nearest-neighbor upsampling back to patch space."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 4:
        raise ShapeError(f"latent must be (channels, x, y, z), got shape {z.shape}")
    mean = z.mean(axis=0)
    up = mean.repeat(COMPRESSION, axis=0).repeat(COMPRESSION, axis=1).repeat(COMPRESSION, axis=2)
    return up.astype(np.float32)


@dataclass(frozen=True)
class NoiseSchedule:
    """DDPM coefficient tables: betas, alphas and their running product."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])


def make_scaled_linear_schedule(beta_start=0.0015, beta_end=0.0205, T=1000) -> NoiseSchedule:
    """Scaled-linear schedule: linear in sqrt(beta), then squared."""
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ParameterError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    if T < 1:
        raise ParameterError("T must be >= 1")
    betas = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), T) ** 2
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


@dataclass(frozen=True)
class BridgeSchedule:
    """Brownian-bridge mixing coefficients and per-step noise variance."""

    m: np.ndarray
    sigma2: np.ndarray

    @property
    def T(self) -> int:
        return int(self.m.shape[0])

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.sigma2)


def make_bridge_schedule(m_start=0.001, m_end=0.999, T=1000) -> BridgeSchedule:
    if not (0.0 < m_start < m_end < 1.0):
        raise ParameterError(f"need 0 < m_start < m_end < 1, got {m_start}, {m_end}")
    m = np.linspace(m_start, m_end, T)
    return BridgeSchedule(m=m, sigma2=2.0 * (m - m * m))


def ddpm_forward(z0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Noising step: z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if not 0 <= t < sched.T:
        raise IndexError(f"timestep {t} out of [0, {sched.T})")
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 shape {z0.shape} != eps shape {eps.shape}")
    ab = sched.alpha_bars[t]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def _subschedule(T: int, steps: int) -> np.ndarray:
    """Evenly spaced timesteps, first T-1, last 0, strictly decreasing."""
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    if steps == 1:
        return np.array([T - 1], dtype=int)
    ts = np.unique(np.round(np.linspace(T - 1, 0, steps)).astype(int))[::-1]
    return ts


def ddim_sample(condition: np.ndarray, predictor: Predictor, sched: NoiseSchedule,
                steps: int = 50, seed: int = 0) -> np.ndarray:
    """Deterministic DDIM (eta = 0) from seeded Gaussian noise.

    Runs an evenly spaced sub-schedule of the training timesteps; the
    terminal update substitutes alpha_bar = 1, returning the final x0
    estimate.
    """
    if predictor.kind != "noise":
        raise ContractError(f"ddim_sample needs a noise predictor, got {predictor.kind!r}")
    ts = _subschedule(sched.T, steps)
    rng = np.random.Generator(np.random.PCG64(seed))
    z = rng.standard_normal(np.shape(condition))
    for i, t in enumerate(ts):
        ab_t = sched.alpha_bars[t]
        eps_hat = predictor(z, int(t), condition)
        x0_hat = (z - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
        ab_prev = sched.alpha_bars[ts[i + 1]] if i + 1 < len(ts) else 1.0
        z = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat
    return z


def bridge_forward(z0: np.ndarray, z_y: np.ndarray, t: int, eps: np.ndarray | None,
                   sched: BridgeSchedule) -> np.ndarray:
    """Bridge noising: z_t = (1 - m_t) z0 + m_t z_y + sigma_t eps."""
    z0 = np.asarray(z0, dtype=np.float64)
    z_y = np.asarray(z_y, dtype=np.float64)
    if z0.shape != z_y.shape:
        raise ShapeError(f"z0 shape {z0.shape} != z_y shape {z_y.shape}")
    if not 0 <= t < sched.T:
        raise IndexError(f"timestep {t} out of [0, {sched.T})")
    m = sched.m[t]
    out = (1.0 - m) * z0 + m * z_y
    if eps is not None:
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != z0.shape:
            raise ShapeError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
        out = out + np.sqrt(sched.sigma2[t]) * eps
    return out


def bridge_sample(z_y: np.ndarray, predictor: Predictor, sched: BridgeSchedule,
                  steps: int = 50, seed: int = 0, stochastic: bool = False) -> np.ndarray:
    """Reverse bridge: re-bridge the running z0 estimate toward m = 0.

    Starts at the source latent z_y; each step predicts z0 and rebuilds
    the forward form at the next lower timestep. The terminal state has
    m = 0 and sigma = 0, i.e. the final z0 estimate is returned.
    """
    if predictor.kind != "target":
        raise ContractError(f"bridge_sample needs a target predictor, got {predictor.kind!r}")
    z_y = np.asarray(z_y, dtype=np.float64)
    ts = _subschedule(sched.T, steps)
    rng = np.random.Generator(np.random.PCG64(seed))
    z = z_y.copy()
    for i, t in enumerate(ts):
        z0_hat = predictor(z, int(t), z_y)
        if i + 1 < len(ts):
            t_next = ts[i + 1]
            m = sched.m[t_next]
            z = (1.0 - m) * z0_hat + m * z_y
            if stochastic:
                z = z + np.sqrt(sched.sigma2[t_next]) * rng.standard_normal(z.shape)
        else:
            z = z0_hat
    return z


def flow_sample(z_src: np.ndarray, predictor: Predictor, steps: int) -> np.ndarray:
    """Explicit Euler along the learned velocity field, t = k / steps."""
    if predictor.kind != "velocity":
        raise ContractError(f"flow_sample needs a velocity predictor, got {predictor.kind!r}")
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    z_src = np.asarray(z_src, dtype=np.float64)
    z = z_src.copy()
    dt = 1.0 / steps
    for k in range(steps):
        z = z + dt * predictor(z, k / steps, z_src)
    return z


def flow_matching_target(z_src: np.ndarray, z_tgt: np.ndarray, t: float):
    """Straight-path training pair: z_t = (1-t) z_src + t z_tgt, v = z_tgt - z_src."""
    if not 0.0 <= t <= 1.0:
        raise ParameterError(f"t must be in [0, 1], got {t}")
    z_src = np.asarray(z_src, dtype=np.float64)
    z_tgt = np.asarray(z_tgt, dtype=np.float64)
    if z_src.shape != z_tgt.shape:
        raise ShapeError(f"z_src shape {z_src.shape} != z_tgt shape {z_tgt.shape}")
    return (1.0 - t) * z_src + t * z_tgt, z_tgt - z_src


def oracle_noise_predictor(z0_star: np.ndarray, sched: NoiseSchedule) -> Predictor:
    """Analytic epsilon for a known clean latent: inverts the forward equation."""
    z0_star = np.asarray(z0_star, dtype=np.float64)

    def fn(z, t, condition):
        ab = sched.alpha_bars[int(t)]
        return (np.asarray(z) - np.sqrt(ab) * z0_star) / np.sqrt(1.0 - ab)

    return Predictor("noise", fn)


def oracle_target_predictor(z0_star: np.ndarray) -> Predictor:
    z0_star = np.asarray(z0_star, dtype=np.float64)
    return Predictor("target", lambda z, t, condition: z0_star)


def oracle_velocity_predictor(z_tgt: np.ndarray) -> Predictor:
    """Constant field z_tgt - z_src; Euler integrates it exactly."""
    z_tgt = np.asarray(z_tgt, dtype=np.float64)
    return Predictor("velocity", lambda z, t, condition: z_tgt - np.asarray(condition))


def noise_schedule_csv(sched: NoiseSchedule) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["t", "beta", "alpha_bar"])
    for t in range(sched.T):
        w.writerow([t, repr(float(sched.betas[t])), repr(float(sched.alpha_bars[t]))])
    return buf.getvalue()


def bridge_schedule_csv(sched: BridgeSchedule) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["t", "m", "sigma2"])
    for t in range(sched.T):
        w.writerow([t, repr(float(sched.m[t])), repr(float(sched.sigma2[t]))])
    return buf.getvalue()
