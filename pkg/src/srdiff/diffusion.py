"""Closed-form Gaussian diffusion: schedules, forward marginal, posterior, reverse step.

Timesteps are 1-based throughout (``t`` in ``1..T``). Schedule arrays are
stored 0-based, so ``beta[t - 1]`` is the beta of step ``t``; the helper
accessors on :class:`Schedule` take ``t`` directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    kind: str
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    beta_tilde: np.ndarray
    sqrt_alpha_bar: np.ndarray
    sqrt_one_minus_alpha_bar: np.ndarray

    def _check_t(self, t: int, lo: int = 1) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [{lo}, {self.T}]")
        return t - 1

    def at(self, name: str, t: int) -> float:
        return float(getattr(self, name)[self._check_t(t)])

    @classmethod
    def from_betas(cls, beta, kind: str = "custom") -> "Schedule":
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ScheduleError("beta must be a non-empty 1-D array")
        if not np.all((beta > 0) & (beta < 1)):
            raise ScheduleError(f"every beta must lie in (0, 1); got min {beta.min()}, max {beta.max()}")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        beta_tilde = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
        beta_tilde[0] = beta[0]
        return cls(
            kind=kind,
            T=int(beta.size),
            beta=beta,
            alpha=alpha,
            alpha_bar=alpha_bar,
            alpha_bar_prev=alpha_bar_prev,
            beta_tilde=beta_tilde,
            sqrt_alpha_bar=np.sqrt(alpha_bar),
            sqrt_one_minus_alpha_bar=np.sqrt(1.0 - alpha_bar),
        )


def cosine_betas(T: int, s: float = 0.008, max_beta: float = 0.999) -> np.ndarray:
    def f(u):
        return math.cos((u + s) / (1 + s) * math.pi / 2) ** 2

    abar = np.array([f(t / T) / f(0.0) for t in range(T + 1)])
    return np.minimum(1.0 - abar[1:] / abar[:-1], max_beta)


def make_schedule(T: int, kind: str = "cosine", beta_start: float = 1e-4, beta_end: float = 0.02,
                  s: float = 0.008, max_beta: float = 0.999) -> Schedule:
    """Build a T-step schedule.

    ``cosine`` follows the improved-DDPM squared-cosine alpha_bar with offset
    ``s`` and betas clipped at ``max_beta``; ``linear`` spaces betas evenly
    from ``beta_start`` to ``beta_end`` (for T == 1 only ``beta_start``).
    """
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    T = int(T)
    if kind == "cosine":
        beta = cosine_betas(T, s, max_beta)
    elif kind == "linear":
        beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    if np.any(beta <= 0):
        raise ScheduleError("schedule produced a non-positive beta")
    return Schedule.from_betas(beta, kind=kind)


def _check_shapes(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def _coef(values: np.ndarray, t, ndim: int) -> np.ndarray:
    """Per-sample coefficient broadcastable against a batch of rank ``ndim``."""
    t = np.asarray(t)
    c = values[t - 1]
    if t.ndim == 0:
        return c
    return c.reshape((-1,) + (1,) * (ndim - 1))


def _check_ts(t, s: Schedule, lo: int = 1) -> None:
    arr = np.asarray(t)
    if arr.size and (arr.min() < lo or arr.max() > s.T):
        raise ScheduleError(f"timestep(s) {arr.tolist()} outside [{lo}, {s.T}]")


def q_sample(x0: np.ndarray, t, eps: np.ndarray, s: Schedule) -> np.ndarray:
    """sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.

    ``t`` is an int, or one int per leading-axis element for batches.
    """
    x0, eps = np.asarray(x0), np.asarray(eps)
    _check_shapes(x0, eps, "q_sample")
    _check_ts(t, s)
    dt = x0.dtype if x0.dtype in (np.float32, np.float64) else np.float64
    a = _coef(s.sqrt_alpha_bar, t, x0.ndim).astype(dt)
    b = _coef(s.sqrt_one_minus_alpha_bar, t, x0.ndim).astype(dt)
    return a * x0 + b * eps


def posterior_mean_var(x_t: np.ndarray, x0: np.ndarray, t: int, s: Schedule) -> tuple[np.ndarray, float]:
    """Mean and variance of q(x_{t-1} | x_t, x0)."""
    x_t, x0 = np.asarray(x_t), np.asarray(x0)
    _check_shapes(x_t, x0, "posterior_mean_var")
    i = s._check_t(t)
    c0 = math.sqrt(s.alpha_bar_prev[i]) * s.beta[i] / (1.0 - s.alpha_bar[i])
    ct = math.sqrt(s.alpha[i]) * (1.0 - s.alpha_bar_prev[i]) / (1.0 - s.alpha_bar[i])
    return c0 * x0 + ct * x_t, float(s.beta_tilde[i])


def reverse_mean(x_t: np.ndarray, eps_hat: np.ndarray, t: int, s: Schedule) -> np.ndarray:
    i = s._check_t(t)
    # python floats keep float32 inputs in float32
    k = float(s.beta[i] / s.sqrt_one_minus_alpha_bar[i])
    inv = 1.0 / math.sqrt(float(s.alpha[i]))
    return (x_t - k * eps_hat) * inv


def reverse_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, z: np.ndarray, s: Schedule) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1} with the variance fixed to beta_tilde_t.

    At ``t == 1`` the noise must be zero.
    """
    x_t, eps_hat, z = np.asarray(x_t), np.asarray(eps_hat), np.asarray(z)
    _check_shapes(x_t, eps_hat, "reverse_step")
    _check_shapes(x_t, z, "reverse_step")
    i = s._check_t(t)
    if t == 1 and np.any(z != 0):
        raise ValueError("reverse_step: z must be zero at t == 1")
    mean = reverse_mean(x_t, eps_hat, t, s)
    if t == 1:
        return mean
    return mean + math.sqrt(float(s.beta_tilde[i])) * z


def predict_x0(x_t: np.ndarray, eps_hat: np.ndarray, t: int, s: Schedule) -> np.ndarray:
    """Invert the forward marginal: the x_0 implied by x_t and a noise estimate."""
    i = s._check_t(t)
    return (np.asarray(x_t, np.float64) - s.sqrt_one_minus_alpha_bar[i] * np.asarray(eps_hat, np.float64)) \
        / s.sqrt_alpha_bar[i]


def clip_eps(x_t: np.ndarray, eps_hat: np.ndarray, t: int, s: Schedule, lo: float, hi: float) -> np.ndarray:
    """The noise estimate whose implied x_0 is clipped to [lo, hi].

    Feeding the result to :func:`reverse_step` gives the posterior mean around
    the clipped x_0. Where the implied x_0 is already in range, the estimate
    comes back unchanged (up to rounding).
    """
    i = s._check_t(t)
    x0 = np.clip(predict_x0(x_t, eps_hat, t, s), lo, hi)
    eps = (np.asarray(x_t, np.float64) - s.sqrt_alpha_bar[i] * x0) / s.sqrt_one_minus_alpha_bar[i]
    return eps.astype(np.asarray(eps_hat).dtype)


def noise_loss(eps: np.ndarray, eps_hat: np.ndarray) -> float:
    """Mean absolute error between true and predicted noise."""
    eps, eps_hat = np.asarray(eps), np.asarray(eps_hat)
    _check_shapes(eps, eps_hat, "noise_loss")
    return float(np.mean(np.abs(eps.astype(np.float64) - eps_hat)))


def kl_step_diagnostic(x0: np.ndarray, x_t: np.ndarray, eps_hat: np.ndarray, t: int, s: Schedule) -> float:
    """Per-element KL( q(x_{t-1}|x_t,x0) || p(x_{t-1}|x_t) ) for t > 1.

    Both Gaussians share the variance beta_tilde_t, so the KL reduces to the
    squared mean gap over twice that variance. Diagnostic only.
    """
    if int(t) <= 1:
        raise ScheduleError("kl_step_diagnostic needs t > 1")
    x0 = np.asarray(x0, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    mu_q, var = posterior_mean_var(x_t, x0, t, s)
    mu_p = reverse_mean(x_t, eps_hat, t, s)
    return float(np.mean((mu_q - mu_p) ** 2) / (2.0 * var))
