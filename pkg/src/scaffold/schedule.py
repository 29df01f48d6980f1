"""Absorbing-state forward process with a log-linear noise schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ScheduleDomainError(ValueError):
    pass


def _check_time(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise ScheduleDomainError(f"time must lie in [0, 1], got {t}")
    return t


@dataclass(frozen=True)
class LogLinearSchedule:
    """Survival probability ``alpha(t) = 1 - (1 - eps_min) * t``.

    The total noise ``-log alpha(t)`` is the usual log-linear schedule;
    ``eps_min`` is the fraction of tokens still unmasked at ``t = 1``.
    """

    eps_min: float = 1e-3

    def __post_init__(self):
        if not (0.0 < self.eps_min < 1.0):
            raise ScheduleDomainError(f"eps_min must lie in (0, 1), got {self.eps_min}")

    def alpha(self, t):
        t = _check_time(t)
        out = 1.0 - (1.0 - self.eps_min) * t
        return float(out) if out.ndim == 0 else out

    def alpha_prime(self, t):
        t = _check_time(t)
        out = np.full(t.shape, -(1.0 - self.eps_min))
        return float(out) if out.ndim == 0 else out

    def loss_weight(self, t):
        """``-alpha'(t) / (1 - alpha(t))``, the positive NELBO weight; infinite at 0."""
        t = _check_time(t)
        with np.errstate(divide="ignore"):
            out = -np.asarray(self.alpha_prime(t)) / (1.0 - np.asarray(self.alpha(t)))
        return float(out) if np.ndim(out) == 0 else out

    # discrete time grid t(i) = i / T, s(i) = (i - 1) / T

    def grid(self, T: int) -> tuple[np.ndarray, np.ndarray]:
        if T < 1:
            raise ScheduleDomainError(f"step count must be >= 1, got {T}")
        i = np.arange(1, T + 1)
        return i / T, (i - 1) / T

    def betas(self, T: int) -> np.ndarray:
        """Per-step mask probabilities ``1 - alpha(t(i)) / alpha(s(i))`` for i = 1..T."""
        t, s = self.grid(T)
        return 1.0 - self.alpha(t) / self.alpha(s)

    def unmask_probability(self, s, t):
        """Reverse-step probability that a masked token at ``t`` is revealed by ``s``."""
        s = _check_time(s)
        t = _check_time(t)
        if np.any(s >= t):
            raise ScheduleDomainError(f"reverse step needs s < t, got s={s}, t={t}")
        a_s, a_t = np.asarray(self.alpha(s)), np.asarray(self.alpha(t))
        out = (a_s - a_t) / (1.0 - a_t)
        return float(out) if out.ndim == 0 else out


def absorbing_kernel(beta: float, V_total: int, mask_id: int) -> np.ndarray:
    """Row-stochastic one-step transition matrix of the absorbing process."""
    if not (0.0 <= beta <= 1.0):
        raise ScheduleDomainError(f"beta must lie in [0, 1], got {beta}")
    Q = np.eye(V_total) * (1.0 - beta)
    Q[:, mask_id] += beta
    Q[mask_id] = 0.0
    Q[mask_id, mask_id] = 1.0
    return Q


def marginal_matrix(alpha: float, V_total: int, mask_id: int) -> np.ndarray:
    """Closed-form ``q(z_t | x)`` as a matrix: ``alpha * I + (1 - alpha) * 1 m^T``."""
    M = alpha * np.eye(V_total)
    M[:, mask_id] += 1.0 - alpha
    M[mask_id] = 0.0
    M[mask_id, mask_id] = 1.0
    return M


def forward_corrupt(
    tokens: np.ndarray,
    t,
    schedule: LogLinearSchedule,
    rng: np.random.Generator,
    mask_id: int,
    protect: np.ndarray | None = None,
) -> np.ndarray:
    """Sample ``z_t ~ q(z_t | x)``: keep each token with probability alpha(t).

    ``t`` is a scalar or broadcastable against ``tokens`` (one time per
    sequence is ``t[:, None]``). Slots flagged in ``protect`` are never masked.
    """
    tokens = np.asarray(tokens)
    keep = np.asarray(schedule.alpha(t))
    u = rng.random(tokens.shape)
    masked = u >= keep
    if protect is not None:
        masked &= ~protect
    return np.where(masked, mask_id, tokens)


def corrupt_between(
    z_s: np.ndarray,
    s,
    t,
    schedule: LogLinearSchedule,
    rng: np.random.Generator,
    mask_id: int,
) -> np.ndarray:
    """Advance a latent from time ``s`` to a later ``t`` through the forward chain."""
    s = _check_time(s)
    t = _check_time(t)
    if np.any(t < s):
        raise ScheduleDomainError("forward transition needs t >= s")
    keep = np.asarray(schedule.alpha(t)) / np.asarray(schedule.alpha(s))
    u = rng.random(np.shape(z_s))
    return np.where((u >= keep) | (z_s == mask_id), mask_id, z_s)
