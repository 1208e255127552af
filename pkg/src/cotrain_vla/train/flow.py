"""Flow-matching timesteps and interpolants."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def sample_tau(rng: np.random.Generator, s: float = 0.999, alpha: float = 1.5, beta: float = 1.0,
               size=None):
    """tau = s * (1 - u), u ~ Beta(alpha, beta); concentrates mass at low tau."""
    if not 0.0 < s <= 1.0:
        raise ValueError("s must lie in (0, 1]")
    u = rng.beta(alpha, beta, size=size)
    return s * (1.0 - u)


def tau_cdf(tau, s: float = 0.999, alpha: float = 1.5):
    """Analytic CDF of sample_tau for beta = 1."""
    t = np.clip(np.asarray(tau, dtype=np.float64), 0.0, s)
    return 1.0 - ((s - t) / s) ** alpha


@dataclass(frozen=True)
class FlowSample:
    a: np.ndarray
    omega: np.ndarray
    tau: float
    x: np.ndarray  # tau * a + (1 - tau) * omega
    u: np.ndarray  # omega - a


def interpolate(a: np.ndarray, omega: np.ndarray, tau: float) -> np.ndarray:
    return tau * a + (1.0 - tau) * omega


def make_flow_sample(a: np.ndarray, rng: np.random.Generator, s: float = 0.999,
                     tau: float | None = None) -> FlowSample:
    a = np.asarray(a, dtype=np.float64)
    omega = rng.standard_normal(a.shape)
    t = float(sample_tau(rng, s)) if tau is None else float(tau)
    return FlowSample(a=a, omega=omega, tau=t, x=interpolate(a, omega, t), u=omega - a)
