"""A-posteriori accuracy monitoring for the bidiagonalization approximation.

The trace gap xi_k = tr(H_Q) - tr(H_Q^(k)) bounds the absolute objective
error via  |F - F_k| <= (xi_k + beta1^2 xi_k / (1 + xi_k)) / 2. The gap obeys
a cheap recurrence in the bidiagonal coefficients; only the initial value
tr(H_Q) needs estimating, which is done with a Monte Carlo probe of
H Q = A' R^{-1} A Q requiring a single batch of forward/adjoint applications.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .gengk import GenGKFactorization
from .operators import LinearOperatorHandle, NoiseCovariance

__all__ = [
    "MonitorReport",
    "xi_recurrence",
    "mc_xi_estimate",
    "err_indicator",
    "prop2_bound",
    "sample_size_bound",
    "normal_matrix_apply",
]


@dataclass
class MonitorReport:
    """xi-hat and error-indicator sequences over k = 1 .. k_max."""

    xi_hat: np.ndarray
    err_mc: np.ndarray
    beta1: float
    n_mc: int
    probe_kind: str

    def __post_init__(self):
        if len(self.xi_hat) != len(self.err_mc):
            raise ValueError("xi_hat and err_mc lengths differ")


def xi_recurrence(alphas, betas, xi0: float) -> np.ndarray:
    """Trace-gap sequence xi_1 .. xi_k from the bidiagonal coefficients.

    xi_{k+1} = xi_k - (alpha_{k+1}^2 + beta_{k+2}^2), started from
    xi_0 = tr(H_Q) (dense oracle or Monte Carlo estimate). The sequence is
    monotonically nonincreasing.
    """
    alphas = np.asarray(alphas, dtype=float)
    betas = np.asarray(betas, dtype=float)
    k = len(alphas) - 1
    if k < 1:
        raise ValueError("need at least one completed iteration")
    if len(betas) != len(alphas):
        raise ValueError("alphas and betas must have equal length")
    drops = alphas[:k] ** 2 + betas[1 : k + 1] ** 2
    return float(xi0) - np.cumsum(drops)


def normal_matrix_apply(A: LinearOperatorHandle, R: NoiseCovariance):
    """Matrix-free application of H = A' R^{-1} A."""

    def h_apply(x):
        return A.apply_adjoint(R.apply_inv(A.apply(x)))

    return h_apply


def _draw_probes(n: int, n_mc: int, probe_kind: str, rng) -> tuple[np.ndarray, float]:
    if probe_kind == "gaussian":
        return rng.standard_normal((n, n_mc)), 1.0 / n_mc
    if probe_kind == "rademacher":
        return rng.integers(0, 2, size=(n, n_mc)) * 2.0 - 1.0, 1.0 / n_mc
    if probe_kind == "identity":
        # exhaustive deterministic probing: the estimate is the exact trace
        return np.eye(n), 1.0
    raise ValueError(f"probe_kind must be gaussian, rademacher or identity, got {probe_kind!r}")


def mc_xi_estimate(h_apply, Q, fact: GenGKFactorization, n_mc: int,
                   seed=None, k_max: int | None = None,
                   probe_kind: str = "gaussian") -> np.ndarray:
    """Monte Carlo estimates of xi_k for k = 1 .. k_max.

    Draws the probe block once, forms Y = H Q Omega (the only stage that
    touches the forward map), then sweeps k through the cheap projected
    corrections. probe_kind "identity" replaces Omega by the full standard
    basis, reproducing the exact traces.
    """
    if probe_kind != "identity" and n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    n = fact.v_basis.shape[0]
    k_max = fact.k if k_max is None else min(int(k_max), fact.k)
    if k_max < 1:
        raise ValueError("the factorization has no completed iterations")
    rng = np.random.default_rng(seed)
    omega, scale = _draw_probes(n, n_mc, probe_kind, rng)

    q_omega = np.column_stack([Q.apply(omega[:, j]) for j in range(omega.shape[1])])
    y = np.column_stack([h_apply(q_omega[:, j]) for j in range(omega.shape[1])])

    full_trace = float(np.sum(omega * y)) * scale
    vk = fact.v_basis[:, :k_max]
    b = fact.bidiagonal()[: k_max + 1, :k_max]
    omega_v = omega.T @ vk            # (probes, k_max)
    v_qomega = vk.T @ q_omega         # (k_max, probes)

    out = np.empty(k_max)
    for k in range(1, k_max + 1):
        t_k = b[: k + 1, :k].T @ b[: k + 1, :k]
        corr = float(np.sum((omega_v[:, :k] @ t_k) * v_qomega[:k, :].T)) * scale
        out[k - 1] = full_trace - corr
    return out


def err_indicator(xi_hat: float, beta1: float) -> float:
    """Monte Carlo error indicator (xi + beta1^2 xi/(1+xi)) / 2.

    Sampling noise can push xi_hat slightly negative; negative values are
    clamped to zero, with a warning when the excursion is beyond noise level.
    """
    xi_hat = float(xi_hat)
    if xi_hat < 0.0:
        if xi_hat < -1e-8 * beta1**2:
            warnings.warn(
                f"xi estimate {xi_hat:.3e} is negative beyond noise level; clamping to 0",
                stacklevel=2,
            )
        xi_hat = 0.0
    return 0.5 * (xi_hat + beta1**2 * xi_hat / (1.0 + xi_hat))


def prop2_bound(xi_k: float, beta1: float) -> float:
    """Guaranteed objective-error bound for an exact (nonnegative) trace gap."""
    xi_k = float(xi_k)
    if xi_k < 0.0:
        raise ValueError("the exact trace gap must be nonnegative")
    return 0.5 * (xi_k + beta1**2 * xi_k / (1.0 + xi_k))


def sample_size_bound(epsilon: float, delta: float, k_psi: float,
                      fro_norm: float, spec_norm: float, trace_val: float,
                      c_hw: float = 1.0) -> int:
    """Probe count sufficient for relative trace error epsilon at confidence 1-delta.

    Hanson-Wright-type bound; c_hw is the unspecified absolute constant and is
    exposed as a parameter, so the returned count is advisory. Floor at 1.
    """
    if epsilon <= 0 or not (0 < delta < 1):
        raise ValueError("epsilon must be positive and delta in (0, 1)")
    if k_psi <= 0 or fro_norm <= 0 or spec_norm < 0 or trace_val <= 0 or c_hw <= 0:
        raise ValueError("norms, trace, k_psi and c_hw must be positive")
    lead = k_psi**2 * math.log(2.0 / delta) / (c_hw * epsilon**2)
    inner = (k_psi**2 * fro_norm**2 / trace_val**2
             + epsilon * spec_norm / trace_val)
    return max(1, math.ceil(lead * inner))
