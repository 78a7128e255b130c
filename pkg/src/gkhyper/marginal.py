"""Marginal-posterior objective and gradient for hyperparameter estimation.

Three evaluation paths share one record type: a dense oracle (assembles the
m x m data-space covariance Z = A Q A' + R through matvecs), a truncated-SVD
variant used for bound checks, and the bidiagonalization-based approximation
that never forms Z. The objective is

    F(theta) = -log pi(theta) + 1/2 logdet Z + 1/2 ||A mu - d||^2_{Z^{-1}},

with additive constants dropped throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .covariance import MaternKernel, RegularGrid, build_cov_operator
from .gengk import GenGKFactorization, gengk_bidiag
from .operators import LinearOperatorHandle, NoiseCovariance, dense_matrix

__all__ = [
    "HyperParams",
    "Hyperprior",
    "MarginalModel",
    "ObjectiveEvaluation",
    "hyperprior_neglog",
    "objective_exact",
    "objective_gengk",
    "gradient_gengk",
    "objective_svd",
]

DENSE_CAP_DEFAULT = 4096


@dataclass(frozen=True, eq=False)
class HyperParams:
    """Positive hyperparameter vector.

    Canonical roles for K=3: noise variance, prior standard deviation,
    correlation length.
    """

    values: np.ndarray

    def __post_init__(self):
        values = np.atleast_1d(np.asarray(self.values, dtype=float))
        object.__setattr__(self, "values", values)
        if values.ndim != 1:
            raise ValueError("hyperparameters must form a vector")
        if not np.all(np.isfinite(values)) or np.any(values <= 0.0):
            raise ValueError(f"hyperparameters must be strictly positive, got {values}")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def noise_var(self) -> float:
        return float(self.values[0])

    @property
    def prior_std(self) -> float:
        return float(self.values[1])

    @property
    def corr_length(self) -> float:
        return float(self.values[2])


@dataclass(frozen=True)
class Hyperprior:
    """Hyperprior on theta: improper flat ("flat") or exponential-family Gamma
    ("gamma") with -log pi = gamma_rate * sum(theta), constants dropped."""

    kind: str = "flat"
    gamma_rate: float = 1e-4

    def __post_init__(self):
        if self.kind not in ("flat", "gamma"):
            raise ValueError(f"hyperprior kind must be 'flat' or 'gamma', got {self.kind!r}")
        if self.kind == "gamma" and self.gamma_rate <= 0:
            raise ValueError("gamma_rate must be positive")

    def neglog(self, theta_values: np.ndarray) -> tuple[float, np.ndarray]:
        theta_values = np.asarray(theta_values, dtype=float)
        if self.kind == "flat":
            return 0.0, np.zeros_like(theta_values)
        return (
            self.gamma_rate * float(np.sum(theta_values)),
            np.full_like(theta_values, self.gamma_rate),
        )


def hyperprior_neglog(prior: Hyperprior, theta: HyperParams) -> tuple[float, np.ndarray]:
    """Negative log hyperprior and its gradient (constants dropped)."""
    return prior.neglog(theta.values)


@dataclass
class MarginalModel:
    """Problem data plus the theta-to-covariance rules.

    The prior covariance family is Matern with fixed smoothness nu over the
    given geometry (RegularGrid or point array); the noise covariance is
    theta1 * I. prior_mean None means zero.
    """

    forward: LinearOperatorHandle
    data: np.ndarray
    geometry: object
    nu: float = 1.5
    hyperprior: Hyperprior = field(default_factory=Hyperprior)
    prior_mean: np.ndarray | None = None
    cov_backend: str = "auto"
    dense_cap: int = DENSE_CAP_DEFAULT

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.shape != (self.forward.nrows,):
            raise ValueError("data length does not match the forward operator")
        n = self.forward.ncols
        geom_n = self.geometry.size if isinstance(self.geometry, RegularGrid) else len(
            np.atleast_2d(self.geometry)
        )
        if geom_n != n:
            raise ValueError(f"geometry has {geom_n} points but the operator has {n} columns")
        if self.prior_mean is not None:
            self.prior_mean = np.asarray(self.prior_mean, dtype=float)
            if self.prior_mean.shape != (n,):
                raise ValueError("prior mean length does not match the operator")

    @property
    def nrows(self) -> int:
        return self.forward.nrows

    @property
    def ncols(self) -> int:
        return self.forward.ncols

    def mean_vector(self) -> np.ndarray:
        if self.prior_mean is None:
            return np.zeros(self.ncols)
        return self.prior_mean.copy()

    def noise_cov(self, theta: HyperParams) -> NoiseCovariance:
        return NoiseCovariance(theta.noise_var, self.nrows)

    def prior_cov(self, theta: HyperParams, deriv_index: int = 0):
        kernel = MaternKernel(self.nu, theta.prior_std**2, theta.corr_length)
        return build_cov_operator(self.geometry, kernel, deriv_index, self.cov_backend)


@dataclass
class ObjectiveEvaluation:
    """Objective value split into its three additive terms, plus gradient.

    value = neglogprior_term + logdet_term + quad_term holds by construction
    (same accumulation). k_used is 0 for the dense oracle; matvec_report
    counts forward/adjoint applications of the forward map spent on this
    evaluation.
    """

    value: float
    neglogprior_term: float
    logdet_term: float
    quad_term: float
    gradient: np.ndarray | None
    k_used: int
    matvec_report: dict

    def __post_init__(self):
        for name in ("value", "neglogprior_term", "logdet_term", "quad_term"):
            if not np.isfinite(getattr(self, name)):
                raise FloatingPointError(f"objective term {name} is not finite")


def _count_delta(op: LinearOperatorHandle, before: tuple[int, int]) -> dict:
    after = op.matvec_count.snapshot()
    return {"forward": after[0] - before[0], "adjoint": after[1] - before[1]}


def _assemble_z(model: MarginalModel, theta: HyperParams):
    a_dense = dense_matrix(model.forward)
    q_dense = dense_matrix(model.prior_cov(theta, 0))
    z = a_dense @ q_dense @ a_dense.T
    z[np.diag_indices_from(z)] += theta.noise_var
    z = 0.5 * (z + z.T)
    return a_dense, z


def _require_dense(model: MarginalModel, what: str) -> None:
    if model.nrows > model.dense_cap:
        raise ValueError(
            f"{what} assembles an {model.nrows} x {model.nrows} matrix, over the "
            f"dense cap {model.dense_cap}; use the bidiagonalization path"
        )


def objective_exact(model: MarginalModel, theta: HyperParams) -> ObjectiveEvaluation:
    """Dense-oracle objective and gradient (guarded by the dense cap).

    Z is assembled through matvecs only, then factored once; the gradient
    uses the dense derivative matrices dZ/dtheta_i = A (dQ/dtheta_i) A' +
    dR/dtheta_i with a fixed (zero-derivative) prior mean.
    """
    _require_dense(model, "the exact objective")
    before = model.forward.matvec_count.snapshot()
    m = model.nrows
    a_dense, z = _assemble_z(model, theta)
    try:
        cho = cho_factor(z, lower=True)
    except LinAlgError as exc:
        raise LinAlgError("Z is numerically non-SPD after symmetrization") from exc
    logdet = 2.0 * float(np.sum(np.log(np.diag(cho[0]))))

    mu = model.mean_vector()
    r = a_dense @ mu - model.data
    w = cho_solve(cho, r)
    quad = 0.5 * float(r @ w)

    neglogprior, hgrad = model.hyperprior.neglog(theta.values)

    z_inv = cho_solve(cho, np.eye(m))
    grad = np.empty(len(theta))
    for i in range(1, len(theta) + 1):
        if i == 1:
            trace_term = float(np.trace(z_inv))
            quad_term_i = -0.5 * float(w @ w)
        else:
            dq_dense = dense_matrix(model.prior_cov(theta, i))
            dz = a_dense @ dq_dense @ a_dense.T
            dz = 0.5 * (dz + dz.T)
            trace_term = float(np.sum(z_inv * dz))
            quad_term_i = -0.5 * float(w @ (dz @ w))
        grad[i - 1] = hgrad[i - 1] + 0.5 * trace_term + quad_term_i

    return ObjectiveEvaluation(
        value=neglogprior + 0.5 * logdet + quad,
        neglogprior_term=neglogprior,
        logdet_term=0.5 * logdet,
        quad_term=quad,
        gradient=grad,
        k_used=0,
        matvec_report=_count_delta(model.forward, before),
    )


def _svd_of_bidiagonal(b: np.ndarray):
    """Full SVD of the (k+1) x k bidiagonal, singular values padded to k+1."""
    p, s, wt = np.linalg.svd(b, full_matrices=True)
    s_full = np.zeros(b.shape[0])
    s_full[: s.shape[0]] = s
    return p, s, s_full, wt


def _gengk_terms(fact: GenGKFactorization, noise: NoiseCovariance):
    """logdet and quadratic terms of the approximate objective from B's SVD.

    Forming I + B B' explicitly is numerically troublesome for the log
    determinant, so it is always evaluated through the singular values of B;
    the same factorization serves the quadratic term via the first row of the
    left singular vectors.
    """
    b = fact.bidiagonal()
    p, s, s_full, wt = _svd_of_bidiagonal(b)
    logdet_term = 0.5 * (noise.logdet() + float(np.sum(np.log1p(s * s))))
    w_row = p[0, :]
    quad_term = 0.5 * fact.beta1**2 * float(np.sum(w_row * w_row / (1.0 + s_full * s_full)))
    return logdet_term, quad_term, (p, s, s_full, wt)


def _gengk_gradient(model: MarginalModel, theta: HyperParams,
                    fact: GenGKFactorization, noise: NoiseCovariance,
                    svd_parts) -> np.ndarray:
    p, s, s_full, wt = svd_parts
    k = fact.k
    b = fact.bidiagonal()
    u = fact.u_basis
    vk = fact.v_basis[:, :k]
    beta1 = fact.beta1

    # r = Ztilde^{-1}(A mu - d) = -beta1 R^{-1} U Theta^{-1} e1, using the
    # initialization relation and U-orthogonality
    theta_inv_e1 = p @ (p[0, :] / (1.0 + s_full * s_full))
    r_vec = -beta1 * noise.apply_inv(u @ theta_inv_e1)
    ub = u @ b
    ub_t_r = ub.T @ r_vec

    gain = s * s / (1.0 + s * s)          # eigenvalues of T(I+T)^{-1}
    shrink = 1.0 / (1.0 + s * s)          # eigenvalues of (I+T)^{-1}
    w_mat = wt.T

    neglogprior, hgrad = model.hyperprior.neglog(theta.values)
    grad = np.empty(len(theta))
    for i in range(1, len(theta) + 1):
        trace_term = 0.0
        dz_r = np.zeros_like(r_vec)
        if i == 1:
            trace_term += noise.deriv_inner_inv(1)
            rinv_u = noise.apply_inv(u)
            psi_r = rinv_u.T @ noise.deriv_apply(1, rinv_u)
            bw = p[:, :k] * s
            mat = bw.T @ psi_r @ bw
            trace_term -= float(np.sum(np.diag(mat) * shrink))
            dz_r += noise.deriv_apply(1, r_vec)
        elif k > 0:
            dq = model.prior_cov(theta, i)
            dq_vk = np.column_stack([dq.apply(vk[:, j]) for j in range(k)])
            psi_q = vk.T @ dq_vk
            mat = w_mat.T @ psi_q @ w_mat
            trace_term += float(np.sum(np.diag(mat) * gain))
            dz_r += ub @ (psi_q @ ub_t_r)
        quad_term_i = -0.5 * float(dz_r @ r_vec)
        if not np.isfinite(trace_term) or not np.isfinite(quad_term_i):
            raise FloatingPointError(
                f"non-finite gradient contribution for component {i}"
            )
        grad[i - 1] = hgrad[i - 1] + 0.5 * trace_term + quad_term_i
    return grad


def objective_gengk(model: MarginalModel, theta: HyperParams, k: int,
                    fact: GenGKFactorization | None = None,
                    reorth: bool = True) -> ObjectiveEvaluation:
    """Approximate objective and gradient from k bidiagonalization steps.

    When fact is omitted the bidiagonalization is run fresh at theta (the
    per-evaluation cost model assumes this); a supplied factorization must
    have been computed at the same theta. If the iteration broke down before
    k steps the achieved count is used and recorded in k_used.
    """
    before = model.forward.matvec_count.snapshot()
    noise = model.noise_cov(theta)
    if fact is None:
        k_run = min(int(k), min(model.nrows, model.ncols))
        q_op = model.prior_cov(theta, 0)
        fact = gengk_bidiag(model.forward, noise, q_op, model.prior_mean,
                            model.data, k_run, reorth=reorth)
    logdet_term, quad_term, svd_parts = _gengk_terms(fact, noise)
    neglogprior, _ = model.hyperprior.neglog(theta.values)
    grad = _gengk_gradient(model, theta, fact, noise, svd_parts)
    return ObjectiveEvaluation(
        value=neglogprior + logdet_term + quad_term,
        neglogprior_term=neglogprior,
        logdet_term=logdet_term,
        quad_term=quad_term,
        gradient=grad,
        k_used=fact.k,
        matvec_report=_count_delta(model.forward, before),
    )


def gradient_gengk(model: MarginalModel, theta: HyperParams,
                   fact: GenGKFactorization) -> np.ndarray:
    """Gradient approximation from an existing factorization at theta."""
    noise = model.noise_cov(theta)
    _, _, svd_parts = _gengk_terms(fact, noise)
    return _gengk_gradient(model, theta, fact, noise, svd_parts)


def objective_svd(model: MarginalModel, theta: HyperParams, k: int) -> ObjectiveEvaluation:
    """Truncated-SVD objective (dense path; bound checks only).

    Builds Ahat = R^{-1/2} A Q^{1/2} densely, truncates its SVD at rank k and
    evaluates the objective of the resulting data-space covariance. At
    k = rank(Ahat) this reproduces the exact objective. No gradient.
    """
    _require_dense(model, "the truncated-SVD objective")
    before = model.forward.matvec_count.snapshot()
    noise = model.noise_cov(theta)
    a_dense = dense_matrix(model.forward)
    q_dense = dense_matrix(model.prior_cov(theta, 0))
    evals, evecs = np.linalg.eigh(0.5 * (q_dense + q_dense.T))
    q_half = (evecs * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T
    a_hat = (a_dense @ q_half) / np.sqrt(theta.noise_var)
    u_hat, s_hat, _ = np.linalg.svd(a_hat, full_matrices=False)
    k_eff = min(int(k), s_hat.shape[0])

    logdet_term = 0.5 * (noise.logdet() + float(np.sum(np.log1p(s_hat[:k_eff] ** 2))))
    r_hat = noise.inv_sqrt_apply(a_dense @ model.mean_vector() - model.data)
    coeff = u_hat[:, :k_eff].T @ r_hat
    sk2 = s_hat[:k_eff] ** 2
    quad_term = 0.5 * (float(r_hat @ r_hat) - float(np.sum(coeff**2 * sk2 / (1.0 + sk2))))

    neglogprior, _ = model.hyperprior.neglog(theta.values)
    return ObjectiveEvaluation(
        value=neglogprior + logdet_term + quad_term,
        neglogprior_term=neglogprior,
        logdet_term=logdet_term,
        quad_term=quad_term,
        gradient=None,
        k_used=k_eff,
        matvec_report=_count_delta(model.forward, before),
    )
