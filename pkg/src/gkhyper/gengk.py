"""Generalized Golub-Kahan bidiagonalization in the R^{-1} / Q inner products.

The iteration needs only matvecs with the forward map, its adjoint, the prior
covariance Q and the inverse noise covariance; no square roots or inverses of
Q are ever formed. Weighted norms use the operator forms
||x||^2_{R^{-1}} = <R^{-1}x, x> and ||v||^2_Q = <Qv, v>.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariance import CovarianceOperator
from .operators import LinearOperatorHandle, NoiseCovariance

__all__ = [
    "GenGKFactorization",
    "gengk_bidiag",
    "verify_relations",
    "bidiagonal_matrix",
    "truncate_factorization",
]

# relative to beta1; the iteration stops early below this
BREAKDOWN_RTOL = 1e-14


def bidiagonal_matrix(alphas, betas) -> np.ndarray:
    """Assemble the (k+1) x k lower bidiagonal matrix from the coefficient runs.

    alphas[0..k] and betas[0..k] as stored in a factorization: the diagonal is
    alphas[0..k-1], the subdiagonal betas[1..k] (betas[0] is the initialization
    norm and does not enter the matrix).
    """
    alphas = np.asarray(alphas, dtype=float)
    betas = np.asarray(betas, dtype=float)
    k = len(alphas) - 1
    b = np.zeros((k + 1, k))
    for j in range(k):
        b[j, j] = alphas[j]
        b[j + 1, j] = betas[j + 1]
    return b


@dataclass
class GenGKFactorization:
    """Result of k bidiagonalization steps.

    u_basis (m x (k+1)) is orthonormal in the R^{-1} inner product, v_basis
    (n x (k+1)) in the Q inner product; qv_basis caches Q @ v columns so that
    downstream consumers (reconstruction, monitoring) need no extra Q applies.
    betas[0] is the initialization norm beta1. When the iteration broke down,
    breakdown_at records the step and the trailing basis columns are zero.
    """

    u_basis: np.ndarray
    v_basis: np.ndarray
    qv_basis: np.ndarray
    alphas: np.ndarray
    betas: np.ndarray
    k: int
    breakdown_at: int | None = None

    @property
    def beta1(self) -> float:
        return float(self.betas[0])

    def bidiagonal(self) -> np.ndarray:
        return bidiagonal_matrix(self.alphas, self.betas)


def _orthogonalize(w, basis_cols, weighted_cols):
    # classical Gram-Schmidt applied twice; weighted_cols holds W @ basis so
    # that coefficients <w, b_i>_W come out as plain dot products
    for _ in range(2):
        coeff = weighted_cols.T @ w
        w = w - basis_cols @ coeff
    return w


def gengk_bidiag(A: LinearOperatorHandle, R: NoiseCovariance,
                 Q: CovarianceOperator, mu, d, k: int,
                 reorth: bool = True) -> GenGKFactorization:
    """Run k steps of generalized Golub-Kahan bidiagonalization.

    Requires k <= min(m, n); requesting k = min(m, n) runs into the structural
    breakdown on the last step, which is handled by zero-padding the final
    basis column so the factorization relations still hold. With reorth=True
    every new basis vector is re-projected (twice) against all previous ones
    in the appropriate weighted inner product.
    """
    m, n = A.shape
    k = int(k)
    if k < 0:
        raise ValueError("k must be nonnegative")
    if k > min(m, n):
        raise ValueError(f"k={k} exceeds min(m, n)={min(m, n)}")
    mu = np.zeros(n) if mu is None else np.asarray(mu, dtype=float)
    d = np.asarray(d, dtype=float)

    r0 = d - A.apply(mu)
    beta1 = float(np.sqrt(max(R.apply_inv(r0) @ r0, 0.0)))
    tol = BREAKDOWN_RTOL * beta1

    def finish(us, vs, qvs, alphas, betas, breakdown):
        fact = GenGKFactorization(
            u_basis=np.column_stack(us),
            v_basis=np.column_stack(vs),
            qv_basis=np.column_stack(qvs),
            alphas=np.asarray(alphas, dtype=float),
            betas=np.asarray(betas, dtype=float),
            k=len(alphas) - 1,
            breakdown_at=breakdown,
        )
        return fact

    if beta1 == 0.0:
        # data exactly explained by the prior mean
        zeros_m, zeros_n = np.zeros(m), np.zeros(n)
        return finish([zeros_m], [zeros_n], [zeros_n], [0.0], [0.0], 0)

    u1 = r0 / beta1
    us, alphas, betas = [u1], [], [beta1]

    w = A.apply_adjoint(R.apply_inv(u1))
    if not np.all(np.isfinite(w)):
        raise FloatingPointError("non-finite adjoint output at initialization")
    qw = Q.apply(w)
    alpha = float(np.sqrt(max(qw @ w, 0.0)))
    if alpha <= tol:
        alphas.append(alpha)
        zeros_n = np.zeros(n)
        return finish(us, [zeros_n], [zeros_n], alphas, betas, 0)
    vs, qvs = [w / alpha], [qw / alpha]
    alphas.append(alpha)

    breakdown = None
    for j in range(1, k + 1):
        w = A.apply(qvs[-1]) - alphas[-1] * us[-1]
        if not np.all(np.isfinite(w)):
            raise FloatingPointError(f"non-finite forward output at iteration {j}")
        if reorth:
            u_cols = np.column_stack(us)
            w = _orthogonalize(w, u_cols, R.apply_inv(u_cols))
        beta = float(np.sqrt(max(R.apply_inv(w) @ w, 0.0)))
        if beta <= tol:
            breakdown = j
            betas.append(beta)
            alphas.append(0.0)
            us.append(np.zeros(m))
            vs.append(np.zeros(n))
            qvs.append(np.zeros(n))
            break
        u = w / beta
        us.append(u)
        betas.append(beta)

        g = A.apply_adjoint(R.apply_inv(u)) - beta * vs[-1]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite adjoint output at iteration {j}")
        if reorth:
            g = _orthogonalize(g, np.column_stack(vs), np.column_stack(qvs))
        qg = Q.apply(g)
        alpha = float(np.sqrt(max(qg @ g, 0.0)))
        if alpha <= tol:
            breakdown = j
            alphas.append(alpha)
            vs.append(np.zeros(n))
            qvs.append(np.zeros(n))
            break
        vs.append(g / alpha)
        qvs.append(qg / alpha)
        alphas.append(alpha)

    return finish(us, vs, qvs, alphas, betas, breakdown)


def truncate_factorization(fact: GenGKFactorization, k: int) -> GenGKFactorization:
    """View of the leading k iterations of an existing factorization."""
    if k < 0 or k > fact.k:
        raise ValueError(f"k must lie in [0, {fact.k}]")
    return GenGKFactorization(
        u_basis=fact.u_basis[:, : k + 1],
        v_basis=fact.v_basis[:, : k + 1],
        qv_basis=fact.qv_basis[:, : k + 1],
        alphas=fact.alphas[: k + 1],
        betas=fact.betas[: k + 1],
        k=k,
        breakdown_at=fact.breakdown_at if (fact.breakdown_at or 0) <= k else None,
    )


def verify_relations(fact: GenGKFactorization, A, R, Q, mu, d):
    """Relative residuals of the three bidiagonalization relations.

    Returns (r_init, r_forward, r_adjoint):
      U_{k+1} beta1 e1 = d - A mu,
      A Q V_k = U_{k+1} B_k,
      A' R^{-1} U_{k+1} = V_k B_k' + alpha_{k+1} v_{k+1} e_{k+1}'.
    """
    m, n = A.shape
    mu = np.zeros(n) if mu is None else np.asarray(mu, dtype=float)
    d = np.asarray(d, dtype=float)
    if fact.u_basis.shape[0] != m or fact.v_basis.shape[0] != n:
        raise ValueError("factorization shapes do not match the operator")
    k = fact.k
    b = fact.bidiagonal()

    r0 = d - A.apply(mu)
    res1 = np.linalg.norm(fact.u_basis[:, 0] * fact.beta1 - r0)
    den1 = max(np.linalg.norm(r0), 1e-300)

    if k > 0:
        # re-apply Q rather than trusting the cached qv_basis
        aqv = np.column_stack(
            [A.apply(Q.apply(fact.v_basis[:, j])) for j in range(k)]
        )
        ub = fact.u_basis @ b
        res2 = np.linalg.norm(aqv - ub) / max(np.linalg.norm(aqv), 1e-300)
    else:
        res2 = 0.0

    atru = np.column_stack(
        [A.apply_adjoint(R.apply_inv(fact.u_basis[:, j])) for j in range(k + 1)]
    )
    rhs = fact.v_basis[:, :k] @ b.T
    rhs[:, k] += fact.alphas[k] * fact.v_basis[:, k]
    res3 = np.linalg.norm(atru - rhs) / max(np.linalg.norm(atru), 1e-300)

    return (res1 / den1, float(res2), float(res3))
