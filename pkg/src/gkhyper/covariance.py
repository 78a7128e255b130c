"""Matern prior covariance operators and their hyperparameter derivatives.

Two matrix-free backends: a dense one for arbitrary point sets and an FFT
circulant-embedding one for equispaced rectangular grids (O(n log n) matvecs).
The covariance is parameterized by the canonical hyperparameters: prior
standard deviation theta2 (variance sigma^2 = theta2^2) and correlation
length theta3; smoothness nu is fixed, never estimated.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import gamma as gamma_fn
from scipy.special import kv

from .operators import LinearOperatorHandle

__all__ = [
    "MaternKernel",
    "RegularGrid",
    "CovarianceOperator",
    "matern_eval",
    "matern_deriv",
    "build_cov_operator",
    "CLOSED_FORM_NU",
]

log = logging.getLogger(__name__)

# smoothness values with closed-form kernels and analytic ell-derivatives
CLOSED_FORM_NU = (0.5, 1.5, 2.5)

_FD_ELL_REL_STEP = 1e-6


@dataclass(frozen=True)
class MaternKernel:
    """Isotropic Matern covariance function M(r).

    M(0) = sigma2 exactly; for nu in {1/2, 3/2, 5/2} the closed forms are
    used, otherwise the modified-Bessel-K representation.
    """

    nu: float
    sigma2: float
    ell: float

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError(f"smoothness must be positive, got {self.nu}")
        if self.sigma2 <= 0:
            raise ValueError(f"variance must be positive, got {self.sigma2}")
        if self.ell <= 0:
            raise ValueError(f"correlation length must be positive, got {self.ell}")

    @property
    def prior_std(self) -> float:
        return math.sqrt(self.sigma2)

    def __call__(self, r):
        return matern_eval(self, r)


def _is_close(a: float, b: float) -> bool:
    return abs(a - b) < 1e-12


def matern_eval(kernel: MaternKernel, r):
    """Evaluate the Matern covariance at distance(s) r >= 0.

    The r=0 value is the variance itself (limit value, no Bessel call).
    """
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("distances must be nonnegative")
    scalar = r.ndim == 0
    r = np.atleast_1d(r)
    s2, ell, nu = kernel.sigma2, kernel.ell, kernel.nu
    if _is_close(nu, 0.5):
        out = s2 * np.exp(-r / ell)
    elif _is_close(nu, 1.5):
        a = math.sqrt(3.0) * r / ell
        out = s2 * (1.0 + a) * np.exp(-a)
    elif _is_close(nu, 2.5):
        a = math.sqrt(5.0) * r / ell
        out = s2 * (1.0 + a + a * a / 3.0) * np.exp(-a)
    else:
        out = np.full_like(r, s2)
        pos = r > 0
        if np.any(pos):
            a = math.sqrt(2.0 * nu) * r[pos] / ell
            out[pos] = s2 * (2.0 ** (1.0 - nu) / gamma_fn(nu)) * a**nu * kv(nu, a)
    return float(out[0]) if scalar else out


def _matern_deriv_ell_closed(kernel: MaternKernel, r: np.ndarray) -> np.ndarray:
    s2, ell, nu = kernel.sigma2, kernel.ell, kernel.nu
    if _is_close(nu, 0.5):
        return s2 * np.exp(-r / ell) * r / ell**2
    if _is_close(nu, 1.5):
        a = math.sqrt(3.0) * r / ell
        return s2 * a * a * np.exp(-a) / ell
    if _is_close(nu, 2.5):
        a = math.sqrt(5.0) * r / ell
        return s2 * a * a * (1.0 + a) * np.exp(-a) / (3.0 * ell)
    raise ValueError(f"no closed-form ell-derivative for nu={nu}")


def matern_deriv(kernel: MaternKernel, r, wrt: str):
    """Derivative of the kernel value with respect to a hyperparameter.

    wrt="sigma_std" differentiates with respect to theta2 (the standard
    deviation): dM/dtheta2 = (2/theta2) M(r). wrt="ell" uses the analytic
    formula for nu in {1/2, 3/2, 5/2}; other nu fall back to a central
    finite difference (step 1e-6 * ell) and emit a warning because the
    result is approximate.
    """
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("distances must be nonnegative")
    scalar = r.ndim == 0
    r = np.atleast_1d(r)
    if wrt == "sigma_std":
        out = (2.0 / kernel.prior_std) * np.atleast_1d(matern_eval(kernel, r))
    elif wrt == "ell":
        if kernel.nu in CLOSED_FORM_NU or any(
            _is_close(kernel.nu, v) for v in CLOSED_FORM_NU
        ):
            out = _matern_deriv_ell_closed(kernel, r)
        else:
            warnings.warn(
                f"nu={kernel.nu} has no analytic ell-derivative; "
                "using a central finite difference (approximate)",
                stacklevel=2,
            )
            h = _FD_ELL_REL_STEP * kernel.ell
            kp = MaternKernel(kernel.nu, kernel.sigma2, kernel.ell + h)
            km = MaternKernel(kernel.nu, kernel.sigma2, kernel.ell - h)
            out = (
                np.atleast_1d(matern_eval(kp, r)) - np.atleast_1d(matern_eval(km, r))
            ) / (2.0 * h)
    else:
        raise ValueError(f"wrt must be 'sigma_std' or 'ell', got {wrt!r}")
    return float(out[0]) if scalar else out


def _kernel_or_deriv(kernel: MaternKernel, deriv_index: int, r):
    if deriv_index == 0:
        return matern_eval(kernel, r)
    if deriv_index == 2:
        return matern_deriv(kernel, r, "sigma_std")
    if deriv_index == 3:
        return matern_deriv(kernel, r, "ell")
    raise ValueError(f"deriv_index must be 0, 2 or 3, got {deriv_index}")


@dataclass(frozen=True)
class RegularGrid:
    """Equispaced rectangular grid; points are ordered C-style (last axis fastest)."""

    shape: tuple[int, ...]
    spacing: tuple[float, ...]

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        spacing = tuple(float(h) for h in self.spacing)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)
        if len(shape) not in (1, 2):
            raise ValueError("only 1-d and 2-d grids are supported")
        if len(spacing) != len(shape):
            raise ValueError("spacing must match the grid dimension")
        if any(s < 1 for s in shape):
            raise ValueError("grid shape entries must be positive")
        if any(h <= 0 for h in spacing):
            raise ValueError("grid spacing must be positive")

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def points(self) -> np.ndarray:
        """Node coordinates (cell midpoints of a [0, L] box), size x ndim."""
        axes = [
            (np.arange(n) + 0.5) * h for n, h in zip(self.shape, self.spacing)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def lag_distance_matrix(self) -> np.ndarray:
        """Pairwise distances computed from integer lags and the spacing.

        Grid distances come from index differences times the spacing exactly,
        keeping the Toeplitz structure bit-stable.
        """
        idx = np.indices(self.shape).reshape(self.ndim, -1).T
        d2 = np.zeros((self.size, self.size))
        for axis in range(self.ndim):
            lag = (idx[:, axis][:, None] - idx[:, axis][None, :]) * self.spacing[axis]
            d2 += lag * lag
        return np.sqrt(d2)


class CovarianceOperator(LinearOperatorHandle):
    """Symmetric matrix-free covariance (or covariance-derivative) operator.

    deriv_index 0 is Q itself, 2 and 3 are the derivatives with respect to
    the prior standard deviation and the correlation length.
    """

    def __init__(self, kernel: MaternKernel, deriv_index: int, backend: str, n: int):
        super().__init__(n, n)
        self.kernel = kernel
        self.deriv_index = int(deriv_index)
        self.backend = backend

    def _apply_adjoint(self, y):
        # symmetric by construction
        return self._apply(y)


class _DenseCovariance(CovarianceOperator):
    def __init__(self, kernel, deriv_index, dist):
        super().__init__(kernel, deriv_index, "dense", dist.shape[0])
        self._mat = _kernel_or_deriv(kernel, deriv_index, dist)

    def _apply(self, x):
        return self._mat @ x


class _FFTGridCovariance(CovarianceOperator):
    """Circulant embedding of the (block-)Toeplitz grid covariance.

    The base kernel is evaluated on a doubled torus per dimension; applying
    the operator zero-pads the input into the embedding, multiplies by the
    circulant eigenvalues in Fourier space and crops. Negative embedding
    eigenvalues (possible for some nu/ell) are clipped at zero for the
    covariance itself; derivative operators are not required to be PSD and
    are never clipped.
    """

    def __init__(self, kernel, deriv_index, grid: RegularGrid):
        super().__init__(kernel, deriv_index, "fft", grid.size)
        self.grid = grid
        embed_shape = tuple(2 * s for s in grid.shape)
        lag_axes = []
        for size, s, h in zip(embed_shape, grid.shape, grid.spacing):
            idx = np.arange(size)
            lag_axes.append(np.minimum(idx, size - idx) * h)
        if grid.ndim == 1:
            radius = lag_axes[0]
        else:
            radius = np.hypot(lag_axes[0][:, None], lag_axes[1][None, :])
        base = _kernel_or_deriv(kernel, deriv_index, radius)
        eig = np.fft.fftn(base).real
        self.min_embedding_eig = float(eig.min())
        self.clipped = 0
        if deriv_index == 0:
            neg = eig < 0.0
            self.clipped = int(np.count_nonzero(neg))
            if self.clipped:
                log.warning(
                    "circulant embedding has %d negative eigenvalues "
                    "(min %.3e); clipping at zero",
                    self.clipped,
                    self.min_embedding_eig,
                )
                eig = np.where(neg, 0.0, eig)
        self._eig = eig
        self._embed_shape = embed_shape

    def _apply(self, x):
        field = x.reshape(self.grid.shape)
        padded = np.zeros(self._embed_shape)
        sl = tuple(slice(0, s) for s in self.grid.shape)
        padded[sl] = field
        out = np.fft.ifftn(self._eig * np.fft.fftn(padded)).real[sl]
        return out.reshape(-1)


def build_cov_operator(geometry, kernel: MaternKernel, deriv_index: int = 0,
                       backend: str = "auto") -> CovarianceOperator:
    """Build a matrix-free covariance (or derivative) operator.

    geometry is either a RegularGrid (FFT backend available) or an
    (n_points, dim) coordinate array (dense backend only). backend "auto"
    picks FFT on grids, dense on point sets.
    """
    if isinstance(geometry, RegularGrid):
        if backend in ("auto", "fft"):
            return _FFTGridCovariance(kernel, deriv_index, geometry)
        if backend == "dense":
            return _DenseCovariance(kernel, deriv_index, geometry.lag_distance_matrix())
        raise ValueError(f"unknown backend {backend!r}")
    points = np.asarray(geometry, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    if points.ndim != 2:
        raise ValueError("point set must be an (n, dim) array")
    if backend == "fft":
        raise ValueError("fft backend requires an equispaced rectangular grid")
    if backend not in ("auto", "dense"):
        raise ValueError(f"unknown backend {backend!r}")
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    return _DenseCovariance(kernel, deriv_index, dist)
