"""Multivariate Bayesian linear regression with a matrix-normal inverse-Wishart prior.

The model for a d_out-dimensional response y given a d_in-dimensional input x is

    y = A x + e,    e ~ N(0, V),

with a conjugate prior on the unknown pair (A, V): V is inverse-Wishart with
scale ``wishart_scale`` and ``dof`` degrees of freedom, and A given V is
matrix-normal with mean ``mean_matrix``, row covariance V and column covariance
``input_precision``^-1.  The posterior stays in the same family after every
observation, the one-step predictive is a multivariate Student-t, and exact
posterior samples of (A, V) are cheap to draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .errors import NumericalError

__all__ = [
    "MNIWPosterior",
    "LinearGaussianSample",
    "augment",
    "student_t_logpdf",
]


def augment(state: np.ndarray) -> np.ndarray:
    """Append a constant 1 to a state vector, making the regression affine."""
    state = np.asarray(state, dtype=float).ravel()
    return np.concatenate([state, [1.0]])


def _cholesky_or_raise(mat: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"{what} lost positive-definiteness") from exc


def student_t_logpdf(y, loc, shape, dof) -> float:
    """Log density of a multivariate Student-t in the unnormalised-scale form.

    The density is proportional to ``[1 + (y-loc)' shape^-1 (y-loc)]^-(dof+p)/2``,
    i.e. the quadratic form is not divided by ``dof``.  This equals the classic
    parameterisation with scale matrix ``shape / dof``.
    """
    y = np.asarray(y, dtype=float).ravel()
    loc = np.asarray(loc, dtype=float).ravel()
    p = y.size
    chol = _cholesky_or_raise(np.asarray(shape, dtype=float), "Student-t shape matrix")
    resid = np.linalg.solve(chol, y - loc)
    quad = float(resid @ resid)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return float(
        gammaln(0.5 * (dof + p))
        - gammaln(0.5 * dof)
        - 0.5 * (p * np.log(np.pi) + logdet)
        - 0.5 * (dof + p) * np.log1p(quad)
    )


@dataclass(frozen=True)
class LinearGaussianSample:
    """One exact posterior draw of the model parameters.

    ``design`` maps an augmented input to the response mean and ``covariance``
    is the symmetric positive-definite noise covariance that came with it.
    """

    design: np.ndarray
    covariance: np.ndarray


@dataclass(frozen=True)
class MNIWPosterior:
    """Conjugate posterior state for one linear-Gaussian model.

    Fields
    ------
    mean_matrix : (d_out, d_in) location of the design matrix
    input_precision : (d_in, d_in) SPD precision accumulated from inputs
    wishart_scale : (d_out, d_out) SPD scale of the inverse-Wishart factor
    dof : degrees of freedom, grows by one per observation
    obs_count : number of observations folded in so far
    """

    mean_matrix: np.ndarray
    input_precision: np.ndarray
    wishart_scale: np.ndarray
    dof: float
    obs_count: int = 0

    @classmethod
    def default_prior(cls, d_out: int, d_in: int, scale: float = 1.0,
                      input_scale: float = 1.0) -> "MNIWPosterior":
        """Weakly informative proper prior.

        M = 0, N = input_scale * I, W = scale * I, dof = d_out + 1.  Both
        scales are configurable: the input precision acts as a ridge on the
        design matrix and the Wishart scale sets the prior noise level.
        """
        return cls(
            mean_matrix=np.zeros((d_out, d_in)),
            input_precision=input_scale * np.eye(d_in),
            wishart_scale=scale * np.eye(d_out),
            dof=float(d_out + 1),
            obs_count=0,
        )

    @property
    def d_out(self) -> int:
        return self.mean_matrix.shape[0]

    @property
    def d_in(self) -> int:
        return self.mean_matrix.shape[1]

    def _check_dims(self, x: np.ndarray, y: np.ndarray | None = None) -> None:
        if x.shape != (self.d_in,):
            raise ValueError(f"input has shape {x.shape}, expected ({self.d_in},)")
        if y is not None and y.shape != (self.d_out,):
            raise ValueError(f"response has shape {y.shape}, expected ({self.d_out},)")

    def update(self, x: np.ndarray, y: np.ndarray) -> "MNIWPosterior":
        """Return the exact posterior after observing the pair (x, y).

        The recursion is N' = N + x x', M' = (M N + y x') N'^-1,
        W' = W + (y - M'x)(y - Mx)', dof' = dof + 1.  N and W are re-symmetrised
        to keep Cholesky factorisations stable; a failed factorisation raises
        :class:`NumericalError` rather than being papered over with jitter.
        """
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        self._check_dims(x, y)

        prec = self.input_precision + np.outer(x, x)
        prec = 0.5 * (prec + prec.T)
        # ascontiguousarray keeps results bitwise reproducible across
        # checkpoint round trips (BLAS output can depend on memory layout).
        mean = np.ascontiguousarray(
            np.linalg.solve(prec.T, (self.mean_matrix @ self.input_precision + np.outer(y, x)).T).T
        )
        scale = self.wishart_scale + np.outer(y - mean @ x, y - self.mean_matrix @ x)
        scale = 0.5 * (scale + scale.T)

        _cholesky_or_raise(prec, "input precision")
        _cholesky_or_raise(scale, "Wishart scale")
        return MNIWPosterior(mean, prec, scale, self.dof + 1.0, self.obs_count + 1)

    def predictive_mean(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        self._check_dims(x)
        return self.mean_matrix @ x

    def predictive_z(self, x: np.ndarray) -> float:
        """Shrinkage factor z = 1 - x' (N + x x')^-1 x, always in (0, 1]."""
        x = np.asarray(x, dtype=float).ravel()
        self._check_dims(x)
        grown = self.input_precision + np.outer(x, x)
        return float(1.0 - x @ np.linalg.solve(grown, x))

    def predictive_dof(self, dof_mode: str = "paper") -> float:
        """Student-t degrees of freedom under the configured convention.

        "paper" uses 1 + dof.  "exact" uses dof - d_out + 1, which is the
        convention under which the predictive density is the true marginal of
        the parameter draws produced by :meth:`sample`.
        """
        if dof_mode == "paper":
            return 1.0 + self.dof
        if dof_mode == "exact":
            return self.dof - self.d_out + 1.0
        raise ValueError(f"unknown dof_mode {dof_mode!r}")

    def predictive_logpdf(self, x: np.ndarray, y: np.ndarray, dof_mode: str = "paper") -> float:
        """Log predictive density of y at input x: Student-t(Mx, W/z, dof)."""
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        self._check_dims(x, y)
        z = self.predictive_z(x)
        return student_t_logpdf(y, self.mean_matrix @ x, self.wishart_scale / z, self.predictive_dof(dof_mode))

    def predictive_density(self, x: np.ndarray, y: np.ndarray, dof_mode: str = "paper") -> float:
        """Predictive density of y at input x, finite and strictly positive."""
        return float(np.exp(self.predictive_logpdf(x, y, dof_mode)))

    def sample(self, rng: np.random.Generator) -> LinearGaussianSample:
        """Draw (A, V) from the posterior.

        V is inverse-Wishart(wishart_scale, dof) via the Bartlett construction,
        then A is matrix-normal(mean_matrix, V, input_precision^-1) given V.
        Deterministic for a fixed generator state.
        """
        cov = sample_inverse_wishart(rng, self.wishart_scale, self.dof)
        chol_cov = _cholesky_or_raise(cov, "sampled covariance")
        chol_prec = _cholesky_or_raise(self.input_precision, "input precision")
        noise = rng.standard_normal((self.d_out, self.d_in))
        # Solving Z L_N^-1 row-wise keeps the column covariance at N^-1.
        design = self.mean_matrix + chol_cov @ np.linalg.solve(chol_prec.T, noise.T).T
        return LinearGaussianSample(design=design, covariance=cov)


def sample_inverse_wishart(rng: np.random.Generator, scale: np.ndarray, dof: float) -> np.ndarray:
    """Draw from the inverse-Wishart with the given SPD scale and dof.

    Draws S ~ Wishart(dof, scale^-1) through the Bartlett decomposition and
    returns S^-1.  Requires dof > d - 1.  The mean, when dof > d + 1, is
    scale / (dof - d - 1).
    """
    scale = np.asarray(scale, dtype=float)
    d = scale.shape[0]
    if dof <= d - 1:
        raise ValueError(f"inverse-Wishart needs dof > {d - 1}, got {dof}")
    bartlett = np.zeros((d, d))
    bartlett[np.diag_indices(d)] = np.sqrt(rng.chisquare(dof - np.arange(d)))
    if d > 1:
        bartlett[np.tril_indices(d, -1)] = rng.standard_normal(d * (d - 1) // 2)
    chol = _cholesky_or_raise(np.linalg.inv(scale), "inverted Wishart scale")
    root = chol @ bartlett
    cov = np.linalg.inv(root @ root.T)
    return 0.5 * (cov + cov.T)
