"""Gaussian parameter posterior built from a diagonal empirical Fisher.

The posterior over all network parameters is

    N(mean, diag(1 / (f_unbiased + eps)) / (n * omega))

where ``f_unbiased`` is a bias-corrected exponential average of squared
log-likelihood gradients and ``n`` counts observed environment steps.
A Kronecker-factored sampler is included for layer blocks whose Fisher
is represented as ``A kron G``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from eve_rl.errors import ConfigError, ContractError
from eve_rl.nn import MlpNetwork

# Multiplier s in c = s/4 * (delta^2 + gamma^(2k) sigma^2), chosen to match the
# gradient whose square is accumulated:
#   0.5*(Z'-q)*grad q      -> 1   (half-residual log-likelihood gradient)
#   (Z'-q)*grad q          -> 4   (gradient of the Gaussian log-likelihood)
#   2*(Z'-q)*grad q        -> 16  (gradient of the squared loss (Z'-q)^2)
SCALE_HALF_RESIDUAL = 1.0
SCALE_LOGLIK = 4.0
SCALE_SQUARED_LOSS = 16.0


@dataclass
class FisherAccumulator:
    """Diagonal Fisher estimate plus the counters the posterior needs.

    ``diagonal`` is an exponential moving sum of squared gradients and
    ``m`` the matching moving sum of ones, so ``diagonal / m`` is an
    unbiased running average. ``n`` is the effective sample count.
    """

    diagonal: np.ndarray
    beta: float = 1e-10
    eps: float = 1e-10
    omega: float = 10.0
    m: float = 1.0
    n: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError(f"fisher beta must lie in [0, 1), got {self.beta}")
        if self.eps <= 0.0:
            raise ConfigError(f"fisher eps must be positive, got {self.eps}")
        if self.omega <= 0.0:
            raise ConfigError(f"omega must be positive, got {self.omega}")

    @classmethod
    def zeros(cls, n_params: int, **kwargs) -> FisherAccumulator:
        return cls(np.zeros(n_params), **kwargs)

    def copy(self) -> FisherAccumulator:
        return copy.deepcopy(self)

    def update(self, grad_logl: np.ndarray) -> None:
        """f <- (1-beta) f + g*g;  m <- (1-beta) m + 1."""
        grad_logl = np.asarray(grad_logl, dtype=np.float64)
        self.update_squared(grad_logl * grad_logl)

    def update_squared(self, sq_grad: np.ndarray) -> None:
        """Same as :meth:`update` but with ``g*g`` (or its expectation) precomputed."""
        if sq_grad.shape != self.diagonal.shape:
            raise ContractError(f"gradient shape {sq_grad.shape} != {self.diagonal.shape}")
        if not np.isfinite(sq_grad.sum()):
            raise ContractError("non-finite Fisher gradient rejected")
        if sq_grad.min(initial=0.0) < 0.0:
            raise ContractError("squared gradient entries must be nonnegative")
        decay = 1.0 - self.beta
        self.diagonal *= decay
        self.diagonal += sq_grad
        self.m = decay * self.m + 1.0

    def update_variance_reduced(
        self,
        grad_q: np.ndarray,
        td_error: float,
        gamma: float,
        k: int = 1,
        sigma_return: float = 1.0,
        scale: float = SCALE_SQUARED_LOSS,
    ) -> None:
        """Fisher update with the return-noise expectation taken analytically.

        For Z' = G + gamma^k * eta, eta ~ N(0, sigma_return^2), the expected
        squared gradient is ``c * grad_q**2`` with ``c`` from
        :func:`expected_residual_factor`.
        """
        grad_q = np.asarray(grad_q, dtype=np.float64)
        c = expected_residual_factor(td_error, gamma, k, sigma_return, scale)
        self.update_squared(c * grad_q * grad_q)

    def observe(self, steps: int) -> None:
        """Account for ``steps`` new environment transitions."""
        self.n += steps

    def unbiased(self) -> np.ndarray:
        return self.diagonal / self.m

    def std(self) -> np.ndarray:
        """Per-coordinate sigma_i = 1/sqrt(f_unbiased_i + eps)."""
        return 1.0 / np.sqrt(self.unbiased() + self.eps)

    def posterior_std(self) -> np.ndarray:
        """Standard deviation of each sampled parameter, sigma_i / sqrt(n omega)."""
        return self.std() / np.sqrt(self.n * self.omega)


def expected_residual_factor(
    td_error, gamma: float, k: int = 1, sigma_return: float = 1.0, scale: float = SCALE_SQUARED_LOSS
):
    """c = scale/4 * (td^2 + gamma^(2k) * sigma_return^2)."""
    if k < 1:
        raise ConfigError(f"return horizon k must be >= 1, got {k}")
    td_error = np.asarray(td_error, dtype=np.float64)
    if not np.all(np.isfinite(td_error)):
        raise ContractError("non-finite TD error")
    return 0.25 * scale * (td_error**2 + gamma ** (2 * k) * sigma_return**2)


def sample_posterior(acc: FisherAccumulator, mean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """theta' = mean + sigma * z / sqrt(n omega),  z ~ N(0, I)."""
    scale = acc.posterior_std()
    if not np.all(np.isfinite(scale)):
        raise FloatingPointError("posterior scale is not finite")
    return mean + scale * rng.standard_normal(mean.shape[0])


def sample_posterior_subset(
    acc: FisherAccumulator, mean: np.ndarray, idx: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Posterior draw that perturbs only the coordinates ``idx``.

    Other coordinates stay at the mean. When they cannot influence the
    quantity being computed, the result is distributed exactly like a full
    :func:`sample_posterior` draw at a fraction of the cost.
    """
    f = acc.diagonal[idx] / acc.m
    f += acc.eps
    scale = 1.0 / np.sqrt(f * (acc.n * acc.omega))
    out = mean.copy()
    out[idx] += scale * rng.standard_normal(len(idx))
    return out


def sample_posterior_batch(
    acc: FisherAccumulator, mean: np.ndarray, count: int, rng: np.random.Generator
) -> np.ndarray:
    """``count`` independent posterior draws stacked as rows."""
    scale = acc.posterior_std()
    return mean + scale * rng.standard_normal((count, mean.shape[0]))


def epistemic_q_std(
    acc: FisherAccumulator,
    mean: np.ndarray,
    net: MlpNetwork,
    features: np.ndarray,
    action: int,
    n_samples: int,
    rng: np.random.Generator,
) -> float:
    """Sample standard deviation of q(features, action) under the posterior."""
    if n_samples < 2:
        raise ConfigError(f"n_samples must be >= 2, got {n_samples}")
    draws = sample_posterior_batch(acc, mean, n_samples, rng)
    x = np.asarray(features, dtype=np.float64)
    qs = np.array([net.forward(x, params=p)[action] for p in draws])
    return float(np.std(qs, ddof=1))


def vec(mat: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization."""
    return mat.ravel(order="F")


def unvec(x: np.ndarray, rows: int, cols: int) -> np.ndarray:
    return x.reshape(rows, cols, order="F")


@dataclass
class KroneckerBlock:
    """Precision matrix ``A kron G`` of one layer, with cached eigendecompositions.

    ``A`` is a x a and ``G`` is g x g; the block covers a parameter vector of
    length a*g laid out as ``vec`` of a g x a matrix.
    """

    A: np.ndarray
    G: np.ndarray
    eig_A: tuple[np.ndarray, np.ndarray] = field(init=False, repr=False)
    eig_G: tuple[np.ndarray, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.G = np.asarray(self.G, dtype=np.float64)
        self.eig_A = _spd_eigh(self.A, "A")
        self.eig_G = _spd_eigh(self.G, "G")

    @property
    def size(self) -> int:
        return self.A.shape[0] * self.G.shape[0]

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """(A kron G) x = vec(G mat(x) A^T)."""
        a, g = self.A.shape[0], self.G.shape[0]
        return vec(self.G @ unvec(x, g, a) @ self.A.T)

    def inverse_factors(self) -> tuple[np.ndarray, np.ndarray]:
        """(A^-1, G^-1) from the cached eigendecompositions."""
        return _inv_from_eig(*self.eig_A), _inv_from_eig(*self.eig_G)

    def inverse(self) -> np.ndarray:
        """Dense (A kron G)^-1 assembled as A^-1 kron G^-1."""
        inv_a, inv_g = self.inverse_factors()
        return np.kron(inv_a, inv_g)

    def sqrt_factors(self) -> tuple[np.ndarray, np.ndarray]:
        """B_A = E_A Lambda_A^-1/2 and B_G = E_G Lambda_G^-1/2."""
        (lam_a, e_a), (lam_g, e_g) = self.eig_A, self.eig_G
        return e_a / np.sqrt(lam_a), e_g / np.sqrt(lam_g)

    def sample(self, mean: np.ndarray, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Draw from N(mean, (A kron G)^-1) using only factor-sized products."""
        a, g = self.A.shape[0], self.G.shape[0]
        if mean.shape != (a * g,):
            raise ContractError(f"mean has shape {mean.shape}, expected ({a * g},)")
        b_a, b_g = self.sqrt_factors()
        if size is None:
            z = rng.standard_normal((g, a))
            return mean + vec(b_g @ z @ b_a.T)
        z = rng.standard_normal((size, g, a))
        # vec() of each row: transpose so the column index varies slowest
        draws = np.einsum("ij,njk,lk->nli", b_g, z, b_a)
        return mean + draws.reshape(size, a * g)


def _spd_eigh(M: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise np.linalg.LinAlgError(f"factor {name} must be square, got shape {M.shape}")
    if not np.allclose(M, M.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(M).max())):
        raise np.linalg.LinAlgError(f"factor {name} is not symmetric")
    lam, vecs = np.linalg.eigh(M)
    if lam.min() <= 0.0:
        raise np.linalg.LinAlgError(f"factor {name} is not positive definite (min eigenvalue {lam.min():.3g})")
    return lam, vecs


def _inv_from_eig(lam: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    return (vecs / lam) @ vecs.T
