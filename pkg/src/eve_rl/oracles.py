"""Self-checks of the numerical core against independent reference computations.

Each check returns an :class:`OracleResult` with the measured error and the
tolerance it was held to; :func:`run_all` collects them for ``oracle-check``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from eve_rl.envs import gaussian_bandit_step
from eve_rl.nn import MlpNetwork, mlp_init
from eve_rl.posterior import (
    SCALE_HALF_RESIDUAL,
    SCALE_LOGLIK,
    SCALE_SQUARED_LOSS,
    FisherAccumulator,
    KroneckerBlock,
)


@dataclass(frozen=True)
class OracleResult:
    name: str
    passed: bool
    error: float
    tolerance: float
    seconds: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: error={self.error:.3g} tol={self.tolerance:.3g} time={self.seconds:.2f}s{extra}"


def _result(name, error, tol, start, detail="") -> OracleResult:
    error = float(error)
    return OracleResult(name, bool(np.isfinite(error) and error < tol), error, tol, time.perf_counter() - start, detail)


def grid_posterior(z: np.ndarray, sigma: float = 1.0, points: int = 2001) -> tuple[float, float]:
    """Mean and variance of the flat-prior posterior of a Gaussian location,
    by brute-force quadrature of the likelihood on a grid."""
    n = len(z)
    centre, width = float(np.mean(z)), 12.0 * sigma / np.sqrt(n)
    theta = np.linspace(centre - width, centre + width, points)
    logp = -0.5 * ((z[None, :] - theta[:, None]) ** 2).sum(axis=1) / sigma**2
    w = np.exp(logp - logp.max())
    w /= np.trapezoid(w, theta)
    mean = np.trapezoid(w * theta, theta)
    var = np.trapezoid(w * (theta - mean) ** 2, theta)
    return float(mean), float(var)


def fit_location(z: np.ndarray, tol: float = 1e-13, max_iter: int = 10_000) -> float:
    """Maximum-likelihood location by gradient descent on the mean squared error."""
    theta = 0.0
    for _ in range(max_iter):
        step = 0.5 * np.mean(-2.0 * (z - theta))  # curvature of the loss is 2
        theta -= step
        if abs(step) < tol:
            break
    return theta


def check_conjugate(n: int = 1000, seed: int = 0) -> OracleResult:
    """Gaussian location model with unit variance: posterior N(mean(z), 1/n)."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    z = np.array([gaussian_bandit_step(0.3, 1.0, rng) for _ in range(n)])
    theta = fit_location(z)
    # model Fisher: expectation over model-sampled returns around the fit,
    # taken analytically for the log-likelihood gradient (Z - theta) * 1
    acc = FisherAccumulator.zeros(1, beta=0.0, eps=1e-300, omega=1.0, m=0.0, n=0.0)
    for _ in range(n):
        acc.update_variance_reduced(np.ones(1), 0.0, gamma=1.0, k=1, sigma_return=1.0, scale=SCALE_LOGLIK)
    acc.observe(n)
    eve_var = float(acc.posterior_std()[0] ** 2)
    ref_mean, ref_var = grid_posterior(z)
    mean_err = max(abs(theta - float(np.mean(z))), abs(theta - ref_mean))
    var_err = max(abs(eve_var * n - 1.0), abs(eve_var / ref_var - 1.0))
    # for reference only: the plain empirical Fisher of the n residuals is
    # their sample variance, which scatters ~sqrt(2/n) around the model value
    empirical = float(np.mean((z - theta) ** 2))
    ok_mean = mean_err < 1e-6
    res = _result("conjugate posterior", var_err, 1e-2, start,
                  f"mean error {mean_err:.2g} (tol 1e-06); variance relative error vs 1/n and quadrature; "
                  f"empirical-Fisher variance would be off by {abs(1 / empirical - 1):.3g}")
    return res if ok_mean else OracleResult(res.name, False, res.error, res.tolerance, res.seconds,
                                            res.detail + "; mean check failed")


def check_fisher_constant(n: int = 100_000, seed: int = 1) -> OracleResult:
    """Empirical Fisher of N(Z | theta, 1) tends to its analytic value 1."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    theta = -0.4
    z = theta + rng.standard_normal(n)
    acc = FisherAccumulator.zeros(1, beta=0.0, m=0.0)
    for zi in z:
        acc.update(np.array([zi - theta]))
    f = float(acc.unbiased()[0])
    mc = float(np.mean((z - theta) ** 2))
    err = abs(f - 1.0)
    detail = f"f_unbiased={f:.4f}, Monte-Carlo mean of squared score={mc:.4f}"
    if abs(f - mc) > 1e-9 * mc:
        return OracleResult("fisher constant", False, err, 0.05, time.perf_counter() - start, detail + " disagree")
    return _result("fisher constant", err, 0.05, start, detail)


def check_variance_reduced(draws: int = 100_000, seed: int = 2) -> tuple[OracleResult, OracleResult]:
    """Closed-form expected squared gradient vs Monte-Carlo over return noise,
    for the squared-loss gradient and for the half-residual gradient."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    net = mlp_init([3, 4, 2], seed=seed)
    x = np.array([0.7, -0.3, 1.1])
    a, gamma, k = 1, 0.9, 1
    G = float(net.forward(x)[a]) + 0.5
    eta = rng.standard_normal(draws)
    acc_sq = np.zeros(net.n_params)
    for e in eta:
        g = net.grad_squared_error(x, a, G + gamma**k * e)
        acc_sq += g * g
    mc_sq = acc_sq / draws
    mc_half = mc_sq / 16.0  # 0.5*(Z'-q)*grad q is the squared-loss gradient times -1/4
    grad_q = net.grad_q(x, a)
    delta = G - float(net.forward(x)[a])
    out = []
    for name, mc, scale in (
        ("variance-reduced fisher (squared loss)", mc_sq, SCALE_SQUARED_LOSS),
        ("variance-reduced fisher (half residual)", mc_half, SCALE_HALF_RESIDUAL),
    ):
        acc = FisherAccumulator.zeros(net.n_params, beta=0.0)
        acc.update_variance_reduced(grad_q, delta, gamma, k, sigma_return=1.0, scale=scale)
        closed = acc.diagonal
        live = closed > 1e-14
        err = float(np.max(np.abs(mc[live] / closed[live] - 1.0)))
        dead = float(np.max(mc[~live], initial=0.0))
        out.append(_result(name, err if dead < 1e-12 else np.inf, 0.01, start,
                           f"{int(live.sum())} live coordinates, max relative error per coordinate"))
    return out[0], out[1]


def _random_spd(n: int, rng: np.random.Generator) -> np.ndarray:
    M = rng.normal(size=(n, n))
    return M @ M.T + n * np.eye(n)


def check_kfac(samples: int = 100_000, seed: int = 3) -> tuple[OracleResult, OracleResult]:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    block = KroneckerBlock(_random_spd(3, rng), _random_spd(2, rng))
    dense = np.linalg.inv(np.kron(block.A, block.G))
    inv_err = float(np.max(np.abs(block.inverse() - dense)))
    r1 = _result("kronecker factor inverse", inv_err, 1e-10, start, "max elementwise vs dense inverse")
    start = time.perf_counter()
    draws = block.sample(rng.normal(size=6), rng, size=samples)
    cov = np.cov(draws, rowvar=False)
    fro = float(np.linalg.norm(cov - dense) / np.linalg.norm(dense))
    r2 = _result("kronecker sampling covariance", fro, 0.05, start, "relative Frobenius error")
    return r1, r2


GradFn = Callable[[MlpNetwork, np.ndarray, int, float], np.ndarray]


def _analytic_grad(net: MlpNetwork, x: np.ndarray, action: int, target: float) -> np.ndarray:
    return net.grad_squared_error(x, action, target)


def reference_q(layer_sizes, params, x, action: int, slope: float):
    """q(x, action) in extended precision, unpacking the parameter layout
    (row-major weights, then biases, layer by layer) independently of the network code."""
    p = np.asarray(params, dtype=np.longdouble)
    h = np.asarray(x, dtype=np.longdouble)
    offset = 0
    n_layers = len(layer_sizes) - 1
    for li in range(n_layers):
        fan_in, fan_out = layer_sizes[li], layer_sizes[li + 1]
        W = p[offset : offset + fan_in * fan_out].reshape(fan_out, fan_in)
        offset += fan_in * fan_out
        b = p[offset : offset + fan_out]
        offset += fan_out
        z = W @ h + b
        h = z if li == n_layers - 1 else np.where(z >= 0, z, slope * z)
    return h[action]


def check_gradients(checks: int = 100, seed: int = 4, grad_fn: GradFn | None = None,
                    h: float = 1e-6) -> OracleResult:
    """Central finite differences of (target - q)^2 against the backprop gradient,
    one random coordinate per check on freshly drawn networks and inputs.

    Differences are taken in extended precision so that roundoff stays far
    below the tolerance even for the tiny gradients behind leaky units.
    Relative error is |fd - analytic| / max(|fd| + |analytic|, 1e-12).
    """
    grad_fn = grad_fn or _analytic_grad
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(checks):
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(1, 6)) for _ in range(depth + 1)] + [int(rng.integers(1, 4))]
        net = mlp_init(sizes, seed=int(rng.integers(2**31)))
        x = rng.normal(size=sizes[0])
        a = int(rng.integers(sizes[-1]))
        target = float(rng.normal())
        i = int(rng.integers(net.n_params))
        g = float(grad_fn(net, x, a, target)[i])

        def loss(shift):
            p = net.params.astype(np.longdouble)
            p[i] += shift
            return (target - reference_q(sizes, p, x, a, net.slope)) ** 2

        step = np.longdouble(h)
        fd = float((loss(step) - loss(-step)) / (2 * step))
        worst = max(worst, abs(fd - g) / max(abs(fd) + abs(g), 1e-12))
    return _result("finite-difference gradients", worst, 1e-5, start, f"{checks} random coordinates")


def run_all() -> list[OracleResult]:
    out = [check_conjugate(), check_fisher_constant()]
    out.extend(check_variance_reduced())
    out.extend(check_kfac())
    out.append(check_gradients())
    return out
