"""Feed-forward Q-network with hand-written backprop and an Adam optimizer.

Parameters live in one flat float64 vector. Packing is layer-major; each
layer stores its weight matrix (shape ``(fan_out, fan_in)``, row-major)
followed by its bias vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from eve_rl.errors import ConfigError, ContractError

DEFAULT_SLOPE = 0.01


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    # valid for 0 <= slope < 1
    return np.maximum(x, slope * x)


def leaky_relu_grad(x: np.ndarray, slope: float) -> np.ndarray:
    # derivative at exactly 0 takes the positive branch
    return np.where(x >= 0.0, 1.0, slope)


def param_count(layer_sizes: Sequence[int]) -> int:
    return sum(o * i + o for i, o in zip(layer_sizes[:-1], layer_sizes[1:]))


@dataclass(frozen=True, eq=False)
class MlpNetwork:
    """An MLP together with one parameter vector.

    ``slope`` is the negative-side slope of the hidden activations. A slope
    of 0 gives plain ReLU, used only for the activation ablation.
    """

    layer_sizes: tuple[int, ...]
    params: np.ndarray
    slope: float = DEFAULT_SLOPE
    _shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        shapes = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w_end = offset + fan_out * fan_in
            shapes.append((offset, w_end, w_end + fan_out, fan_out, fan_in))
            offset = w_end + fan_out
        object.__setattr__(self, "_shapes", tuple(shapes))
        if self.params.shape != (offset,):
            raise ContractError(
                f"parameter vector has shape {self.params.shape}, expected ({offset},)"
            )

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_actions(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        return self.params.shape[0]

    def with_params(self, params: np.ndarray) -> MlpNetwork:
        return replace(self, params=params)

    def relevant_params(self, features: np.ndarray) -> np.ndarray:
        """Indices of parameters that can affect ``forward(features)``.

        First-layer weights attached to input features that are zero in every
        row are excluded; everything else is included.
        """
        x = np.atleast_2d(features)
        active = np.flatnonzero(np.any(x != 0.0, axis=0))
        start, w_end, _, fan_out, fan_in = self._shapes[0]
        w_idx = np.arange(start, w_end).reshape(fan_out, fan_in)[:, active].ravel()
        return np.concatenate([w_idx, np.arange(w_end, self.n_params)])

    def layers(self, params: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` into the (given or own) parameter vector."""
        p = self.params if params is None else params
        return [
            (p[start:w_end].reshape(fan_out, fan_in), p[w_end:b_end])
            for start, w_end, b_end, fan_out, fan_in in self._shapes
        ]

    def _forward_cache(self, x: np.ndarray, params: np.ndarray | None = None, derivs: bool = True):
        layers = self.layers(params)
        acts = [x]
        dacts = []
        h = x
        for W, b in layers[:-1]:
            z = h @ W.T
            z += b
            if derivs:
                dacts.append(leaky_relu_grad(z, self.slope))
            h = leaky_relu(z, self.slope)
            acts.append(h)
        W, b = layers[-1]
        return h @ W.T + b, acts, dacts, layers

    def forward(self, features: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
        """Q-values for one feature vector ``(n_in,)`` or a batch ``(B, n_in)``."""
        x = np.asarray(features, dtype=np.float64)
        if x.shape[-1] != self.n_inputs or x.ndim > 2:
            raise ContractError(f"features shape {x.shape} does not match input size {self.n_inputs}")
        q, _, _, _ = self._forward_cache(np.atleast_2d(x), params, derivs=False)
        return q[0] if x.ndim == 1 else q

    def _backward(self, cache, out_grad: np.ndarray) -> np.ndarray:
        """Gradient of ``sum(out_grad * q)`` w.r.t. all parameters."""
        _, acts, derivs, layers = cache
        grad = np.empty(self.n_params)
        d = out_grad
        for li in range(len(layers) - 1, -1, -1):
            start, w_end, b_end, fan_out, fan_in = self._shapes[li]
            np.matmul(d.T, acts[li], out=grad[start:w_end].reshape(fan_out, fan_in))
            d.sum(axis=0, out=grad[w_end:b_end])
            if li > 0:
                d = d @ layers[li][0]
                d *= derivs[li - 1]
        return grad

    def _backward_sq(self, cache, out_grad: np.ndarray) -> np.ndarray:
        """Sum over batch rows of the squared per-row gradients.

        Row t contributes ``g_t * g_t`` where ``g_t`` is the gradient of
        ``out_grad[t] . q[t]``. Uses (d_t a_t)^2 = d_t^2 a_t^2 so per-row
        gradients are never materialized.
        """
        _, acts, derivs, layers = cache
        out = np.empty(self.n_params)
        d = out_grad
        for li in range(len(layers) - 1, -1, -1):
            start, w_end, b_end, fan_out, fan_in = self._shapes[li]
            d2 = d * d
            np.matmul(d2.T, acts[li] * acts[li], out=out[start:w_end].reshape(fan_out, fan_in))
            d2.sum(axis=0, out=out[w_end:b_end])
            if li > 0:
                d = d @ layers[li][0]
                d *= derivs[li - 1]
        return out

    def grad_q(self, features: np.ndarray, action: int) -> np.ndarray:
        """Gradient of q(features, action) w.r.t. the parameters."""
        x = self._check_single(features, action)
        cache = self._forward_cache(x)
        d = np.zeros((1, self.n_actions))
        d[0, action] = 1.0
        return self._backward(cache, d)

    def grad_squared_error(self, features: np.ndarray, action: int, target: float) -> np.ndarray:
        """Gradient of (target - q(features, action))^2 with the target held fixed."""
        if not np.isfinite(target):
            raise ContractError(f"non-finite target {target!r}")
        x = self._check_single(features, action)
        cache = self._forward_cache(x)
        d = np.zeros((1, self.n_actions))
        d[0, action] = -2.0 * (target - cache[0][0, action])
        return self._backward(cache, d)

    def _check_single(self, features, action) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.shape != (self.n_inputs,):
            raise ContractError(f"features shape {x.shape} does not match input size {self.n_inputs}")
        if not 0 <= action < self.n_actions:
            raise ContractError(f"action {action} out of range [0, {self.n_actions})")
        return x[None, :]


class BatchPass:
    """One forward pass over a batch of (state, action) pairs, reused by
    several backward passes (MLE gradient and the Fisher statistics share
    the same per-example gradients of q)."""

    def __init__(self, net: MlpNetwork, features: np.ndarray, actions: np.ndarray):
        self.net = net
        self.actions = np.asarray(actions, dtype=np.intp)
        self._cache = net._forward_cache(np.asarray(features, dtype=np.float64))
        self.q_all = self._cache[0]
        self.q = self.q_all[np.arange(len(self.actions)), self.actions]

    def _out_grad(self, coeffs: np.ndarray) -> np.ndarray:
        d = np.zeros_like(self.q_all)
        d[np.arange(len(self.actions)), self.actions] = coeffs
        return d

    def weighted_grad(self, coeffs: np.ndarray) -> np.ndarray:
        """sum_t coeffs[t] * grad q(s_t, a_t)."""
        return self.net._backward(self._cache, self._out_grad(coeffs))

    def weighted_sq_grad(self, coeffs: np.ndarray) -> np.ndarray:
        """sum_t coeffs[t]^2 * (grad q(s_t, a_t))^2, elementwise."""
        return self.net._backward_sq(self._cache, self._out_grad(coeffs))


def mlp_init(layer_sizes: Sequence[int], slope: float = DEFAULT_SLOPE, seed=None) -> MlpNetwork:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or any(s <= 0 for s in sizes):
        raise ConfigError(f"layer_sizes needs >= 2 positive entries, got {list(layer_sizes)}")
    if not 0.0 <= slope < 1.0:
        raise ConfigError(f"activation slope must lie in [0, 1), got {slope}")
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_out * fan_in))
        chunks.append(np.zeros(fan_out))
    return MlpNetwork(sizes, np.concatenate(chunks), float(slope))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n_params: int, **kwargs) -> AdamState:
        return cls(np.zeros(n_params), np.zeros(n_params), **kwargs)


def adam_step(
    state: AdamState, params: np.ndarray, grad: np.ndarray, lr: float = 1e-3
) -> tuple[AdamState, np.ndarray]:
    """Bias-corrected Adam. Returns new state and new parameters; inputs are not mutated."""
    if not np.all(np.isfinite(grad)):
        raise ContractError("non-finite gradient passed to adam_step")
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ContractError("Adam moment, parameter and gradient shapes differ")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (grad * grad) * (1.0 - state.beta2)
    denom = np.sqrt(v / (1.0 - state.beta2**t)) + state.eps
    new_params = params - (m / denom) * (lr / (1.0 - state.beta1**t))
    return replace(state, m=m, v=v, t=t), new_params


class Adam:
    """In-place Adam for training loops; numerically identical to :func:`adam_step`."""

    def __init__(self, n_params: int, lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.state = AdamState.zeros(n_params, beta1=beta1, beta2=beta2, eps=eps)
        self.lr = lr
        self._buf = np.empty(n_params)

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        s = self.state
        if not np.isfinite(grad.sum()):
            raise ContractError("non-finite gradient passed to Adam.step")
        s.t += 1
        s.m *= s.beta1
        s.m += (1.0 - s.beta1) * grad
        s.v *= s.beta2
        buf = self._buf
        np.multiply(grad, grad, out=buf)
        buf *= 1.0 - s.beta2
        s.v += buf
        # params -= lr * (m / bc1) / (sqrt(v / bc2) + eps)
        np.divide(s.v, 1.0 - s.beta2**s.t, out=buf)
        np.sqrt(buf, out=buf)
        buf += s.eps
        np.divide(s.m, buf, out=buf)
        buf *= self.lr / (1.0 - s.beta1**s.t)
        params -= buf
