"""Minimal differentiable MLP stack: fixed-architecture reverse-mode
gradients, forward-mode parameter tangents, Adam, and conjugate gradients.

No general computation graph; every loss used in training backpropagates
through these fixed passes, and second-order KL information comes from the
exact Gauss-Newton identity in policy.py rather than double-backward.
"""

from __future__ import annotations

import numpy as np


class Mlp:
    """Fully connected network with rectifier hidden units and linear output.

    Parameters live in one flat float64 vector; per-layer weight matrices
    are views into it, so set_params is a single in-place copy and the flat
    round-trip is exact.
    """

    def __init__(self, sizes, rng: np.random.Generator | None = None):
        self.sizes = list(sizes)
        if len(self.sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.n_params = sum(m * n + n for m, n in zip(self.sizes[:-1], self.sizes[1:]))
        self._theta = np.zeros(self.n_params)
        self._weights, self._biases = self._views(self._theta)
        if rng is not None:
            self.initialize(rng)

    def _views(self, flat: np.ndarray):
        weights, biases = [], []
        offset = 0
        for m, n in zip(self.sizes[:-1], self.sizes[1:]):
            weights.append(flat[offset : offset + m * n].reshape(m, n))
            offset += m * n
            biases.append(flat[offset : offset + n])
            offset += n
        return weights, biases

    def initialize(self, rng: np.random.Generator):
        # He-style fan-in scaling for the rectifier layers
        for w in self._weights:
            w[:] = rng.normal(0.0, np.sqrt(2.0 / w.shape[0]), size=w.shape)
        for b in self._biases:
            b[:] = 0.0

    def get_params(self) -> np.ndarray:
        return self._theta.copy()

    def set_params(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        self._theta[:] = flat

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cache(x)[0]

    def forward_cache(self, x: np.ndarray):
        """Evaluate a (batch, in) array; the cache keeps per-layer inputs
        and rectifier masks for the backward and tangent passes."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.sizes[0]:
            raise ValueError(f"input dim {x.shape[1]} != {self.sizes[0]}")
        h = x
        inputs, masks = [], []
        last = len(self._weights) - 1
        for i, (w, b) in enumerate(zip(self._weights, self._biases)):
            inputs.append(h)
            z = h @ w + b
            if i < last:
                mask = z > 0.0
                masks.append(mask)
                h = z * mask
            else:
                h = z
        if not np.all(np.isfinite(h)):
            raise FloatingPointError("non-finite activation in forward pass")
        return h, (inputs, masks)

    def backward(self, cache, dout: np.ndarray, with_input_grad: bool = False):
        """Vector-Jacobian product: cotangent dout (batch, out) summed over
        the batch into a flat parameter gradient."""
        inputs, masks = cache
        grad = np.zeros(self.n_params)
        gws, gbs = self._views(grad)
        d = np.atleast_2d(dout)
        for i in reversed(range(len(self._weights))):
            gws[i][:] = inputs[i].T @ d
            gbs[i][:] = d.sum(axis=0)
            if i > 0:
                d = (d @ self._weights[i].T) * masks[i - 1]
            elif with_input_grad:
                d = d @ self._weights[i].T
        if with_input_grad:
            return grad, d
        return grad

    def param_jvp(self, cache, tangent: np.ndarray) -> np.ndarray:
        """Jacobian-vector product: directional derivative of the outputs
        along a flat parameter tangent, per batch row."""
        tangent = np.asarray(tangent, dtype=float)
        if tangent.shape != (self.n_params,):
            raise ValueError("tangent length mismatch")
        vws, vbs = self._views(tangent)
        inputs, masks = cache
        t = np.zeros_like(inputs[0])
        last = len(self._weights) - 1
        for i, w in enumerate(self._weights):
            tz = t @ w + inputs[i] @ vws[i] + vbs[i]
            t = tz * masks[i] if i < last else tz
        return t


def softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class Adam:
    """Adaptive-moment gradient descent on a flat parameter vector."""

    def __init__(self, n_params: int, lr: float = 2e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad**2
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> dict:
        return {"m": self.m, "v": self.v, "t": self.t}

    def load_state(self, state: dict):
        self.m = np.asarray(state["m"], dtype=float)
        self.v = np.asarray(state["v"], dtype=float)
        self.t = int(state["t"])


def conjugate_gradient(hvp, b: np.ndarray, iters: int = 10, tol: float = 1e-8) -> np.ndarray:
    """Solve H x = b for symmetric positive definite hvp via CG."""
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    rs_old = float(r @ r)
    if rs_old < tol:
        return x
    for _ in range(iters):
        hp = hvp(p)
        if not np.all(np.isfinite(hp)):
            raise FloatingPointError("non-finite Hessian-vector product")
        alpha = rs_old / (float(p @ hp) + 1e-12)
        x += alpha * p
        r -= alpha * hp
        rs_new = float(r @ r)
        if rs_new < tol:
            break
        p = r + (rs_new / rs_old) * p
        rs_old = rs_new
    return x


def numeric_gradient(f, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function; the independent
    check for every analytic gradient in the package."""
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        dn = theta.copy()
        up[i] += h
        dn[i] -= h
        grad[i] = (f(up) - f(dn)) / (2.0 * h)
    return grad
