"""Diagonal Gaussian mixtures: the next-keypoint distribution of the T2P head.

Raw head layout for K components in 2-D (5K reals)::

    raw[0:K]      weight logits        -> softmax
    raw[K:3K]     means, (K, 2) row-major
    raw[3K:5K]    scale pre-activations -> softplus + SCALE_FLOOR

:class:`GmmParams` holds numpy arrays and may carry leading batch dims,
so one object can describe the per-step mixtures of a whole batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, ndtr

from . import tensor as tn

SCALE_FLOOR = 1e-3
DEFAULT_K = 6
_LOG_2PI = math.log(2 * math.pi)


class GmmError(ValueError):
    pass


@dataclass(frozen=True)
class GmmParams:
    weights: np.ndarray  # (*batch, K)
    means: np.ndarray    # (*batch, K, d)
    scales: np.ndarray   # (*batch, K, d)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        s = np.asarray(self.scales, dtype=np.float64)
        if m.ndim == w.ndim:  # 1-D convenience: means given as (*batch, K)
            m, s = m[..., None], s[..., None]
        if m.shape != s.shape or m.shape[:-1] != w.shape:
            raise GmmError(f"inconsistent shapes: weights {w.shape}, means {m.shape}, scales {s.shape}")
        if np.any(w < 0) or not np.allclose(w.sum(-1), 1.0, atol=1e-6):
            raise GmmError("weights must be non-negative and sum to 1")
        if np.any(s <= 0):
            raise GmmError("scales must be strictly positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "scales", s)

    @property
    def K(self) -> int:
        return self.weights.shape[-1]

    @property
    def dim(self) -> int:
        return self.means.shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return self.weights.shape[:-1]

    def __getitem__(self, idx) -> GmmParams:
        return GmmParams(self.weights[idx], self.means[idx], self.scales[idx])

    def log_density(self, points) -> np.ndarray:
        """log p(points); points has shape (*sample, *batch, d).

        1-D mixtures take scalar points without the trailing axis.
        """
        x = np.asarray(points, dtype=np.float64)
        if self.dim == 1:
            x = x[..., None]
        const = self._log_norm_const()
        comps = []
        # loop over the (small) component and coordinate axes: numpy reductions
        # over a length-2 trailing axis are far slower than elementwise ops
        for k in range(self.K):
            q = 0.0
            for j in range(self.dim):
                z = (x[..., j] - self.means[..., k, j]) / self.scales[..., k, j]
                q = q + z * z
            comps.append(const[..., k] - 0.5 * q)
        m = comps[0]
        for c in comps[1:]:
            m = np.maximum(m, c)
        m = np.where(np.isfinite(m), m, 0.0)
        total = 0.0
        for c in comps:
            total = total + np.exp(c - m)
        return np.log(total) + m

    def _log_norm_const(self):
        logw = np.log(self.weights, where=self.weights > 0, out=np.full(self.weights.shape, -np.inf))
        return logw - np.sum(np.log(self.scales), axis=-1) - 0.5 * self.dim * _LOG_2PI

    def score(self, points) -> np.ndarray:
        """Gradient of log p with respect to the point."""
        x = np.asarray(points, dtype=np.float64)
        squeeze = self.dim == 1
        if squeeze:
            x = x[..., None]
        diff = x[..., None, :] - self.means
        z = diff / self.scales
        comp = np.log(np.maximum(self.weights, 1e-300)) - 0.5 * np.sum(z * z, -1) - np.sum(np.log(self.scales), -1)
        resp = np.exp(comp - logsumexp(comp, axis=-1, keepdims=True))
        g = np.sum(resp[..., None] * (-diff / self.scales**2), axis=-2)
        return g[..., 0] if squeeze else g

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        """Ancestral draw: component ~ Categorical(weights), then per-axis normals.

        Returns (*batch, d), or (n, *batch, d) when ``n`` is given. 1-D
        mixtures drop the trailing axis.
        """
        lead = () if n is None else (n,)
        shape = lead + self.batch_shape
        cdf = np.cumsum(self.weights, axis=-1)
        u = rng.random(shape)
        if not self.batch_shape:
            k = np.minimum(np.searchsorted(cdf, u, side="right"), self.K - 1)
            mu, sd = self.means[k], self.scales[k]
        else:
            k = np.minimum((u[..., None] >= cdf).sum(-1), self.K - 1)[..., None, None]
            mu = np.take_along_axis(np.broadcast_to(self.means, shape + self.means.shape[-2:]), k, axis=-2)[..., 0, :]
            sd = np.take_along_axis(np.broadcast_to(self.scales, shape + self.scales.shape[-2:]), k, axis=-2)[..., 0, :]
        out = mu + sd * rng.standard_normal(shape + (self.dim,))
        return out[..., 0] if self.dim == 1 else out

    def cdf(self, x) -> np.ndarray:
        """CDF of a 1-D mixture."""
        if self.dim != 1:
            raise GmmError("cdf is only defined for 1-D mixtures")
        x = np.asarray(x, dtype=np.float64)
        z = (x[..., None] - self.means[..., 0]) / self.scales[..., 0]
        return np.sum(self.weights * ndtr(z), axis=-1)

    def global_modes(self, lo, hi, n=20001) -> np.ndarray:
        """Grid argmax of a 1-D mixture (all near-ties returned)."""
        x = np.linspace(lo, hi, n)
        lp = self.log_density(x)
        return x[lp >= lp.max() - 1e-9]


def gmm1d(weights, means, sigmas) -> GmmParams:
    return GmmParams(np.asarray(weights, float), np.asarray(means, float)[:, None], np.asarray(sigmas, float)[:, None])


def _softplus(x):
    return np.logaddexp(0.0, x)


def from_raw(raw, K: int | None = None, scale_floor: float = SCALE_FLOOR) -> GmmParams:
    raw = np.asarray(raw, dtype=np.float64)
    n = raw.shape[-1]
    if K is None:
        if n % 5:
            raise GmmError(f"raw head output length {n} is not a multiple of 5")
        K = n // 5
    if n != 5 * K:
        raise GmmError(f"expected 5K = {5 * K} raw values, got {n}")
    logits = raw[..., :K]
    w = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
    means = raw[..., K:3 * K].reshape(raw.shape[:-1] + (K, 2))
    scales = _softplus(raw[..., 3 * K:5 * K].reshape(raw.shape[:-1] + (K, 2))) + scale_floor
    return GmmParams(w, means, scales)


def log_density(params: GmmParams, point) -> np.ndarray:
    return params.log_density(point)


def sample(params: GmmParams, rng) -> np.ndarray:
    return params.sample(rng)


# -- differentiable path ---------------------------------------------------

def log_density_tensor(raw: tn.Tensor, points, K: int, scale_floor: float = SCALE_FLOOR) -> tn.Tensor:
    """log p(point | raw head output) on the autodiff tape.

    ``raw`` is (*batch, 5K); ``points`` is a (*batch, 2) array or tensor.
    """
    if raw.shape[-1] != 5 * K:
        raise GmmError(f"expected 5K = {5 * K} raw values, got {raw.shape[-1]}")
    batch = raw.shape[:-1]
    logw = tn.log_softmax(raw[..., :K])
    means = tn.reshape(raw[..., K:3 * K], batch + (K, 2))
    scales = tn.softplus(tn.reshape(raw[..., 3 * K:5 * K], batch + (K, 2))) + scale_floor
    if isinstance(points, tn.Tensor):
        x = tn.broadcast_to(tn.reshape(points, batch + (1, 2)), batch + (K, 2))
    else:
        pts = np.asarray(points, dtype=raw.dtype).reshape(batch + (1, 2))
        x = tn.Tensor(np.broadcast_to(pts, batch + (K, 2)))
    z = (x - means) / scales
    comp = logw - 0.5 * tn.sum_(tn.square(z), axis=-1) - tn.sum_(tn.log(scales), axis=-1) - _LOG_2PI
    return tn.logsumexp(comp, axis=-1)


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_error: float
    passed: bool


def rel_error(analytic, numeric) -> np.ndarray:
    return np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)


def nll_grad_check(params_raw, point, h: float = 1e-4, tol: float = 1e-3) -> GradCheckReport:
    """Compare the tape gradient of -log p against central differences."""
    raw = np.array(params_raw, dtype=np.float64)
    K = raw.shape[-1] // 5
    t = tn.Tensor(raw, requires_grad=True)
    nll = -log_density_tensor(t, np.asarray(point, dtype=np.float64), K)
    tn.backward(nll)
    analytic = t.grad

    def f(r):
        return -float(from_raw(r, K).log_density(np.asarray(point, dtype=np.float64)))

    numeric = np.empty_like(raw)
    for i in range(raw.size):
        e = np.zeros_like(raw)
        e.flat[i] = h
        numeric.flat[i] = (f(raw + e) - f(raw - e)) / (2 * h)
    err = float(rel_error(analytic, numeric).max())
    return GradCheckReport(analytic, numeric, err, err < tol)
