"""Tempered distributions p_T(x) ∝ p(x)^(1/T) and a Monte-Carlo sampler for them.

The sampler only needs a distribution that can draw from p and evaluate
log p: draw N candidates from p, then pick one with probability
softmax((1/T - 1) * log p(x_i)). At T = 1 the pick is uniform, so the
output is distributed exactly as p.

Distributions follow the small protocol used by :class:`t2pose.gmm.GmmParams`:

    sample(rng, n) -> array of shape (n, *batch, *event)
    log_density(points) -> array of shape points.shape[:-len(event)]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy.special import logsumexp

DEFAULT_CANDIDATES = 1024
DEMO_CANDIDATES = 10_000
DEMO_TEMPERATURES = (1.0, 0.3, 0.05)


class TemperableDistribution(Protocol):
    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray: ...

    def log_density(self, points) -> np.ndarray: ...


class TemperatureError(ValueError):
    pass


class DegenerateCandidatesError(RuntimeError):
    pass


def check_temperature(T) -> float:
    T = float(T)
    if not T > 0 or not np.isfinite(T):
        raise TemperatureError(f"temperature must be a positive finite real, got {T}")
    return T


def tempered_log_density_unnormalized(dist: TemperableDistribution, point, T) -> np.ndarray:
    """log p(point) / T, the log numerator of p_T."""
    T = check_temperature(T)
    return np.asarray(dist.log_density(point)) / T


def resampling_weights(log_p, T, axis=0) -> np.ndarray:
    """Normalized softmax((1/T - 1) * log p) along ``axis``.

    Candidates with non-finite log density get zero weight. Raises when
    every candidate along the axis is non-finite.
    """
    T = check_temperature(T)
    log_p = np.asarray(log_p, dtype=np.float64)
    finite = np.isfinite(log_p)
    if not np.all(finite.any(axis=axis)):
        raise DegenerateCandidatesError("all candidate log-densities are non-finite")
    a = np.where(finite, (1.0 / T - 1.0) * log_p, -np.inf)
    a = a - a.max(axis=axis, keepdims=True)
    w = np.exp(a)
    return w / w.sum(axis=axis, keepdims=True)


def _pick(weights, u, axis=0):
    cdf = np.cumsum(weights, axis=axis)
    idx = (np.expand_dims(u, axis) >= cdf).sum(axis=axis)
    return np.minimum(idx, weights.shape[axis] - 1)


def tempered_sample(dist: TemperableDistribution, T, n_candidates: int = DEFAULT_CANDIDATES,
                    rng: np.random.Generator | None = None, size: int | None = None,
                    chunk: int = 256) -> np.ndarray:
    """Draw from p_T by softmax resampling of fresh candidates from p.

    Each returned point uses its own candidate set. With ``size`` the
    result has a leading axis of that length. Batched distributions
    (e.g. one mixture per batch row) return one point per batch row.
    """
    T = check_temperature(T)
    if n_candidates < 1:
        raise ValueError(f"n_candidates must be >= 1, got {n_candidates}")
    rng = np.random.default_rng() if rng is None else rng
    if size is None:
        return _draw_one(dist, T, n_candidates, rng)
    outs = []
    done = 0
    while done < size:
        m = min(chunk, size - done)
        cand = dist.sample(rng, m * n_candidates)
        lp = np.asarray(dist.log_density(cand))
        cand = cand.reshape((m, n_candidates) + cand.shape[1:])
        lp = lp.reshape((m, n_candidates) + lp.shape[1:])
        w = resampling_weights(lp, T, axis=1)
        idx = _pick(w, rng.random((m,) + lp.shape[2:]), axis=1)
        outs.append(_take(cand, idx, axis=1))
        done += m
    return np.concatenate(outs, axis=0)


def _draw_one(dist, T, n_candidates, rng):
    cand = dist.sample(rng, n_candidates)
    lp = np.asarray(dist.log_density(cand))
    w = resampling_weights(lp, T, axis=0)
    idx = _pick(w, rng.random(lp.shape[1:]), axis=0)
    return _take(cand, idx, axis=0)


def _take(cand, idx, axis):
    # idx has the candidate axis removed; event dims follow the batch dims
    extra = cand.ndim - idx.ndim - 1
    ix = np.expand_dims(idx, axis)
    ix = ix.reshape(ix.shape + (1,) * extra)
    return np.squeeze(np.take_along_axis(cand, ix, axis=axis), axis=axis)


# -- grid quadrature ------------------------------------------------------

@dataclass
class Grid:
    """Regular 1-D or 2-D grid with trapezoid weights."""

    axes: tuple
    points: np.ndarray   # (*grid_shape, d) or (n,) for 1-D
    weights: np.ndarray  # grid_shape

    @property
    def dim(self):
        return len(self.axes)

    @property
    def spacing(self):
        return tuple(a[1] - a[0] for a in self.axes)

    @classmethod
    def make(cls, window, n) -> Grid:
        window = np.atleast_2d(np.asarray(window, dtype=np.float64))
        axes = tuple(np.linspace(lo, hi, n) for lo, hi in window)
        ws = []
        for a in axes:
            w = np.full(len(a), a[1] - a[0])
            w[[0, -1]] *= 0.5
            ws.append(w)
        if len(axes) == 1:
            return cls(axes, axes[0], ws[0])
        gx, gy = np.meshgrid(*axes, indexing="ij")
        return cls(axes, np.stack([gx, gy], -1), np.outer(*ws))


def tempered_log_density_grid(dist, grid: Grid, T) -> np.ndarray:
    """Quadrature-normalized log p_T on the grid."""
    q = tempered_log_density_unnormalized(dist, grid.points, T)
    return q - logsumexp(q, b=grid.weights)


def _local_maxima(values: np.ndarray) -> np.ndarray:
    """Boolean mask of strict interior local maxima (4-neighbour in 2-D)."""
    mask = np.zeros(values.shape, dtype=bool)
    inner = tuple(slice(1, -1) for _ in values.shape)
    core = values[inner]
    ok = np.ones(core.shape, dtype=bool)
    for ax in range(values.ndim):
        lo = list(inner)
        hi = list(inner)
        lo[ax] = slice(0, -2)
        hi[ax] = slice(2, None)
        ok &= (core > values[tuple(lo)]) & (core > values[tuple(hi)])
    mask[inner] = ok
    return mask


def _ks_vs_uniform(log_pt, grid: Grid) -> float:
    """Sup-distance between the grid CDF of p_T and the uniform CDF, per axis."""
    p = np.exp(log_pt - logsumexp(log_pt, b=grid.weights)) * grid.weights
    p = p / p.sum()
    worst = 0.0
    for ax, a in enumerate(grid.axes):
        other = tuple(i for i in range(p.ndim) if i != ax)
        marg = p.sum(axis=other) if other else p
        F = np.cumsum(marg)
        # trapezoid cells: compare at cell centres of the uniform reference
        w = grid.weights if grid.dim == 1 else np.full(len(a), a[1] - a[0])
        if grid.dim > 1:
            w[[0, -1]] *= 0.5
        U = np.cumsum(w) / w.sum()
        worst = max(worst, float(np.abs(F - U).max()))
    return worst


@dataclass
class PropertyCheck:
    name: str
    T: float
    value: float
    threshold: float
    passed: bool
    note: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<18} T={self.T:<8g} value={self.value:.6g} threshold={self.threshold:g} {self.note}".rstrip()


@dataclass
class PropertyReport:
    checks: list[PropertyCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def by_name(self, name) -> list[PropertyCheck]:
        return [c for c in self.checks if c.name == name]

    def __str__(self):
        return "\n".join(c.line() for c in self.checks)


def gmm_windows(params, wide=12.0, trunc=5.0):
    """Quadrature and truncation windows spanning every component ± k sigma."""
    m = params.means.reshape(-1, params.dim)
    s = params.scales.reshape(-1, params.dim)
    quad = np.stack([(m - wide * s).min(0), (m + wide * s).max(0)], -1)
    tr = np.stack([(m - trunc * s).min(0), (m + trunc * s).max(0)], -1)
    return quad, tr


def verify_theorem_properties(dist, T_list=(0.1, 1.0, 10.0), *, window, trunc_window=None,
                              n_grid=None, mode_radius=0.1, mode_mass=0.99, T_select=0.01,
                              T_uniform=100.0, ks_threshold=0.05, n_score_points=50,
                              score_tol=1e-3, invariance_tol=1e-10, seed=0) -> PropertyReport:
    """Grid-quadrature checks of the tempered-transform properties.

    ``window`` bounds the quadrature used for normalization; it must hold
    essentially all of p's mass. The high-temperature uniformity check
    runs on ``trunc_window`` only, since p may have unbounded support.
    """
    window = np.atleast_2d(np.asarray(window, dtype=np.float64))
    dim = window.shape[0]
    n_grid = n_grid or (20001 if dim == 1 else 801)
    grid = Grid.make(window, n_grid)
    report = PropertyReport()
    log_p = np.asarray(dist.log_density(grid.points))
    p = np.exp(log_p)

    # temperature one: normalized p_1 equals p
    lp1 = tempered_log_density_grid(dist, grid, 1.0)
    diff = float(np.abs(np.exp(lp1) - p).max())
    report.checks.append(PropertyCheck("t1_invariance", 1.0, diff, invariance_tol, diff < invariance_tol))

    base_modes = np.argwhere(_local_maxima(log_p))
    step = max(grid.spacing)
    rng = np.random.default_rng(seed)
    probe = window[:, 0] + (window[:, 1] - window[:, 0]) * rng.uniform(0.1, 0.9, size=(n_score_points, dim))
    if dim == 1:
        probe = probe[:, 0]
    for T in T_list:
        T = check_temperature(T)
        lpt = tempered_log_density_grid(dist, grid, T)
        modes = np.argwhere(_local_maxima(lpt))
        if len(modes) == len(base_modes):
            dist_idx = np.abs(np.sort(modes, 0) - np.sort(base_modes, 0)).max() if len(modes) else 0
            ok = dist_idx <= 1
        else:
            dist_idx, ok = np.inf, False
        report.checks.append(PropertyCheck(
            "mode_conservation", T, float(dist_idx) * step, step, bool(ok),
            f"{len(base_modes)} modes of p, {len(modes)} of p_T"))

        err = _score_scaling_error(dist, probe, T)
        report.checks.append(PropertyCheck("score_scaling", T, err, score_tol, err < score_tol))

    # mode selection
    lps = tempered_log_density_grid(dist, grid, T_select)
    top = log_p >= log_p.max() - 1e-9
    top_pts = grid.points[top] if dim > 1 else grid.points[top][:, None]
    pts = grid.points if dim > 1 else grid.points[..., None]
    near = np.zeros(log_p.shape, dtype=bool)
    for m in top_pts:
        near |= np.linalg.norm(pts - m, axis=-1) <= mode_radius + 1e-12
    mass = float(np.sum(np.exp(lps) * grid.weights * near))
    report.checks.append(PropertyCheck(
        "mode_selection", T_select, mass, mode_mass, mass >= mode_mass, f"radius {mode_radius}"))

    # high-temperature uniformity on the truncation window
    if trunc_window is not None:
        tgrid = Grid.make(trunc_window, n_grid)
        lpu = tempered_log_density_unnormalized(dist, tgrid.points, T_uniform)
        ks = _ks_vs_uniform(lpu, tgrid)
        report.checks.append(PropertyCheck(
            "uniform_high_T", T_uniform, ks, ks_threshold, ks < ks_threshold, "truncated window"))
    return report


def _score_scaling_error(dist, probe, T, h=1e-5) -> float:
    """Max relative error between d/dx log p_T (finite differences) and score(p)/T."""
    if hasattr(dist, "score"):
        base = np.asarray(dist.score(probe))
    else:
        base = _fd_grad(lambda x: np.asarray(dist.log_density(x)), probe, h)
    fd = _fd_grad(lambda x: tempered_log_density_unnormalized(dist, x, T), probe, h)
    expected = base / T
    return float((np.abs(fd - expected) / (np.abs(expected) + 1e-8)).max())


def _fd_grad(f, x, h):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return (f(x + h) - f(x - h)) / (2 * h)
    g = np.empty_like(x)
    for j in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[j] = h
        g[..., j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


# -- demo -----------------------------------------------------------------

@dataclass
class DemoConfig:
    weights: tuple = (0.7, 0.3)
    means: tuple = (-2.0, 3.0)
    sigmas: tuple = (1.0, 1.0)
    temps: tuple = DEMO_TEMPERATURES
    n_candidates: int = DEMO_CANDIDATES
    n_draws: int = 5000
    n_bins: int = 60
    seed: int = 0


@dataclass
class DemoResult:
    config: DemoConfig
    x: np.ndarray
    densities: dict     # T -> normalized p_T on x
    samples: dict       # T -> tempered draws
    bin_edges: np.ndarray
    histograms: dict    # T -> density-normalized histogram


def tempered_demo(config: DemoConfig) -> DemoResult:
    """Analytic p_T curves plus tempered-sample histograms for a 1-D mixture."""
    from .gmm import gmm1d

    dist = gmm1d(config.weights, config.means, config.sigmas)
    quad, trunc = gmm_windows(dist, wide=12.0, trunc=5.0)
    grid = Grid.make(quad, 20001)
    lo, hi = trunc[0]
    x = np.linspace(lo, hi, 801)
    rng = np.random.default_rng(config.seed)
    edges = np.linspace(lo, hi, config.n_bins + 1)
    densities, samples, hists = {}, {}, {}
    for T in config.temps:
        T = check_temperature(T)
        lq = tempered_log_density_unnormalized(dist, grid.points, T)
        log_z = logsumexp(lq, b=grid.weights)
        densities[T] = np.exp(tempered_log_density_unnormalized(dist, x, T) - log_z)
        draws = tempered_sample(dist, T, config.n_candidates, rng, size=config.n_draws)
        samples[T] = draws
        hists[T] = np.histogram(draws, bins=edges, density=True)[0]
    return DemoResult(config, x, densities, samples, edges, hists)
