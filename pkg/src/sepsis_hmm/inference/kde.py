"""Marginal posterior modes via Gaussian kernel density estimates."""
from __future__ import annotations

import math
import warnings

import numpy as np

from ..model import VITALS, ModelParams, param_names, validate_params

GRID_POINTS = 512
MIN_SAMPLES = 10
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def silverman_bandwidth(x: np.ndarray) -> float:
    """1.06 * min(sd, IQR / 1.34) * n^(-1/5), falling back to sd when the IQR is 0."""
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = sd
    return 1.06 * spread * len(x) ** -0.2


def kde_density(x: np.ndarray, points, bandwidth: float, chunk: int = 64) -> np.ndarray:
    """Unnormalised Gaussian KDE evaluated at ``points`` (constant factors dropped)."""
    points = np.atleast_1d(np.asarray(points, dtype=float))
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        u = (points[s:s + chunk, None] - x[None, :]) / bandwidth
        out[s:s + chunk] = np.exp(-0.5 * u * u).sum(1)
    return out


def _golden_max(f, a: float, b: float, tol: float) -> float:
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def kde_map(samples) -> float:
    """Mode of the Silverman-bandwidth Gaussian KDE of ``samples``.

    Coarse search on a 512-point grid over [min, max], then golden-section
    refinement inside the neighbouring grid cells. Ties on the grid go to the
    smaller value.
    """
    # sorted so the density sums, and hence the result, ignore sample order
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    if len(x) < MIN_SAMPLES:
        raise ValueError(f"kde_map needs at least {MIN_SAMPLES} samples, got {len(x)}")
    if not np.all(np.isfinite(x)):
        raise ValueError("kde_map samples must be finite")
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        return lo
    h = silverman_bandwidth(x)
    grid = np.linspace(lo, hi, GRID_POINTS)
    dens = kde_density(x, grid, h)
    i = int(np.argmax(dens))
    cell = grid[1] - grid[0]
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, GRID_POINTS - 1)]
    best = _golden_max(lambda v: float(kde_density(x, [v], h)[0]), a, b, 1e-8 * cell)
    # refinement never moves to a lower density than the grid winner
    if kde_density(x, [best], h)[0] < dens[i]:
        return float(grid[i])
    return float(best)


def map_params(chain) -> ModelParams:
    """Marginal MAP of every scalar parameter of a PosteriorChain."""
    if len(chain) < MIN_SAMPLES:
        raise ValueError(f"chain has {len(chain)} samples; need at least {MIN_SAMPLES}")
    flat = {name: kde_map(chain.values[:, j]) for j, name in enumerate(param_names())}
    mp = ModelParams.from_flat(flat)
    bad = validate_params(mp)
    if bad:
        raise ValueError("MAP estimate violates parameter invariants: " + "; ".join(bad))
    if not state_order_ok(mp):
        warnings.warn("MAP heart-rate means are not increasing S1 < S2 < S3; "
                      "state labels may have switched", RuntimeWarning, stacklevel=2)
    return mp


def state_order_ok(mp: ModelParams) -> bool:
    """Severity labels are identified by heart rate rising with severity."""
    hr = mp.emission.mu[:, VITALS.index("hr")]
    return bool(np.all(np.diff(hr) > 0))
