"""Builders for the experimental channels, constellations, grids and metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special

from .prob import COST_SENTINEL, LOG_FLOOR, Alphabet, Channel, DecodingMetric, ProbabilityError, logsumexp


def quaternary_channel(epsilon: float, transition=None) -> Channel:
    """Symmetric quaternary channel: 1 - eps on the diagonal, eps/3 elsewhere.

    ``transition`` overrides the law with an arbitrary 4x4 row-stochastic matrix.
    """
    if transition is not None:
        kernel = np.asarray(transition, dtype=float)
        if kernel.shape != (4, 4):
            raise ProbabilityError("quaternary transition override must be 4x4")
        return Channel(kernel)
    if not 0.0 <= epsilon <= 0.75:
        raise ValueError(f"epsilon must lie in [0, 0.75], got {epsilon}")
    kernel = np.full((4, 4), epsilon / 3.0)
    np.fill_diagonal(kernel, 1.0 - epsilon)
    return Channel(kernel)


def metric_from_decoding_rule(epsilon: float) -> DecodingMetric:
    """d = -ln q with q = 1 - eps (x = z) and eps/3 (x != z); not normalized."""
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    off = -math.log(epsilon / 3.0) if epsilon > 0 else math.inf
    costs = np.full((4, 4), off)
    np.fill_diagonal(costs, -math.log1p(-epsilon))
    return DecodingMetric(costs)


def constellation(scheme: str) -> Alphabet:
    """Unit-average-power QPSK or 16QAM."""
    key = scheme.upper().replace("-", "")
    if key == "QPSK":
        angles = math.pi / 4 + np.arange(4) * math.pi / 2
        pts = np.column_stack([np.cos(angles), np.sin(angles)])
    elif key == "16QAM":
        levels = np.array([-3.0, -1.0, 1.0, 3.0]) / math.sqrt(10.0)
        pts = np.array([(a, b) for a in levels for b in levels])
    else:
        raise ValueError(f"unknown scheme {scheme!r}; expected QPSK or 16QAM")
    return Alphabet(tuple(range(len(pts))), pts)


@dataclass(frozen=True)
class GridSpec:
    n_points: int = 2500
    half_width: float = 8.0

    def __post_init__(self):
        side = math.isqrt(self.n_points)
        if side * side != self.n_points or side < 2:
            raise ValueError(f"n_points must be a perfect square >= 4, got {self.n_points}")
        if not self.half_width > 0:
            raise ValueError("half_width must be > 0")

    @property
    def side(self) -> int:
        return math.isqrt(self.n_points)

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / (self.side - 1)


def grid_index(row: int, col: int, side: int) -> int:
    """0-based position of the point with first coordinate index ``row`` and second ``col``."""
    return row * side + col


def make_grid(spec: GridSpec) -> Alphabet:
    """Uniform square grid; point row*side + col sits at (-w + row*dz, -w + col*dz)."""
    side, dz, w = spec.side, spec.spacing, spec.half_width
    coords = -w + np.arange(side) * dz
    first, second = np.meshgrid(coords, coords, indexing="ij")
    pts = np.column_stack([first.ravel(), second.ravel()])
    return Alphabet(tuple(range(spec.n_points)), pts)


@dataclass(frozen=True)
class IqImbalanceParams:
    eta: float = 0.9
    theta: float = math.pi / 18
    snr_db: float = 10.0
    sigma_n: float = field(init=False)

    def __post_init__(self):
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")
        # SNR = 10 log10(1 / (2 sigma^2))
        object.__setattr__(self, "sigma_n", math.sqrt(0.5 * 10.0 ** (-self.snr_db / 10.0)))

    @property
    def gain(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.diag([1.0, self.eta]) @ np.array([[c, s], [-s, c]])


def _points(alphabet) -> np.ndarray:
    pts = alphabet.points if isinstance(alphabet, Alphabet) else alphabet
    if pts is None:
        raise ValueError("alphabet has no point coordinates")
    return np.asarray(pts, dtype=float)


def _squared_distances(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.sum(diff * diff, axis=-1)


def awgn_iq_channel(const, params: IqImbalanceParams, grid: GridSpec) -> Channel:
    """Gaussian density of Y = HX + N sampled on the grid, rows normalized.

    Entries far from every received point underflow to 0; a row whose whole
    mass underflows raises.
    """
    x = _points(const)
    y = make_grid(grid)
    received = x @ params.gain.T
    log_dens = -_squared_distances(received, y.points) / (2.0 * params.sigma_n**2)
    # the raw density of every grid point underflows: the grid misses the input
    lost = np.flatnonzero(log_dens.max(axis=1) < math.log(LOG_FLOOR))
    if lost.size:
        raise ValueError(f"grid captures no mass for input {int(lost[0])}; increase half_width")
    log_norm = logsumexp(log_dens, axis=1, keepdims=True)
    kernel = np.exp(log_dens - log_norm)
    kernel /= kernel.sum(axis=1, keepdims=True)
    in_alpha = const if isinstance(const, Alphabet) else Alphabet.of_size(len(x), x)
    return Channel(kernel, in_alpha, y)


def captured_mass(const, params: IqImbalanceParams, grid: GridSpec) -> np.ndarray:
    """Gaussian probability of the square covered by the grid cells, per input.

    Each grid point stands for a cell of side ``spacing``, so the covered
    square is [-w - spacing/2, w + spacing/2] on both axes.
    """
    received = _points(const) @ params.gain.T
    edge = grid.half_width + grid.spacing / 2.0
    scale = params.sigma_n * math.sqrt(2.0)
    lo = special.erf((-edge - received) / scale)
    hi = special.erf((edge - received) / scale)
    return np.prod((hi - lo) / 2.0, axis=1)


def mismatch_metric_awgn(const, grid: GridSpec, h_hat=None) -> DecodingMetric:
    """d(x, z) = |z - H_hat x|^2, H_hat = identity unless given."""
    x = _points(const)
    if h_hat is not None:
        x = x @ np.asarray(h_hat, dtype=float).T
    return DecodingMetric(_squared_distances(x, make_grid(grid).points))


__all__ = [
    "COST_SENTINEL",
    "GridSpec",
    "IqImbalanceParams",
    "awgn_iq_channel",
    "captured_mass",
    "constellation",
    "grid_index",
    "make_grid",
    "metric_from_decoding_rule",
    "mismatch_metric_awgn",
    "quaternary_channel",
]
