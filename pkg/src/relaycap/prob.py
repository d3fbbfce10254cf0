"""Probability containers and information measures on finite alphabets.

All logarithms are natural; rates are in nats until the reporting layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

SIMPLEX_TOL = 1e-12
# Stand-in for +inf decoding costs; exp(-zeta * COST_SENTINEL) underflows to 0.
COST_SENTINEL = 1e9
LOG_FLOOR = 1e-300

NATS_PER_BIT = np.log(2.0)


class ProbabilityError(ValueError):
    """Raised when an input violates a simplex or shape invariant."""


def to_bits(nats):
    return nats / NATS_PER_BIT


def to_nats(bits):
    return bits * NATS_PER_BIT


def xlogy(x, y):
    """Elementwise x*log(y) with the convention 0*log(anything) = 0."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    out = np.zeros(np.broadcast(x, y).shape)
    mask = np.broadcast_to(x != 0, out.shape)
    with np.errstate(divide="ignore"):
        out[mask] = np.broadcast_to(x, out.shape)[mask] * np.log(np.broadcast_to(y, out.shape)[mask])
    return out


@dataclass(frozen=True)
class Alphabet:
    """Ordered finite alphabet, optionally embedded in the plane."""

    labels: tuple
    points: Optional[np.ndarray] = None

    def __post_init__(self):
        labels = tuple(self.labels)
        if len(labels) < 1:
            raise ProbabilityError("alphabet must contain at least one symbol")
        if len(set(labels)) != len(labels):
            raise ProbabilityError("alphabet labels must be distinct")
        object.__setattr__(self, "labels", labels)
        if self.points is not None:
            pts = np.array(self.points, dtype=float)
            if pts.shape != (len(labels), 2):
                raise ProbabilityError(
                    f"points must have shape ({len(labels)}, 2), got {pts.shape}"
                )
            pts.setflags(write=False)
            object.__setattr__(self, "points", pts)

    @classmethod
    def of_size(cls, n: int, points=None) -> "Alphabet":
        return cls(tuple(range(n)), points)

    @property
    def size(self) -> int:
        return len(self.labels)

    def __len__(self):
        return len(self.labels)


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Distribution:
    """Probability vector; validated on construction, never silently renormalized."""

    mass: np.ndarray

    def __post_init__(self):
        mass = _frozen(self.mass)
        if mass.ndim != 1 or mass.size == 0:
            raise ProbabilityError("distribution mass must be a non-empty vector")
        if not np.all(np.isfinite(mass)) or np.any(mass < 0):
            raise ProbabilityError("distribution entries must be finite and >= 0")
        total = mass.sum()
        if abs(total - 1.0) > SIMPLEX_TOL:
            raise ProbabilityError(f"distribution sums to {total!r}, expected 1")
        object.__setattr__(self, "mass", mass)

    @classmethod
    def uniform(cls, n: int) -> "Distribution":
        return cls(np.full(n, 1.0 / n))

    def __len__(self):
        return self.mass.size


@dataclass(frozen=True)
class Channel:
    """Row-stochastic transition matrix between two alphabets."""

    kernel: np.ndarray
    input: Optional[Alphabet] = None
    output: Optional[Alphabet] = None

    def __post_init__(self):
        kernel = _frozen(self.kernel)
        if kernel.ndim != 2 or 0 in kernel.shape:
            raise ProbabilityError("channel kernel must be a non-empty matrix")
        if not np.all(np.isfinite(kernel)) or np.any(kernel < 0):
            raise ProbabilityError("channel entries must be finite and >= 0")
        rows = kernel.sum(axis=1)
        bad = np.flatnonzero(np.abs(rows - 1.0) > SIMPLEX_TOL)
        if bad.size:
            raise ProbabilityError(
                f"channel row {bad[0]} sums to {rows[bad[0]]!r}, expected 1"
            )
        if self.input is None:
            object.__setattr__(self, "input", Alphabet.of_size(kernel.shape[0]))
        if self.output is None:
            object.__setattr__(self, "output", Alphabet.of_size(kernel.shape[1]))
        if (len(self.input), len(self.output)) != kernel.shape:
            raise ProbabilityError("alphabet sizes do not match kernel shape")
        object.__setattr__(self, "kernel", kernel)

    @property
    def shape(self):
        return self.kernel.shape


@dataclass(frozen=True)
class DecodingMetric:
    """Mismatched decoding costs d(x, z); +inf entries are mapped to COST_SENTINEL."""

    costs: np.ndarray

    def __post_init__(self):
        costs = np.array(self.costs, dtype=float)
        if costs.ndim != 2 or 0 in costs.shape:
            raise ProbabilityError("metric must be a non-empty matrix")
        if np.any(np.isnan(costs)) or np.any(costs == -np.inf):
            raise ProbabilityError("metric entries must be finite or +inf")
        costs[costs == np.inf] = COST_SENTINEL
        object.__setattr__(self, "costs", _frozen(costs))

    @property
    def forbidden(self) -> np.ndarray:
        """Mask of entries standing in for +inf."""
        return self.costs >= COST_SENTINEL

    @property
    def shape(self):
        return self.costs.shape


def _as_array(x) -> np.ndarray:
    if isinstance(x, Distribution):
        return x.mass
    if isinstance(x, Channel):
        return x.kernel
    if isinstance(x, DecodingMetric):
        return x.costs
    return np.asarray(x, dtype=float)


def compose_joint(p, theta, omega) -> np.ndarray:
    """Joint P_XZ(x, z) = sum_y P_{Z|Y}(z|y) Q_{Y|X}(y|x) P_X(x)."""
    p, theta, omega = _as_array(p), _as_array(theta), _as_array(omega)
    if theta.shape[0] != p.size or theta.shape[1] != omega.shape[0]:
        raise ProbabilityError(
            f"dimension mismatch: p {p.shape}, theta {theta.shape}, omega {omega.shape}"
        )
    return p[:, None] * (theta @ omega)


def entropy(p) -> float:
    """Shannon entropy in nats, 0 log 0 = 0. Accepts vectors or joint matrices."""
    p = _as_array(p).ravel()
    return float(-xlogy(p, p).sum())


def mutual_information(joint) -> float:
    """I between the row and column variables of a joint matrix, in nats."""
    joint = _as_array(joint)
    px = joint.sum(axis=1)
    pz = joint.sum(axis=0)
    rows, cols = np.nonzero(joint > 0)
    mass = joint[rows, cols]
    log_ratio = np.log(mass) - np.log(px[rows]) - np.log(pz[cols])
    return float(max(np.sum(mass * log_ratio), 0.0))


def kl_divergence(p: Sequence[float], q: Sequence[float]) -> float:
    p, q = _as_array(p), _as_array(q)
    mask = p > 0
    if np.any(q[mask] == 0):
        return float("inf")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def logsumexp(a, axis=None, keepdims=False):
    """log(sum(exp(a))) along ``axis``; all -inf slices give -inf."""
    a = np.asarray(a, dtype=float)
    top = np.max(a, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = np.log(np.sum(np.exp(a - top), axis=axis, keepdims=True)) + top
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out
