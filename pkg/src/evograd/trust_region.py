"""Trust-region coordinate maps, output normalization and the shrink/shift lifecycle.

Optimizers work in *normalized* coordinates ``u``; a :class:`TrustRegion`
maps them into the search domain. With the ``tanh`` map the image is the
open box ``center +- scale``, which is kept inside the domain. The
``linear`` map is unbounded and is clipped to the domain instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

MapKind = Literal["tanh", "linear"]
MAP_KINDS = ("tanh", "linear")

MOVEMENT_FACTOR = 0.2
DEFAULT_OUTLIER_QUANTILE = 0.1
SCALE_FLOOR = 1e-12


class OutsideTrustRegion(ValueError):
    """A search-space point has no preimage under the trust-region map."""


@dataclass(frozen=True, eq=False)
class TrustRegion:
    center: np.ndarray
    scale: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    map_kind: MapKind = "tanh"
    generation: int = 0

    def __post_init__(self):
        if self.map_kind not in MAP_KINDS:
            raise ValueError(f"map_kind must be one of {MAP_KINDS}, got {self.map_kind!r}")
        if np.any(~(np.asarray(self.scale) > 0)):
            raise ValueError("trust region scale must be positive")

    @classmethod
    def from_bounds(cls, lower, upper, map_kind: MapKind = "tanh") -> "TrustRegion":
        """The generation-0 region covering the whole domain."""
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        if lower.shape != upper.shape or np.any(upper <= lower):
            raise ValueError("invalid bounds")
        return cls(center=0.5 * (lower + upper), scale=0.5 * (upper - lower),
                   lower=lower, upper=upper, map_kind=map_kind)

    @property
    def dim(self) -> int:
        return self.center.size

    def to_search(self, u) -> np.ndarray:
        return to_search(self, u)

    def from_search(self, x) -> np.ndarray:
        return from_search(self, x)

    def in_image(self, x) -> np.ndarray:
        """Boolean mask of points that have a preimage (rows for a batch)."""
        x = np.asarray(x, dtype=float)
        if self.map_kind == "tanh":
            inside = np.abs(x - self.center) < self.scale
        else:
            inside = (x >= self.lower) & (x <= self.upper)
        return np.all(inside, axis=-1)

    def event_row(self, kind: str) -> dict:
        return {
            "generation": self.generation,
            "kind": kind,
            "center": self.center.tolist(),
            "scale": self.scale.tolist(),
        }


def to_search(tr: TrustRegion, u) -> np.ndarray:
    """Map normalized coordinates into the search domain (total function)."""
    u = np.asarray(u, dtype=float)
    if tr.map_kind == "tanh":
        return tr.center + tr.scale * np.tanh(u)
    return np.clip(tr.center + tr.scale * u, tr.lower, tr.upper)


def from_search(tr: TrustRegion, x) -> np.ndarray:
    """Inverse of :func:`to_search` on the image.

    Raises
    ------
    OutsideTrustRegion
        For the tanh map when any coordinate sits on or beyond the
        asymptote ``center +- scale``; for the linear map when the point
        lies outside the domain.
    """
    x = np.asarray(x, dtype=float)
    v = (x - tr.center) / tr.scale
    if tr.map_kind == "tanh":
        if not np.all(np.abs(v) < 1.0):
            raise OutsideTrustRegion("point lies on or outside the tanh image")
        return np.arctanh(v)
    if np.any(x < tr.lower) or np.any(x > tr.upper):
        raise OutsideTrustRegion("point lies outside the search domain")
    return v


def shrink_to(tr: TrustRegion, best, gamma_alpha: float) -> TrustRegion:
    """New region centered at ``best`` with ``scale * gamma_alpha``.

    For the tanh map the center is clamped just enough to keep the image
    ``center +- scale`` inside the domain; it equals ``best`` whenever
    ``best`` is at least ``scale`` away from every bound. ``gamma_alpha=1``
    gives a pure shift.
    """
    if not 0 < gamma_alpha <= 1:
        raise ValueError("gamma_alpha must lie in (0, 1]")
    best = np.asarray(best, dtype=float)
    scale = tr.scale * gamma_alpha
    center = best.copy()
    if tr.map_kind == "tanh":
        lo = tr.lower + scale
        hi = tr.upper - scale
        mid = 0.5 * (tr.lower + tr.upper)
        # a scale wider than the half-width can only sit at the domain center
        center = np.where(lo <= hi, np.clip(best, np.minimum(lo, hi), np.maximum(lo, hi)), mid)
    return replace(tr, center=center, scale=scale, generation=tr.generation + 1)


def shift_to(tr: TrustRegion, best) -> TrustRegion:
    return shrink_to(tr, best, 1.0)


@dataclass(frozen=True)
class ConvergenceEvent:
    kind: Literal["interior", "boundary"]
    movement: float


def movement_threshold(dim: int, factor: float = MOVEMENT_FACTOR) -> float:
    return factor * math.sqrt(dim)


def classify_convergence(movement: float, dim: int, factor: float = MOVEMENT_FACTOR) -> ConvergenceEvent:
    """``boundary`` when the path covered since the last event reaches ``0.2 * sqrt(dim)``."""
    if movement < 0:
        raise ValueError("movement must be non-negative")
    kind = "boundary" if movement >= movement_threshold(dim, factor) else "interior"
    return ConvergenceEvent(kind=kind, movement=float(movement))


@dataclass(frozen=True)
class ValueNormalizer:
    """Affine output map ``(y - shift) / scale`` fitted on quantile-clipped values."""

    shift: float
    scale: float
    outlier_quantile: float = DEFAULT_OUTLIER_QUANTILE
    clip_low: float = -math.inf
    clip_high: float = math.inf

    def __call__(self, y):
        return (np.asarray(y, dtype=float) - self.shift) / self.scale

    def inverse(self, z):
        return np.asarray(z, dtype=float) * self.scale + self.shift


def fit_value_normalizer(ys, outlier_quantile: float = DEFAULT_OUTLIER_QUANTILE) -> ValueNormalizer:
    """Clip to the ``[q, 1-q]`` quantile band, then center on the median and
    scale by the band width (floored at ``1e-12``)."""
    ys = np.asarray(ys, dtype=float).ravel()
    if ys.size < 2:
        raise ValueError("need at least two values to fit a normalizer")
    if not 0 < outlier_quantile < 0.5:
        raise ValueError("outlier_quantile must lie in (0, 0.5)")
    ys = ys[np.isfinite(ys)]
    if ys.size == 0:
        raise ValueError("no finite values to fit")
    lo, hi = np.quantile(ys, [outlier_quantile, 1.0 - outlier_quantile])
    clipped = np.clip(ys, lo, hi)
    shift = float(np.median(clipped))
    scale = max(float(hi - lo), SCALE_FLOOR)
    return ValueNormalizer(shift=shift, scale=scale, outlier_quantile=outlier_quantile,
                           clip_low=float(lo), clip_high=float(hi))
