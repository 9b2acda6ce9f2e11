"""BBOB-style synthetic test functions, budget accounting and normalized scores.

The raw functions (``sphere``, ``rosenbrock`` ...) are the textbook forms,
vectorized over the last axis. :func:`make_suite` wraps them into
:class:`Problem` instances with a per-(name, dim) seeded optimum shift and,
where applicable, a seeded rotation.
"""

from __future__ import annotations

import json
import logging
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .numerics import make_rng

logger = logging.getLogger(__name__)

SUPPORTED_DIMS = (2, 5, 10, 20, 40, 80)
DEFAULT_BOUNDS = (-5.0, 5.0)
SOLVED_THRESHOLD = 0.01
Y_MAX_SAMPLES = 10_000


class BudgetExhausted(RuntimeError):
    """Raised by :class:`BudgetMeter` once every allowed evaluation is spent."""


class ConfigurationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# raw functions, x has shape (..., n)


def sphere(x):
    x = np.asarray(x, dtype=float)
    return np.sum(x * x, axis=-1)


def ellipsoid(x, condition: float = 1e6):
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    if n == 1:
        coef = np.ones(1)
    else:
        coef = condition ** (np.arange(n) / (n - 1))
    return np.sum(coef * x * x, axis=-1)


def rosenbrock(x):
    x = np.asarray(x, dtype=float)
    a, b = x[..., :-1], x[..., 1:]
    return np.sum(100.0 * (b - a * a) ** 2 + (1.0 - a) ** 2, axis=-1)


def rastrigin(x):
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    return 10.0 * n + np.sum(x * x - 10.0 * np.cos(2 * np.pi * x), axis=-1)


def ackley(x):
    x = np.asarray(x, dtype=float)
    mean_sq = np.mean(x * x, axis=-1)
    mean_cos = np.mean(np.cos(2 * np.pi * x), axis=-1)
    out = -20.0 * np.exp(-0.2 * np.sqrt(mean_sq)) - np.exp(mean_cos) + 20.0 + np.e
    # rounding near the optimum can go slightly negative
    return np.maximum(out, 0.0)


def schaffer_f7(x):
    """Schaffer's F7 on consecutive coordinate pairs (needs n >= 2)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    if n < 2:
        raise ValueError("schaffer_f7 needs at least two coordinates")
    s = np.sqrt(x[..., :-1] ** 2 + x[..., 1:] ** 2)
    terms = np.sqrt(s) + np.sqrt(s) * np.sin(50.0 * s**0.2) ** 2
    return (np.sum(terms, axis=-1) / (n - 1)) ** 2


@dataclass(frozen=True)
class Peaks:
    """Gaussian peaks for the Gallagher-style function (peak 0 is the global one)."""

    centers: np.ndarray  # (k, n)
    heights: np.ndarray  # (k,)
    curvatures: np.ndarray  # (k, n), diagonal in the rotated frame
    rotation: np.ndarray  # (n, n)


def gallagher(x, peaks: Peaks):
    """``(10 - max_i h_i exp(-q_i(x) / 2n))**2`` with anisotropic quadratic forms ``q_i``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    n = X.shape[-1]
    Z = X @ peaks.rotation.T
    Zc = peaks.centers @ peaks.rotation.T
    best = np.full(X.shape[0], -np.inf)
    # chunk over peaks to bound memory for large batches
    for start in range(0, len(peaks.heights), 16):
        sl = slice(start, start + 16)
        diff = Z[:, None, :] - Zc[None, sl, :]
        q = np.sum(peaks.curvatures[None, sl, :] * diff * diff, axis=-1)
        vals = peaks.heights[None, sl] * np.exp(-q / (2.0 * n))
        best = np.maximum(best, vals.max(axis=1))
    out = (10.0 - best) ** 2
    return out[0] if single else out


# ---------------------------------------------------------------------------


def _name_seed(*parts) -> int:
    return zlib.crc32(":".join(str(p) for p in parts).encode())


def random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix from the QR decomposition of a Gaussian matrix."""
    A = rng.standard_normal((dim, dim))
    Q, R = np.linalg.qr(A)
    # sign fix makes the distribution Haar and the result unique
    return Q * np.sign(np.diag(R))


def make_gallagher_peaks(dim: int, rng: np.random.Generator, n_peaks: int = 101) -> Peaks:
    rotation = random_rotation(dim, rng)
    centers = rng.uniform(-4.9, 4.9, size=(n_peaks, dim))
    centers[0] = rng.uniform(-3.9, 3.9, size=dim)
    heights = np.empty(n_peaks)
    heights[0] = 10.0
    heights[1:] = 1.1 + 8.0 * np.arange(n_peaks - 1) / (n_peaks - 2)
    alphas = 1000.0 ** (2.0 * rng.permutation(n_peaks - 1) / (n_peaks - 2))
    alphas = np.concatenate([[1000.0], alphas])
    curvatures = np.empty((n_peaks, dim))
    for i, a in enumerate(alphas):
        diag = a ** (0.5 * np.arange(dim) / max(dim - 1, 1) - 0.25)
        curvatures[i] = rng.permutation(diag)
    return Peaks(centers=centers, heights=heights, curvatures=curvatures, rotation=rotation)


@dataclass(frozen=True, eq=False)
class Problem:
    """A bounded minimization problem with a known optimum.

    ``func`` maps a batch ``(k, n)`` to ``(k,)`` values. Instances are
    immutable and safe to evaluate concurrently.
    """

    name: str
    dim: int
    lower: np.ndarray
    upper: np.ndarray
    func: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    x_opt: np.ndarray | None = field(default=None, repr=False)
    f_opt: float | None = None
    x_start: np.ndarray | None = field(default=None, repr=False)

    def evaluate(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"{self.name}: expected shape ({self.dim},), got {x.shape}")
        return float(self.func(x[None, :])[0])

    def evaluate_batch(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.asarray(self.func(X), dtype=float)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def key(self) -> str:
        return f"{self.name}-{self.dim}d"

    @property
    def y_min(self) -> float:
        if self.f_opt is None:
            raise ValueError(f"{self.key} has no known optimum")
        return float(self.f_opt)

    @property
    def y_max(self) -> float:
        return empirical_y_max(self)

    def normalized(self, y: float) -> "NormalizedScore":
        return normalized_value(y, self.y_min, self.y_max)

    def manifest(self) -> dict:
        return {
            "name": self.name,
            "dim": self.dim,
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "y_min": self.y_min,
            "y_max": self.y_max,
        }


_FUNCTIONS = ("sphere", "ellipsoid", "rosenbrock", "rastrigin", "ackley", "schaffer", "gallagher")


def suite_function_names() -> tuple[str, ...]:
    return _FUNCTIONS


def make_problem(name: str, dim: int, bounds: tuple[float, float] = DEFAULT_BOUNDS) -> Problem:
    """Build one suite problem; shifts and rotations depend only on ``(name, dim)``."""
    if dim not in SUPPORTED_DIMS:
        raise ConfigurationError(f"unsupported dimension {dim}; choose from {SUPPORTED_DIMS}")
    if name not in _FUNCTIONS:
        raise ConfigurationError(f"unknown function {name!r}; choose from {_FUNCTIONS}")
    rng = make_rng(_name_seed(name, dim))
    lower = np.full(dim, float(bounds[0]))
    upper = np.full(dim, float(bounds[1]))
    x_opt = rng.uniform(-4.0, 4.0, size=dim)

    if name == "sphere":
        def func(X, s=x_opt):
            return sphere(X - s)
    elif name == "ellipsoid":
        R = random_rotation(dim, rng)

        def func(X, s=x_opt, R=R):
            return ellipsoid((X - s) @ R.T)
    elif name == "rosenbrock":
        x_opt = rng.uniform(-3.0, 3.0, size=dim)

        def func(X, s=x_opt):
            return rosenbrock(X - s + 1.0)
    elif name == "rastrigin":
        R = random_rotation(dim, rng)

        def func(X, s=x_opt, R=R):
            return rastrigin((X - s) @ R.T)
    elif name == "ackley":
        def func(X, s=x_opt):
            return ackley(X - s)
    elif name == "schaffer":
        R = random_rotation(dim, rng)

        def func(X, s=x_opt, R=R):
            return schaffer_f7((X - s) @ R.T)
    else:  # gallagher
        peaks = make_gallagher_peaks(dim, rng)
        x_opt = peaks.centers[0].copy()

        def func(X, peaks=peaks):
            return gallagher(X, peaks)

    return Problem(name=name, dim=dim, lower=lower, upper=upper, func=func,
                   x_opt=x_opt, f_opt=0.0)


def make_suite(dims, names=None) -> list[Problem]:
    """Every suite function at every requested dimension, in a fixed order."""
    names = _FUNCTIONS if names is None else tuple(names)
    dims = list(dims)
    for d in dims:
        if d not in SUPPORTED_DIMS:
            raise ConfigurationError(f"unsupported dimension {d}; choose from {SUPPORTED_DIMS}")
    return [make_problem(name, d) for d in dims for name in names]


def problem_from_key(key: str) -> Problem:
    name, _, dim = key.rpartition("-")
    return make_problem(name, int(dim.rstrip("d")))


# ---------------------------------------------------------------------------
# normalization


class NormalizedScore(NamedTuple):
    value: float
    solved: bool


def normalized_value(y: float, y_min: float, y_max: float,
                     threshold: float = SOLVED_THRESHOLD) -> NormalizedScore:
    """``(y - y_min) / (y_max - y_min)`` clamped to ``[0, 1]``; solved below ``threshold``."""
    if not y_max > y_min:
        raise ValueError(f"y_max ({y_max}) must exceed y_min ({y_min})")
    value = (y - y_min) / (y_max - y_min)
    value = float(min(max(value, 0.0), 1.0)) if not np.isnan(value) else 1.0
    return NormalizedScore(value, value < threshold)


def _cache_dir() -> Path | None:
    env = os.environ.get("EVOGRAD_CACHE_DIR")
    if env:
        return Path(env)
    base = os.environ.get("XDG_CACHE_HOME") or os.path.join(os.path.expanduser("~"), ".cache")
    return Path(base) / "evograd"


_Y_MAX_MEMO: dict[str, float] = {}


def compute_y_max(problem: Problem, samples: int = Y_MAX_SAMPLES) -> float:
    rng = make_rng(_name_seed("y_max", problem.name, problem.dim))
    X = rng.uniform(problem.lower, problem.upper, size=(samples, problem.dim))
    return float(np.max(problem.evaluate_batch(X)))


def empirical_y_max(problem: Problem) -> float:
    """Max over 10^4 seeded uniform samples in the domain, memoized and cached on disk."""
    key = problem.key
    if key in _Y_MAX_MEMO:
        return _Y_MAX_MEMO[key]
    cache = _cache_dir()
    path = cache / f"ymax-{key}.json" if cache else None
    if path is not None and path.exists():
        try:
            value = float(json.loads(path.read_text())["y_max"])
            _Y_MAX_MEMO[key] = value
            return value
        except (OSError, ValueError, KeyError):
            logger.warning("ignoring unreadable y_max cache %s", path)
    value = compute_y_max(problem)
    _Y_MAX_MEMO[key] = value
    if path is not None:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(f".tmp{os.getpid()}")
            tmp.write_text(json.dumps({"problem": key, "y_max": value}))
            tmp.replace(path)
        except OSError:
            logger.debug("could not write y_max cache to %s", path)
    return value


def suite_manifest(problems) -> list[dict]:
    return [p.manifest() for p in problems]


def write_manifest(problems, path) -> None:
    Path(path).write_text(json.dumps(suite_manifest(problems), indent=2))


# ---------------------------------------------------------------------------
# budget


class BudgetMeter:
    """Counts objective evaluations against a fixed total."""

    def __init__(self, total: int):
        if total < 0:
            raise ValueError("total budget must be non-negative")
        self.total = int(total)
        self.used = 0

    @property
    def remaining(self) -> int:
        return self.total - self.used

    def evaluate(self, problem: Problem, x) -> float:
        if self.used >= self.total:
            raise BudgetExhausted(f"budget of {self.total} evaluations exhausted")
        value = problem.evaluate(x)
        self.used += 1
        return value

    def evaluate_many(self, problem: Problem, X) -> np.ndarray:
        """Evaluate rows of ``X`` while budget lasts; may return fewer values than rows."""
        X = np.atleast_2d(X)
        k = min(len(X), self.remaining)
        if k <= 0:
            raise BudgetExhausted(f"budget of {self.total} evaluations exhausted")
        values = problem.evaluate_batch(X[:k])
        self.used += k
        return values


def evaluate_metered(problem: Problem, meter: BudgetMeter, x) -> float:
    return meter.evaluate(problem, x)
