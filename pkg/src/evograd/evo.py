"""CMA-ES core, importance-weight maps and the trust-region CMA baseline.

The strategy follows the textbook (mu/mu_w, lambda)-CMA-ES with cumulative
step-size adaptation, a rank-one term and the rank-mu covariance update.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from .numerics import DecompositionError, cholesky, gaussian_log_density, repair_covariance
from .objectives import BudgetExhausted, BudgetMeter, Problem
from .records import RunRecord
from .trust_region import OutsideTrustRegion, TrustRegion, from_search, shrink_to, to_search

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e14
TOLX = 1e-12
STALL_FACTOR = 30
DEFAULT_SIGMA0 = 0.5
SOFTMAX_TEMPERATURE = 0.1


class CmaResetSignal(RuntimeError):
    """Sampling failed even after repairing the covariance; the caller should reinitialize."""


def default_population_size(n: int) -> int:
    return 4 + int(3 * math.log(n))


def recombination_weights(lam: int) -> np.ndarray:
    """Positive, decreasing weights ``log(mu + 1/2) - log(i)`` for ``i = 1..mu``, summing to 1."""
    if lam < 2:
        raise ValueError("population size must be at least 2")
    mu = lam // 2
    w = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    w /= w.sum()
    assert np.all(w > 0) and np.all(np.diff(w) <= 0) and abs(w.sum() - 1.0) < 1e-12
    return w


@dataclass(frozen=True)
class CmaParams:
    lam: int
    weights: np.ndarray
    mueff: float
    cc: float
    cs: float
    c1: float
    cmu: float
    damps: float
    chi_n: float

    @property
    def mu(self) -> int:
        return self.weights.size


def default_params(n: int, lam: int | None = None, **overrides) -> CmaParams:
    """Standard learning rates as functions of ``n`` and ``mueff``; any field may be overridden."""
    lam = default_population_size(n) if lam is None else int(lam)
    w = np.asarray(overrides.pop("weights", recombination_weights(lam)), dtype=float)
    mueff = 1.0 / np.sum(w**2)
    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    cs = (mueff + 2) / (n + mueff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n**2))
    params = CmaParams(lam=lam, weights=w, mueff=mueff, cc=cc, cs=cs, c1=c1, cmu=cmu,
                       damps=damps, chi_n=chi_n)
    return replace(params, **overrides)


@dataclass
class CmaState:
    mean: np.ndarray
    sigma: float
    C: np.ndarray
    params: CmaParams
    ps: np.ndarray = None
    pc: np.ndarray = None
    generation: int = 0
    best_f: float = math.inf
    stall: int = 0

    def __post_init__(self):
        n = self.mean.size
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.ps is None:
            self.ps = np.zeros(n)
        if self.pc is None:
            self.pc = np.zeros(n)

    @classmethod
    def create(cls, mean, sigma: float, C=None, lam: int | None = None, **overrides) -> "CmaState":
        mean = np.array(mean, dtype=float)
        n = mean.size
        C = np.eye(n) if C is None else np.array(C, dtype=float)
        return cls(mean=mean, sigma=float(sigma), C=C, params=default_params(n, lam, **overrides))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def lam(self) -> int:
        return self.params.lam

    def copy(self) -> "CmaState":
        return replace(self, mean=self.mean.copy(), C=self.C.copy(),
                       ps=self.ps.copy(), pc=self.pc.copy())

    def stop_reason(self) -> str | None:
        """Internal stopping condition, or ``None`` while the strategy should continue."""
        vals = np.linalg.eigvalsh(self.C)
        if vals[0] <= 0 or vals[-1] / vals[0] > CONDITION_LIMIT:
            return "condition"
        if self.sigma * math.sqrt(vals[-1]) < TOLX:
            return "tolx"
        if self.stall >= STALL_FACTOR * self.lam:
            return "stagnation"
        return None


def cma_sample(state: CmaState, lam: int | None, rng: np.random.Generator) -> np.ndarray:
    """``lam`` draws ``m + sigma * L z`` as rows.

    A failed factorization repairs ``state.C`` in place and retries once;
    a second failure raises :class:`CmaResetSignal`.
    """
    lam = state.lam if lam is None else int(lam)
    if lam < 2:
        raise ValueError("lambda must be at least 2")
    try:
        L = cholesky(state.C)
    except DecompositionError:
        logger.info("covariance not positive definite; repairing")
        try:
            state.C = repair_covariance(state.C)
            L = cholesky(state.C)
        except (DecompositionError, np.linalg.LinAlgError) as exc:
            raise CmaResetSignal(str(exc)) from exc
    z = rng.standard_normal((lam, state.dim))
    return state.mean + state.sigma * z @ L.T


def _ensure_pd(C: np.ndarray) -> np.ndarray:
    C = 0.5 * (C + C.T)
    vals = np.linalg.eigvalsh(C)
    if vals[0] <= 1e-12 * max(np.trace(C), np.finfo(float).tiny) / C.shape[0]:
        return repair_covariance(C)
    return C


def cma_update(state: CmaState, X, fitness) -> CmaState:
    """One generation of mean, path, step-size and covariance adaptation.

    Rows with non-finite fitness are dropped; with fewer than two left the
    state is returned unchanged apart from a copy. The input state is not
    modified.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    fitness = np.asarray(fitness, dtype=float)
    ok = np.isfinite(fitness)
    X, fitness = X[ok], fitness[ok]
    new = state.copy()
    if fitness.size < 2:
        logger.debug("cma update skipped: %d finite values", fitness.size)
        return new

    p = state.params
    n = state.dim
    order = np.argsort(fitness, kind="stable")
    mu = min(p.mu, fitness.size)
    w = p.weights[:mu] / p.weights[:mu].sum() if mu < p.mu else p.weights
    mueff = p.mueff if mu == p.mu else 1.0 / np.sum(w**2)
    Y = (X[order[:mu]] - state.mean) / state.sigma
    y_w = w @ Y

    new.mean = state.mean + state.sigma * y_w

    vals, vecs = np.linalg.eigh(0.5 * (state.C + state.C.T))
    vals = np.maximum(vals, 1e-300)
    inv_sqrt_C = (vecs / np.sqrt(vals)) @ vecs.T
    new.ps = (1 - p.cs) * state.ps + math.sqrt(p.cs * (2 - p.cs) * mueff) * (inv_sqrt_C @ y_w)
    ps_norm = np.linalg.norm(new.ps)
    gen = state.generation + 1
    hsig = ps_norm / math.sqrt(1 - (1 - p.cs) ** (2 * gen)) / p.chi_n < 1.4 + 2 / (n + 1)
    new.pc = (1 - p.cc) * state.pc + hsig * math.sqrt(p.cc * (2 - p.cc) * mueff) * y_w

    if p.c1 != 0 or p.cmu != 0:
        rank_one = np.outer(new.pc, new.pc)
        rank_mu = (Y * w[:, None]).T @ Y
        C = ((1 - p.c1 - p.cmu) * state.C
             + p.c1 * (rank_one + (1 - hsig) * p.cc * (2 - p.cc) * state.C)
             + p.cmu * rank_mu)
        new.C = _ensure_pd(C)

    new.sigma = state.sigma * math.exp(min(1.0, (p.cs / p.damps) * (ps_norm / p.chi_n - 1)))
    new.generation = gen
    f0 = float(fitness[order[0]])
    if f0 < state.best_f:
        new.best_f, new.stall = f0, 0
    else:
        new.stall = state.stall + 1
    return new


# ---------------------------------------------------------------------------
# importance weights

WeightSource = Literal["cma_gaussian", "softmax", "uniform"]
WEIGHT_SOURCES = ("cma_gaussian", "softmax", "uniform")


@dataclass
class WeightMap:
    """Per-sample importance weights.

    ``floor`` of ``None`` means ``1 / (10 * batch_size)``. Weights are a
    mixture ``floor + (1 - B * floor) * p`` of the floor and a normalized
    profile ``p``, so every weight is at least the floor and the batch sums
    to one.
    """

    source: WeightSource = "cma_gaussian"
    floor: float | None = None
    temperature: float = SOFTMAX_TEMPERATURE
    cma: CmaState | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.source not in WEIGHT_SOURCES:
            raise ValueError(f"unknown weight source {self.source!r}; expected one of {WEIGHT_SOURCES}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.floor is not None and not self.floor > 0:
            raise ValueError("floor must be positive")


def floor_for(batch_size: int) -> float:
    return 1.0 / (10 * batch_size)


def _apply_floor(profile: np.ndarray, floor: float) -> np.ndarray:
    B = profile.size
    if floor * B > 1:
        raise ValueError(f"floor {floor} is infeasible for a batch of {B}")
    return floor + (1.0 - B * floor) * profile


def weights_for(wmap: WeightMap, X, fitness=None) -> np.ndarray:
    """Importance weights for the rows of ``X`` (with their ``fitness`` for the softmax source)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    B = X.shape[0]
    if B == 0:
        raise ValueError("weights requested for an empty batch")
    floor = floor_for(B) if wmap.floor is None else wmap.floor
    uniform = np.full(B, 1.0 / B)

    if wmap.source == "uniform":
        profile = uniform
    elif wmap.source == "softmax":
        if fitness is None:
            raise ValueError("softmax weights need fitness values")
        z = -np.asarray(fitness, dtype=float) / wmap.temperature
        if not np.all(np.isfinite(z)):
            raise ValueError("softmax weights need finite fitness values")
        z -= z.max()
        e = np.exp(z)
        profile = e / e.sum()
    else:
        if wmap.cma is None:
            raise ValueError("gaussian weights need a CMA state")
        cma = wmap.cma
        try:
            logd = gaussian_log_density(X, cma.mean, cma.sigma, cma.C)
            if not np.all(np.isfinite(logd)):
                raise DecompositionError("non-finite log density")
        except (DecompositionError, ValueError) as exc:
            logger.warning("degenerate CMA covariance (%s); using uniform weights", exc)
            profile = uniform
        else:
            e = np.exp(logd - logd.max())
            profile = e / e.sum()

    w = _apply_floor(profile, floor)
    assert w.min() >= floor * (1 - 1e-12) and w.sum() <= 1 + 1e-12
    return w


# ---------------------------------------------------------------------------
# CMA baselines


def _initial_u(tr: TrustRegion, x) -> np.ndarray:
    try:
        return from_search(tr, x)
    except OutsideTrustRegion:
        return np.zeros(tr.dim)


def cma_tr_run(problem: Problem, budget: int, map_kind: str = "linear", gamma: float = 0.9,
               rng: np.random.Generator | None = None, *, restarts: bool = True,
               sigma0: float = DEFAULT_SIGMA0, lam: int | None = None, x0=None,
               algorithm: str | None = None, f_target: float | None = None) -> RunRecord:
    """CMA-ES inside a trust region that shrinks by ``gamma`` on every internal stop.

    Candidates live in normalized coordinates ``u`` and are evaluated at
    ``tr.to_search(u)``. When the strategy stops, the region is recentred on
    the best point found so far, its scale multiplied by ``gamma``, and a
    fresh isotropic strategy started. ``restarts=False`` is plain CMA-ES: the
    run ends at the first internal stop.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    rng = np.random.default_rng(0) if rng is None else rng
    name = algorithm or ("CMA-TR" if restarts else "CMA")
    config = {"algorithm": name, "map_kind": map_kind, "gamma": gamma, "restarts": restarts,
              "sigma0": sigma0, "lam": lam}
    record = RunRecord(problem=problem.key, algorithm=name, seed=-1, budget=int(budget), config=config)
    meter = BudgetMeter(budget)
    tr = TrustRegion.from_bounds(problem.lower, problem.upper, map_kind=map_kind)
    x_start = problem.center if x0 is None else np.asarray(x0, dtype=float)
    state = CmaState.create(_initial_u(tr, x_start), sigma0, lam=lam)
    best_x, best_f = x_start.copy(), math.inf
    delta = 1.0

    try:
        while meter.remaining > 0:
            try:
                U = cma_sample(state, None, rng)
            except CmaResetSignal as exc:
                record.errors.append(f"cma reset: {exc}")
                state = CmaState.create(_initial_u(tr, best_x), sigma0, lam=lam)
                continue
            Xs = to_search(tr, U)
            f = meter.evaluate_many(problem, Xs)
            k = f.size
            i = int(np.argmin(f))
            if f[i] < best_f:
                best_f, best_x = float(f[i]), Xs[i].copy()
            record.add_point(meter.used, best_f, problem.normalized(best_f).value)
            if k < U.shape[0]:
                break  # budget ran out mid-generation
            if map_kind == "linear":
                # clipped candidates re-enter the strategy at their repaired position
                U = (Xs - tr.center) / tr.scale
            state = cma_update(state, U, f)
            if f_target is not None and best_f <= f_target:
                break
            reason = state.stop_reason()
            if reason is None:
                continue
            if not restarts:
                record.events.append({"evals": meter.used, "kind": "stop", "reason": reason})
                break
            delta *= gamma
            tr = shrink_to(tr, best_x, gamma)
            record.events.append({**tr.event_row("restart"), "evals": meter.used,
                                  "reason": reason, "delta": delta})
            state = CmaState.create(_initial_u(tr, best_x), sigma0, lam=lam)
    except BudgetExhausted:
        pass

    record.f_best = best_f
    record.x_best = best_x.tolist()
    record.evals_used = meter.used
    return record


def cma_run(problem: Problem, budget: int, rng: np.random.Generator | None = None,
            map_kind: str = "linear", **kwargs) -> RunRecord:
    """Plain CMA-ES: the same search as :func:`cma_tr_run` without restarts."""
    return cma_tr_run(problem, budget, map_kind=map_kind, gamma=1.0, rng=rng, restarts=False, **kwargs)
