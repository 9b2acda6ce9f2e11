"""The gradient-learning optimizer loop and its variants.

Each iteration explores a ball around the current iterate, trains the
gradient surrogate on Taylor pairs drawn from the replay buffer, takes one
descent step with the learned gradient, and manages the trust region when
progress stalls. Everything below works in the trust region's normalized
coordinates ``u``; the objective is only ever seen through a
:class:`~evograd.objectives.BudgetMeter`.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .evo import CmaResetSignal, CmaState, WeightMap, cma_update, weights_for
from .numerics import make_rng, sample_ball
from .objectives import BudgetExhausted, BudgetMeter, ConfigurationError, Problem
from .records import RunRecord
from .surrogate import VARIANTS, GradNet, LossConfig, PairBatch, Trainer
from .trust_region import (MAP_KINDS, OutsideTrustRegion, TrustRegion, ValueNormalizer,
                           classify_convergence, fit_value_normalizer, shift_to, shrink_to)

logger = logging.getLogger(__name__)

BRUTE_FORCE_PAIRS = 1500
REJECTION_ROUNDS = 64
ENUMERATE_PAIRS = 2_000_000
TREE_MAX_DIM = 8  # k-d trees lose to brute force above this


def _ceil_sqrt(n: int) -> int:
    return math.isqrt(n - 1) + 1 if n > 0 else 0


def adaptive_sizes(dim: int) -> tuple[int, int]:
    """Exploration batch size and training-pair count, both growing with ``ceil(sqrt(dim))``."""
    if dim < 1:
        raise ValueError("dim must be positive")
    r = _ceil_sqrt(dim)
    return 8 * r, 2000 * r


def database_capacity(dim: int) -> int:
    return 20000 * _ceil_sqrt(dim)


@dataclass(frozen=True)
class OptimizerConfig:
    variant: str = "EvoGrad2"
    name: str | None = None
    eps0_coeff: float = 0.4
    eps_factor: float = 0.97
    eps_min: float = 1e-4
    tr_shrink: float = 0.9
    step_size: float = 0.01
    n_max: int = 10
    budget: int = 150_000
    weight_source: str | None = None
    softmax_temperature: float = 0.1
    jacobian_attached: bool = False
    net_hidden: tuple[int, ...] = (10, 15, 10)
    learn_rate: float = 1e-3
    batch_size: int = 64
    train_optimizer: str = "adam"
    epochs: int = 1
    map_kind: str = "tanh"
    movement_factor: float = 0.2
    outlier_quantile: float = 0.1
    n_samples: int | None = None
    n_pairs: int | None = None
    reset_net_on_tr: bool = False
    f_target: float | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0 < self.eps_factor < 1:
            raise ConfigurationError("eps_factor must lie in (0, 1)")
        if not 0 < self.tr_shrink < 1:
            raise ConfigurationError("tr_shrink must lie in (0, 1)")
        if self.map_kind not in MAP_KINDS:
            raise ConfigurationError(f"map_kind must be one of {MAP_KINDS}")
        if self.weight_source not in (None, "cma_gaussian", "softmax", "uniform"):
            raise ConfigurationError(f"unknown weight source {self.weight_source!r}")
        for name in ("eps0_coeff", "eps_min", "step_size", "learn_rate", "softmax_temperature"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.n_max < 1 or self.budget < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("n_max, budget, batch_size and epochs must be positive")
        object.__setattr__(self, "net_hidden", tuple(int(h) for h in self.net_hidden))

    @property
    def label(self) -> str:
        return self.name or self.variant

    @property
    def resolved_weight_source(self) -> str:
        if self.weight_source is not None:
            return self.weight_source
        return "cma_gaussian" if self.variant in ("EvoGrad", "EvoGrad2") else "uniform"

    def loss_config(self) -> LossConfig:
        return LossConfig(self.variant, jacobian_attached=self.jacobian_attached,
                          batch_size=self.batch_size, learn_rate=self.learn_rate,
                          optimizer=self.train_optimizer)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["net_hidden"] = list(self.net_hidden)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizerConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config fields {sorted(unknown)}; valid: {sorted(known)}")
        return cls(**data)

    def replace(self, **changes) -> "OptimizerConfig":
        return dataclasses.replace(self, **changes)


PRESETS: dict[str, OptimizerConfig] = {
    "EvoGrad2": OptimizerConfig("EvoGrad2"),
    "EvoGrad": OptimizerConfig("EvoGrad"),
    "EvoGrad-0.1": OptimizerConfig("EvoGrad", name="EvoGrad-0.1", weight_source="softmax"),
    "HGrad": OptimizerConfig("HGrad"),
    "HGrad-Attached": OptimizerConfig("HGrad", name="HGrad-Attached", jacobian_attached=True),
    "EGL": OptimizerConfig("EGL"),
}


def preset(name: str, **changes) -> OptimizerConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown algorithm {name!r}; expected one of {sorted(PRESETS)}") from None
    return base.replace(**changes) if changes else base


# ---------------------------------------------------------------------------
# replay buffer


class ReplayBuffer:
    """Evaluated samples in chronological order.

    Points are stored in search-space coordinates together with their
    normalized coordinates ``u`` under the current trust region, so a
    region change only needs one inverse map per entry.
    """

    def __init__(self, dim: int, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.dim = dim
        self.capacity = int(capacity)
        self.x = np.empty((0, dim))
        self.u = np.empty((0, dim))
        self.y_raw = np.empty(0)
        self.y_norm = np.empty(0)
        self.generation = np.empty(0, dtype=np.int64)

    def __len__(self) -> int:
        return self.y_raw.size

    def add(self, x, u, y_raw, normalizer: ValueNormalizer | None, generation: int) -> None:
        x = np.atleast_2d(x)
        u = np.atleast_2d(u)
        y_raw = np.atleast_1d(np.asarray(y_raw, dtype=float))
        y_norm = normalizer(y_raw) if normalizer is not None else np.zeros_like(y_raw)
        self.x = np.concatenate([self.x, x])
        self.u = np.concatenate([self.u, u])
        self.y_raw = np.concatenate([self.y_raw, y_raw])
        self.y_norm = np.concatenate([self.y_norm, y_norm])
        self.generation = np.concatenate([self.generation, np.full(y_raw.size, generation)])
        extra = len(self) - self.capacity
        if extra > 0:  # oldest first
            self._keep(slice(extra, None))

    def _keep(self, index) -> None:
        self.x = self.x[index]
        self.u = self.u[index]
        self.y_raw = self.y_raw[index]
        self.y_norm = self.y_norm[index]
        self.generation = self.generation[index]

    def renormalize(self, normalizer: ValueNormalizer) -> None:
        self.y_norm = normalizer(self.y_raw)

    def remap(self, tr: TrustRegion) -> int:
        """Re-express entries in ``tr``'s frame, evicting those outside its image. Returns evictions."""
        inside = tr.in_image(self.x) if len(self) else np.zeros(0, dtype=bool)
        evicted = int(np.count_nonzero(~inside))
        if evicted:
            self._keep(inside)
        if len(self):
            self.u = tr.from_search(self.x)
            self.generation[:] = tr.generation
        return evicted


# ---------------------------------------------------------------------------
# pairs


def _finish_pairs(buffer: ReplayBuffer, i: np.ndarray, j: np.ndarray) -> PairBatch:
    return PairBatch(anchors=buffer.u[i], probes=buffer.u[j], y_anchor=buffer.y_norm[i],
                     y_probe=buffer.y_norm[j], weights=np.full(i.size, 1.0 / max(i.size, 1)))


def sample_pair_indices(U: np.ndarray, eps: float, n_pairs: int,
                        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Ordered index pairs ``(i, j)``, ``i != j``, with ``|U_i - U_j| <= eps``.

    When the admissible set has at most ``n_pairs`` members all of them are
    returned; otherwise ``n_pairs`` are drawn uniformly with replacement.
    Small sets are enumerated; large ones use rejection sampling over random
    index pairs. When admissible pairs are rare a k-d tree takes over: it
    enumerates them if there are not too many, otherwise it samples anchors
    by degree and then a uniform neighbor.
    """
    m = len(U)
    empty = (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
    if m < 2 or n_pairs < 1:
        return empty
    if m <= BRUTE_FORCE_PAIRS:
        sq = np.einsum("ij,ij->i", U, U)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (U @ U.T)
        np.fill_diagonal(d2, np.inf)
        i, j = np.nonzero(d2 <= eps * eps)
        if i.size <= n_pairs:
            return i, j
        pick = rng.integers(0, i.size, size=n_pairs)
        return i[pick], j[pick]

    got_i, got_j, count = [], [], 0
    chunk = 4 * n_pairs
    for r in range(1, REJECTION_ROUNDS + 1):
        i = rng.integers(0, m, size=chunk)
        j = rng.integers(0, m - 1, size=chunk)
        j += j >= i  # uniform over j != i
        ok = np.sum((U[i] - U[j]) ** 2, axis=1) <= eps * eps
        got_i.append(i[ok])
        got_j.append(j[ok])
        count += int(ok.sum())
        if count >= n_pairs:
            return np.concatenate(got_i)[:n_pairs], np.concatenate(got_j)[:n_pairs]
        if r == 2 and U.shape[1] <= TREE_MAX_DIM and 8 * count < r * n_pairs:
            break  # more than eight rounds to go; in low dimension the tree is cheaper

    tree = cKDTree(U)
    degree = tree.query_ball_point(U, eps, return_length=True) - 1
    total = int(degree.sum())
    if total == 0:
        return empty
    if total <= max(n_pairs, ENUMERATE_PAIRS):
        pairs = tree.query_pairs(eps, output_type="ndarray")
        i = np.concatenate([pairs[:, 0], pairs[:, 1]])
        j = np.concatenate([pairs[:, 1], pairs[:, 0]])
        if i.size <= n_pairs:
            return i, j
        pick = rng.integers(0, i.size, size=n_pairs)
        return i[pick], j[pick]
    anchors = rng.choice(m, size=n_pairs, p=degree / total)
    anchors.sort()
    probes = np.empty_like(anchors)
    uniq, start = np.unique(anchors, return_index=True)
    stops = np.append(start[1:], anchors.size)
    for a, s, e in zip(uniq, start, stops):
        nb = np.asarray(tree.query_ball_point(U[a], eps), dtype=np.int64)
        nb = nb[nb != a]
        probes[s:e] = nb[rng.integers(0, nb.size, size=e - s)]
    perm = rng.permutation(n_pairs)
    return anchors[perm], probes[perm]


def build_pairs(buffer: ReplayBuffer, eps: float, n_pairs: int, rng: np.random.Generator,
                weight_map: WeightMap | None = None) -> PairBatch:
    """Training pairs from the buffer with importance weights evaluated at the probe points."""
    i, j = sample_pair_indices(buffer.u, eps, n_pairs, rng)
    batch = _finish_pairs(buffer, i, j)
    if len(batch) and weight_map is not None:
        batch = batch.with_weights(weights_for(weight_map, batch.probes, batch.y_probe))
    return batch


# ---------------------------------------------------------------------------
# run state and loop


@dataclass
class RunState:
    problem: Problem
    config: OptimizerConfig
    tr: TrustRegion
    u_k: np.ndarray
    f_k: float
    x_best: np.ndarray
    f_best: float
    eps: float
    cma: CmaState
    net: GradNet
    trainer: Trainer
    meter: BudgetMeter
    buffer: ReplayBuffer
    n_samples: int
    n_pairs: int
    normalizer: ValueNormalizer | None = None
    no_improve_count: int = 0
    movement: float = 0.0
    interior_events: int = 0
    record: RunRecord | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.problem.dim

    def observe(self, X, U, y) -> None:
        """Book-keep freshly evaluated points: buffer, best-so-far, normalizer on first use."""
        self.buffer.add(X, U, y, self.normalizer, self.tr.generation)
        i = int(np.argmin(y))
        if y[i] < self.f_best:
            self.f_best, self.x_best = float(y[i]), np.array(X[i])
        if self.normalizer is None or self.normalizer.scale <= 1e-12:
            self.refit_normalizer()

    def refit_normalizer(self) -> None:
        if len(self.buffer) >= 2:
            self.normalizer = fit_value_normalizer(self.buffer.y_raw, self.config.outlier_quantile)
            self.buffer.renormalize(self.normalizer)

    def log_point(self) -> None:
        if self.record is not None and math.isfinite(self.f_best):
            self.record.add_point(self.meter.used, self.f_best, self.problem.normalized(self.f_best).value)

    def solved_target(self) -> bool:
        t = self.config.f_target
        return t is not None and self.f_best <= t


def _u_of(tr: TrustRegion, x) -> np.ndarray:
    try:
        return tr.from_search(x)
    except OutsideTrustRegion:
        # only reachable at the very edge of the tanh image
        v = np.clip((np.asarray(x) - tr.center) / tr.scale, -1 + 1e-9, 1 - 1e-9)
        return np.arctanh(v)


def _new_cma(state_u: np.ndarray, eps: float, lam: int) -> CmaState:
    return CmaState.create(state_u, eps, lam=max(lam, 2))


def init_state(problem: Problem, config: OptimizerConfig, seed: int,
               x0=None) -> tuple[RunState, dict]:
    streams = np.random.SeedSequence(int(seed)).spawn(4)
    rngs = {name: make_rng(s) for name, s in zip(("explore", "pairs", "train", "net"), streams)}
    n = problem.dim
    n_s, n_p = adaptive_sizes(n)
    n_s = config.n_samples or n_s
    n_p = config.n_pairs or n_p
    tr = TrustRegion.from_bounds(problem.lower, problem.upper, map_kind=config.map_kind)
    if x0 is None:
        x0 = problem.x_start if problem.x_start is not None else problem.center
    x0 = np.clip(np.asarray(x0, dtype=float), problem.lower, problem.upper)
    u0 = _u_of(tr, x0)
    eps = config.eps0_coeff * math.sqrt(n)
    net = GradNet(n, config.net_hidden, rngs["net"])
    state = RunState(problem=problem, config=config, tr=tr, u_k=u0, f_k=math.inf,
                     x_best=x0.copy(), f_best=math.inf, eps=eps, cma=_new_cma(u0, eps, n_s),
                     net=net, trainer=Trainer(net, config.loss_config()),
                     meter=BudgetMeter(config.budget),
                     buffer=ReplayBuffer(n, database_capacity(n)), n_samples=n_s, n_pairs=n_p)
    return state, rngs


def explore(state: RunState, rng: np.random.Generator) -> np.ndarray:
    """Evaluate ``n_samples`` uniform-ball samples around the iterate; returns their raw values."""
    U = sample_ball(state.u_k, state.eps, rng, size=state.n_samples)
    X = state.tr.to_search(U)
    y = state.meter.evaluate_many(state.problem, X)
    k = y.size
    state.observe(X[:k], U[:k], y)
    if k == U.shape[0]:
        try:
            state.cma = cma_update(state.cma, U, y)
        except (np.linalg.LinAlgError, ValueError) as exc:
            _note(state, f"cma update failed: {exc}")
            state.cma = _new_cma(state.u_k, state.eps, state.n_samples)
    if k < U.shape[0]:
        raise BudgetExhausted("budget exhausted during exploration")
    return y


def weight_map_for(state: RunState) -> WeightMap:
    return WeightMap(source=state.config.resolved_weight_source,
                     temperature=state.config.softmax_temperature, cma=state.cma)


def descent_step(state: RunState) -> np.ndarray:
    """Move the iterate along the negative learned gradient and evaluate it."""
    g = state.net(state.u_k)
    u_new = state.u_k - state.config.step_size * g
    x_new = state.tr.to_search(u_new)
    y = state.meter.evaluate(state.problem, x_new)
    state.observe(x_new[None, :], u_new[None, :], np.array([y]))
    # raw values: the normalizer is monotone, so the comparison is the same
    if y > state.f_k:
        state.no_improve_count += 1
    else:
        state.no_improve_count = 0
    state.movement += float(np.linalg.norm(u_new - state.u_k))
    state.u_k, state.f_k = u_new, y
    return u_new


def handle_convergence(state: RunState) -> RunState:
    """Trust-region event after ``n_max`` consecutive worsening steps.

    Interior stalls shrink the region around the best point and decay the
    exploration radius; boundary stalls (the iterate travelled far since the
    last event) only shift the region.
    """
    if state.no_improve_count < state.config.n_max:
        return state
    cfg = state.config
    event = classify_convergence(state.movement, state.dim, cfg.movement_factor)
    if event.kind == "interior":
        state.tr = shrink_to(state.tr, state.x_best, cfg.tr_shrink)
        state.interior_events += 1
        state.eps = max(cfg.eps_min, state.eps * cfg.eps_factor)
    else:
        state.tr = shift_to(state.tr, state.x_best)
    evicted = state.buffer.remap(state.tr)
    state.refit_normalizer()
    state.u_k = _u_of(state.tr, state.x_best)
    state.f_k = state.f_best
    state.cma = _new_cma(state.u_k, state.eps, state.n_samples)
    state.no_improve_count = 0
    if state.record is not None:
        state.record.events.append({**state.tr.event_row(event.kind), "evals": state.meter.used,
                                    "movement": event.movement, "eps": state.eps, "evicted": evicted})
    state.movement = 0.0
    if cfg.reset_net_on_tr:
        state.net = GradNet(state.dim, cfg.net_hidden, np.random.default_rng(state.tr.generation))
        state.trainer = Trainer(state.net, cfg.loss_config())
    return state


def _note(state: RunState, message: str) -> None:
    logger.info(message)
    if state.record is not None and len(state.record.errors) < 100:
        state.record.errors.append(f"@{state.meter.used}: {message}")


def run(problem: Problem, config: OptimizerConfig, seed: int, x0=None) -> RunRecord:
    """Optimize ``problem`` until the budget is spent; the best point found is always returned."""
    state, rngs = init_state(problem, config, seed, x0)
    record = RunRecord(problem=problem.key, algorithm=config.label, seed=int(seed),
                       budget=config.budget, config=config.to_dict())
    state.record = record
    try:
        while state.meter.remaining > 0 and not state.solved_target():
            explore(state, rngs["explore"])
            state.log_point()
            if state.solved_target():
                break
            batch = build_pairs(state.buffer, state.eps, state.n_pairs, rngs["pairs"], weight_map_for(state))
            if len(batch) == 0:
                _note(state, "no admissible pairs; exploring again")
                continue
            for _ in range(config.epochs):
                loss = state.trainer.train_epoch(batch, rngs["train"])
                if not math.isfinite(loss):
                    _note(state, f"non-finite training loss; learn rate now {state.trainer.learn_rate:g}")
                    break
            descent_step(state)
            handle_convergence(state)
            state.log_point()
    except BudgetExhausted:
        pass
    except (CmaResetSignal, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        record.status = "error"
        _note(state, f"run stopped early: {type(exc).__name__}: {exc}")
    state.log_point()
    record.f_best = state.f_best
    record.x_best = state.x_best.tolist()
    record.evals_used = state.meter.used
    return record
