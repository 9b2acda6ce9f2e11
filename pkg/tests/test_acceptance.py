"""Exit criteria. Each test prints one PASS/FAIL line, collected in the session summary."""

import math

import numpy as np
import pytest
from scipy.optimize import minimize

from evograd.bench import SuiteSpec, aggregate, run_suite
from evograd.evo import CmaState, WeightMap, floor_for, weights_for
from evograd.numerics import make_rng, sample_ball
from evograd.objectives import make_problem
from evograd.optimizer import adaptive_sizes, preset, run
from evograd.records import RunRecord
from evograd.surrogate import (VARIANTS, GradNet, LossConfig, PairBatch, batch_residuals,
                               loss_and_grad, weighted_loss)

pytestmark = pytest.mark.acceptance


# ---------------------------------------------------------------------------
# 1. gradient oracles


def _fd_loss_grad(cfg, net, batch, h=1e-6):
    flat = net.get_flat()
    if cfg.second_order and not cfg.jacobian_attached:
        # the detached objective treats the quadratic term as a constant
        _, dout = net.jvp(batch.anchors, batch.taus)
        quad0 = np.sum(dout * batch.taus, axis=1)

        def loss(p):
            net.set_flat(p)
            r = batch_residuals(cfg, net, batch, hessian_term=False) + 0.5 * quad0
            return float(np.sum(batch.weights * r * r))
    else:
        def loss(p):
            net.set_flat(p)
            return weighted_loss(cfg, net, batch)

    out = np.empty_like(flat)
    for k in range(flat.size):
        e = np.zeros_like(flat)
        e[k] = h
        out[k] = (loss(flat + e) - loss(flat - e)) / (2 * h)
    net.set_flat(flat)
    return out


def _fd_jacobian(net, x, h=1e-6):
    cols = [(net(x + h * e) - net(x - h * e)) / (2 * h) for e in np.eye(x.size)]
    return np.stack(cols, axis=1)


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))


def test_c1_gradient_oracles(criterion):
    g = make_rng(101)
    worst = 0.0
    for variant in VARIANTS:
        for attached in (False, True):
            cfg = LossConfig(variant, jacobian_attached=attached)
            for _ in range(100):
                n = int(g.integers(1, 5))
                net = GradNet(n, (int(g.integers(2, 6)), int(g.integers(2, 6))), g)
                k = int(g.integers(2, 7))
                X = g.normal(size=(k, n))
                batch = PairBatch(X, X + 0.7 * g.normal(size=(k, n)), g.normal(size=k), g.normal(size=k),
                                  g.random(k) + 0.05)
                _, grad = loss_and_grad(cfg, net, batch)
                worst = max(worst, _rel(grad, _fd_loss_grad(cfg, net, batch)))
                x = g.normal(size=n)
                worst = max(worst, _rel(net.jacobian(x), _fd_jacobian(net, x)))
    ok = criterion(1, "gradient oracles vs central differences", worst <= 1e-4, f"worst rel {worst:.2e}")
    assert ok


# ---------------------------------------------------------------------------
# 2-3. accuracy scaling of the learned gradient


def _cubic(X):
    x, y = X[..., 0], X[..., 1]
    return x**2 + 2 * y**2 + x * y + 0.5 * x**3 - 0.3 * y**3 + 0.2 * x * x * y


def _cubic_grad(X):
    x, y = X[..., 0], X[..., 1]
    return np.stack([2 * x + y + 1.5 * x * x + 0.4 * x * y, 4 * y + x - 0.9 * y * y + 0.2 * x * x], -1)


def _fit(variant, f, X, eps, net, maxiter):
    """Minimize the attached-Jacobian loss over every ordered pair within ``eps``."""
    d = np.linalg.norm(X[:, None] - X[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    i, j = np.nonzero(d <= eps)
    y = f(X)
    batch = PairBatch(X[i], X[j], y[i], y[j], np.full(i.size, 1.0 / i.size))
    cfg = LossConfig(variant, jacobian_attached=True)
    scale = 1.0 / eps**2  # keeps the loss O(1) as eps shrinks

    def fun(p):
        net.set_flat(p)
        return loss_and_grad(cfg, net, batch, scale=scale)

    sol = minimize(fun, net.get_flat(), jac=True, method="L-BFGS-B",
                   options={"maxiter": maxiter, "ftol": 0.0, "gtol": 1e-14})
    net.set_flat(sol.x)
    return net


def _eps_slope(variant, seed, eps_list):
    errs = []
    x0 = np.array([0.3, -0.2])
    for eps in eps_list:
        g = make_rng(seed)
        X = sample_ball(x0, eps, g, size=50)
        net = _fit(variant, _cubic, X, eps, GradNet(2, rng=make_rng(1000 + seed)), 600)
        err = np.linalg.norm(net(X) - _cubic_grad(X), axis=1).mean()
        errs.append(err / np.linalg.norm(_cubic_grad(x0)))
    return np.polyfit(np.log(eps_list), np.log(errs), 1)[0]


def test_c2_eps_squared_scaling(criterion):
    eps_list = [0.4, 0.2, 0.1, 0.05]
    slope_h = float(np.median([_eps_slope("HGrad", s, eps_list) for s in range(20)]))
    slope_e = float(np.median([_eps_slope("EGL", s, eps_list) for s in range(20)]))
    ok = criterion(2, "error slope in eps: HGrad >= 1.6, EGL in [0.7, 1.3]",
                   slope_h >= 1.6 and 0.7 <= slope_e <= 1.3,
                   f"HGrad {slope_h:.2f}, EGL {slope_e:.2f}")
    assert ok


def _quadratic_error(variant, seed, n=5, eps=1.0):
    g = make_rng(seed)
    Q = np.linalg.qr(g.normal(size=(n, n)))[0]
    A = Q @ np.diag(np.exp(g.uniform(math.log(0.5), math.log(5.0), n))) @ Q.T
    b = g.normal(size=n)
    x0 = g.uniform(-1, 1, n)
    X = sample_ball(x0, eps, g, size=80)

    def f(X):
        return 0.5 * np.einsum("ki,ij,kj->k", X, A, X) + X @ b

    net = _fit(variant, f, X, eps, GradNet(n, rng=make_rng(1000 + seed)), 3000)
    true = X @ A + b
    return np.linalg.norm(net(X) - true, axis=1).mean() / np.linalg.norm(true, axis=1).mean()


def test_c3_quadratic_exactness(criterion):
    h = np.array([_quadratic_error("HGrad", s) for s in range(10)])
    e = np.array([_quadratic_error("EGL", s) for s in range(10)])
    hits = int(np.sum(h <= 1e-2))
    ok = criterion(3, "HGrad on a PD quadratic at eps=1: rel error <= 1e-2 in >= 8/10 seeds",
                   hits >= 8 and np.all(e > 5e-2),
                   f"HGrad {hits}/10 (max {h.max():.3g}), EGL min {e.min():.3g}")
    assert ok


# ---------------------------------------------------------------------------
# 4-5. loss lattice and weight maps


def test_c4_variant_reductions(criterion):
    g = make_rng(404)
    worst = 0.0
    for _ in range(1000):
        n = int(g.integers(1, 6))
        k = int(g.integers(1, 40))
        net = GradNet(n, (int(g.integers(2, 8)),), g)
        X = g.normal(size=(k, n))
        batch = PairBatch(X, X + g.normal(size=(k, n)), g.normal(size=k), g.normal(size=k), g.random(k))
        uniform = batch.with_weights(weights_for(WeightMap("uniform"), batch.probes))
        a = weighted_loss(LossConfig("EvoGrad2"), net, uniform)
        b = weighted_loss(LossConfig("HGrad"), net, uniform)
        c = weighted_loss(LossConfig("EvoGrad2"), net, batch, hessian_term=False)
        d = weighted_loss(LossConfig("EvoGrad"), net, batch)
        worst = max(worst, abs(a - b), abs(c - d))
    ok = criterion(4, "EvoGrad2 reduces to HGrad and EvoGrad", worst <= 1e-12, f"max gap {worst:.1e}")
    assert ok


def test_c5_weight_map_contract(criterion):
    g = make_rng(505)
    bad = 0
    for trial in range(10_000):
        n = int(g.integers(1, 6))
        B = int(g.integers(1, 64))
        X = g.normal(size=(B, n)) * 10 ** g.uniform(-2, 1)
        fit = g.normal(size=B) * 10 ** g.uniform(-3, 3)
        if trial % 3 == 0:
            wmap = WeightMap("softmax", temperature=float(10 ** g.uniform(-2, 1)))
        elif trial % 3 == 1:
            cma = CmaState.create(g.normal(size=n), float(10 ** g.uniform(-2, 0.5)))
            wmap = WeightMap("cma_gaussian", cma=cma)
        else:
            wmap = WeightMap("uniform")
        w = weights_for(wmap, X, fit)
        if w.min() < floor_for(B) * (1 - 1e-12) or w.sum() > 1 + 1e-12:
            bad += 1
        if wmap.source == "softmax":
            order = np.argsort(fit, kind="stable")
            if np.any(np.diff(w[order]) > 0):
                bad += 1
    ok = criterion(5, "weights >= floor, sum <= 1, softmax rank-monotone", bad == 0,
                   f"{bad} violations in 10^4 batches")
    assert ok


# ---------------------------------------------------------------------------
# 6 and 10. desk suite


@pytest.fixture(scope="module")
def desk_high(tmp_path_factory):
    spec = SuiteSpec.desk(dims=(10, 20), seeds=range(10), algorithms=["CMA", "CMA-TR", "EGL", "EvoGrad2"])
    root = tmp_path_factory.mktemp("desk_high")
    return spec, root, run_suite(spec, root)


def test_c6_table_ordering(criterion, desk_high):
    _, _, records = desk_high
    table = aggregate(records)
    frac = {r.algorithm: r.solved_fraction for r in table.rows}
    ok = criterion(6, "solved fraction: CMA-TR >= CMA and EvoGrad2 >= EGL (dims 10, 20)",
                   frac["CMA-TR"] >= frac["CMA"] and frac["EvoGrad2"] >= frac["EGL"],
                   ", ".join(f"{k} {v:.3f}" for k, v in sorted(frac.items())))
    assert ok


def test_c10_determinism_and_budget(criterion, desk_high, tmp_path):
    spec, root, records = desk_high
    low = SuiteSpec.desk(dims=(2, 5), seeds=range(10))
    first = run_suite(low, tmp_path / "a")
    second = run_suite(low, tmp_path / "b")
    mismatched = [c.filename for c in low.cells()
                  if (tmp_path / "a" / c.filename).read_bytes() != (tmp_path / "b" / c.filename).read_bytes()]
    # high dimensions: rerun seed 0 of every problem x algorithm
    again = SuiteSpec(spec.problems, spec.algorithms, [0])
    run_suite(again, tmp_path / "c")
    mismatched += [c.filename for c in again.cells()
                   if (root / c.filename).read_bytes() != (tmp_path / "c" / c.filename).read_bytes()]
    over = [f"{r.problem}/{r.algorithm}/{r.seed}" for r in [*records, *first, *second]
            if r.evals_used > r.budget]
    failed = [r for r in [*records, *first] if r.status == "failed"]
    ok = criterion(10, "byte-identical reruns, no budget overdraw",
                   not mismatched and not over and not failed,
                   f"{len(records) + len(first)} cells, {len(mismatched)} mismatched, "
                   f"{len(over)} over budget, {len(failed)} failed")
    assert ok


# ---------------------------------------------------------------------------
# 7-9. optimizer behavior


def test_c7_multi_minima_escape(criterion):
    pr = make_problem("gallagher", 2)
    # the best local peak sits at (10 - 9.1)**2 = 0.81; anything lower is the global basin
    basin = 0.8
    hits = {"EGL": 0, "EvoGrad": 0}
    for s in range(50):
        x0 = make_rng(10_000 + s).uniform(pr.lower, pr.upper)
        for name in hits:
            rec = run(pr, preset(name, budget=4000, f_target=basin), s, x0=x0)
            hits[name] += rec.f_best <= basin
    ok = criterion(7, "Gallagher-2d global basin: EvoGrad > EGL over 50 paired starts",
                   hits["EvoGrad"] > hits["EGL"], f"EvoGrad {hits['EvoGrad']}/50, EGL {hits['EGL']}/50")
    assert ok


def _solved(name, budget, seeds):
    pr = make_problem(name, 10)
    target = pr.y_min + 0.01 * (pr.y_max - pr.y_min)
    recs = [run(pr, preset("EvoGrad2", budget=budget, f_target=target), s) for s in seeds]
    return sum(r.final_normalized < 0.01 for r in recs), recs


def test_c8_end_to_end(criterion):
    sphere, recs = _solved("sphere", 50_000, range(10))
    ellipsoid, _ = _solved("ellipsoid", 50_000, range(10))
    rosen, _ = _solved("rosenbrock", 150_000, range(10))
    worst = max(r.first_crossing(0.01) or math.inf for r in recs)
    ok = criterion(8, "EvoGrad2 dim 10: sphere & ellipsoid 10/10 in 50k, Rosenbrock >= 8/10 in 150k",
                   sphere == 10 and ellipsoid == 10 and rosen >= 8,
                   f"sphere {sphere}/10 (slowest {worst}), ellipsoid {ellipsoid}/10, rosenbrock {rosen}/10")
    assert ok


def test_c9_adaptive_sizes(criterion):
    got = {n: adaptive_sizes(n) for n in (40, 1, 100)}
    ok = criterion(9, "adaptive sizes", got == {40: (56, 14000), 1: (8, 2000), 100: (80, 20000)}, str(got))
    assert ok


def test_records_load_back(desk_high):
    _, root, records = desk_high
    assert RunRecord.load(next(root.glob("*.json"))) in records
