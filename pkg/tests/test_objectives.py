import json

import numpy as np
import pytest

from evograd import objectives as obj
from evograd.objectives import (SOLVED_THRESHOLD, BudgetExhausted, BudgetMeter, ConfigurationError,
                                make_problem, make_suite, normalized_value, problem_from_key,
                                suite_function_names)


def test_textbook_optima():
    assert obj.sphere(np.zeros(4)) == 0.0
    assert obj.ellipsoid(np.zeros(4)) == 0.0
    assert obj.rosenbrock(np.ones(5)) == 0.0
    assert obj.rastrigin(np.zeros(3)) == 0.0
    assert obj.ackley(np.zeros(3)) == pytest.approx(0.0, abs=1e-12)
    assert obj.schaffer_f7(np.zeros(3)) == 0.0


def test_textbook_known_values():
    assert obj.sphere(np.array([1.0, 2.0])) == 5.0
    assert obj.rosenbrock(np.zeros(2)) == 1.0
    assert obj.rastrigin(np.array([1.0, 0.0])) == pytest.approx(1.0)
    # ellipsoid: condition 1e6 between first and last axis
    assert obj.ellipsoid(np.array([0.0, 1.0])) == pytest.approx(1e6)


def test_functions_are_vectorized(rng):
    X = rng.uniform(-5, 5, size=(7, 4))
    for f in (obj.sphere, obj.ellipsoid, obj.rosenbrock, obj.rastrigin, obj.ackley, obj.schaffer_f7):
        batch = f(X)
        assert batch.shape == (7,)
        assert np.allclose(batch, [f(x) for x in X])


@pytest.mark.parametrize("name", suite_function_names())
@pytest.mark.parametrize("dim", [2, 10])
def test_suite_optimum_is_zero_and_global(name, dim):
    p = make_problem(name, dim)
    assert p.evaluate(p.x_opt) == pytest.approx(0.0, abs=1e-9)
    assert np.all(p.x_opt >= p.lower) and np.all(p.x_opt <= p.upper)
    X = np.random.default_rng(0).uniform(p.lower, p.upper, size=(2000, dim))
    assert np.all(p.evaluate_batch(X) >= -1e-12)


def test_suite_is_deterministic_and_keyed():
    a = make_problem("rastrigin", 5)
    b = problem_from_key("rastrigin-5d")
    X = np.random.default_rng(1).normal(size=(10, 5))
    assert np.array_equal(a.evaluate_batch(X), b.evaluate_batch(X))
    assert a.key == "rastrigin-5d"


def test_suite_order_and_size():
    suite = make_suite([2, 5])
    assert len(suite) == 2 * len(suite_function_names())
    assert [p.key for p in suite[:2]] == ["sphere-2d", "ellipsoid-2d"]


def test_bad_problem_requests():
    with pytest.raises(ConfigurationError):
        make_problem("sphere", 3)
    with pytest.raises(ConfigurationError):
        make_problem("nope", 2)


def test_gallagher_structure():
    p = make_problem("gallagher", 2)
    # the global peak center reaches height 10, every other peak tops out at 9.1
    assert p.evaluate(p.x_opt) == pytest.approx(0.0, abs=1e-12)
    X = np.random.default_rng(2).uniform(-5, 5, size=(20_000, 2))
    y = p.evaluate_batch(X)
    assert y.min() >= 0.0 and y.max() <= 100.0


def test_normalized_value_examples():
    assert normalized_value(0.0, 0.0, 10.0) == (0.0, True)
    assert normalized_value(10.0, 0.0, 10.0) == (1.0, False)
    assert normalized_value(20.0, 0.0, 10.0).value == 1.0  # clamped
    assert normalized_value(0.099, 0.0, 10.0).solved
    assert not normalized_value(0.1, 0.0, 10.0).solved
    with pytest.raises(ValueError):
        normalized_value(1.0, 1.0, 1.0)


def test_y_max_is_cached(tmp_path, monkeypatch):
    monkeypatch.setenv("EVOGRAD_CACHE_DIR", str(tmp_path))
    monkeypatch.setattr(obj, "_Y_MAX_MEMO", {})
    p = make_problem("sphere", 2)
    value = p.y_max
    assert value == obj.compute_y_max(p)
    stored = json.loads((tmp_path / "ymax-sphere-2d.json").read_text())
    assert stored["y_max"] == value
    manifest = p.manifest()
    assert manifest["y_min"] == 0.0 and manifest["y_max"] == value


def test_solved_threshold_value():
    assert SOLVED_THRESHOLD == 0.01


def test_meter_counts_and_stops():
    p = make_problem("sphere", 2)
    m = BudgetMeter(5)
    m.evaluate(p, np.zeros(2))
    vals = m.evaluate_many(p, np.zeros((10, 2)))
    assert vals.size == 4 and m.used == 5 and m.remaining == 0
    with pytest.raises(BudgetExhausted):
        m.evaluate(p, np.zeros(2))
    with pytest.raises(BudgetExhausted):
        m.evaluate_many(p, np.zeros((1, 2)))


def test_evaluate_checks_shape():
    p = make_problem("sphere", 2)
    with pytest.raises(ValueError):
        p.evaluate(np.zeros(3))


def test_rastrigin_against_independent_formula():
    x = np.array([0.5, 0.5])
    expected = 20.0 + sum(v * v - 10.0 * np.cos(2 * np.pi * v) for v in x)
    assert obj.rastrigin(x) == pytest.approx(expected, rel=1e-14)


def test_normalized_midpoint_and_threshold():
    assert normalized_value(5.0, 0.0, 10.0).value == 0.5
    score = normalized_value(0.9, 0.0, 100.0)
    assert score.value == pytest.approx(0.009) and score.solved


def test_evaluate_metered_counts():
    p = make_problem("sphere", 2)
    m = BudgetMeter(2)
    obj.evaluate_metered(p, m, p.x_opt)
    assert m.used == 1
    obj.evaluate_metered(p, m, p.x_opt)
    with pytest.raises(BudgetExhausted):
        obj.evaluate_metered(p, m, p.x_opt)
