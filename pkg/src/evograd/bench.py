"""Benchmark harness: suite grids, metrics, significance tests and a CLI.

Every (problem, algorithm, seed) cell is persisted as one JSON record the
moment it finishes, so an interrupted suite resumes by skipping files that
already exist. Aggregation reads nothing but those records.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .evo import cma_run, cma_tr_run
from .numerics import make_rng
from .objectives import (SOLVED_THRESHOLD, SUPPORTED_DIMS, ConfigurationError, make_problem,
                         problem_from_key, suite_function_names)
from .optimizer import PRESETS, OptimizerConfig, run
from .records import RunRecord

logger = logging.getLogger(__name__)

MAX_BUDGET = 150_000
OUTPUT_ENV = "EVOGRAD_OUTPUT_DIR"
BASELINES = ("CMA", "CMA-TR")
DESK_DIMS = (2, 5, 10, 20)
# 10**-3 ... 10**0 in quarter decades; index 4 is exactly 0.01
SUCCESS_THRESHOLDS = tuple(float(10.0 ** (k / 4)) for k in range(-12, 1))


def algorithm_names() -> list[str]:
    return list(PRESETS) + list(BASELINES)


def desk_budget(dim: int) -> int:
    return min(MAX_BUDGET, int(50 * dim * math.sqrt(dim)))


def _resolve(algorithm) -> dict:
    """Algorithm spec as a plain dict: a preset name, a baseline name, or config fields."""
    if isinstance(algorithm, OptimizerConfig):
        return algorithm.to_dict()
    if isinstance(algorithm, str):
        if algorithm in BASELINES:
            return {"algorithm": algorithm}
        if algorithm in PRESETS:
            return PRESETS[algorithm].to_dict()
        raise ConfigurationError(f"unknown algorithm {algorithm!r}; choose from {algorithm_names()}")
    if isinstance(algorithm, dict):
        if algorithm.get("algorithm") in BASELINES:
            return dict(algorithm)
        base = PRESETS[algorithm["preset"]].to_dict() if "preset" in algorithm else {}
        rest = {k: v for k, v in algorithm.items() if k != "preset"}
        return OptimizerConfig.from_dict({**base, **rest}).to_dict()
    raise ConfigurationError(f"cannot interpret algorithm spec {algorithm!r}")


def _label(alg: dict) -> str:
    return alg.get("algorithm") or alg.get("name") or alg["variant"]


@dataclass(frozen=True)
class Cell:
    problem: str
    algorithm: dict
    seed: int
    budget: int

    @property
    def label(self) -> str:
        return _label(self.algorithm)

    @property
    def filename(self) -> str:
        return f"{self.problem}__{self.label}__s{self.seed}.json"


@dataclass
class SuiteSpec:
    problems: list[tuple[str, int]]
    algorithms: list
    seeds: list[int]
    budget: int | None = None  # None: desk rule per dimension

    def __post_init__(self):
        self.problems = [(str(n), int(d)) for n, d in self.problems]
        self.algorithms = [_resolve(a) for a in self.algorithms]
        self.seeds = [int(s) for s in self.seeds]
        labels = [_label(a) for a in self.algorithms]
        if len(set(labels)) != len(labels):
            raise ConfigurationError(f"algorithm labels must be unique, got {labels}")
        for name, dim in self.problems:
            make_problem(name, dim)  # validates

    @classmethod
    def desk(cls, dims=DESK_DIMS, seeds=range(10), algorithms=None) -> "SuiteSpec":
        algorithms = algorithms or ["EGL", "EvoGrad", "HGrad", "EvoGrad2", "CMA", "CMA-TR"]
        return cls([(f, d) for d in dims for f in suite_function_names()], list(algorithms), list(seeds))

    @classmethod
    def from_dict(cls, data: dict) -> "SuiteSpec":
        data = dict(data)
        if "functions" in data:
            dims = data.pop("dims", DESK_DIMS)
            functions = data.pop("functions")
            data["problems"] = [(f, d) for d in dims for f in functions]
        if isinstance(data.get("seeds"), int):
            data["seeds"] = list(range(data["seeds"]))
        unknown = set(data) - {"problems", "algorithms", "seeds", "budget"}
        if unknown:
            raise ConfigurationError(f"unknown suite fields {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "SuiteSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def cells(self) -> list[Cell]:
        out = []
        for name, dim in self.problems:
            budget = self.budget if self.budget is not None else desk_budget(dim)
            key = make_problem(name, dim).key
            for alg in self.algorithms:
                for seed in self.seeds:
                    out.append(Cell(key, alg, seed, budget))
        return out


def run_cell(cell: Cell) -> RunRecord:
    """Execute one cell; failures come back as a record with status ``failed``."""
    try:
        problem = problem_from_key(cell.problem)
        alg = cell.algorithm
        if alg.get("algorithm") in BASELINES:
            rng = make_rng(cell.seed)
            fn = cma_run if alg["algorithm"] == "CMA" else cma_tr_run
            rec = fn(problem, cell.budget, rng=rng)
            rec.seed = cell.seed
            return rec
        cfg = OptimizerConfig.from_dict({**alg, "budget": cell.budget})
        return run(problem, cfg, cell.seed)
    except Exception as exc:  # one bad cell must not sink the suite
        logger.exception("cell %s failed", cell.filename)
        return RunRecord(problem=cell.problem, algorithm=cell.label, seed=cell.seed, budget=cell.budget,
                         config=dict(cell.algorithm), errors=[f"{type(exc).__name__}: {exc}"],
                         status="failed")


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def pending_cells(spec: SuiteSpec, out_dir) -> list[Cell]:
    out_dir = Path(out_dir)
    return [c for c in spec.cells() if not (out_dir / c.filename).exists()]


def run_suite(spec: SuiteSpec, out_dir, workers: int = 1, resume: bool = True) -> list[RunRecord]:
    """Run every cell of ``spec`` and return all records in grid order."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = spec.cells()
    todo = pending_cells(spec, out_dir) if resume else cells
    logger.info("%d cells, %d to run", len(cells), len(todo))
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for cell, rec in zip(todo, pool.map(run_cell, todo)):
                _atomic_write(out_dir / cell.filename, rec.to_json())
    else:
        for cell in todo:
            _atomic_write(out_dir / cell.filename, run_cell(cell).to_json())
    return [RunRecord.load(out_dir / c.filename) for c in cells]


def load_records(records_dir) -> list[RunRecord]:
    paths = sorted(Path(records_dir).glob("*.json"))
    return [RunRecord.load(p) for p in paths]


# ---------------------------------------------------------------------------
# metrics


@dataclass
class AlgorithmMetrics:
    algorithm: str
    cells: int
    solved: int
    solved_fraction: float
    budget_to_solve: float | None
    mean_norm: float
    std_norm: float

    @property
    def unsolved(self) -> int:
        return self.cells - self.solved


@dataclass
class MetricsTable:
    rows: list[AlgorithmMetrics]
    threshold: float = SOLVED_THRESHOLD

    def __getitem__(self, algorithm: str) -> AlgorithmMetrics:
        for row in self.rows:
            if row.algorithm == algorithm:
                return row
        raise KeyError(algorithm)

    def to_dicts(self) -> list[dict]:
        return [dataclasses.asdict(r) for r in self.rows]


def _group(records) -> dict[str, list[RunRecord]]:
    groups: dict[str, list[RunRecord]] = {}
    for rec in records:
        groups.setdefault(rec.algorithm, []).append(rec)
    return groups


def aggregate(records, threshold: float = SOLVED_THRESHOLD) -> MetricsTable:
    """Per-algorithm budget to solve, solved fraction and final normalized value statistics."""
    records = list(records)
    if not records:
        raise ValueError("no records to aggregate")
    rows = []
    for alg, recs in _group(records).items():
        finals = np.array([r.final_normalized for r in recs])
        crossings = [c for c in (r.first_crossing(threshold) for r in recs) if c is not None]
        solved = int(np.count_nonzero(finals < threshold))
        rows.append(AlgorithmMetrics(
            algorithm=alg, cells=len(recs), solved=solved, solved_fraction=solved / len(recs),
            budget_to_solve=float(np.mean(crossings)) if crossings else None,
            mean_norm=float(finals.mean()), std_norm=float(finals.std())))
    return MetricsTable(rows, threshold)


def welch_t_test(a, b) -> float:
    """Two-sided p-value of the unequal-variance t-test."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    if np.ptp(a) == 0 and np.ptp(b) == 0:
        return 1.0 if a[0] == b[0] else 0.0
    return float(stats.ttest_ind(a, b, equal_var=False).pvalue)


def coefficient_of_variation(values) -> float:
    values = np.asarray(values, dtype=float)
    mean = values.mean()
    if mean == 0:
        return 0.0 if np.all(values == 0) else math.inf
    return float(values.std() / abs(mean))


# ---------------------------------------------------------------------------
# plot data


def _best_at(rec: RunRecord, grid: np.ndarray) -> np.ndarray:
    """Normalized best-so-far of ``rec`` at each evaluation count of ``grid`` (1.0 before the first row)."""
    evals = np.array([r.evals_used for r in rec.trajectory])
    vals = np.array([r.f_best_normalized for r in rec.trajectory])
    idx = np.searchsorted(evals, grid, side="right") - 1
    out = np.where(idx >= 0, vals[np.maximum(idx, 0)] if vals.size else 1.0, 1.0)
    return out


def convergence_curves(records, points: int = 100) -> list[dict]:
    rows = []
    for alg, recs in _group(records).items():
        top = max(r.budget for r in recs)
        grid = np.unique(np.linspace(1, top, points).round().astype(int))
        curves = np.stack([_best_at(r, grid) for r in recs])
        q25, med, q75 = np.quantile(curves, [0.25, 0.5, 0.75], axis=0)
        for k, e in enumerate(grid):
            rows.append({"algorithm": alg, "evals": int(e), "median": float(med[k]),
                         "q25": float(q25[k]), "q75": float(q75[k])})
    return rows


def success_curves(records, thresholds=SUCCESS_THRESHOLDS) -> list[dict]:
    rows = []
    for alg, recs in _group(records).items():
        finals = np.array([r.final_normalized for r in recs])
        for t in thresholds:
            rows.append({"algorithm": alg, "threshold": float(t),
                         "solved_fraction": float(np.count_nonzero(finals < t) / finals.size)})
    return rows


def _csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                             for k, v in row.items()})
    return buf.getvalue()


def emit(records, table: MetricsTable, out_dir, fmt: str = "csv") -> list[Path]:
    """Write the metrics table and both plot-data tables; all files or none."""
    records = list(records)
    if not records:
        raise ValueError("no records to emit")
    if fmt not in ("csv", "json"):
        raise ValueError(f"format must be csv or json, got {fmt!r}")
    out_dir = Path(out_dir)
    tables = {"metrics": table.to_dicts(), "convergence": convergence_curves(records),
              "success": success_curves(records)}
    if fmt == "csv":
        texts = {f"{k}.csv": _csv_text(v) for k, v in tables.items()}
    else:
        texts = {f"{k}.json": json.dumps(v, indent=1, sort_keys=True) + "\n" for k, v in tables.items()}
    out_dir.mkdir(parents=True, exist_ok=True)
    staged: list[tuple[str, Path]] = []
    try:
        for name, text in texts.items():
            fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".tmp-")
            staged.append((tmp, out_dir / name))
            with os.fdopen(fd, "w") as fh:
                fh.write(text)
        for tmp, dest in staged:
            os.replace(tmp, dest)
    except BaseException:
        for tmp, _ in staged:
            Path(tmp).unlink(missing_ok=True)
        raise
    return [dest for _, dest in staged]


def read_metrics_csv(path) -> MetricsTable:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(AlgorithmMetrics(
                algorithm=row["algorithm"], cells=int(row["cells"]), solved=int(row["solved"]),
                solved_fraction=float(row["solved_fraction"]),
                budget_to_solve=float(row["budget_to_solve"]) if row["budget_to_solve"] else None,
                mean_norm=float(row["mean_norm"]), std_norm=float(row["std_norm"])))
    return MetricsTable(rows)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepReport:
    param: str
    values: list
    metrics: list[AlgorithmMetrics] = field(default_factory=list)
    metric: str = "mean_norm"

    @property
    def cv(self) -> float:
        return coefficient_of_variation([getattr(m, self.metric) for m in self.metrics])


def sweep(base: OptimizerConfig, param: str, values, problems, seeds, budget: int | None = None,
          out_dir=None, workers: int = 1, metric: str = "mean_norm") -> SweepReport:
    """Run the suite once per value of ``param`` and report the spread of ``metric``."""
    names = [f.name for f in dataclasses.fields(OptimizerConfig)]
    if param not in names or param in ("name", "variant", "budget"):
        raise ConfigurationError(f"cannot sweep {param!r}; valid parameters: {names}")
    report = SweepReport(param, list(values), metric=metric)
    with tempfile.TemporaryDirectory() as scratch:
        root = Path(out_dir) if out_dir is not None else Path(scratch)
        for v in report.values:
            label = f"{base.label}[{param}={v}]"
            cfg = base.replace(**{param: v, "name": label})
            spec = SuiteSpec(problems, [cfg], seeds, budget)
            recs = run_suite(spec, root / f"{param}={v}", workers=workers)
            report.metrics.append(aggregate(recs).rows[0])
    return report


# ---------------------------------------------------------------------------
# CLI


def _default_out(arg) -> Path:
    if arg:
        return Path(arg)
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env)
    raise ConfigurationError(f"no output directory: pass --out or set {OUTPUT_ENV}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _cmd_run(args) -> int:
    spec = SuiteSpec.load(args.spec) if args.spec else SuiteSpec.desk()
    out = _default_out(args.out)
    records = run_suite(spec, out / "records", workers=args.workers, resume=not args.fresh)
    table = aggregate(records)
    emit(records, table, out, fmt=args.format)
    _print_table(table)
    return 0


def _cmd_aggregate(args) -> int:
    records_dir = Path(args.records)
    records = load_records(records_dir)
    out = Path(args.out) if args.out else records_dir.parent
    table = aggregate(records)
    emit(records, table, out, fmt=args.format)
    _print_table(table)
    return 0


def _cmd_sweep(args) -> int:
    base = PRESETS[args.algorithm] if args.algorithm in PRESETS else None
    if base is None:
        raise ConfigurationError(f"sweeps need an optimizer preset, got {args.algorithm!r}")
    problems = [(f, d) for d in args.dims for f in args.functions]
    values = [_parse_value(v) for v in args.values]
    report = sweep(base, args.param, values, problems, list(range(args.seeds)), args.budget,
                   out_dir=_default_out(args.out) / "sweeps", workers=args.workers)
    for v, m in zip(report.values, report.metrics):
        print(f"{args.param}={v}\tmean_norm={m.mean_norm:.4g}\tsolved={m.solved}/{m.cells}\t"
              f"budget_to_solve={m.budget_to_solve if m.budget_to_solve is not None else '-'}")
    print(f"cv={report.cv:.4f}")
    return 0


def _cmd_list_problems(args) -> int:
    for d in args.dims:
        for f in suite_function_names():
            print(make_problem(f, d).key)
    return 0


def _cmd_list_algorithms(args) -> int:
    for name in algorithm_names():
        print(name)
    return 0


def _print_table(table: MetricsTable) -> None:
    print("algorithm\tsolved\tbudget_to_solve\tmean_norm\tstd_norm")
    for r in table.rows:
        bts = f"{r.budget_to_solve:.0f}" if r.budget_to_solve is not None else "-"
        print(f"{r.algorithm}\t{r.solved}/{r.cells}\t{bts}\t{r.mean_norm:.4g}\t{r.std_norm:.4g}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evograd-bench", description="Benchmark gradient-learning optimizers.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a suite (default: the desk suite)")
    r.add_argument("spec", nargs="?", help="suite spec JSON file")
    r.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV})")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--fresh", action="store_true", help="rerun cells that already have records")
    r.add_argument("--format", choices=("csv", "json"), default="csv")
    r.set_defaults(func=_cmd_run)

    a = sub.add_parser("aggregate", help="tables and plot data from a records directory")
    a.add_argument("records")
    a.add_argument("--out")
    a.add_argument("--format", choices=("csv", "json"), default="csv")
    a.set_defaults(func=_cmd_aggregate)

    s = sub.add_parser("sweep", help="one-parameter sweep with coefficient of variation")
    s.add_argument("param")
    s.add_argument("values", nargs="+")
    s.add_argument("--algorithm", default="EvoGrad2")
    s.add_argument("--functions", nargs="+", default=list(suite_function_names()))
    s.add_argument("--dims", nargs="+", type=int, default=[2])
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--budget", type=int)
    s.add_argument("--out")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=_cmd_sweep)

    lp = sub.add_parser("list-problems")
    lp.add_argument("--dims", nargs="+", type=int, default=list(SUPPORTED_DIMS))
    lp.set_defaults(func=_cmd_list_problems)

    la = sub.add_parser("list-algorithms")
    la.set_defaults(func=_cmd_list_algorithms)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
