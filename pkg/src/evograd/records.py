"""Run traces and their JSON serialization.

A record is a pure function of ``(problem, config, seed)``: it carries no
timestamps or host information, so reruns serialize to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

RECORD_VERSION = 1


def config_hash(config: dict) -> str:
    blob = json.dumps(_plain(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _plain(value):
    """Convert numpy scalars/arrays to JSON-native values; non-finite floats become strings."""
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if np.isfinite(value):
            return value
        return "inf" if value > 0 else ("-inf" if value < 0 else "nan")
    if isinstance(value, np.integer):
        return int(value)
    return value


def _as_float(value) -> float:
    # float() already parses the "inf"/"nan" spellings written by _plain
    return float(value)


@dataclass
class TrajectoryRow:
    evals_used: int
    f_best: float
    f_best_normalized: float


@dataclass
class RunRecord:
    problem: str
    algorithm: str
    seed: int
    budget: int
    config: dict
    trajectory: list[TrajectoryRow] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)
    x_best: list[float] | None = None
    f_best: float = float("inf")
    evals_used: int = 0
    status: str = "ok"

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    @property
    def final_normalized(self) -> float:
        if not self.trajectory:
            return 1.0
        return self.trajectory[-1].f_best_normalized

    def add_point(self, evals_used: int, f_best: float, f_best_normalized: float) -> None:
        row = TrajectoryRow(int(evals_used), float(f_best), float(f_best_normalized))
        if self.trajectory and self.trajectory[-1].evals_used == row.evals_used:
            self.trajectory[-1] = row
        else:
            self.trajectory.append(row)

    def first_crossing(self, threshold: float) -> int | None:
        """Evaluations used at the first trajectory row strictly below ``threshold``."""
        for row in self.trajectory:
            if row.f_best_normalized < threshold:
                return row.evals_used
        return None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["version"] = RECORD_VERSION
        out["config_hash"] = self.config_hash
        out["trajectory"] = [[r.evals_used, r.f_best, r.f_best_normalized] for r in self.trajectory]
        return _plain(out)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        data = dict(data)
        data.pop("version", None)
        data.pop("config_hash", None)
        rows = [TrajectoryRow(int(a), _as_float(b), _as_float(c)) for a, b, c in data.pop("trajectory")]
        data["f_best"] = _as_float(data["f_best"])
        return cls(trajectory=rows, **data)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_json(Path(path).read_text())
