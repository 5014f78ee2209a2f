"""
Records - the per-evaluation RunRecord and the CSV artifacts written by the CLI.

All CSVs are UTF-8 with LF line endings and a fixed column order; floats use repr-stable
`.12g` formatting so identical runs produce byte-identical files.
"""

import csv
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, List, Sequence, Tuple

from .errors import RPGError, TrainingDivergence

RUN_COLUMNS = [
    "step",
    "env_steps",
    "return_mean",
    "return_std",
    "coverage",
    "reward_term",
    "prior_term",
    "cross_entropy_term",
    "entropy_term",
    "grad_norm",
]
GRADCHECK_COLUMNS = ["test_id", "analytic", "numeric", "rel_err", "pass"]
COVERAGE_COLUMNS = ["env_steps", "rooms_covered"]


def format_cell(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


def write_csv(path: str, columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            if len(row) != len(columns):
                raise RPGError(f"{os.path.basename(path)}: row has {len(row)} cells, expected {len(columns)}")
            writer.writerow([format_cell(v) for v in row])
    return path


@dataclass
class RunRow:
    step: int
    env_steps: int
    return_mean: float
    return_std: float
    coverage: int = 0
    reward_term: float = 0.0
    prior_term: float = 0.0
    cross_entropy_term: float = 0.0
    entropy_term: float = 0.0
    grad_norm: float = 0.0

    def as_row(self) -> List:
        return [getattr(self, name) for name in RUN_COLUMNS]


@dataclass
class RunRecord:
    """Evaluation rows of one training run, plus run-level extras for diagnostics."""

    rows: List[RunRow] = field(default_factory=list)
    objective_curve: List[float] = field(default_factory=list)
    mode_inventory: List[dict] = field(default_factory=list)
    coverage_curve: List[Tuple[int, int]] = field(default_factory=list)

    def append(self, row: RunRow):
        if self.rows and row.env_steps < self.rows[-1].env_steps:
            raise RPGError(f"env_steps went backwards: {row.env_steps} < {self.rows[-1].env_steps}")
        for f in fields(row):
            value = getattr(row, f.name)
            if isinstance(value, float) and not math.isfinite(value):
                raise TrainingDivergence(f"non-finite {f.name} at step {row.step}")
        self.rows.append(row)

    @property
    def final(self) -> RunRow:
        if not self.rows:
            raise RPGError("empty run record")
        return self.rows[-1]

    def column(self, name: str) -> List:
        return [getattr(r, name) for r in self.rows]

    def to_dicts(self) -> List[dict]:
        return [asdict(r) for r in self.rows]

    def write_csv(self, path: str) -> str:
        return write_csv(path, RUN_COLUMNS, (r.as_row() for r in self.rows))

    def write_coverage_csv(self, path: str) -> str:
        return write_csv(path, COVERAGE_COLUMNS, self.coverage_curve)
