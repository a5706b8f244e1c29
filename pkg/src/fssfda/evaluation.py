"""Target-test metrics and the mean (std)-over-seeds tables."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import AggregationError

STD_CONVENTION = "population"


def _as_labels(a) -> np.ndarray:
    return np.asarray(a, dtype=np.int64).reshape(-1)


def accuracy(preds, labels) -> float:
    preds, labels = _as_labels(preds), _as_labels(labels)
    if len(preds) != len(labels):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(labels)} labels")
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(preds == labels))


def per_class_accuracy(preds, labels, n_classes: int) -> float:
    """Mean over classes of within-class accuracy; every class must occur in ``labels``."""
    preds, labels = _as_labels(preds), _as_labels(labels)
    if len(preds) != len(labels):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(labels)} labels")
    counts = np.bincount(labels, minlength=n_classes)
    missing = np.flatnonzero(counts[:n_classes] == 0)
    if len(missing):
        raise ValueError(f"class {int(missing[0])} has no test examples")
    hits = np.bincount(labels[preds == labels], minlength=n_classes)
    return float(np.mean(hits[:n_classes] / counts[:n_classes]))


@dataclass(frozen=True)
class PairResult:
    source_id: str
    target_id: str
    scenario: str
    method: str
    shots: int
    seed: int
    accuracy: float
    per_class_accuracy: float
    n_test: int

    def __post_init__(self):
        if not (0 <= self.accuracy <= 1 and 0 <= self.per_class_accuracy <= 1):
            raise ValueError("metrics must lie in [0, 1]")
        if self.n_test < 1:
            raise ValueError("n_test must be >= 1")

    @property
    def pair(self) -> str:
        return f"{self.source_id}->{self.target_id}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PairResult":
        return cls(**d)


@dataclass
class AggregateTable:
    rows: list[tuple[str, int]]
    columns: list[str]  # pair columns, then "Avg"
    cells: dict[tuple[tuple[str, int], str], tuple[float, float | None]]
    seeds: tuple[int, ...]
    metric: str = "accuracy"
    meta: dict = field(default_factory=lambda: {"std": STD_CONVENTION})

    def cell(self, method: str, shots: int, column: str) -> tuple[float, float | None]:
        return self.cells[((method, shots), column)]


def aggregate(results: Iterable[PairResult], seeds: Sequence[int], metric: str = "accuracy") -> AggregateTable:
    """Mean and population std over ``seeds`` for every (method, shots) x pair cell, plus an Avg column.

    Avg is the unweighted mean over pairs; its std is taken over the per-seed
    pair averages.
    """
    if metric not in ("accuracy", "per_class_accuracy"):
        raise AggregationError(f"unknown metric {metric!r}")
    seeds = tuple(seeds)
    if not seeds or len(set(seeds)) != len(seeds):
        raise AggregationError(f"seeds must be non-empty and distinct: {seeds}")
    values: dict[tuple[tuple[str, int], str], dict[int, float]] = {}
    for r in results:
        key = ((r.method, r.shots), r.pair)
        per_seed = values.setdefault(key, {})
        if r.seed not in seeds:
            continue
        if r.seed in per_seed:
            raise AggregationError(f"duplicate result for {r.method} {r.shots}-shot {r.pair} seed {r.seed}")
        per_seed[r.seed] = getattr(r, metric)
    rows = sorted({k[0] for k in values})
    pairs = sorted({k[1] for k in values})
    if not rows:
        raise AggregationError("no results to aggregate")
    cells = {}
    for row in rows:
        matrix = np.empty((len(seeds), len(pairs)))
        for j, pair in enumerate(pairs):
            per_seed = values.get((row, pair), {})
            for i, s in enumerate(seeds):
                if s not in per_seed:
                    raise AggregationError(f"missing result for {row[0]} {row[1]}-shot {pair} seed {s}")
                matrix[i, j] = per_seed[s]
            cells[(row, pair)] = mean_std(matrix[:, j])
        cells[(row, "Avg")] = mean_std(matrix.mean(axis=1))
    return AggregateTable(rows, pairs + ["Avg"], cells, seeds, metric)


def mean_std(v) -> tuple[float, float | None]:
    """Mean and population standard deviation; std is None for a single value."""
    v = np.asarray(v, dtype=np.float64)
    return float(np.mean(v)), (float(np.std(v, ddof=0)) if len(v) > 1 else None)


def format_cell(mean: float, std: float | None, percent: bool = True) -> str:
    scale = 100.0 if percent else 1.0
    m = f"{round(mean * scale, 10):.2f}"
    s = "–" if std is None else f"{round(std * scale, 10):.2f}"
    return f"{m} ({s})"


def render_table(table: AggregateTable, format: str = "text", percent: bool = True) -> str:
    """CSV or aligned text, cells as ``mean (std)``."""
    if not table.rows:
        raise AggregationError("empty table")
    header = ["method", "shots"] + table.columns
    body = [
        [m, str(k)] + [format_cell(*table.cells[((m, k), c)], percent=percent) for c in table.columns]
        for m, k in table.rows
    ]
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(body)
        return buf.getvalue()
    if format != "text":
        raise ValueError(f"unknown table format {format!r}")
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_result(result: PairResult, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {**(extra or {}), "result": result.to_dict()}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def result_path(outdir: str | Path, scenario: str, source: str, target: str, method: str, shots: int, seed: int) -> Path:
    return Path(outdir) / scenario / f"{source}__{target}" / f"{method}_{shots}shot_seed{seed}.json"
