"""Hyperparameter selection: 1-shot validation loss, soft neighborhood density, lr sweeps."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import logsumexp
from scipy.stats import spearmanr

from .data import DomainDataset
from .errors import SelectionError
from .models import AdaptableModel, dataset_images, predict
from .transforms import AugmentConfig

ABSOLUTE_LRS = (1e-6, 1e-5, 1e-4, 1e-3)
MULTIPLIERS = (0.1, 0.5, 1.0, 5.0, 10.0)
CRITERIA = ("val_loss", "snd")


def mean_nll(logits: torch.Tensor, labels: torch.Tensor) -> float:
    """Mean cross-entropy of logits against integer labels."""
    if len(labels) == 0:
        raise SelectionError("validation set is empty")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise SelectionError("validation labels outside the model vocabulary")
    return float(F.cross_entropy(logits.double(), labels, reduction="mean"))


def validation_loss(model: AdaptableModel, valset: DomainDataset, aug: AugmentConfig | None = None) -> float:
    """Mean cross-entropy over the validation set under eval-mode preprocessing."""
    if len(valset) == 0:
        raise SelectionError("validation set is empty")
    aug = aug or AugmentConfig()
    x, y = dataset_images(valset, aug)
    logits, _ = predict(model, x, aug)
    return mean_nll(logits, y)


def snd_score(features: np.ndarray | torch.Tensor, temperature: float = 0.05) -> float:
    """Soft neighborhood density of a feature matrix.

    Rows are L2-normalized; for each row, cosine similarities to every *other*
    row are softmaxed at ``temperature`` and the entropy (nats) of that
    distribution is taken. Returns the mean over rows.
    """
    if isinstance(features, torch.Tensor):
        features = features.detach().cpu().numpy()
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise SelectionError("SND needs at least 2 feature rows")
    if not temperature > 0:
        raise SelectionError(f"temperature must be positive, got {temperature}")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise SelectionError("zero-norm feature row")
    x = x / norms
    z = (x @ x.T) / temperature
    np.fill_diagonal(z, -np.inf)
    logp = z - logsumexp(z, axis=1, keepdims=True)
    p = np.exp(logp)
    ent = -np.sum(p * np.where(np.isfinite(logp), logp, 0.0), axis=1)
    return float(ent.mean())


@dataclass(frozen=True)
class SweepGrid:
    mode: str = "absolute"
    values: tuple[float, ...] = ABSOLUTE_LRS

    def __post_init__(self):
        if self.mode not in ("absolute", "multiplier"):
            raise SelectionError(f"grid mode must be absolute or multiplier, got {self.mode!r}")
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise SelectionError("grid is empty")
        if any(v <= 0 for v in vals) or any(b <= a for a, b in zip(vals, vals[1:])):
            raise SelectionError(f"grid values must be positive and strictly increasing: {vals}")
        object.__setattr__(self, "values", vals)

    @classmethod
    def multiplier(cls, values: Sequence[float] = MULTIPLIERS) -> "SweepGrid":
        return cls("multiplier", tuple(values))

    def learning_rates(self, base_lr: float | None = None) -> list[float]:
        if self.mode == "absolute":
            return list(self.values)
        if base_lr is None:
            raise SelectionError("multiplier grid needs a base learning rate")
        return [base_lr * k for k in self.values]

    def to_dict(self) -> dict:
        return {"mode": self.mode, "values": list(self.values)}


@dataclass
class Candidate:
    lr: float
    criterion_value: float
    accuracy: float | None = None
    snd: float | None = None


@dataclass
class SelectionOutcome:
    criterion: str
    candidates: list[Candidate]
    chosen: int
    grid: SweepGrid | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def chosen_lr(self) -> float:
        return self.candidates[self.chosen].lr

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "grid": self.grid.to_dict() if self.grid else None,
            "chosen": self.chosen,
            "candidates": [
                {"lr": c.lr, "criterion_value": c.criterion_value, "accuracy": c.accuracy, "snd": c.snd}
                for c in self.candidates
            ],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionOutcome":
        grid = SweepGrid(d["grid"]["mode"], tuple(d["grid"]["values"])) if d.get("grid") else None
        cands = [Candidate(**c) for c in d["candidates"]]
        return cls(d["criterion"], cands, d["chosen"], grid, d.get("meta", {}))

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def choose(values: Sequence[float], criterion: str) -> int:
    """Index of the best value; ties go to the earliest (smallest-lr) candidate."""
    if criterion not in CRITERIA:
        raise SelectionError(f"unknown criterion {criterion!r}")
    vals = np.asarray(values, dtype=np.float64)
    if criterion == "snd":
        vals = -vals
    vals = np.where(np.isnan(vals), np.inf, vals)
    return int(np.argmin(vals))


def sweep(
    adapt_fn: Callable[[float], Any],
    base_lr: float | None,
    grid: SweepGrid,
    criterion: str,
    score_fn: Callable[[Any], float],
    eval_fn: Callable[[Any], float] | None = None,
    snd_fn: Callable[[Any], float] | None = None,
) -> SelectionOutcome:
    """Run ``adapt_fn(lr)`` for every grid learning rate and pick one by ``criterion``.

    ``score_fn`` maps an adapted result to the criterion value (validation loss
    or SND). ``eval_fn`` optionally reports target-test accuracy for analysis;
    it never influences the choice.
    """
    if criterion not in CRITERIA:
        raise SelectionError(f"unknown criterion {criterion!r}")
    candidates = []
    for lr in grid.learning_rates(base_lr):
        try:
            result = adapt_fn(lr)
            value = float(score_fn(result))
            acc = float(eval_fn(result)) if eval_fn is not None else None
            snd = float(snd_fn(result)) if snd_fn is not None else (value if criterion == "snd" else None)
        except Exception as e:
            raise SelectionError(f"sweep candidate lr={lr:g} failed: {e}") from e
        candidates.append(Candidate(lr, value, acc, snd))
    chosen = choose([c.criterion_value for c in candidates], criterion)
    return SelectionOutcome(criterion, candidates, chosen, grid, {"base_lr": base_lr})


@dataclass
class SndReport:
    points: list[tuple[float, float]]
    spearman: float
    plot_path: Path | None = None
    csv_path: Path | None = None


def rank_correlation(x: Sequence[float], y: Sequence[float]) -> float:
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return math.nan
    rho = spearmanr(x, y).statistic
    return float(rho)


def snd_accuracy_report(outcome: SelectionOutcome | Sequence[SelectionOutcome], out_path: str | Path | None = None,
                        title: str | None = None) -> SndReport:
    """Scatter SND against target accuracy, one point per candidate, plus Spearman correlation."""
    outcomes = [outcome] if isinstance(outcome, SelectionOutcome) else list(outcome)
    points, lrs, groups = [], [], []
    for g, oc in enumerate(outcomes):
        for c in oc.candidates:
            if c.accuracy is None or c.snd is None:
                raise SelectionError("outcome lacks accuracy or SND values")
            points.append((c.snd, c.accuracy))
            lrs.append(c.lr)
            groups.append(g)
    rho = rank_correlation([p[0] for p in points], [p[1] for p in points])
    report = SndReport(points, rho)
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        csv_path = out_path.with_suffix(".csv")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "lr", "snd", "accuracy"])
            for g, lr, (s, a) in zip(groups, lrs, points):
                w.writerow([g, repr(lr), repr(s), repr(a)])
        from .plots import scatter_snd_accuracy

        scatter_snd_accuracy(points, lrs, out_path, title=title or f"Spearman = {rho:.3f}")
        report.plot_path, report.csv_path = out_path, csv_path
    return report
