"""Few-shot adaptation (LP, FT, LP-FT) and an unsupervised pseudo-label + information-maximization baseline."""

from __future__ import annotations

import copy
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import DomainDataset
from .errors import ConfigError, TrainingError
from .models import AdaptableModel, dataset_images, partition_parameters, predict, runtime_device
from .sam import SAM, sam_update
from .transforms import AugmentConfig, eval_transform, train_transform

METHODS = ("LP", "FT", "LP_FT", "PL_IM")


@dataclass(frozen=True)
class AdaptationRecipe:
    method: str = "FT"
    lr: float = 1e-4
    iterations: int = 1000
    batch_size: int = 32
    sam_rho: float = 0.05
    augmentation: bool = True
    seed: int = 0
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    # LP_FT only: length of the head-only phase; None means ``iterations``
    lp_iterations: int | None = None
    # PL_IM only: weight of the pseudo-label cross-entropy term
    pseudo_label_weight: float = 1.0
    name: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.sam_rho < 0:
            raise ConfigError(f"sam_rho must be >= 0, got {self.sam_rho}")
        object.__setattr__(self, "betas", tuple(self.betas))

    @property
    def label(self) -> str:
        return self.name or self.method

    @property
    def phase1_iterations(self) -> int:
        return self.iterations if self.lp_iterations is None else self.lp_iterations

    def replace(self, **changes) -> "AdaptationRecipe":
        return AdaptationRecipe(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptationRecipe":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown recipe field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    phases: list[str] = field(default_factory=list)
    wall_time: float = 0.0

    def __len__(self) -> int:
        return len(self.losses)

    def record(self, phase: str, loss: float) -> None:
        self.phases.append(phase)
        self.losses.append(loss)

    def extend(self, other: "TrainLog") -> None:
        self.losses.extend(other.losses)
        self.phases.extend(other.phases)
        self.wall_time += other.wall_time

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"index": i, "phase": p, "loss": l}) + "\n"
            for i, (p, l) in enumerate(zip(self.phases, self.losses))
        )

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl())
        return path

    @classmethod
    def read(cls, path: str | Path) -> "TrainLog":
        log = cls()
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            log.record(rec["phase"], rec["loss"])
        return log


def derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1, dtype=np.uint64)[0] >> 1)


def _batch_indices(n: int, batch_size: int, gen: torch.Generator):
    """Infinite stream of index batches.

    With fewer examples than the batch size every example appears once and the
    rest of the batch is drawn with replacement; otherwise epochs of shuffled,
    non-overlapping batches.
    """
    if n < batch_size:
        while True:
            yield torch.cat([torch.randperm(n, generator=gen), torch.randint(n, (batch_size - n,), generator=gen)])
    while True:
        perm = torch.randperm(n, generator=gen)
        for s in range(n // batch_size):
            yield perm[s * batch_size : (s + 1) * batch_size]


def _make_optimizer(params, recipe: AdaptationRecipe) -> SAM:
    return SAM(params, torch.optim.Adam, rho=recipe.sam_rho, lr=recipe.lr, betas=recipe.betas, weight_decay=recipe.weight_decay)


def _check_labels(model: AdaptableModel, ds: DomainDataset) -> None:
    if ds.n_classes != model.spec.n_classes:
        raise TrainingError(f"data has {ds.n_classes} classes but the model head has {model.spec.n_classes}")
    if model.vocabulary is not None and tuple(model.vocabulary) != tuple(ds.vocabulary):
        raise TrainingError("data vocabulary does not match the model vocabulary")
    if len(ds) == 0:
        raise TrainingError("few-shot set is empty")
    if (ds.labels < 0).any():
        raise TrainingError("few-shot set contains unlabeled examples")


def _supervised(
    model: AdaptableModel,
    x: torch.Tensor,
    y: torch.Tensor,
    recipe: AdaptationRecipe,
    aug: AugmentConfig,
    iterations: int,
    train_body: bool,
    seed: int,
    phase: str,
) -> TrainLog:
    body, head = partition_parameters(model)
    if train_body:
        body.unfreeze()
    else:
        body.freeze()
    head.unfreeze()
    log = TrainLog()
    if iterations == 0:
        body.unfreeze()
        return log
    gen = torch.Generator().manual_seed(seed)
    dev = runtime_device()
    model.to(dev)
    opt = _make_optimizer(model.parameters(), recipe)
    batches = _batch_indices(len(x), recipe.batch_size, gen)
    model.train()
    t0 = time.perf_counter()
    for _ in range(iterations):
        idx = next(batches)
        xb = train_transform(x[idx], aug, gen) if recipe.augmentation else eval_transform(x[idx], aug)
        xb, yb = xb.to(dev), y[idx].to(dev)
        log.record(phase, sam_update(model, lambda: F.cross_entropy(model(xb), yb), opt))
    log.wall_time = time.perf_counter() - t0
    model.eval()
    body.unfreeze()
    return log


def linear_probe(model: AdaptableModel, fewshot: DomainDataset, recipe: AdaptationRecipe, aug: AugmentConfig | None = None):
    """Train the head only; body parameters and BatchNorm statistics stay bit-identical."""
    aug = aug or AugmentConfig()
    _check_labels(model, fewshot)
    model = copy.deepcopy(model)
    x, y = dataset_images(fewshot, aug)
    iterations = recipe.phase1_iterations if recipe.method == "LP_FT" else recipe.iterations
    log = _supervised(model, x, y, recipe, aug, iterations, train_body=False, seed=recipe.seed, phase="LP")
    return model, log


def fine_tune(model: AdaptableModel, fewshot: DomainDataset, recipe: AdaptationRecipe, aug: AugmentConfig | None = None, *, seed: int | None = None):
    aug = aug or AugmentConfig()
    _check_labels(model, fewshot)
    model = copy.deepcopy(model)
    x, y = dataset_images(fewshot, aug)
    log = _supervised(model, x, y, recipe, aug, recipe.iterations, train_body=True,
                      seed=recipe.seed if seed is None else seed, phase="FT")
    return model, log


def lp_ft(model: AdaptableModel, fewshot: DomainDataset, recipe: AdaptationRecipe, aug: AugmentConfig | None = None):
    """Head-only phase followed by end-to-end fine-tuning from the probed model."""
    probed, log = linear_probe(model, fewshot, recipe.replace(method="LP_FT"), aug)
    tuned, ft_log = fine_tune(probed, fewshot, recipe, aug, seed=derive_seed(recipe.seed, 1))
    log.extend(ft_log)
    return tuned, log


# ---------------------------------------------------------------- unsupervised baseline


@torch.no_grad()
def centroid_pseudo_labels(features: torch.Tensor, probs: torch.Tensor, rounds: int = 1) -> torch.Tensor:
    """Nearest-centroid labels under cosine distance.

    Centroids start as softmax-weighted feature means, then are recomputed from
    the hard assignments ``rounds`` times. Classes nobody predicts get no centroid.
    """
    f = F.normalize(features.double(), dim=1)
    p = probs.double()
    K = p.shape[1]
    present = torch.bincount(p.argmax(1), minlength=K) > 0
    candidates = torch.nonzero(present).flatten()
    weights = p
    for _ in range(rounds + 1):
        cent = weights.T @ f / (weights.sum(0)[:, None] + 1e-8)
        cent = F.normalize(cent[candidates], dim=1)
        labels = candidates[(f @ cent.T).argmax(1)]
        weights = F.one_hot(labels, K).double()
    return labels


def information_maximization(logits: torch.Tensor) -> torch.Tensor:
    """Mean per-example entropy minus entropy of the mean prediction."""
    p = logits.softmax(1)
    ent = -(p * torch.log(p + 1e-5)).sum(1).mean()
    mean = p.mean(0)
    div = -(mean * torch.log(mean + 1e-5)).sum()
    return ent - div


def pseudo_label_adapt(model: AdaptableModel, target_unlabeled: DomainDataset, recipe: AdaptationRecipe, aug: AugmentConfig | None = None):
    """Adapt the body on unlabeled target data with a frozen head.

    Pseudo-labels are recomputed from class centroids in bottleneck space at the
    start of every pass over the target set. Ground-truth labels are never read.
    """
    aug = aug or AugmentConfig()
    if len(target_unlabeled) == 0:
        raise TrainingError("target set is empty")
    model = copy.deepcopy(model)
    x = dataset_images(target_unlabeled, aug)[0]
    body, head = partition_parameters(model)
    head.freeze()
    body.unfreeze()
    log = TrainLog()
    if recipe.iterations == 0:
        head.unfreeze()
        return model, log
    gen = torch.Generator().manual_seed(recipe.seed)
    dev = runtime_device()
    model.to(dev)
    opt = _make_optimizer(body.parameters(), recipe)
    n = len(x)
    bs = min(recipe.batch_size, n)
    per_pass = max(1, n // bs)
    batches = _batch_indices(n, bs, gen)
    t0 = time.perf_counter()
    pseudo = None
    for it in range(recipe.iterations):
        if it % per_pass == 0:
            logits, feats = predict(model, x, aug)
            pseudo = centroid_pseudo_labels(feats, logits.softmax(1))
            model.train()
        idx = next(batches)
        xb = train_transform(x[idx], aug, gen) if recipe.augmentation else eval_transform(x[idx], aug)
        xb, yb = xb.to(dev), pseudo[idx].to(dev)

        def loss_fn():
            out = model(xb)
            loss = information_maximization(out)
            if recipe.pseudo_label_weight:
                loss = loss + recipe.pseudo_label_weight * F.cross_entropy(out, yb)
            return loss

        log.record("PL_IM", sam_update(model, loss_fn, opt))
    log.wall_time = time.perf_counter() - t0
    model.eval()
    head.unfreeze()
    return model, log


def adapt(model: AdaptableModel, recipe: AdaptationRecipe, fewshot: DomainDataset | None = None,
          target_unlabeled: DomainDataset | None = None, aug: AugmentConfig | None = None):
    """Dispatch on ``recipe.method``."""
    if recipe.method == "PL_IM":
        if target_unlabeled is None:
            raise TrainingError("PL_IM needs unlabeled target data")
        return pseudo_label_adapt(model, target_unlabeled, recipe, aug)
    if fewshot is None:
        raise TrainingError(f"{recipe.method} needs a few-shot set")
    fn = {"LP": linear_probe, "FT": fine_tune, "LP_FT": lp_ft}[recipe.method]
    return fn(model, fewshot, recipe, aug)
