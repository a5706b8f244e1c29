"""Domain datasets, deterministic splits, few-shot sampling and scenario builders.

Everything here is a pure function of its inputs and an integer seed. Ids are
the POSIX path of an image relative to the dataset root, so ordering and
serialized plans are identical across platforms.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import IngestionError, SamplingError, ScenarioError, SplitError

IMAGE_EXTENSIONS = frozenset({".jpg", ".jpeg", ".png", ".bmp", ".gif", ".tif", ".tiff", ".webp"})
UNKNOWN_LABEL = -1


@dataclass(frozen=True)
class LabeledExample:
    example_id: str
    image_ref: str
    class_id: int
    domain_id: str


@dataclass(frozen=True)
class DomainDataset:
    domain_id: str
    examples: tuple[LabeledExample, ...]
    vocabulary: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(sorted(self.examples, key=lambda e: e.example_id)))
        object.__setattr__(self, "vocabulary", tuple(self.vocabulary))
        if len(self.vocabulary) < 2:
            raise IngestionError(f"domain {self.domain_id!r} needs at least 2 classes, got {len(self.vocabulary)}")
        seen = set()
        for ex in self.examples:
            if ex.example_id in seen:
                raise IngestionError(f"duplicate example id {ex.example_id!r}")
            seen.add(ex.example_id)
            if not (ex.class_id == UNKNOWN_LABEL or 0 <= ex.class_id < len(self.vocabulary)):
                raise IngestionError(f"example {ex.example_id!r} has class {ex.class_id} outside vocabulary")

    @property
    def n_classes(self) -> int:
        return len(self.vocabulary)

    @property
    def ids(self) -> list[str]:
        return [e.example_id for e in self.examples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.class_id for e in self.examples], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.examples)

    def get(self, example_id: str) -> LabeledExample:
        return self._index()[example_id]

    def _index(self) -> dict[str, LabeledExample]:
        cache = self.__dict__.get("_by_id")
        if cache is None:
            cache = {e.example_id: e for e in self.examples}
            object.__setattr__(self, "_by_id", cache)
        return cache

    def subset(self, ids: Iterable[str], domain_id: str | None = None) -> "DomainDataset":
        index = self._index()
        return DomainDataset(domain_id or self.domain_id, tuple(index[i] for i in ids), self.vocabulary)

    def class_counts(self) -> np.ndarray:
        labels = self.labels
        labels = labels[labels >= 0]
        return np.bincount(labels, minlength=self.n_classes)

    def ids_by_class(self, ids: Iterable[str] | None = None) -> dict[int, list[str]]:
        wanted = None if ids is None else set(ids)
        out: dict[int, list[str]] = {c: [] for c in range(self.n_classes)}
        for e in self.examples:
            if e.class_id >= 0 and (wanted is None or e.example_id in wanted):
                out[e.class_id].append(e.example_id)
        return out


@dataclass(frozen=True)
class SplitPlan:
    seed: int
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    ratio: float = 0.8
    stratified: bool = True

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "ratio": self.ratio,
            "stratified": self.stratified,
            "train_ids": list(self.train_ids),
            "test_ids": list(self.test_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(d["seed"], tuple(d["train_ids"]), tuple(d["test_ids"]), d["ratio"], d.get("stratified", True))


@dataclass(frozen=True)
class FewShotSet:
    k: int
    ids: dict[int, tuple[str, ...]]
    seed: int

    @property
    def all_ids(self) -> list[str]:
        return [i for c in sorted(self.ids) for i in self.ids[c]]

    def __len__(self) -> int:
        return sum(len(v) for v in self.ids.values())

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "ids": {str(c): list(v) for c, v in sorted(self.ids.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "FewShotSet":
        return cls(d["k"], {int(c): tuple(v) for c, v in d["ids"].items()}, d["seed"])


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = "clean"
    n_known: int | None = None
    known_classes: tuple[int, ...] | None = None
    imbalance_factor: float = 10.0
    imbalance_profile: str = "rsut"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("clean", "ood", "imbalance"):
            raise ScenarioError(f"unknown scenario kind {self.kind!r}")
        if self.kind == "ood" and self.n_known is None and self.known_classes is None:
            raise ScenarioError("ood scenario needs n_known or known_classes")
        if self.kind == "imbalance" and self.imbalance_factor < 1:
            raise ScenarioError(f"imbalance factor must be >= 1, got {self.imbalance_factor}")
        if self.imbalance_profile != "rsut":
            raise ScenarioError(f"unsupported imbalance profile {self.imbalance_profile!r}")

    @property
    def name(self) -> str:
        if self.kind == "ood":
            return f"ood{self.n_known if self.n_known is not None else len(self.known_classes)}"
        if self.kind == "imbalance":
            return f"rsut{self.imbalance_factor:g}"
        return "clean"

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "seed": self.seed}
        if self.kind == "ood":
            d["n_known"] = self.n_known
            if self.known_classes is not None:
                d["known_classes"] = list(self.known_classes)
        if self.kind == "imbalance":
            d["imbalance"] = {"factor": self.imbalance_factor, "profile": self.imbalance_profile}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        imb = d.get("imbalance") or {}
        known = d.get("known_classes")
        return cls(
            kind=d.get("kind", "clean"),
            n_known=d.get("n_known"),
            known_classes=tuple(known) if known is not None else None,
            imbalance_factor=float(imb.get("factor", 10.0)),
            imbalance_profile=imb.get("profile", "rsut"),
            seed=int(d.get("seed", 0)),
        )


# Presets for the known-class counts used in the OoD experiments.
OOD_PRESETS = {"office31": 15, "officehome": 25, "visda": 6}


@dataclass(frozen=True)
class LabelDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("label distribution must be a non-negative vector summing to 1")
        object.__setattr__(self, "probs", p)

    def __len__(self) -> int:
        return len(self.probs)


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def scan_image_folder(root: str | Path, domain: str) -> DomainDataset:
    """Index ``root/domain/<class_name>/<image>``; class names sorted give the vocabulary."""
    root = Path(root)
    domain_dir = root / domain
    if not domain_dir.is_dir():
        raise IngestionError(f"domain directory not found: {domain_dir}")
    class_dirs = sorted(p for p in domain_dir.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise IngestionError(f"{domain_dir} has {len(class_dirs)} class directories, need at least 2")
    examples = []
    for class_id, cdir in enumerate(class_dirs):
        files = sorted(
            p for p in cdir.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not files:
            raise IngestionError(f"class directory {cdir.name!r} in domain {domain!r} has no images")
        for f in files:
            rel = f.relative_to(root).as_posix()
            examples.append(LabeledExample(rel, str(f), class_id, domain))
    return DomainDataset(domain, tuple(examples), tuple(p.name for p in class_dirs))


def split_train_test(ds: DomainDataset, ratio: float = 0.8, seed: int = 0) -> SplitPlan:
    """Class-stratified train/test partition.

    Per class, ``round(ratio * n_c)`` examples go to train, clamped so that each
    class keeps at least one train and one test example.
    """
    if not 0 < ratio < 1:
        raise SplitError(f"ratio must lie in (0, 1), got {ratio}")
    if len(ds) < 2:
        raise SplitError("need at least 2 examples to split")
    rng = _rng(seed, 0)
    train, test = [], []
    for c, ids in ds.ids_by_class().items():
        n = len(ids)
        if n < 2:
            raise SplitError(f"class {ds.vocabulary[c]!r} has {n} example(s); cannot hold out a test example")
        n_train = min(max(int(round(ratio * n)), 1), n - 1)
        perm = rng.permutation(n)
        train.extend(ids[i] for i in perm[:n_train])
        test.extend(ids[i] for i in perm[n_train:])
    unlabeled = [e.example_id for e in ds.examples if e.class_id < 0]
    if unlabeled:
        perm = rng.permutation(len(unlabeled))
        n_train = int(round(ratio * len(unlabeled)))
        train.extend(unlabeled[i] for i in perm[:n_train])
        test.extend(unlabeled[i] for i in perm[n_train:])
    return SplitPlan(seed, tuple(sorted(train)), tuple(sorted(test)), ratio)


def sample_few_shot(ds: DomainDataset, plan: SplitPlan, k: int, seed: int) -> FewShotSet:
    """Draw ``k`` training shots per class from the train split.

    Each class must keep one more eligible example for the 1-shot validation set.
    Shots for a given seed are nested in ``k``: the 1-shot set is a prefix of
    the 3-shot set.
    """
    if k < 1:
        raise SamplingError(f"k must be positive, got {k}")
    by_class = ds.ids_by_class(plan.train_ids)
    rng = _rng(seed, 1)
    out = {}
    for c, ids in by_class.items():
        if len(ids) < k + 1:
            raise SamplingError(
                f"class {ds.vocabulary[c]!r} has {len(ids)} train example(s); "
                f"{k}-shot sampling plus validation needs {k + 1}"
            )
        perm = rng.permutation(len(ids))
        out[c] = tuple(ids[i] for i in perm[:k])
    return FewShotSet(k, out, seed)


def sample_validation_set(ds: DomainDataset, plan: SplitPlan, fewshot: FewShotSet, seed: int) -> FewShotSet:
    taken = set(fewshot.all_ids)
    by_class = ds.ids_by_class(plan.train_ids)
    rng = _rng(seed, 2)
    out = {}
    for c, ids in by_class.items():
        eligible = [i for i in ids if i not in taken]
        if not eligible:
            raise SamplingError(f"class {ds.vocabulary[c]!r} has no train example left for validation")
        out[c] = (eligible[int(rng.integers(len(eligible)))],)
    return FewShotSet(1, out, seed)


@dataclass(frozen=True)
class OodScenario:
    spec: ScenarioSpec
    known_classes: tuple[int, ...]
    source_known: DomainDataset
    target_train_clean: DomainDataset
    target_train_ood: DomainDataset
    target_test_known: DomainDataset
    # labeled known-class target data and its split, for few-shot sampling
    target_known: DomainDataset = field(repr=False)
    plan_known: SplitPlan = field(repr=False)


def _relabel(ds: DomainDataset, mapping: dict[int, int], vocabulary: Sequence[str], keep_unknown: bool) -> DomainDataset:
    examples = []
    for e in ds.examples:
        if e.class_id in mapping:
            examples.append(LabeledExample(e.example_id, e.image_ref, mapping[e.class_id], e.domain_id))
        elif keep_unknown:
            examples.append(LabeledExample(e.example_id, e.image_ref, UNKNOWN_LABEL, e.domain_id))
    return DomainDataset(ds.domain_id, tuple(examples), tuple(vocabulary))


def make_ood_scenario(
    source_ds: DomainDataset,
    target_ds: DomainDataset,
    n_known: int | None = None,
    seed: int = 0,
    *,
    known_classes: Sequence[int] | None = None,
    ratio: float = 0.8,
) -> OodScenario:
    """Open-set target: pick known classes, keep unknown ones only in the unlabeled OoD train set.

    Unknown-class target examples carry ``UNKNOWN_LABEL``; source data and the
    test split only hold known classes, relabeled densely in original order.
    """
    if source_ds.vocabulary != target_ds.vocabulary:
        raise ScenarioError("source and target vocabularies differ")
    K = source_ds.n_classes
    if known_classes is None:
        if n_known is None:
            raise ScenarioError("need n_known or known_classes")
        if not 2 <= n_known < K:
            raise ScenarioError(f"n_known must be in [2, {K}), got {n_known}")
        known = tuple(sorted(int(c) for c in _rng(seed, 3).choice(K, size=n_known, replace=False)))
    else:
        known = tuple(sorted(set(int(c) for c in known_classes)))
        if n_known is not None and len(known) != n_known:
            raise ScenarioError("len(known_classes) != n_known")
        if not 2 <= len(known) < K or known[-1] >= K or known[0] < 0:
            raise ScenarioError(f"invalid known classes {known} for K={K}")
    mapping = {c: i for i, c in enumerate(known)}
    vocab = [source_ds.vocabulary[c] for c in known]
    plan = split_train_test(target_ds, ratio, seed)

    source_known = _relabel(source_ds, mapping, vocab, keep_unknown=False)
    target_train = target_ds.subset(plan.train_ids)
    target_test = target_ds.subset(plan.test_ids)
    train_ood = _relabel(target_train, mapping, vocab, keep_unknown=True)
    train_clean = _relabel(target_train, mapping, vocab, keep_unknown=False)
    test_known = _relabel(target_test, mapping, vocab, keep_unknown=False)
    target_known = DomainDataset(target_ds.domain_id, train_clean.examples + test_known.examples, tuple(vocab))
    plan_known = SplitPlan(seed, tuple(train_clean.ids), tuple(test_known.ids), ratio)
    spec = ScenarioSpec("ood", len(known), known, seed=seed)
    return OodScenario(spec, known, source_known, train_clean, train_ood, test_known, target_known, plan_known)


def rsut_profile(n_max: int, factor: float, n_classes: int) -> np.ndarray:
    """Geometric long tail ``n_max * factor**(-i/(K-1))``, rounded, never below 1."""
    if factor < 1:
        raise ScenarioError(f"imbalance factor must be >= 1, got {factor}")
    i = np.arange(n_classes)
    counts = np.rint(n_max * factor ** (-i / (n_classes - 1)))
    return np.maximum(counts, 1).astype(np.int64)


def make_rsut_imbalance(
    source_ds: DomainDataset,
    target_ds: DomainDataset,
    factor: float = 10.0,
    seed: int = 0,
    *,
    n_max: int | None = None,
) -> tuple[DomainDataset, DomainDataset]:
    """Subsample both domains to mutually reversed long-tailed label distributions.

    A seed-chosen class ordering receives the geometric profile in the source
    and the reversed profile in the target. ``n_max`` defaults to the smallest
    per-class count across both domains, so every class can fill every level.
    """
    if factor < 1:
        raise ScenarioError(f"imbalance factor must be >= 1, got {factor}")
    if source_ds.vocabulary != target_ds.vocabulary:
        raise ScenarioError("source and target vocabularies differ")
    K = source_ds.n_classes
    src_by, tgt_by = source_ds.ids_by_class(), target_ds.ids_by_class()
    available = min(min(len(src_by[c]), len(tgt_by[c])) for c in range(K))
    if available < 1:
        raise ScenarioError("every class needs at least one example in both domains")
    if n_max is None:
        n_max = available
    elif n_max > available:
        raise ScenarioError(f"n_max={n_max} exceeds the smallest class population {available}")
    profile = rsut_profile(n_max, factor, K)
    rng = _rng(seed, 4)
    order = rng.permutation(K)
    src_ids, tgt_ids = [], []
    for rank, c in enumerate(order):
        s_ids, t_ids = src_by[int(c)], tgt_by[int(c)]
        n_src, n_tgt = int(profile[rank]), int(profile[K - 1 - rank])
        src_ids.extend(s_ids[i] for i in sorted(rng.choice(len(s_ids), n_src, replace=False)))
        tgt_ids.extend(t_ids[i] for i in sorted(rng.choice(len(t_ids), n_tgt, replace=False)))
    return source_ds.subset(src_ids), target_ds.subset(tgt_ids)


def empirical_label_distribution(ds: DomainDataset) -> LabelDistribution:
    counts = ds.class_counts()
    total = counts.sum()
    if total == 0:
        raise ValueError(f"domain {ds.domain_id!r} has no labeled examples")
    return LabelDistribution(counts / total)


def bhattacharyya_distance(p: LabelDistribution | Sequence[float], q: LabelDistribution | Sequence[float]) -> float:
    """``-ln sum_y sqrt(P(y) Q(y))``; ``inf`` when the supports are disjoint."""
    p = p.probs if isinstance(p, LabelDistribution) else np.asarray(p, dtype=np.float64)
    q = q.probs if isinstance(q, LabelDistribution) else np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"distribution lengths differ: {p.shape} vs {q.shape}")
    bc = float(np.sum(np.sqrt(p * q)))
    if bc <= 0.0:
        return math.inf
    # the coefficient never exceeds 1; treat rounding noise around 1 as identity
    if bc >= 1.0 - 1e-12:
        return 0.0
    return -math.log(bc)


def average_pairwise_shift(domains: Sequence[DomainDataset]) -> float:
    if len(domains) < 2:
        raise ValueError("need at least two domains")
    vocab = domains[0].vocabulary
    for d in domains[1:]:
        if d.vocabulary != vocab:
            raise ValueError(f"domain {d.domain_id!r} vocabulary differs from {domains[0].domain_id!r}")
    dists = [empirical_label_distribution(d) for d in domains]
    vals = [
        bhattacharyya_distance(dists[i], dists[j])
        for i in range(len(dists))
        for j in range(len(dists))
        if i != j
    ]
    return float(np.mean(vals))


def dump_json(obj, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
