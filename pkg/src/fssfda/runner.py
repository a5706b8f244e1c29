"""Run matrices of (pair, method, shots, seed) cells and persist one record per cell.

Layout under ``output_dir``::

    checkpoints/<scenario>/<source>[__<target>]/    source checkpoints (model.pt + manifest.json)
    <scenario>/<source>__<target>/<method>_<k>shot_seed<s>.json        run records
    <scenario>/<source>__<target>/<method>_<k>shot_seed<s>.log.jsonl   training losses
    selection/<scenario>/<source>__<target>/<method>_seed<s>.json      lr-search outcomes
    sensitivity/<scenario>/...                                         lr-sensitivity sweeps
    failures.json                                                      cells that raised, if any

A record is written once and never modified. Re-running a config skips every
cell whose record carries the same cell digest.
"""

from __future__ import annotations

import json
import logging
import platform
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from multiprocessing import get_context
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .adaptation import AdaptationRecipe, TrainLog, adapt
from .config import ExperimentConfig, canonical_digest, parse_config, synthetic_config, validate_domains
from .data import (
    DomainDataset,
    SplitPlan,
    dump_json,
    make_ood_scenario,
    make_rsut_imbalance,
    sample_few_shot,
    sample_validation_set,
    scan_image_folder,
    split_train_test,
)
from .errors import ConfigError, FssfdaError
from .evaluation import AggregateTable, PairResult, accuracy, aggregate, per_class_accuracy, result_path, write_result
from .models import (
    AdaptableModel,
    ModelSpec,
    _weights_file,
    build_model,
    dataset_images,
    load_checkpoint,
    predict,
    save_checkpoint,
    train_source,
)
from .selection import SelectionOutcome, SweepGrid, snd_accuracy_report, snd_score, sweep, validation_loss
from .synthetic import generic_pretraining_config, make_synthetic_dataset

log = logging.getLogger(__name__)

NO_ADAPT = "No adapt"
GENERIC_TAG = "[generic]"
CLEAN_TAG = "[clean]"


# ---------------------------------------------------------------- cells


@dataclass(frozen=True)
class Cell:
    scenario: str
    source: str
    target: str
    method: str  # row label in tables and file names
    shots: int
    seed: int
    origin: str = "source"
    recipe: AdaptationRecipe = AdaptationRecipe("FT", iterations=0)
    # OoD only: adapt PL_IM on the known-class target data instead of the contaminated set
    clean_target: bool = False

    @property
    def group(self) -> tuple:
        return (self.scenario, self.source, self.target, self.origin, self.method, self.seed)

    def describe(self) -> str:
        return f"{self.scenario} {self.source}->{self.target} {self.method} {self.shots}-shot seed {self.seed}"

    def key(self) -> dict:
        return {
            "scenario": self.scenario,
            "source": self.source,
            "target": self.target,
            "method": self.method,
            "shots": self.shots,
            "seed": self.seed,
            "origin": self.origin,
            "recipe": self.recipe.to_dict(),
            "clean_target": self.clean_target,
        }


def plan_matrix(cfg: ExperimentConfig) -> list[Cell]:
    """Every cell the config asks for, in a fixed order."""
    sc = cfg.scenario.name
    cells = []
    for src, tgt in cfg.pairs():
        for seed in cfg.seeds:
            if cfg.no_adapt:
                cells.append(Cell(sc, src, tgt, NO_ADAPT, 0, seed))
            for origin in cfg.origins:
                tag = GENERIC_TAG if origin == "generic" else ""
                for r in cfg.methods:
                    if r.method == "PL_IM":
                        if origin != "source":
                            continue
                        cells.append(Cell(sc, src, tgt, r.label, 0, seed, origin, r))
                        if cfg.scenario.kind == "ood":
                            cells.append(Cell(sc, src, tgt, r.label + CLEAN_TAG, 0, seed, origin, r, clean_target=True))
                        continue
                    for k in cfg.shots:
                        cells.append(Cell(sc, src, tgt, r.label + tag, k, seed, origin, r))
    return cells


def cell_digest(cfg: ExperimentConfig, cell: Cell) -> str:
    d = cfg.to_dict()
    relevant = {
        "cell": cell.key(),
        "scenario": d["scenario"],
        "split_ratio": d["data"]["split_ratio"],
        "synthetic": d["data"]["synthetic"],
        "model": d["model"],
        "source": d["source"],
        "augment": d["augment"],
        "lr_search": d["lr_search"] if cell.shots > 0 else None,
    }
    return canonical_digest(relevant)


def environment_fingerprint() -> dict:
    return {
        "fssfda": __version__,
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "machine": f"{platform.system()}-{platform.machine()}",
    }


# ---------------------------------------------------------------- data


_DATASETS: dict[tuple[str, str], DomainDataset] = {}


def ensure_data(cfg: ExperimentConfig) -> Path:
    """Generate the synthetic dataset if configured and absent, then check every domain exists."""
    root = cfg.root
    syn = synthetic_config(cfg)
    if syn is not None and not root.exists():
        log.info("writing synthetic dataset to %s", root)
        make_synthetic_dataset(root, syn)
    validate_domains(cfg)
    return root


def load_domain(root: Path, domain: str) -> DomainDataset:
    key = (str(root), domain)
    if key not in _DATASETS:
        _DATASETS[key] = scan_image_folder(root, domain)
    return _DATASETS[key]


@dataclass
class PairData:
    source_train: DomainDataset
    source_key: str  # checkpoint directory under checkpoints/<scenario>/
    target: DomainDataset  # labeled target examples few-shot sets are drawn from
    plan: SplitPlan
    unlabeled: DomainDataset  # what the unsupervised baseline sees
    unlabeled_clean: DomainDataset
    test: DomainDataset


def known_classes(cfg: ExperimentConfig, src: DomainDataset, tgt: DomainDataset) -> tuple[int, ...]:
    spec = cfg.scenario
    if spec.known_classes is not None:
        return tuple(spec.known_classes)
    return make_ood_scenario(src, tgt, spec.n_known, spec.seed, ratio=cfg.data.split_ratio).known_classes


def prepare_pair(cfg: ExperimentConfig, source: str, target: str, seed: int) -> PairData:
    root = cfg.root
    src, tgt = load_domain(root, source), load_domain(root, target)
    spec, ratio = cfg.scenario, cfg.data.split_ratio
    if spec.kind == "ood":
        sc = make_ood_scenario(src, tgt, seed=seed, known_classes=known_classes(cfg, src, tgt), ratio=ratio)
        return PairData(sc.source_known, source, sc.target_known, sc.plan_known, sc.target_train_ood,
                        sc.target_train_clean, sc.target_test_known)
    if spec.kind == "imbalance":
        src_i, tgt_i = make_rsut_imbalance(src, tgt, spec.imbalance_factor, spec.seed)
        plan = split_train_test(tgt_i, ratio, seed)
        train = tgt_i.subset(plan.train_ids)
        return PairData(src_i, f"{source}__{target}", tgt_i, plan, train, train, tgt_i.subset(plan.test_ids))
    plan = split_train_test(tgt, ratio, seed)
    train = tgt.subset(plan.train_ids)
    return PairData(src, source, tgt, plan, train, train, tgt.subset(plan.test_ids))


# ---------------------------------------------------------------- models


def source_checkpoint(cfg: ExperimentConfig, pd: PairData) -> tuple[AdaptableModel, Path]:
    """Load the source checkpoint for this scenario/source, training it first if needed."""
    path = cfg.out / "checkpoints" / cfg.scenario.name / pd.source_key
    # source training starts from generic weights when the config's model asks for them
    init = "generic_imagenet" if cfg.model.pretrained_origin == "generic_imagenet" else "random"
    spec = ModelSpec(cfg.model.backbone_id, pd.source_train.n_classes, cfg.model.bottleneck_dim, init)
    digest = canonical_digest({
        "ids": pd.source_train.ids,
        "labels": pd.source_train.labels.tolist(),
        "spec": cfg.to_dict()["model"],
        "source": cfg.to_dict()["source"],
        "augment": cfg.to_dict()["augment"],
    })
    if (path / "manifest.json").exists():
        model = load_checkpoint(path)
        if model.meta.get("source_digest") == digest:
            return model, path
        log.info("source checkpoint at %s is stale; retraining", path)
    sc = cfg.source
    model = build_model(spec, seed=sc.seed, vocabulary=pd.source_train.vocabulary)
    train_source(model, pd.source_train, sc.epochs, sc.lr, sc.seed, sc.recipe(), cfg.augment)
    model.meta["source_digest"] = digest
    model.spec = replace(spec, pretrained_origin="source_checkpoint")
    save_checkpoint(model, path)
    return load_checkpoint(path), path


def generic_model(cfg: ExperimentConfig, pd: PairData, seed: int) -> AdaptableModel:
    spec = ModelSpec(cfg.model.backbone_id, pd.target.n_classes, cfg.model.bottleneck_dim, "generic_imagenet")
    return build_model(spec, seed=seed, vocabulary=pd.target.vocabulary)


def evaluate_model(model: AdaptableModel, test: DomainDataset, aug) -> tuple[float, float, torch.Tensor, torch.Tensor]:
    x, y = dataset_images(test, aug)
    logits, feats = predict(model, x, aug)
    preds = logits.argmax(1).numpy()
    return accuracy(preds, y.numpy()), per_class_accuracy(preds, y.numpy(), test.n_classes), logits, feats


# ---------------------------------------------------------------- records


@dataclass
class RunRecord:
    path: Path
    cell: dict
    config_digest: str
    cell_digest: str
    result: PairResult
    train_log: str | None
    checkpoint: str | None
    environment: dict
    extra: dict = field(default_factory=dict)
    reused: bool = False

    def to_dict(self) -> dict:
        return {
            "cell": self.cell,
            "config_digest": self.config_digest,
            "cell_digest": self.cell_digest,
            "train_log": self.train_log,
            "checkpoint": self.checkpoint,
            "environment": self.environment,
            **self.extra,
        }

    @classmethod
    def read(cls, path: str | Path) -> "RunRecord":
        path = Path(path)
        d = json.loads(path.read_text())
        extra = {k: v for k, v in d.items() if k not in
                 ("cell", "config_digest", "cell_digest", "train_log", "checkpoint", "environment", "result")}
        return cls(path, d["cell"], d["config_digest"], d["cell_digest"], PairResult.from_dict(d["result"]),
                   d.get("train_log"), d.get("checkpoint"), d.get("environment", {}), extra, reused=True)


def _record_path(cfg: ExperimentConfig, cell: Cell) -> Path:
    return result_path(cfg.out, cell.scenario, cell.source, cell.target, cell.method, cell.shots, cell.seed)


def _existing(cfg: ExperimentConfig, cell: Cell, digest: str) -> RunRecord | None:
    path = _record_path(cfg, cell)
    if not path.exists():
        return None
    try:
        rec = RunRecord.read(path)
    except (OSError, ValueError, KeyError, TypeError):
        return None
    return rec if rec.cell_digest == digest else None


def _rel(cfg: ExperimentConfig, p: Path) -> str:
    try:
        return p.relative_to(cfg.out).as_posix()
    except ValueError:
        return str(p)


# ---------------------------------------------------------------- execution


def _search_lr(cfg: ExperimentConfig, cell: Cell, base: AdaptableModel, pd: PairData) -> tuple[float, str]:
    """Few-shot lr search by 1-shot validation loss; cached per (pair, origin, method, seed)."""
    ls = cfg.lr_search
    path = (cfg.out / "selection" / cell.scenario / f"{cell.source}__{cell.target}"
            / f"{cell.method}_seed{cell.seed}.json")
    digest = cell_digest(cfg, replace(cell, shots=ls.shots))
    if path.exists():
        d = json.loads(path.read_text())
        if d.get("meta", {}).get("digest") == digest:
            oc = SelectionOutcome.from_dict(d)
            return oc.chosen_lr, _rel(cfg, path)
    fs = sample_few_shot(pd.target, pd.plan, ls.shots, cell.seed)
    few = pd.target.subset(fs.all_ids)
    val = pd.target.subset(sample_validation_set(pd.target, pd.plan, fs, cell.seed).all_ids)
    recipe = cell.recipe.replace(seed=cell.seed)

    def adapt_fn(lr):
        return adapt(base, recipe.replace(lr=lr), fewshot=few, aug=cfg.augment)[0]

    grid = SweepGrid(ls.grid.get("mode", "absolute"), tuple(ls.grid["values"]))
    oc = sweep(adapt_fn, recipe.lr, grid, "val_loss", score_fn=lambda m: validation_loss(m, val, cfg.augment))
    oc.meta.update(digest=digest, shots=ls.shots, fewshot=fs.to_dict())
    oc.write(path)
    return oc.chosen_lr, _rel(cfg, path)


def _run_group(cfg: ExperimentConfig, cells: list[Cell]) -> list[tuple[Cell, RunRecord | None, str | None]]:
    """Run cells that share (pair, origin, method, seed); returns (cell, record, error) triples."""
    out = []
    first = cells[0]
    try:
        pd = prepare_pair(cfg, first.source, first.target, first.seed)
        src_model, ck_path = source_checkpoint(cfg, pd)
        base = generic_model(cfg, pd, first.seed) if first.origin == "generic" else src_model
        lr, sel_path = None, None
        if cfg.lr_search is not None and first.shots > 0 and first.recipe.method != "PL_IM" and first.method != NO_ADAPT:
            lr, sel_path = _search_lr(cfg, first, base, pd)
    except Exception as e:  # noqa: BLE001 - every failure is reported per cell
        err = f"{type(e).__name__}: {e}"
        log.debug(traceback.format_exc())
        return [(c, None, err) for c in cells]
    for cell in cells:
        try:
            out.append((cell, _run_cell(cfg, cell, pd, base, ck_path, lr, sel_path), None))
        except Exception as e:  # noqa: BLE001
            log.debug(traceback.format_exc())
            out.append((cell, None, f"{type(e).__name__}: {e}"))
    return out


def _run_cell(cfg, cell: Cell, pd: PairData, base: AdaptableModel, ck_path: Path, lr, sel_path) -> RunRecord:
    recipe = cell.recipe.replace(seed=cell.seed)
    if lr is not None:
        recipe = recipe.replace(lr=lr)
    extra: dict = {"recipe": recipe.to_dict(), "split": {"seed": cell.seed, "ratio": pd.plan.ratio, "stratified": True,
                                                            "n_train": len(pd.plan.train_ids), "n_test": len(pd.test)}}
    train_log: TrainLog | None = None
    if cell.method == NO_ADAPT:
        model = base
    elif recipe.method == "PL_IM":
        unl = pd.unlabeled_clean if cell.clean_target else pd.unlabeled
        model, train_log = adapt(base, recipe, target_unlabeled=unl, aug=cfg.augment)
        extra["n_unlabeled"] = len(unl)
    else:
        fs = sample_few_shot(pd.target, pd.plan, cell.shots, cell.seed)
        model, train_log = adapt(base, recipe, fewshot=pd.target.subset(fs.all_ids), aug=cfg.augment)
        extra["fewshot"] = fs.to_dict()
    if sel_path is not None:
        extra["selection"] = sel_path
    acc, pca, _, _ = evaluate_model(model, pd.test, cfg.augment)
    result = PairResult(cell.source, cell.target, cell.scenario, cell.method, cell.shots, cell.seed, acc, pca, len(pd.test))
    path = _record_path(cfg, cell)
    log_ref = None
    if train_log is not None:
        log_path = path.with_suffix(".log.jsonl")
        train_log.write(log_path)
        log_ref = _rel(cfg, log_path)
    rec = RunRecord(path, cell.key(), cfg.digest(), cell_digest(cfg, cell), result, log_ref,
                    _rel(cfg, ck_path), environment_fingerprint(), extra)
    write_result(result, path, rec.to_dict())
    return rec


def _worker(doc: dict, base_dir: str, cells: list[Cell]):
    torch.set_num_threads(1)
    return _run_group(parse_config(doc, base_dir), cells)


class MatrixReport(list):
    """List of RunRecords plus bookkeeping about what ran."""

    def __init__(self):
        super().__init__()
        self.executed = 0
        self.skipped = 0
        self.failures: list[tuple[Cell, str]] = []

    def summary(self) -> str:
        lines = [f"{len(self)} records: {self.executed} run, {self.skipped} reused, {len(self.failures)} failed"]
        lines += [f"  FAILED {c.describe()}: {err}" for c, err in self.failures]
        return "\n".join(lines)


def run_matrix(cfg: ExperimentConfig, workers: int | None = None) -> MatrixReport:
    """Run every missing cell; failures are collected and reported, not raised."""
    ensure_data(cfg)
    if "generic" in cfg.origins:
        _weights_file(cfg.model.backbone_id)
    cells = plan_matrix(cfg)
    report = MatrixReport()
    groups: dict[tuple, list[Cell]] = {}
    for cell in cells:
        rec = _existing(cfg, cell, cell_digest(cfg, cell))
        if rec is not None:
            report.append(rec)
            report.skipped += 1
        else:
            groups.setdefault(cell.group, []).append(cell)
    pending = list(groups.values())
    workers = cfg.workers if workers is None else workers
    if pending:
        # source checkpoints are shared between groups; train them before fanning out
        seen = set()
        for g in pending:
            c = g[0]
            k = (c.source, c.target if cfg.scenario.kind == "imbalance" else None)
            if k not in seen:
                seen.add(k)
                try:
                    source_checkpoint(cfg, prepare_pair(cfg, c.source, c.target, c.seed))
                except FssfdaError as e:
                    log.warning("source checkpoint for %s failed: %s", c.source, e)
    if workers and len(pending) > 1:
        doc = cfg.to_dict()
        with ProcessPoolExecutor(workers, mp_context=get_context("spawn")) as pool:
            outcomes = list(pool.map(_worker, [doc] * len(pending), [cfg.base_dir] * len(pending), pending))
    else:
        outcomes = []
        for g in pending:
            log.info("running %s (%d cell(s))", g[0].describe(), len(g))
            outcomes.append(_run_group(cfg, g))
    for triples in outcomes:
        for cell, rec, err in triples:
            if rec is not None:
                report.append(rec)
                report.executed += 1
            else:
                report.failures.append((cell, err))
    fail_path = cfg.out / "failures.json"
    if report.failures:
        dump_json([{"cell": c.describe(), "error": e} for c, e in report.failures], fail_path)
    elif fail_path.exists():
        fail_path.unlink()
    return report


# ---------------------------------------------------------------- reports


def load_records(outdir: str | Path) -> list[RunRecord]:
    outdir = Path(outdir)
    recs = []
    for p in sorted(outdir.rglob("*shot_seed*.json")):
        if p.name.endswith(".log.jsonl"):
            continue
        try:
            recs.append(RunRecord.read(p))
        except (ValueError, KeyError, TypeError):
            continue
    return recs


def tables_by_scenario(records: list[RunRecord], metric: str = "accuracy") -> dict[str, AggregateTable]:
    by: dict[str, list[PairResult]] = {}
    for r in records:
        by.setdefault(r.result.scenario, []).append(r.result)
    out = {}
    for sc, results in sorted(by.items()):
        seeds = sorted({r.seed for r in results})
        out[sc] = aggregate(results, seeds, metric)
    return out


# ---------------------------------------------------------------- sensitivity


@dataclass
class SensitivityResult:
    outcomes: dict[str, SelectionOutcome]
    reports: dict[str, object]
    combined: object


def run_sensitivity(cfg: ExperimentConfig, grid: SweepGrid | None = None) -> SensitivityResult:
    """Sweep the lr of one method per pair (first configured seed), recording SND and target accuracy."""
    ensure_data(cfg)
    sv = cfg.sensitivity
    grid = grid or SweepGrid(sv.grid.get("mode", "multiplier"), tuple(sv.grid["values"]))
    template = next((r for r in cfg.methods if r.method == sv.method), AdaptationRecipe(sv.method))
    seed = cfg.seeds[0]
    base_dir = cfg.out / "sensitivity" / cfg.scenario.name
    outcomes, reports = {}, {}
    for src, tgt in cfg.pairs():
        pd = prepare_pair(cfg, src, tgt, seed)
        model, _ = source_checkpoint(cfg, pd)
        recipe = template.replace(seed=seed)
        few = None
        if recipe.method != "PL_IM":
            few = pd.target.subset(sample_few_shot(pd.target, pd.plan, sv.shots, seed).all_ids)

        def adapt_fn(lr, model=model, recipe=recipe, few=few, pd=pd):
            adapted, _ = adapt(model, recipe.replace(lr=lr), fewshot=few, target_unlabeled=pd.unlabeled, aug=cfg.augment)
            acc, _, _, feats = evaluate_model(adapted, pd.test, cfg.augment)
            return acc, feats

        oc = sweep(adapt_fn, recipe.lr, grid, "snd", score_fn=lambda r: snd_score(r[1], sv.temperature),
                   eval_fn=lambda r: r[0])
        oc.meta.update(pair=f"{src}->{tgt}", seed=seed, method=recipe.label, temperature=sv.temperature)
        pair_key = f"{src}__{tgt}"
        oc.write(base_dir / f"{pair_key}.json")
        reports[f"{src}->{tgt}"] = snd_accuracy_report(oc, base_dir / f"{pair_key}_snd_vs_accuracy.png",
                                                       title=f"{recipe.label} {src}->{tgt}")
        outcomes[f"{src}->{tgt}"] = oc
    combined = snd_accuracy_report(list(outcomes.values()), base_dir / "all_pairs_snd_vs_accuracy.png")
    summary = {
        pair: {"spearman": rep.spearman, "chosen_lr": outcomes[pair].chosen_lr,
               "accuracy_spread": max(p[1] for p in rep.points) - min(p[1] for p in rep.points)}
        for pair, rep in reports.items()
    }
    dump_json({"pairs": summary, "combined_spearman": combined.spearman}, base_dir / "summary.json")
    return SensitivityResult(outcomes, reports, combined)


# ---------------------------------------------------------------- pretraining origin


def run_pretraining_comparison(cfg: ExperimentConfig, workers: int | None = None) -> AggregateTable:
    """LP, FT and LP-FT from the source checkpoint and from generic weights, plus a No-adapt row."""
    _weights_file(cfg.model.backbone_id)  # fail early, naming the weights directory
    few_shot = [m for m in cfg.methods if m.method in ("LP", "FT", "LP_FT")]
    if not few_shot:
        few_shot = [AdaptationRecipe("LP"), AdaptationRecipe("FT"), AdaptationRecipe("LP_FT")]
    doc = cfg.to_dict()
    doc.update(methods=[m.to_dict() for m in few_shot], origins=["source", "generic"], no_adapt=True)
    cmp_cfg = parse_config(doc, cfg.base_dir)
    report = run_matrix(cmp_cfg, workers)
    if report.failures:
        raise FssfdaError("pretraining comparison had failures:\n" + report.summary())
    table = aggregate([r.result for r in report], cmp_cfg.seeds)
    table.meta["origins"] = {"": "source checkpoint", GENERIC_TAG: "generic weights from FSSFDA_WEIGHTS_DIR"}
    return table


def make_generic_weights(ds: DomainDataset, cfg: ExperimentConfig, out_dir: str | Path, seed: int = 0) -> Path:
    """Pretrain a body on ``ds`` (a label space unrelated to the task) and save it as generic weights."""
    spec = ModelSpec(cfg.model.backbone_id, ds.n_classes, cfg.model.bottleneck_dim, "random")
    model = build_model(spec, seed=seed, vocabulary=ds.vocabulary)
    sc = cfg.source
    train_source(model, ds, sc.epochs, sc.lr, seed, sc.recipe(), cfg.augment)
    out = Path(out_dir) / f"{cfg.model.backbone_id}_generic.pth"
    out.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.body.state_dict(), out)
    return out


def synthetic_generic_weights(cfg: ExperimentConfig, out_dir: str | Path, data_dir: str | Path | None = None,
                              seed: int = 0) -> Path:
    """Generic weights for the synthetic desk setup: a body pretrained on a 12-class mismatched label space."""
    syn = generic_pretraining_config()
    data = Path(data_dir or Path(out_dir) / "generic_data")
    if not data.exists():
        make_synthetic_dataset(data, syn)
    parts = [scan_image_folder(data, d) for d in syn.domains]
    union = DomainDataset("generic", sum((p.examples for p in parts), ()), parts[0].vocabulary)
    return make_generic_weights(union, cfg, out_dir, seed=seed)
