"""Command-line entry point: ``fssfda <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import FssfdaError


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, action="append", help="run only this seed (repeatable)")
    p.add_argument("--dry-run", action="store_true", help="print the resolved work and exit without writing")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed:
        cfg = cfg.with_seeds(args.seed)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fssfda", description="Few-shot source-free domain adaptation harness")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="index domains and print class counts and label shift")
    _common(p, config_required=False)
    p.add_argument("--root", help="dataset root (default: from --config)")
    p.add_argument("--domains", nargs="+")
    p.add_argument("--out", help="write the index as JSON here")

    p = sub.add_parser("train-source", help="train (or reuse) source checkpoints for every configured pair")
    _common(p)

    p = sub.add_parser("adapt", help="run the full (pair x method x shots x seed) matrix")
    _common(p)
    p.add_argument("--workers", type=int, help="parallel worker processes (default: config)")
    p.add_argument("--pretraining-comparison", action="store_true",
                   help="run LP/FT/LP-FT from both the source checkpoint and generic weights")

    p = sub.add_parser("sweep", help="lr-sensitivity sweep with SND and accuracy per candidate")
    _common(p)

    p = sub.add_parser("scenario", help="materialize the configured OoD / RSUT scenario per pair")
    _common(p)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a domain's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--root", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--seed", type=int, default=0, help="split seed")
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--crop-size", type=int, default=224)
    p.add_argument("--all", action="store_true", help="evaluate on the whole domain instead of the test split")

    p = sub.add_parser("report", help="aggregate run records into mean (std) tables")
    p.add_argument("outdir")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--metric", choices=("accuracy", "per_class_accuracy"), default=None,
                   help="default: accuracy, plus per-class accuracy for imbalance scenarios")

    p = sub.add_parser("plot-label-dist", help="plot per-domain label distributions")
    _common(p, config_required=False)
    p.add_argument("--root")
    p.add_argument("--domains", nargs="+")
    p.add_argument("--out", required=True)
    return ap


# ---------------------------------------------------------------- commands


def _domains_from(args):
    from .config import resolve_path
    from .data import scan_image_folder

    if args.config:
        cfg = _load(args)
        root, names = cfg.root, cfg.data.domains
    else:
        if not args.root or not args.domains:
            raise FssfdaError("need --config or both --root and --domains")
        root, names = resolve_path(args.root, "."), args.domains
    return root, [scan_image_folder(root, d) for d in names]


def cmd_ingest(args) -> int:
    from .data import average_pairwise_shift

    if args.config and not args.dry_run:
        from .runner import ensure_data

        ensure_data(_load(args))
    root, domains = _domains_from(args)
    index = {}
    for ds in domains:
        counts = ds.class_counts().tolist()
        index[ds.domain_id] = {"n_examples": len(ds), "class_counts": dict(zip(ds.vocabulary, counts))}
        print(f"{ds.domain_id}: {len(ds)} images, {ds.n_classes} classes, per-class {min(counts)}..{max(counts)}")
    if len(domains) > 1:
        shift = average_pairwise_shift(domains)
        index["average_pairwise_bhattacharyya"] = shift
        print(f"average pairwise Bhattacharyya distance: {shift:.6f}")
    if args.out and not args.dry_run:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return 0


def _print_cells(cfg, cells) -> None:
    print(f"config digest {cfg.digest()}")
    for c in cells:
        print(f"  {c.describe()}")
    print(f"{len(cells)} cell(s)")


def cmd_train_source(args) -> int:
    from .runner import ensure_data, prepare_pair, source_checkpoint

    cfg = _load(args)
    pairs = cfg.pairs()
    if args.dry_run:
        for s, t in pairs:
            print(f"source checkpoint for {cfg.scenario.name} {s}->{t}")
        return 0
    ensure_data(cfg)
    for s, t in pairs:
        model, path = source_checkpoint(cfg, prepare_pair(cfg, s, t, cfg.seeds[0]))
        print(f"{s}->{t}: {path} (train acc {model.meta.get('source_train_accuracy', float('nan')):.4f})")
    return 0


def cmd_adapt(args) -> int:
    from .evaluation import render_table
    from .runner import plan_matrix, run_matrix, run_pretraining_comparison

    cfg = _load(args)
    if args.pretraining_comparison:
        if args.dry_run:
            from .adaptation import AdaptationRecipe
            from .config import parse_config

            doc = cfg.to_dict()
            doc.update(origins=["source", "generic"], no_adapt=True,
                       methods=[AdaptationRecipe(m).to_dict() for m in ("LP", "FT", "LP_FT")])
            _print_cells(cfg, plan_matrix(parse_config(doc, cfg.base_dir)))
            return 0
        table = run_pretraining_comparison(cfg, args.workers)
        print(render_table(table, "text"), end="")
        return 0
    if args.dry_run:
        _print_cells(cfg, plan_matrix(cfg))
        return 0
    report = run_matrix(cfg, args.workers)
    print(report.summary())
    return 1 if report.failures else 0


def cmd_sweep(args) -> int:
    from .runner import run_sensitivity
    from .selection import SweepGrid

    cfg = _load(args)
    sv = cfg.sensitivity
    grid = SweepGrid(sv.grid.get("mode", "multiplier"), tuple(sv.grid["values"]))
    if args.dry_run:
        for s, t in cfg.pairs():
            base = next((r.lr for r in cfg.methods if r.method == sv.method), None)
            lrs = grid.learning_rates(base if base is not None else 1e-4)
            print(f"{s}->{t} {sv.method} seed {cfg.seeds[0]}: lr in {', '.join(f'{x:g}' for x in lrs)}")
        return 0
    res = run_sensitivity(cfg, grid)
    for pair, rep in res.reports.items():
        accs = [a for _, a in rep.points]
        print(f"{pair}: spearman {rep.spearman:+.3f}, accuracy {min(accs):.4f}..{max(accs):.4f}, "
              f"SND picks lr {res.outcomes[pair].chosen_lr:g}")
    print(f"all pairs: spearman {res.combined.spearman:+.3f}")
    return 0


def cmd_scenario(args) -> int:
    from .data import bhattacharyya_distance, dump_json, empirical_label_distribution
    from .runner import ensure_data, prepare_pair

    cfg = _load(args)
    if args.dry_run:
        for s, t in cfg.pairs():
            print(f"{cfg.scenario.name} {s}->{t}")
        return 0
    ensure_data(cfg)
    for s, t in cfg.pairs():
        pd = prepare_pair(cfg, s, t, cfg.seeds[0])
        p = empirical_label_distribution(pd.source_train)
        q = empirical_label_distribution(pd.target)
        d = bhattacharyya_distance(p, q)
        out = cfg.out / "scenarios" / cfg.scenario.name / f"{s}__{t}.json"
        dump_json({
            "scenario": cfg.scenario.to_dict(),
            "vocabulary": list(pd.target.vocabulary),
            "source_ids": pd.source_train.ids,
            "target_train_unlabeled_ids": pd.unlabeled.ids,
            "target_test_ids": pd.test.ids,
            "source_class_counts": pd.source_train.class_counts().tolist(),
            "target_class_counts": pd.target.class_counts().tolist(),
            "bhattacharyya": d,
        }, out)
        print(f"{s}->{t}: source {len(pd.source_train)}, target unlabeled {len(pd.unlabeled)}, "
              f"test {len(pd.test)}, Bhattacharyya {d:.4f} -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    from .data import scan_image_folder, split_train_test
    from .models import load_checkpoint
    from .runner import evaluate_model
    from .transforms import AugmentConfig

    model = load_checkpoint(args.checkpoint)
    ds = scan_image_folder(args.root, args.domain)
    test = ds if args.all else ds.subset(split_train_test(ds, args.ratio, args.seed).test_ids)
    if model.vocabulary is not None and tuple(model.vocabulary) != ds.vocabulary:
        raise FssfdaError("checkpoint vocabulary does not match the domain's classes")
    acc, pca, _, _ = evaluate_model(model, test, AugmentConfig(crop_size=args.crop_size))
    print(json.dumps({"domain": args.domain, "n_test": len(test), "accuracy": acc, "per_class_accuracy": pca}))
    return 0


def cmd_report(args) -> int:
    from .evaluation import render_table
    from .runner import load_records, tables_by_scenario

    outdir = Path(args.outdir)
    records = load_records(outdir)
    if not records:
        raise FssfdaError(f"no run records under {outdir}")
    metrics = [args.metric] if args.metric else ["accuracy"]
    ext = "csv" if args.format == "csv" else "txt"
    for metric in metrics + (["per_class_accuracy"] if not args.metric else []):
        for sc, table in tables_by_scenario(records, metric).items():
            if metric == "per_class_accuracy" and not args.metric and not sc.startswith("rsut"):
                continue
            text = render_table(table, args.format)
            path = outdir / "tables" / f"{sc}_{metric}.{ext}"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text)
            print(f"== {sc} ({metric}, mean (std) over seeds {list(table.seeds)}) -> {path}")
            print(text)
    return 0


def cmd_plot_label_dist(args) -> int:
    from .plots import plot_label_distributions

    if args.dry_run:
        print(f"would write {args.out}")
        return 0
    if args.config:
        from .runner import ensure_data, prepare_pair

        cfg = _load(args)
        ensure_data(cfg)
        if cfg.scenario.kind == "imbalance":
            domains = []
            for s, t in cfg.pairs():
                pd = prepare_pair(cfg, s, t, cfg.seeds[0])
                domains += [pd.source_train.subset(pd.source_train.ids, f"{s} (source of {s}->{t})"),
                            pd.target.subset(pd.target.ids, f"{t} (target of {s}->{t})")]
            plot_label_distributions(domains, args.out, title=cfg.scenario.name)
            print(args.out)
            return 0
    _, ds = _domains_from(args)
    plot_label_distributions(ds, args.out)
    print(args.out)
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "train-source": cmd_train_source,
    "adapt": cmd_adapt,
    "sweep": cmd_sweep,
    "scenario": cmd_scenario,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "plot-label-dist": cmd_plot_label_dist,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except FssfdaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
