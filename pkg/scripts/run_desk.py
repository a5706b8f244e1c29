"""Desk-scale experiments on the synthetic two-domain set: pretraining origin, RSUT and lr sensitivity.

Usage: FSSFDA_DATA_DIR=/tmp/desk/data FSSFDA_WEIGHTS_DIR=/tmp/desk/weights python3 scripts/run_desk.py [--out runs/desk]

Generic weights are created on first use. Tables go to <out>/tables, sweep plots to <out>/sensitivity.
"""

import argparse
import logging
import os
import time
from pathlib import Path

import torch

from fssfda.config import parse_config, read_with_includes
from fssfda.evaluation import aggregate, render_table
from fssfda.runner import GENERIC_TAG, NO_ADAPT, run_matrix, run_pretraining_comparison, run_sensitivity, synthetic_generic_weights

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def config(name, out):
    doc = read_with_includes(CONFIGS / name)
    if out:
        doc["output_dir"] = str(Path(out).resolve())
    return parse_config(doc, CONFIGS)


def write(cfg, name, text):
    path = cfg.out / "tables" / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    print(f"== {path}\n{text}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=None, help="output directory (default: the configs' output_dir)")
    ap.add_argument("--skip", nargs="*", default=[], choices=("pretraining", "rsut", "sensitivity"))
    args = ap.parse_args()
    torch.set_num_threads(1)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    os.environ.setdefault("FSSFDA_DATA_DIR", str(Path("runs/desk_data").resolve()))

    if "pretraining" not in args.skip:
        cfg = config("desk_pretraining.json", args.out)
        weights = Path(os.environ.setdefault("FSSFDA_WEIGHTS_DIR", str(cfg.out / "weights")))
        if not list(weights.glob(f"{cfg.model.backbone_id}_generic*.pth")):
            synthetic_generic_weights(cfg, weights)
        t0 = time.perf_counter()
        table = run_pretraining_comparison(cfg)
        write(cfg, "pretraining_accuracy.txt", render_table(table))
        acc = {r[0]: table.cell(r[0], r[1], "Avg")[0] for r in table.rows}
        print(f"FT > No adapt: {acc['FT'] > acc[NO_ADAPT]}; source FT >= LP: {acc['FT'] >= acc['LP']}; "
              f"generic LP >= FT: {acc['LP' + GENERIC_TAG] >= acc['FT' + GENERIC_TAG]} "
              f"({time.perf_counter() - t0:.0f} s)")

    if "rsut" not in args.skip:
        cfg = config("desk_rsut.json", args.out)
        t0 = time.perf_counter()
        report = run_matrix(cfg)
        print(report.summary())
        pca = aggregate([r.result for r in report], cfg.seeds, "per_class_accuracy")
        write(cfg, "rsut_per_class_accuracy.txt", render_table(pca))
        ft, pl = pca.cell("FT", 3, "Avg")[0], pca.cell("PL_IM", 0, "Avg")[0]
        print(f"RSUT per-class FT > PL_IM: {ft > pl} ({time.perf_counter() - t0:.0f} s)")

    if "sensitivity" not in args.skip:
        cfg = config("desk_sensitivity.json", args.out)
        t0 = time.perf_counter()
        res = run_sensitivity(cfg)
        for pair, rep in res.reports.items():
            accs = [a for _, a in rep.points]
            print(f"{pair}: spearman {rep.spearman:+.3f}, accuracy {min(accs):.4f}..{max(accs):.4f}, plot {rep.plot_path}")
        print(f"all pairs: spearman {res.combined.spearman:+.3f} ({time.perf_counter() - t0:.0f} s)")


if __name__ == "__main__":
    main()
