"""OfficeHome 3-shot FT over all 12 pairs and seeds {0,1,2}, compared against reference accuracies.

Needs $FSSFDA_DATA_DIR/OfficeHome/{Art,Clipart,Product,Real World}/<class>/*.jpg and an ImageNet
ResNet-50 state dict in $FSSFDA_WEIGHTS_DIR (e.g. resnet50-0676ba61.pth from torchvision). A GPU is
strongly recommended.

Usage: python3 scripts/run_officehome.py [--workers N] [--shots 1 3]
"""

import argparse
import logging
from pathlib import Path

from fssfda.config import load_config, parse_config
from fssfda.evaluation import aggregate, render_table
from fssfda.runner import run_matrix

REFERENCE = {"Art->Clipart": 58.19, "Avg": 70.38}  # 3-shot FT, mean over seeds
TOLERANCE = {"Art->Clipart": 3.0, "Avg": 2.0}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "officehome_ft.json"))
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--shots", type=int, nargs="+", default=[3])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    cfg = load_config(args.config)
    cfg = parse_config({**cfg.to_dict(), "shots": args.shots}, cfg.base_dir)
    report = run_matrix(cfg, args.workers)
    print(report.summary())
    table = aggregate([r.result for r in report], cfg.seeds)
    print(render_table(table))
    if 3 in args.shots:
        for col, ref in REFERENCE.items():
            got = 100 * table.cell("FT", 3, col)[0]
            ok = abs(got - ref) <= TOLERANCE[col]
            print(f"FT 3-shot {col}: {got:.2f} vs {ref:.2f} (+-{TOLERANCE[col]}) {'ok' if ok else 'OUT OF RANGE'}")


if __name__ == "__main__":
    main()
