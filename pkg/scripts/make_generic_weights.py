"""Pretrain a small_cnn body on a mismatched synthetic label space and save it as generic weights.

Usage: python3 scripts/make_generic_weights.py --config configs/desk_pretraining.json --out $FSSFDA_WEIGHTS_DIR
"""

import argparse

import torch

from fssfda.config import load_config
from fssfda.runner import synthetic_generic_weights


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", required=True, help="experiment config whose model/source/augment settings to use")
    ap.add_argument("--out", required=True, help="weights directory (point FSSFDA_WEIGHTS_DIR here)")
    ap.add_argument("--data", default=None, help="where to write the pretraining images (default: <out>/generic_data)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)
    print(synthetic_generic_weights(load_config(args.config), args.out, args.data, args.seed))


if __name__ == "__main__":
    main()
