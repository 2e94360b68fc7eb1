"""Per-refining-layer MPJPE / PA-MPJPE / PVE for a checkpoint.

    python3 scripts/refine_layer_table.py --config run.ini --ckpt runs/x/last.jtrk
"""
import argparse

import numpy as np

from occlumesh.body_model import load_asset, toy_asset
from occlumesh.config import RunConfig, load
from occlumesh.diffcore import archive
from occlumesh.model import OccluMeshNet, evaluate, load_model
from occlumesh.synthdata import Dataset, SynthConfig, generate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--ckpt", required=True)
    ap.add_argument("--mode", choices=("none", "object", "person"), help="occlusion mode of generated data")
    ap.add_argument("--count", type=int)
    args = ap.parse_args()

    cfg = load(args.config) if args.config else RunConfig()
    asset = load_asset(cfg.asset) if cfg.asset else toy_asset()
    if cfg.data_dir:
        data = Dataset.load(cfg.data_dir)
    else:
        data = generate(cfg.data.data_seed, args.count or cfg.data.count, args.mode or cfg.data.occlusion_mode,
                        asset, SynthConfig(S=cfg.model.S))
    net = OccluMeshNet(cfg.model, np.random.default_rng(cfg.seed))
    load_model(net, archive.load(args.ckpt))
    print(evaluate(net, asset, data).table(), end="")


if __name__ == "__main__":
    main()
