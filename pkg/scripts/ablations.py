"""Component ablations on the reduced model: each variant trains on occluded
samples and is scored on a held-out occluded set.

    python3 scripts/ablations.py --steps 1000
"""
import argparse
import copy
import time

from occlumesh.body_model import toy_asset
from occlumesh.experiments import small_config
from occlumesh.model import Trainer, evaluate
from occlumesh.synthdata import SynthConfig, generate

VARIANTS = {
    "full": {},
    "no_j2n": {"train.j2n": False},
    "no_j2j": {"train.j2j": False},
    "no_contrast": {"train.j2n": False, "train.j2j": False},
    "no_3d_features": {"model.feat3d_mode": "none", "train.j2n": False, "train.j2j": False},
    "2d_sampling": {"model.feat2d_mode": "sampling"},
    "no_smpl_token": {"model.smpl_token": False},
}


def variant(base, overrides):
    cfg = copy.deepcopy(base)
    for key, value in overrides.items():
        section, name = key.split(".")
        setattr(getattr(cfg, section), name, value)
    return cfg.validate()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--train-count", type=int, default=64)
    ap.add_argument("--test-count", type=int, default=32)
    ap.add_argument("--mode", default="person", choices=("object", "person"))
    ap.add_argument("--only", nargs="*", choices=sorted(VARIANTS))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    asset = toy_asset()
    base = small_config(args.seed)
    sc = SynthConfig(S=base.model.S)
    train = generate(0, args.train_count, args.mode, asset, sc)
    test = generate(1, args.test_count, args.mode, asset, sc)
    print("variant\tMPJPE\tPA-MPJPE\tPVE\tseconds")
    for name in args.only or VARIANTS:
        cfg = variant(base, VARIANTS[name])
        t0 = time.perf_counter()
        tr = Trainer(cfg, train, asset)
        tr.train(args.steps)
        r = evaluate(tr.net, asset, test)
        print(f"{name}\t{r.mpjpe:.2f}\t{r.pa_mpjpe:.2f}\t{r.pve:.2f}\t{time.perf_counter() - t0:.0f}", flush=True)


if __name__ == "__main__":
    main()
