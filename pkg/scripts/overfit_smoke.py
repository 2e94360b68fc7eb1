"""Overfit a handful of unoccluded samples and report errors per refining layer.

    python3 scripts/overfit_smoke.py --lr 1e-3 --max-steps 5000
"""
import argparse
import logging

from occlumesh.body_model import toy_asset
from occlumesh.experiments import OVERFIT_LR, body_diagonal_mm, overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--count", type=int, default=8)
    ap.add_argument("--max-steps", type=int, default=5000)
    ap.add_argument("--target", type=float, default=0.02, help="stop once final-round batch L_2D is below")
    ap.add_argument("--lr", type=float, default=OVERFIT_LR)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    o = overfit(args.count, args.max_steps, args.target, args.lr, args.seed)
    limit = 0.15 * body_diagonal_mm(toy_asset())
    print(f"steps {o.steps}  converged {o.converged}  L_2D {o.final_l2d:.4f}  time {o.seconds:.0f}s")
    print(f"MPJPE limit (15% of body diagonal): {limit:.1f} mm")
    print(o.result.table(), end="")


if __name__ == "__main__":
    main()
