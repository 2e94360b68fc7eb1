"""Train twice with identical seeds, contrastive terms on and off, and compare
the intra-class minus inter-class cosine gap of joint embeddings.

    python3 scripts/embedding_gap.py --steps 2000 --out runs/gap
"""
import argparse

from occlumesh.experiments import embedding_gap


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--count", type=int, default=64)
    ap.add_argument("--mode", default="person", choices=("object", "person"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="write centroid-cosine matrices and summaries here")
    args = ap.parse_args()

    g = embedding_gap(args.steps, args.count, args.mode, args.seed, out_dir=args.out)
    for name, rep in (("j2n+j2j on", g.with_contrast), ("both off", g.without_contrast)):
        print(f"{name:12s} intra {rep.intra:.4f}  inter {rep.inter:.4f}  gap {rep.gap:.4f}")
    print(f"gap larger with contrast: {g.passed}  ({g.seconds:.0f}s)")


if __name__ == "__main__":
    main()
