"""Command-line entry points: gen, train, eval, infer, export.

Exit status: 0 success, 1 usage or config error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import config as config_mod
from .body_model import JOINT_NAMES, BodyModel, BodyParams, forward_mesh, load_asset, toy_asset
from .config import RunConfig
from .contrast import embedding_report
from .extractor import ConfigError
from .fusion import export_attention
from .model import OccluMeshNet, Trainer, collect_embeddings, evaluate, load_model, make_inputs, predict
from .synthdata import Dataset, SynthConfig, generate

log = logging.getLogger("occlumesh")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="occlumesh", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command")
    for name, help_ in [("gen", "generate synthetic shards"), ("train", "train a model"),
                        ("eval", "evaluate a checkpoint"), ("infer", "write meshes"),
                        ("export", "dump attention maps and joint embeddings")]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="sectioned key = value config file")
        s.add_argument("--seed", type=int, help="root seed (overrides config)")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--asset", help="body model archive (default: built-in toy asset)")
        if name != "gen":
            s.add_argument("--ckpt", help="checkpoint archive")
        if name == "train":
            s.add_argument("--steps", type=int, help="training steps (overrides config)")
        if name in ("gen", "infer"):
            choices = ("none", "object", "person") if name == "gen" else ("network", "gt", "rest")
            s.add_argument("--mode", choices=choices, help="occlusion mode" if name == "gen" else "mesh source")
    return p


# ------------------------------------------------------------------ helpers

def _load_config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if args.config else RunConfig().validate()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.asset:
        cfg.asset = args.asset
    if getattr(args, "steps", None) is not None:
        if args.steps < 0:
            raise ConfigError("--steps must be non-negative")
        cfg.train.steps = args.steps
    if args.command == "gen" and args.mode:
        cfg.data.occlusion_mode = args.mode
    return cfg.validate()


def _asset(cfg: RunConfig):
    if not cfg.asset:
        return toy_asset()
    if not os.path.exists(cfg.asset):
        raise FileNotFoundError(f"body model asset not found: {cfg.asset}")
    return load_asset(cfg.asset)


def _dataset(cfg: RunConfig, asset) -> Dataset:
    if cfg.data_dir:
        return Dataset.load(cfg.data_dir)
    return generate(cfg.data.data_seed, cfg.data.count, cfg.data.occlusion_mode, asset, SynthConfig(S=cfg.model.S))


def _network(cfg: RunConfig, ckpt: str | None) -> OccluMeshNet:
    if not ckpt:
        raise UsageError("--ckpt is required")
    if not os.path.exists(ckpt):
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    from .diffcore import archive
    net = OccluMeshNet(cfg.model, np.random.default_rng(cfg.seed))
    load_model(net, archive.load(ckpt))
    return net


def _echo_config(cfg: RunConfig, out: str) -> None:
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.ini"), "w") as f:
        f.write(config_mod.to_ini(cfg))


def write_mesh(path: str, vertices: np.ndarray, faces: np.ndarray) -> None:
    """ASCII mesh: ``v x y z`` per vertex, ``f i j k`` (1-based) per face."""
    with open(path, "w") as f:
        for v in vertices:
            f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for tri in faces:
            f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")


# ------------------------------------------------------------------ commands

def cmd_gen(args, cfg: RunConfig) -> None:
    asset = _asset(cfg)
    seed = cfg.data.data_seed if args.seed is None else args.seed
    cfg.data.data_seed = seed
    ds = generate(seed, cfg.data.count, cfg.data.occlusion_mode, asset, SynthConfig(S=cfg.model.S))
    ds.save(args.out)
    _echo_config(cfg, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")


def cmd_train(args, cfg: RunConfig) -> None:
    asset = _asset(cfg)
    ds = _dataset(cfg, asset)
    _echo_config(cfg, args.out)
    tr = Trainer(cfg, ds, asset, args.out)
    if args.ckpt:
        tr.load(args.ckpt)
    hist = tr.train(cfg.train.steps, os.path.join(args.out, "train.log"), args.out)
    last = hist[-1] if hist else {}
    print(f"trained {tr.step_count} steps" + (f"; final total {last['total']:.4f}" if last else ""))


def cmd_eval(args, cfg: RunConfig) -> None:
    asset = _asset(cfg)
    ds = _dataset(cfg, asset)
    net = _network(cfg, args.ckpt)
    res = evaluate(net, asset, ds)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.txt"), "w") as f:
        f.write(res.table())
    with open(os.path.join(args.out, "records.txt"), "w") as f:
        f.write(res.records())
    _echo_config(cfg, args.out)
    sys.stdout.write(res.table())


def cmd_infer(args, cfg: RunConfig) -> None:
    asset = _asset(cfg)
    mode = args.mode or "network"
    os.makedirs(args.out, exist_ok=True)
    if mode == "rest":
        rest = BodyParams.rest()
        v = forward_mesh(rest.pose, rest.shape, asset).data
        write_mesh(os.path.join(args.out, "rest.obj"), v, asset.faces)
        return
    ds = _dataset(cfg, asset)
    if mode == "gt":
        verts = forward_mesh(ds.arrays["pose"], ds.arrays["shape"], asset).data
    else:
        net = _network(cfg, args.ckpt)
        verts = predict(net, BodyModel(asset, dtype=net.dtype), ds, np.arange(len(ds)))[-1][0] / 1000.0
    for sid, v in zip(ds.ids, verts):
        write_mesh(os.path.join(args.out, f"{sid}.obj"), v, asset.faces)
    _echo_config(cfg, args.out)


def cmd_export(args, cfg: RunConfig) -> None:
    asset = _asset(cfg)
    ds = _dataset(cfg, asset)
    net = _network(cfg, args.ckpt)
    os.makedirs(args.out, exist_ok=True)
    image, heat, j2d = make_inputs(ds, np.arange(1), cfg.model.S, cfg.model.heatmap_sigma, dtype=net.dtype)
    exp = export_attention(net, image, heat, j2d, os.path.join(args.out, "attention.jtrk"))
    with open(os.path.join(args.out, "attention_mass.txt"), "w") as f:
        f.write("layer\tmass_2d\tmass_3d\n")
        for l, (a, b) in enumerate(zip(exp.mass_2d, exp.mass_3d)):
            f.write(f"{l}\t{a:.6f}\t{b:.6f}\n")
    if net.lifter is not None:
        emb, labels = collect_embeddings(net, ds)
        embedding_report(emb, labels, args.out, names=JOINT_NAMES)
    _echo_config(cfg, args.out)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "export": cmd_export}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        cfg = _load_config(args)
    except (UsageError, ConfigError, OSError) as e:
        print(f"occlumesh: error: {e}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"occlumesh: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - report any runtime failure as exit 2
        print(f"occlumesh: {args.command} failed: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
