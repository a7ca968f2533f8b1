"""``garmre`` command line: gen-synthetic, curate, train, sample, evaluate."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import checkpoint_hash, load_checkpoint, schedule_from_header
from .config import load_config, parse_kv_lines
from .curation import CurationThresholds
from .dataset import (array_to_image, curate_tree, generate_tree, load_image, load_mask, load_pairs,
                      read_manifest, save_png)
from .diffusion import GuidanceConfig, schedule_from_config
from .errors import ConfigError, GarmReError, IoError, ShapeError
from .evaluation import DEFAULT_SCALES, evaluate_run
from .model import restore
from .training import run_stage, set_determinism

log = logging.getLogger("garmre")


def _seed(flag):
    if flag is not None:
        return flag
    env = os.environ.get("GARMRE_SEED")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(f"GARMRE_SEED must be an integer, got {env!r}") from exc


def _spec(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"--spec must look like HxW, got {text!r}") from exc
    return h, w


def cmd_gen_synthetic(args):
    if args.count < 1:
        raise ConfigError(f"--count must be positive, got {args.count}")
    out = Path(args.out)
    entries = generate_tree(out, args.count, _seed(args.seed) or 0, _spec(args.spec), args.clean)
    print(f"wrote {len(entries)} pairs to {out}")


def _load_thresholds(path) -> CurationThresholds:
    if not path:
        return CurationThresholds()
    path = Path(path)
    if not path.is_file():
        raise IoError(f"thresholds file not found: {path}")
    values = parse_kv_lines(path.read_text(), str(path))
    known = set(CurationThresholds.__dataclass_fields__)
    for k in values:
        if k not in known:
            raise ConfigError(f"{path}: unknown threshold {k!r}")
    return CurationThresholds(**{k: float(v) for k, v in values.items()})


def cmd_curate(args):
    coarse, fine, counts = curate_tree(args.data, _load_thresholds(args.thresholds), args.fraction)
    print(f"coarse {len(coarse)} / fine {len(fine)}")


TRAIN_FLAGS = ("data", "manifest", "out", "steps", "batch_size", "learning_rate", "codec_ckpt",
               "init_ckpt", "drop_prob")


def cmd_train(args):
    overrides = {k: getattr(args, k) for k in TRAIN_FLAGS}
    overrides["stage"] = args.stage
    overrides["seed"] = _seed(args.seed)
    for kv in args.set or []:
        if "=" not in kv:
            raise ConfigError(f"--set expects key=value, got {kv!r}")
        k, v = kv.split("=", 1)
        overrides[k.strip()] = v.strip()
    cfg = load_config(args.config, overrides)
    result = run_stage(cfg, resume=args.resume, threads=args.threads)
    print(f"stage {args.stage} done: step {result['info']['step']}, checkpoint {cfg.train.out}")


def cmd_sample(args):
    set_determinism(args.threads)
    person = torch.from_numpy(load_image(args.person))
    mask = torch.from_numpy(load_mask(args.mask))
    model, header = load_checkpoint(args.ckpt)
    model.eval()
    if tuple(person.shape[1:]) != (model.cfg.height, model.cfg.width):
        raise ShapeError(f"{args.person}: image is {tuple(person.shape[1:])}, checkpoint expects "
                         f"{(model.cfg.height, model.cfg.width)}")
    schedule = schedule_from_config(schedule_from_header(header))
    guidance = GuidanceConfig(scale=args.scale, ddim_steps=args.steps, seed=_seed(args.seed) or 0)
    img = restore(model, schedule, person, mask, [args.category], guidance, garmnet=not args.no_garmnet)
    save_png(array_to_image(img[0].numpy()), args.out)
    print(f"wrote {args.out}")


def cmd_evaluate(args):
    set_determinism(args.threads)
    model, header = load_checkpoint(args.ckpt)
    model.eval()
    schedule = schedule_from_config(schedule_from_header(header))
    root = Path(args.data)
    pairs = load_pairs(root, read_manifest(root / args.manifest))
    reference = None
    if args.reference:
        ref_root = Path(args.reference)
        reference = np.stack([p.garment for p in load_pairs(ref_root, read_manifest(ref_root / "manifest.txt"))])
    try:
        scales = [float(s) for s in args.scales.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--scales must be comma-separated numbers, got {args.scales!r}") from exc
    report = evaluate_run(model, schedule, pairs, scales, ddim_steps=args.steps, seed=_seed(args.seed) or 0,
                          out_dir=args.samples, reference=reference, ckpt_hash=checkpoint_hash(args.ckpt))
    report.write(args.report)
    print(report.to_text(), end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="garmre", description="Garment restoration with latent diffusion.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="write a seeded synthetic dataset tree")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--seed", type=int)
    g.add_argument("--spec", default="64x48")
    g.add_argument("--clean", action="store_true", help="defect-free pairs only")
    g.set_defaults(func=cmd_gen_synthetic)

    c = sub.add_parser("curate", help="assess pairs, write coarse.txt and fine.txt")
    c.add_argument("--data", required=True)
    c.add_argument("--thresholds")
    c.add_argument("--fraction", type=float, default=0.2)
    c.set_defaults(func=cmd_curate)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", required=True, choices=("codec", "coarse", "hqft"))
    t.add_argument("--config")
    t.add_argument("--resume")
    t.add_argument("--seed", type=int)
    t.add_argument("--data")
    t.add_argument("--manifest")
    t.add_argument("--out")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--learning-rate", dest="learning_rate", type=float)
    t.add_argument("--drop-prob", dest="drop_prob", type=float)
    t.add_argument("--codec-ckpt", dest="codec_ckpt")
    t.add_argument("--init-ckpt", dest="init_ckpt")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.add_argument("--threads", type=int, default=1)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="restore one garment image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--person", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--category", required=True)
    s.add_argument("--scale", type=float, default=1.5)
    s.add_argument("--steps", type=int, default=25)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--no-garmnet", action="store_true", help="replace the reference pyramid by nulls")
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("evaluate", help="SSIM/FID/KID over a guidance grid")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--manifest", default="coarse.txt")
    e.add_argument("--scales", default=",".join(str(s) for s in DEFAULT_SCALES))
    e.add_argument("--steps", type=int, default=25)
    e.add_argument("--seed", type=int)
    e.add_argument("--report", required=True)
    e.add_argument("--samples", help="directory for generated PNGs")
    e.add_argument("--reference", help="dataset root whose garments replace the real set for FID/KID")
    e.add_argument("--threads", type=int, default=1)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except GarmReError as exc:
        print(f"garmre {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
