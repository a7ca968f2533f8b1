"""Guidance-scale sweep over a trained checkpoint: SSIM, FID and KID (x1e3) per scale.

    python3 scripts/guidance_ablation.py --ckpt runs/overfit/coarse --data runs/overfit/data \
        --report runs/overfit/guidance.txt
"""
import argparse
import logging
from pathlib import Path

import torch

from garmre.checkpoint import checkpoint_hash, load_checkpoint, schedule_from_header
from garmre.dataset import load_pairs, read_manifest
from garmre.diffusion import schedule_from_config
from garmre.evaluation import DEFAULT_SCALES, evaluate_run
from garmre.training import set_determinism


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", default="coarse.txt")
    p.add_argument("--pairs", type=int, default=0, help="first N pairs only (0: all)")
    p.add_argument("--scales", default=",".join(str(s) for s in DEFAULT_SCALES))
    p.add_argument("--steps", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    set_determinism(args.threads)

    model, header = load_checkpoint(args.ckpt)
    model.eval()
    schedule = schedule_from_config(schedule_from_header(header))
    entries = read_manifest(Path(args.data) / args.manifest)
    if args.pairs:
        entries = entries[:args.pairs]
    pairs = load_pairs(args.data, entries)
    scales = [float(s) for s in args.scales.split(",")]
    with torch.no_grad():
        report = evaluate_run(model, schedule, pairs, scales, args.steps, args.seed,
                              ckpt_hash=checkpoint_hash(args.ckpt))
    report.write(args.report)
    print(report.to_text(), end="")


if __name__ == "__main__":
    main()
