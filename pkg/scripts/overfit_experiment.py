"""Desk-scale overfit run: codec, coarse training, ablations, and the resulting numbers.

    python3 scripts/overfit_experiment.py --work runs/overfit
"""
import argparse
import json
import logging
from dataclasses import asdict, fields

import torch

from garmre.experiments import OverfitSettings, run_overfit


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--work", default="runs/overfit")
    for f in fields(OverfitSettings):
        kind = (lambda v: v.lower() in ("1", "true", "yes")) if f.type in (bool, "bool") else type(f.default)
        p.add_argument(f"--{f.name.replace('_', '-')}", type=kind, default=f.default)
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(args.threads)
    s = OverfitSettings(**{f.name: getattr(args, f.name) for f in fields(OverfitSettings)})
    r = run_overfit(args.work, s)
    print(json.dumps({**asdict(r), "loss_ratio": r.loss_ratio}, indent=2))


if __name__ == "__main__":
    main()
