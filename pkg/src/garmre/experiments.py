"""Desk-scale overfit experiment: codec -> coarse -> hqft on clean synthetic pairs, plus ablations.

Everything goes through the file-level stage runner, so the experiment exercises the
same checkpoints, manifests and loss logs as the command line.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, schedule_from_header
from .config import RunConfig
from .dataset import curate_tree, generate_tree, load_pairs
from .diffusion import schedule_from_config
from .evaluation import mean_ssim, sample_garments
from .metrics import psnr
from .training import PairTensors, loss_ema, run_stage, set_determinism

log = logging.getLogger(__name__)


@dataclass
class OverfitSettings:
    pairs: int = 64
    data_seed: int = 0
    train_seed: int = 0
    codec_steps: int = 4000
    coarse_steps: int = 3000
    hqft_steps: int = -1
    eval_pairs: int = 16
    guidance_scale: float = 1.5
    ddim_steps: int = 25
    ablations: bool = True


@dataclass
class OverfitResult:
    codec_psnr: float
    codec_psnr_garment: float
    codec_psnr_person: float
    loss_ema_50: float
    loss_ema_final: float
    ssim_full: float
    ssim_no_garmnet: float | None
    ssim_no_hqft: float | None
    ssim_hqft: float | None
    fine_pairs: int
    coarse_pairs: int
    seconds: float

    @property
    def loss_ratio(self) -> float:
        return self.loss_ema_final / self.loss_ema_50


def _stage(root: Path, out: Path, stage: str, steps: int, seed: int, **extra) -> dict:
    cfg = RunConfig()
    cfg.set("seed", seed)
    cfg.set("stage", stage)
    cfg.set("data", str(root))
    cfg.set("out", str(out))
    cfg.set("steps", steps)
    for k, v in extra.items():
        cfg.set(k, v)
    cfg.model.__post_init__()
    return run_stage(cfg)


def source_hash() -> str:
    """Digest of the package sources; a stored result is only reusable under the same code."""
    import hashlib

    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:12]


def read_loss_log(path: Path) -> list[float]:
    return [float(line.split(",")[1]) for line in Path(path).read_text().splitlines() if line]


def _ssim_of(ckpt: Path, pairs, s: OverfitSettings, garmnet: bool = True) -> float:
    model, header = load_checkpoint(ckpt)
    model.eval()
    schedule = schedule_from_config(schedule_from_header(header))
    gen = sample_garments(model, schedule, pairs, s.guidance_scale, s.ddim_steps, seed=0, garmnet=garmnet)
    return mean_ssim(gen, np.stack([p.garment for p in pairs]))


def run_overfit(work: str | Path, s: OverfitSettings | None = None) -> OverfitResult:
    s = s or OverfitSettings()
    t0 = time.time()
    work = Path(work)
    root = work / "data"
    set_determinism(1)
    generate_tree(root, s.pairs, s.data_seed, clean=True)
    coarse, fine, _ = curate_tree(root)
    log.info("curated %d coarse / %d fine pairs", len(coarse), len(fine))

    codec_dir = work / "codec"
    res = _stage(root, codec_dir, "codec", s.codec_steps, s.train_seed)
    data = PairTensors.from_pairs(load_pairs(root, coarse))
    codec = res["model"].codec
    with torch.no_grad():
        g_rec, p_rec = codec.reconstruct(data.garment), codec.reconstruct(data.person)
    both = psnr(torch.cat([g_rec, p_rec]).numpy(), torch.cat([data.garment, data.person]).numpy())
    g_psnr, p_psnr = psnr(g_rec.numpy(), data.garment.numpy()), psnr(p_rec.numpy(), data.person.numpy())
    log.info("codec psnr %.2f dB (garment %.2f, person %.2f)", both, g_psnr, p_psnr)

    coarse_dir = work / "coarse"
    _stage(root, coarse_dir, "coarse", s.coarse_steps, s.train_seed, codec_ckpt=str(codec_dir))
    ema = loss_ema(read_loss_log(coarse_dir / "loss.log"))

    eval_pairs = load_pairs(root, coarse[:s.eval_pairs])
    ssim_full = _ssim_of(coarse_dir, eval_pairs, s)
    log.info("coarse ssim %.4f", ssim_full)

    ssim_nog = ssim_hqft = None
    if s.ablations:
        nog_dir = work / "coarse_no_garmnet"
        _stage(root, nog_dir, "coarse", s.coarse_steps, s.train_seed, codec_ckpt=str(codec_dir),
               use_garmnet=False)
        ssim_nog = _ssim_of(nog_dir, eval_pairs, s)
        hqft_dir = work / "hqft"
        _stage(root, hqft_dir, "hqft", 1, s.train_seed, init_ckpt=str(coarse_dir), manifest="fine.txt",
               hqft_steps=s.hqft_steps)
        ssim_hqft = _ssim_of(hqft_dir, eval_pairs, s)
        log.info("no-garmnet ssim %.4f, hqft ssim %.4f", ssim_nog, ssim_hqft)

    result = OverfitResult(both, g_psnr, p_psnr, ema[49], ema[-1], ssim_full, ssim_nog,
                           ssim_full if s.ablations else None, ssim_hqft, len(fine), len(coarse),
                           time.time() - t0)
    (work / "result.json").write_text(json.dumps({**asdict(result), "settings": asdict(s), "source": source_hash()}, indent=2))
    return result


def load_result(work: str | Path, s: OverfitSettings | None = None) -> OverfitResult | None:
    """Stored result of ``run_overfit``, or None unless it matches ``s`` and the current sources."""
    path = Path(work) / "result.json"
    if not path.is_file():
        return None
    d = json.loads(path.read_text())
    settings, source = d.pop("settings", None), d.pop("source", None)
    if s is not None and (settings != asdict(s) or source != source_hash()):
        return None
    return OverfitResult(**d)
