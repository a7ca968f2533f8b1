"""Codec pretraining and the two diffusion stages (coarse, then high-quality fine-tuning).

Randomness is derived from ``(train_seed, step)`` alone, so a resumed run draws
the same batches, timesteps, noise and drop decisions as an uninterrupted one.
"""
from __future__ import annotations

import functools
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .codec import codec_loss, estimate_latent_scale
from .config import RunConfig, TrainConfig, dump_config
from .curation import ACCEPT, DataPair
from .dataset import load_pairs, read_manifest
from .diffusion import NoiseSchedule, forward_diffuse, ldm_loss, schedule_from_config
from .errors import ConfigError, DataError, DivergenceError, IncompatibleCheckpointError, IoError, StageError
from .model import GarmentRestorer, PreparedInputs

log = logging.getLogger(__name__)


def set_determinism(threads: int = 1):
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads)


@dataclass
class PairTensors:
    ids: list[str]
    categories: list[str]
    person: torch.Tensor   # (N, 3, H, W)
    mask: torch.Tensor     # (N, 1, H, W)
    garment: torch.Tensor  # (N, 3, H, W)

    @classmethod
    def from_pairs(cls, pairs: list[DataPair]) -> "PairTensors":
        if not pairs:
            raise DataError("no data pairs")
        return cls([p.id for p in pairs], [p.category for p in pairs],
                   torch.from_numpy(np.stack([p.person for p in pairs])).float(),
                   torch.from_numpy(np.stack([p.mask for p in pairs])).float(),
                   torch.from_numpy(np.stack([p.garment for p in pairs])).float())

    def __len__(self):
        return len(self.ids)


def _step_generator(seed: int, step: int, salt: int = 0) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) * 1_000_003 + int(step) * 7 + salt)


@functools.lru_cache(maxsize=64)
def _epoch_perm(n: int, seed: int, epoch: int) -> tuple[int, ...]:
    return tuple(torch.randperm(n, generator=torch.Generator().manual_seed(seed * 7919 + epoch)).tolist())


def batch_indices(n: int, batch: int, step: int, seed: int) -> list[int]:
    """Indices for 0-based ``step`` from a stream of seeded per-epoch permutations."""
    out = []
    for pos in range(step * batch, (step + 1) * batch):
        epoch, k = divmod(pos, n)
        out.append(_epoch_perm(n, int(seed), epoch)[k])
    return out


def _check_finite(loss: torch.Tensor, step: int):
    if not torch.isfinite(loss):
        raise DivergenceError(f"loss became non-finite at step {step}")


# ---------------------------------------------------------------------------
# codec stage

def pretrain_codec(model: GarmentRestorer, data: PairTensors, tcfg: TrainConfig, steps: int,
                   start_step: int = 0, on_step=None) -> list[float]:
    if model.cfg.pixel_mode:
        model.codec_ready = True
        return []
    images = torch.cat([data.garment, data.person])
    codec = model.codec
    codec.latent_scale = 1.0
    opt = torch.optim.AdamW(codec.parameters(), lr=tcfg.codec_learning_rate, betas=(0.9, 0.999),
                            eps=1e-8, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1), eta_min=tcfg.codec_learning_rate * 0.05)
    losses = []
    codec.train()
    for i in range(steps):
        idx = batch_indices(len(images), tcfg.codec_batch_size, start_step + i, tcfg.train_seed)
        loss = codec_loss(codec, images[idx])
        _check_finite(loss, start_step + i + 1)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        if on_step:
            on_step(start_step + i + 1, losses[-1])
    codec.eval()
    codec.latent_scale = estimate_latent_scale(codec, images)
    model.codec_ready = True
    return losses


# ---------------------------------------------------------------------------
# diffusion stages

@dataclass
class StageData:
    """Codec-side tensors for every pair, computed once because the codec is frozen."""

    prep: PreparedInputs
    z0: torch.Tensor
    categories: list[str]

    def take(self, idx):
        return (PreparedInputs(self.prep.person_latent[idx], self.prep.m_resized[idx], self.prep.crop[idx]),
                self.z0[idx], [self.categories[i] for i in idx])


@torch.no_grad()
def prepare_stage_data(model: GarmentRestorer, data: PairTensors) -> StageData:
    prep = model.prepare(data.person, data.mask)
    return StageData(prep, model.codec.encode(data.garment), list(data.categories))


def train_step(model: GarmentRestorer, batch, tcfg: TrainConfig, gen: torch.Generator,
               optimizer: torch.optim.Optimizer, schedule: NoiseSchedule, step: int = 0) -> float:
    """One AdamW update on ``batch = (prepared inputs, garment latents, categories)``."""
    if not getattr(model, "codec_ready", False):
        raise StageError("codec is not pretrained; run the codec stage first")
    prep, z0, categories = batch
    B = z0.shape[0]
    t = torch.randint(1, schedule.T + 1, (B,), generator=gen)
    eps = torch.randn(z0.shape, generator=gen)
    keep = torch.rand(B, generator=gen) >= tcfg.drop_prob
    z_t = forward_diffuse(z0, t, eps, schedule)
    t_ref = t if model.cfg.per_step_reference else 0
    cond = model.condition(prep, categories, t_ref=t_ref)
    cond = cond.select(keep, model.null_conditioning(B))
    loss = ldm_loss(model.denoise(z_t, t, cond), eps)
    _check_finite(loss, step)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    params = [p for p in model.diffusion_parameters() if p.grad is not None]
    if tcfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(params, tcfg.grad_clip)
    optimizer.step()
    return loss.item()


def make_optimizer(model: GarmentRestorer, lr: float, weight_decay: float) -> torch.optim.Optimizer:
    return torch.optim.AdamW(list(model.diffusion_parameters()), lr=lr, betas=(0.9, 0.999),
                             eps=1e-8, weight_decay=weight_decay)


def train_diffusion(model: GarmentRestorer, data: PairTensors, tcfg: TrainConfig, schedule: NoiseSchedule,
                    steps: int, lr: float, start_step: int = 0, on_step=None) -> list[float]:
    for p in model.codec.parameters():
        p.requires_grad_(False)
    stage_data = prepare_stage_data(model, data)
    opt = make_optimizer(model, lr, tcfg.weight_decay)
    losses = []
    model.train()
    for i in range(steps):
        step = start_step + i
        idx = batch_indices(len(data), tcfg.batch_size, step, tcfg.train_seed)
        gen = _step_generator(tcfg.train_seed, step)
        losses.append(train_step(model, stage_data.take(idx), tcfg, gen, opt, schedule, step + 1))
        if on_step:
            on_step(step + 1, losses[-1])
    model.eval()
    return losses


def loss_ema(losses, beta: float = 0.99) -> list[float]:
    out, ema = [], None
    for v in losses:
        ema = v if ema is None else beta * ema + (1 - beta) * v
        out.append(ema)
    return out


# ---------------------------------------------------------------------------
# file-level stage runner


class LossLog:
    """Append-only ``step,loss`` lines."""

    def __init__(self, path: Path, every: int = 1):
        self.path, self.every = path, max(1, every)
        self._fh = path.open("a")

    def __call__(self, step: int, loss: float):
        if step % self.every == 0:
            self._fh.write(f"{step},{loss!r}\n")

    def close(self):
        self._fh.close()


def _load_data(tcfg: TrainConfig, require_accept: bool = False) -> tuple[PairTensors, list]:
    if not tcfg.data:
        raise ConfigError("config key 'data' (dataset root) is required")
    root = Path(tcfg.data)
    manifest = Path(tcfg.manifest) if tcfg.manifest else root / "coarse.txt"
    if not manifest.is_absolute() and not manifest.exists():
        manifest = root / manifest
    entries = read_manifest(manifest)
    if not entries:
        raise DataError(f"manifest {manifest} is empty")
    if require_accept:
        bad = [e.id for e in entries if e.status != ACCEPT]
        if bad:
            raise DataError(f"fine manifest {manifest} contains non-Accept pairs: {bad[:5]}")
    return PairTensors.from_pairs(load_pairs(root, entries)), entries


def manifest_digest(entries) -> str:
    """Short hash over the ordered pair ids a stage trains on."""
    return hashlib.sha256("\n".join(e.id for e in entries).encode()).hexdigest()[:12]


def run_stage(cfg: RunConfig, resume: str | None = None, threads: int = 1) -> dict:
    """Run one training stage end to end and write its checkpoint and loss log."""
    tcfg = cfg.train
    tcfg.validate()
    if not tcfg.out:
        raise ConfigError("config key 'out' (checkpoint directory) is required")
    set_determinism(threads)
    out = Path(tcfg.out)
    schedule = schedule_from_config(cfg.schedule)
    start_step = 0
    sched_info = {k: v for k, v in vars(cfg.schedule).items()}

    if tcfg.stage == "codec":
        if resume:
            model, header = _load_stage(resume, ("codec",), tcfg.train_seed)
            start_step = int(header.get("step", 0))
        else:
            torch.manual_seed(tcfg.train_seed)
            model = GarmentRestorer(cfg.model)
        data, entries = _load_data(tcfg)
        run = lambda on_step: pretrain_codec(model, data, tcfg, tcfg.steps, start_step, on_step)
    elif tcfg.stage == "coarse":
        if resume:
            model, header = _load_stage(resume, ("coarse",), tcfg.train_seed)
            start_step = int(header.get("step", 0))
        else:
            if not tcfg.codec_ckpt:
                raise StageError("coarse stage needs a codec checkpoint (config key codec_ckpt)")
            model, header = _load_stage(tcfg.codec_ckpt, ("codec",), tcfg.train_seed, cfg.model)
        data, entries = _load_data(tcfg)
        run = lambda on_step: train_diffusion(model, data, tcfg, schedule, tcfg.steps,
                                              tcfg.learning_rate, start_step, on_step)
    else:
        src = resume or tcfg.init_ckpt
        if not src:
            raise StageError("hqft stage needs a coarse checkpoint (config key init_ckpt)")
        model, header = _load_stage(src, ("hqft",) if resume else ("coarse",), tcfg.train_seed)
        start_step = int(header.get("step", 0))
        data, entries = _load_data(tcfg, require_accept=True)
        coarse_steps = int(header.get("coarse_steps", start_step))
        steps = tcfg.hqft_steps if tcfg.hqft_steps >= 0 else int(coarse_steps * tcfg.hqft_step_factor)
        lr = tcfg.learning_rate * tcfg.hqft_lr_factor
        run = lambda on_step: train_diffusion(model, data, tcfg, schedule, steps, lr, start_step, on_step)

    digest = manifest_digest(entries)
    if resume and header.get("data_manifest", digest) != digest:
        raise IncompatibleCheckpointError(
            f"{resume}: checkpoint was trained on manifest {header['data_manifest']}, "
            f"resume manifest is {digest}")
    out.mkdir(parents=True, exist_ok=True)
    if not resume:
        (out / "loss.log").unlink(missing_ok=True)
    loss_log = LossLog(out / "loss.log", tcfg.log_every)
    try:
        losses = run(loss_log)
    finally:
        loss_log.close()
    info = {"stage": tcfg.stage, "step": start_step + len(losses), "data_manifest": digest}
    if tcfg.stage == "hqft":
        info["coarse_steps"] = int(header.get("coarse_steps", header.get("step", 0)))
    elif tcfg.stage == "coarse":
        info["coarse_steps"] = start_step + len(losses)
    info.update(sched_info)
    save_checkpoint(model, info, out)
    (out / "config.txt").write_text(dump_config(cfg))
    log.info("stage %s finished at step %d", tcfg.stage, info["step"])
    return {"losses": losses, "info": info, "model": model}


def _load_stage(path, allowed: tuple[str, ...], seed: int, expect_model=None):
    if not Path(path, "MANIFEST").is_file():
        raise IoError(f"checkpoint not found: {path}")
    model, header = load_checkpoint(path, seed)
    stage = header.get("stage")
    if stage not in allowed:
        raise StageError(f"{path}: checkpoint stage is {stage!r}, expected one of {allowed}")
    if expect_model is not None and model.cfg != expect_model:
        # architecture comes from the codec checkpoint, diffusion fields from the run config
        codec_fields = ("height", "width", "pixel_mode", "latent_channels", "codec_widths")
        for f in codec_fields:
            if getattr(model.cfg, f) != getattr(expect_model, f):
                raise IncompatibleCheckpointError(
                    f"{path}: codec field {f}={getattr(model.cfg, f)!r} differs from config "
                    f"{getattr(expect_model, f)!r}")
        state = {k: v for k, v in model.state_dict().items() if k.startswith("codec.")}
        scale = model.codec.latent_scale
        torch.manual_seed(seed)
        model = GarmentRestorer(expect_model)
        model.load_state_dict(state, strict=False)
        model.codec.latent_scale = scale
    model.codec_ready = True
    return model, header
