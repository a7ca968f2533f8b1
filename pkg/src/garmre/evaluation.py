"""Guidance-grid evaluation of a trained restorer: paired SSIM plus FID/KID per embedder."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import array_to_image, save_png
from .diffusion import GuidanceConfig, NoiseSchedule
from .errors import DataError
from .metrics import codec_embedder, embed_images, extractor_embedder, fid, kid, ssim
from .model import restore

log = logging.getLogger(__name__)

DEFAULT_SCALES = (1.0, 1.5, 2.0, 2.5)
KID_FACTOR = 1e3
REPORT_HEADER = "metric,embedder,guidance_scale,value,n_real,n_gen"


@dataclass
class MetricRow:
    metric: str
    embedder: str
    guidance_scale: float
    value: float
    n_real: int
    n_gen: int

    def to_line(self) -> str:
        return (f"{self.metric},{self.embedder},{self.guidance_scale!r},{self.value!r},"
                f"{self.n_real},{self.n_gen}")


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)
    config_hash: str = ""
    checkpoint_hash: str = ""

    def value(self, metric: str, scale: float, embedder: str = "-") -> float:
        for r in self.rows:
            if r.metric == metric and r.guidance_scale == scale and embedder in (r.embedder, r.embedder.split("@")[0]):
                return r.value
        raise KeyError((metric, scale, embedder))

    def to_text(self) -> str:
        head = f"# checkpoint={self.checkpoint_hash} config={self.config_hash}\n{REPORT_HEADER}\n"
        return head + "".join(r.to_line() + "\n" for r in self.rows)

    def write(self, path: str | Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())


def read_report(path: str | Path) -> list[MetricRow]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#") or line == REPORT_HEADER:
            continue
        m, e, s, v, nr, ng = line.split(",")
        rows.append(MetricRow(m, e, float(s), float(v), int(nr), int(ng)))
    return rows


def default_embedders(model):
    return [codec_embedder(model.codec), extractor_embedder(model.extractor)]


def config_hash(model) -> str:
    return hashlib.sha256(repr(model.cfg).encode()).hexdigest()[:12]


@torch.no_grad()
def sample_garments(model, schedule: NoiseSchedule, pairs, scale: float, ddim_steps: int = 25,
                    seed: int = 0, batch: int = 16, garmnet: bool = True) -> torch.Tensor:
    """Restore every pair at one guidance scale; batches are seeded by their position."""
    out = []
    for start in range(0, len(pairs), batch):
        chunk = pairs[start:start + batch]
        person = torch.stack([torch.as_tensor(p.person) for p in chunk])
        mask = torch.stack([torch.as_tensor(p.mask) for p in chunk])
        guidance = GuidanceConfig(scale=scale, ddim_steps=ddim_steps, seed=seed + start)
        out.append(restore(model, schedule, person, mask, [p.category for p in chunk], guidance, garmnet))
    return torch.cat(out)


def mean_ssim(generated, truth) -> float:
    return float(np.mean([ssim(g, t) for g, t in zip(generated, truth)]))


def evaluate_run(model, schedule: NoiseSchedule, pairs, scales=DEFAULT_SCALES, ddim_steps: int = 25,
                 seed: int = 0, out_dir: str | Path | None = None, reference=None, embedders=None,
                 batch: int = 16, ckpt_hash: str = "") -> MetricReport:
    """Sample each pair at every guidance scale and score against the ground-truth garments.

    ``reference`` overrides the real set for FID/KID (e.g. garments of another dataset);
    SSIM is always paired against each pair's own garment.
    """
    if not pairs:
        raise DataError("evaluation manifest is empty")
    truth = torch.stack([torch.as_tensor(p.garment) for p in pairs])
    real = truth if reference is None else torch.as_tensor(reference)
    embedders = default_embedders(model) if embedders is None else embedders
    real_feats = {e.id: embed_images(real, e) for e in embedders}
    report = MetricReport(config_hash=config_hash(model), checkpoint_hash=ckpt_hash)
    n_real, n_gen = len(real), len(pairs)
    for scale in scales:
        gen = sample_garments(model, schedule, pairs, float(scale), ddim_steps, seed, batch)
        if out_dir is not None:
            for p, img in zip(pairs, gen):
                save_png(array_to_image(img.numpy()), Path(out_dir) / f"scale{float(scale):g}" / f"{p.id}.png")
        report.rows.append(MetricRow("ssim", "-", float(scale), mean_ssim(gen, truth), n_gen, n_gen))
        for e in embedders:
            g = embed_images(gen, e)
            r = real_feats[e.id]
            report.rows.append(MetricRow("fid", e.id, float(scale), fid(r, g), n_real, n_gen))
            report.rows.append(MetricRow("kid", e.id, float(scale), kid(r, g, seed=seed) * KID_FACTOR,
                                         n_real, n_gen))
        log.info("scale %g: ssim %.4f", scale, report.rows[-1 - 2 * len(embedders)].value)
    return report
