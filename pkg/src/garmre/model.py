"""The full garment-restoration model: codec, both extractors, denoiser and learned nulls."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .codec import LatentCodec, PixelCodec
from .config import ModelConfig
from .denoiser import CategoryEmbedding, GarmUNet, NullConditions
from .diffusion import Conditioning, GuidanceConfig, NoiseSchedule, ddim_sample
from .errors import ShapeError
from .extractors import LowLevelExtractor, crop_and_resize, garmnet_forward, resize_mask


@dataclass
class GarmentConditioning:
    text: torch.Tensor          # (B, L, D)
    f_ll: torch.Tensor          # (B, N, D)
    f_hl: list[torch.Tensor]    # per site (B, c, h, w)

    def select(self, keep: torch.Tensor, other: "GarmentConditioning") -> "GarmentConditioning":
        """Per-sample choice: rows where ``keep`` is True come from self, others from ``other``."""
        def pick(a, b):
            k = keep.reshape(-1, *([1] * (a.dim() - 1)))
            return torch.where(k, a, b)
        return GarmentConditioning(pick(self.text, other.text), pick(self.f_ll, other.f_ll),
                                   [pick(a, b) for a, b in zip(self.f_hl, other.f_hl)])


@dataclass
class PreparedInputs:
    """Codec-side inputs derived from (person, mask); constant while the codec is frozen."""

    person_latent: torch.Tensor  # (B, 4, h, w)
    m_resized: torch.Tensor      # (B, 1, h, w)
    crop: torch.Tensor           # (B, 3, S, S)


class GarmentRestorer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        # set once the codec has been pretrained (or loaded); pixel mode needs no codec
        self.codec_ready = cfg.pixel_mode
        if cfg.pixel_mode:
            self.codec = PixelCodec(cfg.height, cfg.width)
        else:
            self.codec = LatentCodec(cfg.height, cfg.width, cfg.codec_widths, cfg.latent_channels)
        c = cfg.latent_shape[0]
        unet = dict(widths=cfg.unet_widths, heads=cfg.heads, context_dim=cfg.attn_dim,
                    norm_groups=cfg.norm_groups)
        self.garmnet = GarmUNet(c + 1, c, image_branch=False, **unet)
        self.denoiser = GarmUNet(c, c, image_branch=True, **unet)
        self.extractor = LowLevelExtractor(cfg.crop_size, cfg.extractor_widths, cfg.image_tokens, cfg.attn_dim)
        self.text = CategoryEmbedding(cfg.text_tokens, cfg.attn_dim)
        self.nulls = NullConditions(cfg.image_tokens, cfg.attn_dim, [s[0] for s in self.site_shapes])

    @property
    def site_shapes(self):
        return self.denoiser.site_shapes(self.cfg.latent_shape[1:])

    def diffusion_parameters(self):
        """Everything trained by the diffusion stages (the codec is excluded)."""
        for name, p in self.named_parameters():
            if not name.startswith("codec."):
                yield p

    @torch.no_grad()
    def prepare(self, person: torch.Tensor, mask: torch.Tensor) -> PreparedInputs:
        if person.dim() == 3:
            person, mask = person[None], mask[None]
        if mask.shape[0] != person.shape[0]:
            raise ShapeError("person and mask batch sizes differ")
        crops = torch.stack([crop_and_resize(p, m, self.cfg.crop_size) for p, m in zip(person, mask)])
        latent = self.codec.encode(person)
        return PreparedInputs(latent, resize_mask(mask, latent.shape[-2:]), crops)

    def condition(self, prep: PreparedInputs, categories, t_ref=0) -> GarmentConditioning:
        text = self.text.batch(categories)
        f_ll = self.extractor(prep.crop)
        if self.cfg.use_garmnet:
            f_hl = garmnet_forward(self.garmnet, prep.person_latent, prep.m_resized, text, t_ref)
        else:
            B = text.shape[0]
            f_hl = [p[None].expand(B, -1, -1, -1) for p in self.nulls.pyramid(self.site_shapes)]
        return GarmentConditioning(text, f_ll, f_hl)

    def null_conditioning(self, batch: int = 1) -> GarmentConditioning:
        text = self.text.null[None].expand(batch, -1, -1)
        f_ll = self.nulls.ll[None].expand(batch, -1, -1)
        f_hl = [p[None].expand(batch, -1, -1, -1) for p in self.nulls.pyramid(self.site_shapes)]
        return GarmentConditioning(text, f_ll, f_hl)

    def denoise(self, z_t: torch.Tensor, t, cond: GarmentConditioning) -> torch.Tensor:
        batched = z_t.dim() == 4
        z = z_t if batched else z_t[None]
        if tuple(z.shape[1:]) != tuple(self.cfg.latent_shape):
            raise ShapeError(f"z_t trailing shape {tuple(z.shape[1:])} != {self.cfg.latent_shape}")
        eps = self.denoiser(z, t, cond.text, cond.f_ll, cond.f_hl)
        return eps if batched else eps[0]


@torch.no_grad()
def restore_latents(model: GarmentRestorer, schedule: NoiseSchedule, person: torch.Tensor,
                    mask: torch.Tensor, categories, guidance: GuidanceConfig,
                    garmnet: bool = True) -> torch.Tensor:
    """Sample garment latents for a batch of (person, mask, category)."""
    prep = model.prepare(person, mask)
    B = prep.person_latent.shape[0]
    uncond = model.null_conditioning(B)
    if model.cfg.per_step_reference:
        def cond(t):
            return model.condition(prep, categories, t_ref=t)
    else:
        cond = model.condition(prep, categories)
        if not garmnet:
            cond = GarmentConditioning(cond.text, cond.f_ll, uncond.f_hl)

    def denoiser_fn(z, t, variant):
        if callable(variant):
            variant = variant(t)
        return model.denoise(z, t, variant)

    shape = (B, *model.cfg.latent_shape)
    return ddim_sample(denoiser_fn, Conditioning(cond, uncond), guidance, schedule, shape)


@torch.no_grad()
def restore(model: GarmentRestorer, schedule: NoiseSchedule, person, mask, categories,
            guidance: GuidanceConfig, garmnet: bool = True) -> torch.Tensor:
    """Decoded garment images in [-1, 1]."""
    z = restore_latents(model, schedule, person, mask, categories, guidance, garmnet)
    return model.codec.decode(z)
