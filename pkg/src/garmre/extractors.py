"""Garment condition branches: masked crop -> image tokens, and GarmNet reference features."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import EmptyMaskError, ShapeError

NULL_VALUE = -1.0


def _check_pair(person: torch.Tensor, mask: torch.Tensor):
    if person.dim() != 3 or person.shape[0] != 3:
        raise ShapeError(f"person must be (3,H,W), got {tuple(person.shape)}")
    if mask.dim() != 3 or mask.shape[0] != 1 or mask.shape[1:] != person.shape[1:]:
        raise ShapeError(f"mask must be (1,H,W) matching person, got {tuple(mask.shape)}")


def mask_bbox(mask: torch.Tensor) -> tuple[int, int, int, int]:
    """Tight (top, bottom, left, right) bounds of mask pixels, bottom/right exclusive."""
    m = mask.reshape(mask.shape[-2:]) > 0.5
    rows = torch.nonzero(m.any(dim=1)).flatten()
    cols = torch.nonzero(m.any(dim=0)).flatten()
    if rows.numel() == 0:
        raise EmptyMaskError("mask has no garment pixels")
    return rows[0].item(), rows[-1].item() + 1, cols[0].item(), cols[-1].item() + 1


def crop_and_resize(person: torch.Tensor, mask: torch.Tensor, side: int = 32) -> torch.Tensor:
    """Masked garment, cropped to its bounding box, padded square and resized to side x side.

    Pixels outside the (resized) mask are set exactly to the null value -1.
    """
    _check_pair(person, mask)
    top, bottom, left, right = mask_bbox(mask)
    keep = (mask > 0.5).to(person.dtype)
    masked = torch.where(keep > 0, person, torch.full_like(person, NULL_VALUE))
    img = masked[:, top:bottom, left:right]
    msk = keep[:, top:bottom, left:right]
    h, w = img.shape[1:]
    n = max(h, w)
    pad_t, pad_l = (n - h) // 2, (n - w) // 2
    pad = (pad_l, n - w - pad_l, pad_t, n - h - pad_t)
    img = F.pad(img, pad, value=NULL_VALUE)
    msk = F.pad(msk, pad, value=0.0)
    img = F.interpolate(img[None], size=(side, side), mode="bilinear", align_corners=False)[0]
    msk = F.interpolate(msk[None], size=(side, side), mode="nearest-exact")[0]
    return torch.where(msk > 0.5, img, torch.full_like(img, NULL_VALUE))


def resize_mask(mask: torch.Tensor, latent_hw: tuple[int, int]) -> torch.Tensor:
    if mask.dim() not in (3, 4) or mask.shape[-3] != 1:
        raise ShapeError(f"mask must be (1,H,W) or (B,1,H,W), got {tuple(mask.shape)}")
    batched = mask.dim() == 4
    m = mask if batched else mask[None]
    out = F.interpolate(m.float(), size=tuple(latent_hw), mode="nearest-exact")
    out = (out > 0.5).to(mask.dtype if mask.is_floating_point() else torch.float32)
    return out if batched else out[0]


class LowLevelExtractor(nn.Module):
    """Small CNN on the garment crop: 3 stride-2 stages, mean pool, linear to N tokens of width D."""

    def __init__(self, crop_size: int = 32, widths=(32, 64, 128), tokens: int = 4, dim: int = 128):
        super().__init__()
        self.crop_size, self.tokens, self.dim = crop_size, tokens, dim
        layers, c = [], 3
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, stride=2, padding=1), nn.SiLU()]
            c = w
        self.encoder = nn.Sequential(*layers)
        self.proj = nn.Linear(c, tokens * dim)
        self.norm = nn.LayerNorm(dim)

    def forward(self, crop: torch.Tensor) -> torch.Tensor:
        batched = crop.dim() == 4
        x = crop if batched else crop[None]
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, self.crop_size, self.crop_size):
            raise ShapeError(
                f"crop must be (3,{self.crop_size},{self.crop_size}), got {tuple(crop.shape)}")
        pooled = self.encoder(x).mean(dim=(2, 3))
        tokens = self.norm(self.proj(pooled).reshape(-1, self.tokens, self.dim))
        return tokens if batched else tokens[0]


def garmnet_input(person_latent: torch.Tensor, m_resized: torch.Tensor) -> torch.Tensor:
    batched = person_latent.dim() == 4
    z = person_latent if batched else person_latent[None]
    m = m_resized if m_resized.dim() == 4 else m_resized[None]
    if m.shape[0] != z.shape[0] or m.shape[1] != 1 or m.shape[-2:] != z.shape[-2:]:
        raise ShapeError(
            f"resized mask {tuple(m_resized.shape)} does not match latent {tuple(person_latent.shape)}")
    return torch.cat([z, m.to(z.dtype)], dim=1)


def garmnet_forward(garmnet, person_latent: torch.Tensor, m_resized: torch.Tensor,
                    text_tokens: torch.Tensor, t=0) -> list[torch.Tensor]:
    """Reference feature pyramid: one map per self-attention site, in site order."""
    x = garmnet_input(person_latent, m_resized)
    if x.shape[1] != garmnet.in_channels:
        raise ShapeError(f"GarmNet expects {garmnet.in_channels} input channels, got {x.shape[1]}")
    text = text_tokens if text_tokens.dim() == 3 else text_tokens[None].expand(x.shape[0], -1, -1)
    pyramid = garmnet(x, t, text, capture=True)
    if person_latent.dim() == 3:
        pyramid = [p[0] for p in pyramid]
    return pyramid
