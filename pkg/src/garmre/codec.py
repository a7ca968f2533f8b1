"""Deterministic convolutional autoencoder that compresses images 8x per side."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericError, ShapeError


def _batched(x: torch.Tensor, channels: int, hw: tuple[int, int], what: str):
    """Return ``(x4d, was_batched)`` after checking the trailing dims."""
    if x.dim() == 3:
        x, batched = x.unsqueeze(0), False
    elif x.dim() == 4:
        batched = True
    else:
        raise ShapeError(f"{what}: expected (C,H,W) or (B,C,H,W), got {tuple(x.shape)}")
    if x.shape[1] != channels or tuple(x.shape[2:]) != tuple(hw):
        raise ShapeError(
            f"{what}: expected trailing shape {(channels, *hw)}, got {tuple(x.shape[1:])}")
    return x, batched


class LatentCodec(nn.Module):
    """Three stride-2 stages (32, 64, 128 by default) and a 1x1 projection to 4 channels."""

    def __init__(self, height: int, width: int, widths=(32, 64, 128), latent_channels: int = 4):
        super().__init__()
        self.height, self.width = height, width
        self.latent_channels = latent_channels
        self.feature_dim = widths[-1]
        # multiplicative standardisation applied after the projection; set once
        # codec pretraining is finished
        self.latent_scale = 1.0

        enc = []
        c_in = 3
        for w in widths:
            enc += [nn.Conv2d(c_in, w, 3, stride=2, padding=1), nn.SiLU(),
                    nn.Conv2d(w, w, 3, padding=1), nn.SiLU()]
            c_in = w
        self.encoder = nn.Sequential(*enc)
        self.to_latent = nn.Conv2d(c_in, latent_channels, 1)

        dec = [nn.Conv2d(latent_channels, widths[-1], 1), nn.SiLU()]
        rev = list(widths[::-1])
        for w_in, w_out in zip(rev, rev[1:] + [rev[-1]]):
            dec += [nn.Conv2d(w_in, w_in, 3, padding=1), nn.SiLU(),
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(w_in, w_out, 3, padding=1), nn.SiLU()]
        dec += [nn.Conv2d(rev[-1], 3, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)
        # the plain conv stack vanishes under the default init (input-layer gradients ~1e-10)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    @property
    def latent_hw(self) -> tuple[int, int]:
        return self.height // 8, self.width // 8

    def features(self, image: torch.Tensor) -> torch.Tensor:
        x, _ = _batched(image, 3, (self.height, self.width), "encode")
        if not torch.isfinite(x).all():
            raise NumericError("encode: input contains non-finite values")
        return self.encoder(x)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        batched = image.dim() == 4
        z = self.to_latent(self.features(image)) * self.latent_scale
        return z if batched else z[0]

    def decode_raw(self, latent: torch.Tensor) -> torch.Tensor:
        z, batched = _batched(latent, self.latent_channels, self.latent_hw, "decode")
        x = self.decoder(z / self.latent_scale)
        return x if batched else x[0]

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        return self.decode_raw(latent).clamp(-1.0, 1.0)

    def reconstruct(self, image: torch.Tensor) -> torch.Tensor:
        return self.decode_raw(self.encode(image))


class PixelCodec(nn.Module):
    """Identity stand-in used when diffusion runs directly on pixels (debug mode)."""

    latent_scale = 1.0

    def __init__(self, height: int, width: int):
        super().__init__()
        self.height, self.width = height, width
        self.latent_channels = 3
        self.feature_dim = 3

    @property
    def latent_hw(self):
        return self.height, self.width

    def features(self, image):
        x, _ = _batched(image, 3, (self.height, self.width), "encode")
        if not torch.isfinite(x).all():
            raise NumericError("encode: input contains non-finite values")
        return x

    def encode(self, image):
        batched = image.dim() == 4
        x = self.features(image)
        return x if batched else x[0]

    def decode_raw(self, latent):
        z, batched = _batched(latent, 3, self.latent_hw, "decode")
        return z if batched else z[0]

    def decode(self, latent):
        return self.decode_raw(latent).clamp(-1.0, 1.0)

    def reconstruct(self, image):
        return self.decode_raw(self.encode(image))


def codec_loss(codec, image: torch.Tensor) -> torch.Tensor:
    """Mean squared reconstruction error of ``codec`` on ``image``."""
    return reconstruction_mse(codec.reconstruct(image), image)


def reconstruction_mse(recon: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    if recon.shape != image.shape:
        raise ShapeError(f"reconstruction shape {tuple(recon.shape)} != {tuple(image.shape)}")
    return F.mse_loss(recon, image)


@torch.no_grad()
def estimate_latent_scale(codec: LatentCodec, images: torch.Tensor, batch: int = 64) -> float:
    """Scale making the unscaled latents of ``images`` unit-std."""
    old = codec.latent_scale
    codec.latent_scale = 1.0
    zs = [codec.encode(images[i:i + batch]) for i in range(0, len(images), batch)]
    codec.latent_scale = old
    std = torch.cat(zs).double().std().item()
    if not std > 0:
        raise NumericError("latent std is zero; cannot standardise")
    return 1.0 / std
