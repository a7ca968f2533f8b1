"""SSIM, Fréchet distance and kernel inception distance over pluggable embedders."""
from __future__ import annotations

import hashlib
import logging
import math

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericError, SampleError, ShapeError

log = logging.getLogger(__name__)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, window: int = 11, data_range: float = 2.0, sigma: float = 1.5) -> float:
    """Mean SSIM over valid window positions and channels of two (C,H,W) images."""
    a = torch.as_tensor(np.asarray(a), dtype=torch.float64)
    b = torch.as_tensor(np.asarray(b), dtype=torch.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 2:
        a, b = a[None], b[None]
    if a.dim() != 3 or min(a.shape[-2:]) < window:
        raise ShapeError(f"ssim needs (C,H,W) images at least {window} px per side, got {tuple(a.shape)}")
    C = a.shape[0]
    w = torch.from_numpy(gaussian_window(window, sigma))[None, None].expand(C, 1, -1, -1)

    def filt(x):
        return F.conv2d(x[None], w, groups=C)[0]

    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(smap.mean())


# ---------------------------------------------------------------------------
# embedders

class Embedder:
    """Deterministic image -> feature map, identified by name and weights hash."""

    def __init__(self, name: str, dim: int, fn, weights_hash: str = "none"):
        self.name, self.dim, self._fn, self.weights_hash = name, dim, fn, weights_hash

    @property
    def id(self) -> str:
        return f"{self.name}@{self.weights_hash}"

    @torch.no_grad()
    def __call__(self, images: torch.Tensor) -> np.ndarray:
        return self._fn(images).double().numpy()


def module_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().float().numpy().tobytes())
    return h.hexdigest()[:12]


def codec_embedder(codec) -> Embedder:
    """Spatially pooled codec-encoder features (the codec's widest channel count)."""
    return Embedder("codec", codec.feature_dim, lambda x: codec.features(x).mean(dim=(2, 3)), module_hash(codec))


def extractor_embedder(extractor) -> Embedder:
    """Pooled features of the low-level garment encoder on the whole image resized to its input size."""
    s = extractor.crop_size
    dim = extractor.proj.in_features

    def fn(x):
        x = F.interpolate(x, size=(s, s), mode="bilinear", align_corners=False, antialias=True)
        return extractor.encoder(x).mean(dim=(2, 3))

    return Embedder("extractor", dim, fn, module_hash(extractor))


def embed_images(images, embedder: Embedder, batch: int = 64) -> np.ndarray:
    images = torch.as_tensor(images)
    if images.shape[0] == 0:
        return np.zeros((0, embedder.dim))
    rows = [embedder(images[i:i + batch].float()) for i in range(0, images.shape[0], batch)]
    out = np.concatenate(rows)
    if out.shape[1] != embedder.dim:
        raise ShapeError(f"embedder {embedder.name} produced {out.shape[1]} dims, expected {embedder.dim}")
    return out


# ---------------------------------------------------------------------------
# distribution distances

def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(mu1, sigma1, mu2, sigma2, eps: float = 1e-6) -> float:
    mu1, mu2 = np.asarray(mu1, dtype=np.float64), np.asarray(mu2, dtype=np.float64)
    s1 = np.asarray(sigma1, dtype=np.float64) + eps * np.eye(len(mu1))
    s2 = np.asarray(sigma2, dtype=np.float64) + eps * np.eye(len(mu2))
    root1 = _psd_sqrt(s1)
    prod = root1 @ s2 @ root1
    vals = np.linalg.eigvalsh((prod + prod.T) / 2)
    if vals.min() < -1e-6:
        raise NumericError(f"covariance product has eigenvalue {vals.min():.3e} < -1e-6")
    tr_covmean = np.sqrt(np.clip(vals, 0, None)).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2 * tr_covmean)


def fid(real: np.ndarray, gen: np.ndarray) -> float:
    real, gen = np.asarray(real, dtype=np.float64), np.asarray(gen, dtype=np.float64)
    if real.ndim != 2 or gen.ndim != 2 or real.shape[1] != gen.shape[1]:
        raise ShapeError(f"fid needs n x E and m x E arrays, got {real.shape} and {gen.shape}")
    n, m, E = len(real), len(gen), real.shape[1]
    if n < 2 or m < 2:
        raise SampleError(f"fid needs at least 2 samples per set, got {n} and {m}")
    if min(n, m) < E / 4:
        log.warning("fid with %d/%d samples for %d dims: covariance is poorly estimated", n, m, E)
    return frechet_distance(real.mean(0), np.cov(real, rowvar=False, ddof=1).reshape(E, E),
                            gen.mean(0), np.cov(gen, rowvar=False, ddof=1).reshape(E, E))


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m, n = len(x), len(y)
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    return float((kxx.sum() - np.trace(kxx)) / (m * (m - 1))
                 + (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
                 - 2 * kxy.sum() / (m * n))


def kid_subsets(real, gen, subset_size: int | None = None, subsets: int = 10, seed: int = 0) -> np.ndarray:
    """Unbiased MMD^2 estimates, one per seeded random subset pair."""
    real, gen = np.asarray(real, dtype=np.float64), np.asarray(gen, dtype=np.float64)
    if real.ndim != 2 or gen.ndim != 2 or real.shape[1] != gen.shape[1]:
        raise ShapeError(f"kid needs n x E and m x E arrays, got {real.shape} and {gen.shape}")
    n, m = len(real), len(gen)
    size = min(100, n, m) if subset_size is None else subset_size
    if size < 2 or n < size or m < size:
        raise SampleError(f"kid needs n, m >= subset_size >= 2 (n={n}, m={m}, subset_size={size})")
    rng = np.random.default_rng(seed)
    out = np.empty(subsets)
    for i in range(subsets):
        out[i] = mmd2_unbiased(real[rng.choice(n, size, replace=False)], gen[rng.choice(m, size, replace=False)])
    return out


def kid(real, gen, subset_size: int | None = None, subsets: int = 10, seed: int = 0) -> float:
    """Raw KID (not rescaled); reports multiply by 1e3."""
    return float(kid_subsets(real, gen, subset_size, subsets, seed).mean())


def psnr(a, b, data_range: float = 2.0) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    return math.inf if mse == 0 else 10 * math.log10(data_range ** 2 / mse)
