"""UNet shared by GarmNet and the garment denoiser, plus the two fused attention ops.

Feature maps are ``(B, c, h, w)``; token sequences are ``(B, n, c)``.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import CATEGORIES
from .errors import CategoryError, FusionSiteError, ShapeError


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> torch.Tensor:
    """Multi-head scaled dot-product attention on projected tokens."""
    B, nq, c = q.shape
    nk = k.shape[1]
    d = c // heads
    q = q.reshape(B, nq, heads, d).transpose(1, 2)
    k = k.reshape(B, nk, heads, d).transpose(1, 2)
    v = v.reshape(B, nk, heads, d).transpose(1, 2)
    w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
    return (w @ v).transpose(1, 2).reshape(B, nq, c)


def to_tokens(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(2).transpose(1, 2)


def to_map(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
    B, _, c = tokens.shape
    return tokens.transpose(1, 2).reshape(B, c, h, w)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.to_out(attention(self.to_q(tokens), self.to_k(tokens), self.to_v(tokens), self.heads))


class DecoupledCrossAttention(nn.Module):
    """Text cross-attention with an optional parallel branch over image tokens.

    Both branches share the query projection and the output projection; the
    image branch keys/values start at zero so a fresh layer behaves as text-only.
    """

    def __init__(self, dim: int, context_dim: int, heads: int, image_branch: bool):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.image_branch = image_branch
        if image_branch:
            self.to_k_ll = nn.Linear(context_dim, dim, bias=False)
            self.to_v_ll = nn.Linear(context_dim, dim, bias=False)
            nn.init.zeros_(self.to_k_ll.weight)
            nn.init.zeros_(self.to_v_ll.weight)
        self.to_out = nn.Linear(dim, dim)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)

    def branches(self, tokens, text, f_ll=None):
        q = self.to_q(tokens)
        text_out = attention(q, self.to_k(text), self.to_v(text), self.heads)
        if f_ll is None or not self.image_branch:
            return text_out, None
        return text_out, attention(q, self.to_k_ll(f_ll), self.to_v_ll(f_ll), self.heads)

    def forward(self, tokens, text, f_ll=None):
        text_out, image_out = self.branches(tokens, text, f_ll)
        out = text_out if image_out is None else text_out + image_out
        return self.to_out(out)


def _as_batch(x: torch.Tensor, dims: int):
    return (x.unsqueeze(0), False) if x.dim() == dims - 1 else (x, True)


def concat_self_attention(f_g: torch.Tensor, f_hl: torch.Tensor | None, attn: SelfAttention) -> torch.Tensor:
    """Self-attention over the width-concatenation [f_hl | f_g], keeping the f_g half.

    With ``f_hl`` None this is ordinary self-attention over ``f_g``. Returns the
    attention output only (no residual), shaped like ``f_g``.
    """
    h, w = f_g.shape[-2:]
    if f_hl is None:
        return to_map(attn(to_tokens(f_g)), h, w)
    if f_hl.shape != f_g.shape:
        raise ShapeError(f"reference features {tuple(f_hl.shape)} != site features {tuple(f_g.shape)}")
    f_con = torch.cat([f_hl, f_g], dim=-1)
    out = to_map(attn(to_tokens(f_con)), h, 2 * w)
    return out[..., w:]


def fused_self_attention(f_g: torch.Tensor, f_hl: torch.Tensor, attn: SelfAttention) -> torch.Tensor:
    """Residual block output ``f_g + Attn(concat)[latter half]``; accepts (c,h,w) or (B,c,h,w)."""
    f_g, batched = _as_batch(f_g, 4)
    f_hl, _ = _as_batch(f_hl, 4)
    if f_g.dim() != 4:
        raise ShapeError(f"expected (c,h,w) features, got {tuple(f_g.shape)}")
    out = f_g + concat_self_attention(f_g, f_hl, attn)
    return out if batched else out[0]


def fused_cross_attention(f_g: torch.Tensor, text: torch.Tensor, f_ll: torch.Tensor | None,
                          attn: DecoupledCrossAttention) -> torch.Tensor:
    """Residual block output ``f_g + out(Attn(q, text) + Attn(q, f_ll))``."""
    f_g, batched = _as_batch(f_g, 4)
    text, _ = _as_batch(text, 3)
    if f_ll is not None:
        f_ll, _ = _as_batch(f_ll, 3)
    if f_g.dim() != 4 or text.dim() != 3:
        raise ShapeError("expected (c,h,w) features and (L,D) text tokens")
    if text.shape[-1] != attn.to_k.in_features or f_g.shape[1] != attn.to_q.in_features:
        raise ShapeError(
            f"cross-attention widths mismatch: features c={f_g.shape[1]}, tokens D={text.shape[-1]}")
    if f_ll is not None and f_ll.shape[-1] != text.shape[-1]:
        raise ShapeError(f"image tokens D={f_ll.shape[-1]} != text tokens D={text.shape[-1]}")
    h, w = f_g.shape[-2:]
    out = f_g + to_map(attn(to_tokens(f_g), text, f_ll), h, w)
    return out if batched else out[0]


def _groups(norm_groups: int, channels: int) -> int:
    return math.gcd(norm_groups, channels)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(groups, c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(temb_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups(groups, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class GarmFusBlock(nn.Module):
    """Transformer block: fused self-attention, decoupled cross-attention, feed-forward."""

    def __init__(self, dim: int, context_dim: int, heads: int, groups: int, image_branch: bool):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(groups, dim), dim)
        self.proj_in = nn.Conv2d(dim, dim, 1)
        self.ln1 = nn.LayerNorm(dim)
        self.attn1 = SelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.attn2 = DecoupledCrossAttention(dim, context_dim, heads, image_branch)
        self.ln3 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.proj_out = nn.Conv2d(dim, dim, 1)

    def site_input(self, x):
        """Normalised features entering the self-attention layer, as a (B,c,h,w) map."""
        h = self.proj_in(self.norm(x))
        h_w = x.shape[-2:]
        tokens = to_tokens(h)
        return tokens, to_map(self.ln1(tokens), *h_w)

    def forward(self, x, text, f_ll=None, f_hl=None):
        hh, ww = x.shape[-2:]
        tokens, site = self.site_input(x)
        tokens = tokens + to_tokens(concat_self_attention(site, f_hl, self.attn1))
        tokens = tokens + self.attn2(self.ln2(tokens), text, f_ll)
        tokens = tokens + self.ff(self.ln3(tokens))
        return x + self.proj_out(to_map(tokens, hh, ww))


class GarmUNet(nn.Module):
    """UNet with one GarmFus block per resolution on the way down, in the middle and up.

    Used twice: as GarmNet (5-channel input, reference features are captured at
    every block's self-attention input) and as the denoiser (4-channel input,
    consumes those features and the image tokens).
    """

    def __init__(self, in_channels: int, out_channels: int, widths=(64, 128), heads: int = 4,
                 context_dim: int = 128, norm_groups: int = 32, image_branch: bool = True):
        super().__init__()
        self.widths = tuple(widths)
        self.in_channels = in_channels
        w0 = widths[0]
        temb_dim = 4 * w0
        self.temb_base = w0
        self.time_mlp = nn.Sequential(nn.Linear(w0, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(in_channels, w0, 3, padding=1)

        def block(c):
            return GarmFusBlock(c, context_dim, heads, norm_groups, image_branch)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        c = w0
        for i, w in enumerate(widths):
            self.down_res.append(ResBlock(c, w, temb_dim, norm_groups))
            self.down_attn.append(block(w))
            c = w
            if i < len(widths) - 1:
                self.downsample.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
        self.mid_res1 = ResBlock(c, c, temb_dim, norm_groups)
        self.mid_attn = block(c)
        self.mid_res2 = ResBlock(c, c, temb_dim, norm_groups)
        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i, w in reversed(list(enumerate(widths))):
            self.up_res.append(ResBlock(c + w, w, temb_dim, norm_groups))
            self.up_attn.append(block(w))
            c = w
            if i > 0:
                self.upsample.append(nn.Conv2d(w, w, 3, padding=1))
        self.norm_out = nn.GroupNorm(_groups(norm_groups, c), c)
        self.conv_out = nn.Conv2d(c, out_channels, 3, padding=1)

    @property
    def sites(self) -> list[GarmFusBlock]:
        return list(self.down_attn) + [self.mid_attn] + list(self.up_attn)

    def site_shapes(self, hw: tuple[int, int]) -> list[tuple[int, int, int]]:
        """(c, h, w) of every self-attention site input for a given input resolution."""
        sizes = [tuple(hw)]
        for _ in range(len(self.widths) - 1):
            h, w = sizes[-1]
            sizes.append(((h + 1) // 2, (w + 1) // 2))
        down = [(c, *s) for c, s in zip(self.widths, sizes)]
        mid = [(self.widths[-1], *sizes[-1])]
        return down + mid + down[::-1]

    def forward(self, x, t, text, f_ll=None, f_hl=None, capture: bool = False):
        """Noise prediction, or with ``capture=True`` the list of site inputs."""
        n_sites = 2 * len(self.widths) + 1
        if f_hl is not None:
            if len(f_hl) != n_sites:
                raise FusionSiteError(f"reference pyramid has {len(f_hl)} levels, UNet has {n_sites} sites")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1 and x.shape[0] != 1:
            t = t.expand(x.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.temb_base).to(x.dtype))
        captured = []
        site_iter = iter(range(n_sites))

        def run_block(blk, h):
            i = next(site_iter)
            ref = None
            if f_hl is not None:
                ref = f_hl[i]
                if tuple(ref.shape[-3:]) != tuple(h.shape[-3:]):
                    raise FusionSiteError(
                        f"site {i}: reference {tuple(ref.shape[-3:])} != features {tuple(h.shape[-3:])}")
                if ref.dim() == 3:
                    ref = ref.unsqueeze(0)
                if ref.shape[0] != h.shape[0]:
                    ref = ref.expand(h.shape[0], -1, -1, -1)
            if capture:
                captured.append(blk.site_input(h)[1])
            return blk(h, text, f_ll, ref)

        h = self.conv_in(x)
        skips = []
        for i, (res, blk) in enumerate(zip(self.down_res, self.down_attn)):
            h = run_block(blk, res(h, temb))
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid_res1(h, temb)
        h = run_block(self.mid_attn, h)
        h = self.mid_res2(h, temb)
        for j, (res, blk) in enumerate(zip(self.up_res, self.up_attn)):
            h = res(torch.cat([h, skips.pop()], dim=1), temb)
            if capture and j == len(self.up_attn) - 1:
                # last site: its input is all that is needed
                captured.append(blk.site_input(h)[1])
                return captured
            h = run_block(blk, h)
            if j < len(self.upsample):
                h = F.interpolate(h, size=skips[-1].shape[-2:], mode="nearest")
                h = self.upsample[j](h)
        return self.conv_out(F.silu(self.norm_out(h)))


class CategoryEmbedding(nn.Module):
    """Learned token blocks for the three garment categories plus a null entry (last row)."""

    def __init__(self, tokens: int, dim: int):
        super().__init__()
        self.table = nn.Parameter(torch.randn(len(CATEGORIES) + 1, tokens, dim) * 0.02)

    def index(self, category: str) -> int:
        try:
            return CATEGORIES.index(category)
        except ValueError:
            raise CategoryError(f"unknown category {category!r}; expected one of {CATEGORIES}") from None

    def forward(self, category: str) -> torch.Tensor:
        return self.table[self.index(category)]

    def batch(self, categories) -> torch.Tensor:
        idx = torch.tensor([self.index(c) for c in categories], dtype=torch.long)
        return self.table[idx]

    @property
    def null(self) -> torch.Tensor:
        return self.table[len(CATEGORIES)]


class NullConditions(nn.Module):
    """Learned stand-ins used when conditions are dropped (image tokens and per-site features)."""

    def __init__(self, image_tokens: int, dim: int, site_channels):
        super().__init__()
        self.ll = nn.Parameter(torch.randn(image_tokens, dim) * 0.02)
        self.hl = nn.ParameterList([nn.Parameter(torch.zeros(c)) for c in site_channels])

    def pyramid(self, site_shapes) -> list[torch.Tensor]:
        return [p[:, None, None].expand(c, h, w) for p, (c, h, w) in zip(self.hl, site_shapes)]
