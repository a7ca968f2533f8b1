"""Data-pair quality rules, proportion correction, fine-subset selection and a synthetic pair generator.

Images are stored as ``(C, H, W)`` float32 arrays in [-1, 1]; masks as ``(1, H, W)``
float32 arrays in {0, 1}.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from skimage.draw import polygon as fill_polygon
from skimage.morphology import convex_hull_image

from .config import CATEGORIES
from .errors import CategoryError, ConfigError, CorrectionError, CurationError

OCCLUDED, TRUNCATED, SIDE_VIEW, EXTREME = "Occluded", "Truncated", "SideView", "ExtremeProportion"
REASONS = (OCCLUDED, TRUNCATED, SIDE_VIEW, EXTREME)
REJECT_REASONS = frozenset({OCCLUDED, TRUNCATED, SIDE_VIEW})
ACCEPT, REJECT, CORRECT = "Accept", "Reject", "Correct"
DEFECTS = ("clean", "occluded", "truncated", "side_view", "extreme")
_FLAG_OF = {"occluded": OCCLUDED, "truncated": TRUNCATED, "side_view": SIDE_VIEW, "extreme": EXTREME}


@dataclass
class PairMeta:
    occluder: np.ndarray | None = None    # (1, H, W) in {0, 1}
    keypoints: np.ndarray | None = None   # (3, 2) x, y: left shoulder, right shoulder, hip midpoint
    flags: frozenset = frozenset()        # generator ground truth, empty for real data


@dataclass
class DataPair:
    person: np.ndarray
    mask: np.ndarray
    garment: np.ndarray
    category: str
    id: str
    meta: PairMeta = field(default_factory=PairMeta)

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise CategoryError(f"unknown category {self.category!r}")
        if self.person.shape[1:] != self.mask.shape[1:]:
            raise ConfigError(f"pair {self.id}: person {self.person.shape} and mask {self.mask.shape} differ")


@dataclass
class CurationVerdict:
    status: str
    reasons: frozenset
    scores: dict

    @property
    def mean_score(self) -> float:
        return float(np.mean([self.scores[r] for r in REASONS]))


@dataclass
class CurationThresholds:
    border_contact_ratio: float = 0.05
    occlusion_ratio: float = 0.25
    side_ratio: float = 0.3
    min_area_ratio: float = 0.10
    max_area_ratio: float = 0.75
    target_ratio: float = 0.4

    def __post_init__(self):
        for name, value in vars(self).items():
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"threshold {name}={value} outside [0, 1]")
        if self.min_area_ratio >= self.max_area_ratio:
            raise ConfigError("min_area_ratio must be < max_area_ratio")


# ---------------------------------------------------------------------------
# rules

def _bool_mask(mask: np.ndarray) -> np.ndarray:
    return np.asarray(mask).reshape(np.asarray(mask).shape[-2:]) > 0.5


def border_contact(mask: np.ndarray) -> dict:
    m = _bool_mask(mask)
    H, W = m.shape
    return {"bottom": m[-1].sum() / W, "left": m[:, 0].sum() / H, "right": m[:, -1].sum() / H}


def bbox_area_ratio(mask: np.ndarray) -> float:
    m = _bool_mask(mask)
    rows, cols = np.nonzero(m.any(1))[0], np.nonzero(m.any(0))[0]
    if rows.size == 0:
        return 0.0
    area = (rows[-1] - rows[0] + 1) * (cols[-1] - cols[0] + 1)
    return area / m.size


def occlusion_ratio(mask: np.ndarray, occluder: np.ndarray) -> float:
    m = _bool_mask(mask)
    if not m.any():
        return 0.0
    hull = convex_hull_image(m)
    return float((_bool_mask(occluder) & hull).sum() / hull.sum())


def shoulder_torso_ratio(keypoints: np.ndarray) -> float:
    (lx, ly), (rx, ry), (hx, hy) = np.asarray(keypoints, dtype=float)
    torso = hy - (ly + ry) / 2
    if torso <= 0:
        return math.inf
    return abs(rx - lx) / torso


def assess_pair(pair: DataPair, meta: PairMeta | None = None,
                thresholds: CurationThresholds | None = None) -> CurationVerdict:
    th = thresholds or CurationThresholds()
    meta = meta if meta is not None else pair.meta
    scores = dict.fromkeys(REASONS, 0.0)
    reasons = set()

    contact = max(border_contact(pair.mask).values())
    scores[TRUNCATED] = float(contact)
    if contact > th.border_contact_ratio:
        reasons.add(TRUNCATED)

    if meta.occluder is not None:
        occ = occlusion_ratio(pair.mask, meta.occluder)
        scores[OCCLUDED] = occ
        if occ > th.occlusion_ratio:
            reasons.add(OCCLUDED)

    if meta.keypoints is not None:
        ratio = shoulder_torso_ratio(meta.keypoints)
        scores[SIDE_VIEW] = float(np.clip(1.0 - ratio, 0.0, 1.0))
        if ratio < th.side_ratio:
            reasons.add(SIDE_VIEW)

    area = bbox_area_ratio(pair.mask)
    if area < th.min_area_ratio:
        scores[EXTREME] = (th.min_area_ratio - area) / th.min_area_ratio
        reasons.add(EXTREME)
    elif area > th.max_area_ratio:
        scores[EXTREME] = (area - th.max_area_ratio) / (1.0 - th.max_area_ratio)
        reasons.add(EXTREME)

    if reasons & REJECT_REASONS:
        status = REJECT
    elif reasons:
        status = CORRECT
    else:
        status = ACCEPT
    return CurationVerdict(status, frozenset(reasons), scores)


# ---------------------------------------------------------------------------
# proportion correction

def _background_value(person: np.ndarray) -> np.ndarray:
    border = np.concatenate([person[:, 0], person[:, -1], person[:, :, 0], person[:, :, -1]], axis=1)
    return np.median(border, axis=1)


def foreground_mask(person: np.ndarray, tol: float = 0.02) -> np.ndarray:
    bg = _background_value(person)
    return (np.abs(person - bg[:, None, None]) > tol).any(0)


def _bbox(m: np.ndarray):
    rows, cols = np.nonzero(m.any(1))[0], np.nonzero(m.any(0))[0]
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def _warp(img: np.ndarray, scale: float, center, shift, order: int, fill) -> np.ndarray:
    """Resample so that output(y, x) = input at center + ((y, x) - center - shift) / scale."""
    C, H, W = img.shape
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    sy = center[0] + (ys + 0.5 - center[0] - shift[0]) / scale - 0.5
    sx = center[1] + (xs + 0.5 - center[1] - shift[1]) / scale - 0.5
    out = np.empty_like(img)
    if order == 0:
        iy, ix = np.floor(sy + 0.5).astype(int), np.floor(sx + 0.5).astype(int)
        inside = (iy >= 0) & (iy < H) & (ix >= 0) & (ix < W)
        iy, ix = np.clip(iy, 0, H - 1), np.clip(ix, 0, W - 1)
        for c in range(C):
            out[c] = np.where(inside, img[c][iy, ix], fill[c])
        return out
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    fy, fx = sy - y0, sx - x0
    inside = (sy >= -0.5) & (sy <= H - 0.5) & (sx >= -0.5) & (sx <= W - 0.5)
    y0c, y1c = np.clip(y0, 0, H - 1), np.clip(y0 + 1, 0, H - 1)
    x0c, x1c = np.clip(x0, 0, W - 1), np.clip(x0 + 1, 0, W - 1)
    for c in range(C):
        ch = img[c]
        v = (ch[y0c, x0c] * (1 - fy) * (1 - fx) + ch[y0c, x1c] * (1 - fy) * fx
             + ch[y1c, x0c] * fy * (1 - fx) + ch[y1c, x1c] * fy * fx)
        out[c] = np.where(inside, v, fill[c])
    return out


def resize_and_pad(pair: DataPair, target_ratio: float = 0.4, margin: int = 1) -> DataPair:
    """Rescale person and mask about the garment centre so the garment bbox covers
    ``target_ratio`` of the frame, limited so the whole person stays in frame."""
    if not 0 < target_ratio <= 1:
        raise ConfigError(f"target_ratio must be in (0, 1], got {target_ratio}")
    m = _bool_mask(pair.mask)
    if not m.any():
        raise CorrectionError(f"pair {pair.id}: empty garment mask")
    H, W = m.shape
    top, bottom, left, right = _bbox(m)
    ratio = (bottom - top) * (right - left) / (H * W)
    scale = math.sqrt(target_ratio / ratio)
    fg = foreground_mask(pair.person) | m
    ptop, pbottom, pleft, pright = _bbox(fg)
    ph, pw = pbottom - ptop, pright - pleft
    fit = min((H - 2 * margin) / ph, (W - 2 * margin) / pw)
    scale = min(scale, fit)
    if (bottom - top) * scale > H or (right - left) * scale > W:
        raise CorrectionError(f"pair {pair.id}: garment does not fit the frame after scaling")
    if abs(scale - 1.0) < 1e-9:
        return replace(pair)
    center = ((top + bottom) / 2, (left + right) / 2)

    def mapped(y, x):
        return center[0] + scale * (y - center[0]), center[1] + scale * (x - center[1])

    # person bounds after scaling, then the smallest shift keeping them in frame
    t2, l2 = mapped(ptop, pleft)
    b2, r2 = mapped(pbottom, pright)
    dy = max(0.0, margin - t2) - max(0.0, b2 - (H - margin))
    dx = max(0.0, margin - l2) - max(0.0, r2 - (W - margin))
    shift = (dy, dx)
    bg = _background_value(pair.person)
    person = _warp(pair.person, scale, center, shift, 1, bg)
    mask = _warp(pair.mask, scale, center, shift, 0, np.zeros(1, dtype=pair.mask.dtype))
    meta = pair.meta
    occluder = None
    if meta.occluder is not None:
        occluder = _warp(meta.occluder, scale, center, shift, 0, np.zeros(1, dtype=meta.occluder.dtype))
    keypoints = None
    if meta.keypoints is not None:
        kp = np.asarray(meta.keypoints, dtype=np.float64)
        keypoints = np.stack([center[1] + scale * (kp[:, 0] - center[1]) + dx,
                              center[0] + scale * (kp[:, 1] - center[0]) + dy], axis=1)
    return replace(pair, person=person.astype(np.float32), mask=mask,
                   meta=PairMeta(occluder, keypoints, meta.flags))


# ---------------------------------------------------------------------------
# manifests and fine subset

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    category: str
    status: str = "Unassessed"
    reasons: tuple = ()
    score: float = 0.0

    def to_line(self) -> str:
        return f"{self.id},{self.category},{self.status},{';'.join(self.reasons)},{self.score!r}"

    @classmethod
    def from_line(cls, line: str, source: str = "<manifest>") -> "ManifestEntry":
        parts = line.strip().split(",")
        if len(parts) != 5:
            from .errors import DataError
            raise DataError(f"{source}: malformed manifest line {line!r}")
        pid, category, status, reasons, score = parts
        return cls(pid, category, status, tuple(r for r in reasons.split(";") if r), float(score))

    @classmethod
    def from_verdict(cls, pid: str, category: str, verdict: CurationVerdict) -> "ManifestEntry":
        return cls(pid, category, verdict.status, tuple(r for r in REASONS if r in verdict.reasons),
                   verdict.mean_score)


def build_fine_subset(manifest: list[ManifestEntry], fraction: float = 0.2) -> list[ManifestEntry]:
    """Cleanest ``floor(fraction * len(manifest))`` Accept entries, ties broken by id."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    want = math.floor(fraction * len(manifest))
    accepted = sorted((e for e in manifest if e.status == ACCEPT), key=lambda e: (e.score, e.id))
    if len(accepted) < want:
        raise CurationError(
            f"fine subset needs {want} Accept pairs but only {len(accepted)} available "
            f"(shortfall {want - len(accepted)})")
    return accepted[:want]


# ---------------------------------------------------------------------------
# synthetic generator

# garment outlines in box-normalised (u, v) coordinates
_TEMPLATES = {
    "upper": [(0.38, 0.0), (0.62, 0.0), (0.78, 0.04), (1.0, 0.72), (0.87, 0.80), (0.76, 0.32),
              (0.76, 1.0), (0.24, 1.0), (0.24, 0.32), (0.13, 0.80), (0.0, 0.72), (0.22, 0.04)],
    "lower": [(0.06, 0.0), (0.94, 0.0), (1.0, 1.0), (0.58, 1.0), (0.5, 0.28), (0.42, 1.0),
              (0.0, 1.0)],
    "full_body": [(0.36, 0.0), (0.64, 0.0), (0.8, 0.03), (0.74, 0.2), (0.7, 0.42), (1.0, 1.0),
                  (0.0, 1.0), (0.3, 0.42), (0.26, 0.2), (0.2, 0.03)],
}
# height / width of each garment box
_ASPECT = {"upper": 0.8, "lower": 1.7, "full_body": 1.8}
# (shoulder_u_left, shoulder_u_right, shoulder_v, hip_v) inside the garment box;
# for lower garments the shoulders sit above the box (negative v)
_ANCHORS = {"upper": (0.22, 0.78, 0.04, 1.0), "lower": (0.12, 0.88, -0.78, 0.0),
            "full_body": (0.2, 0.8, 0.03, 0.45)}
_WHITE = np.array([255, 255, 255], dtype=np.float64)


def _texture(u: np.ndarray, v: np.ndarray, style: dict) -> np.ndarray:
    kind, freq = style["pattern"], style["freq"]
    if kind == "solid":
        sel = np.zeros_like(u, dtype=bool)
    elif kind == "hstripes":
        sel = np.floor(v * freq).astype(int) % 2 == 1
    elif kind == "vstripes":
        sel = np.floor(u * freq).astype(int) % 2 == 1
    else:
        sel = (np.floor(u * freq).astype(int) + np.floor(v * freq).astype(int)) % 2 == 1
    return np.where(sel[..., None], style["color2"], style["color"])


def _poly_mask(points, shape) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    out = np.zeros(shape, dtype=bool)
    rr, cc = fill_polygon(pts[:, 1], pts[:, 0], shape)
    out[rr, cc] = True
    return out


def _paint(canvas: np.ndarray, region: np.ndarray, color):
    canvas[region] = color


def _garment_image(category: str, style: dict, H: int, W: int):
    """Canonical flat-lay on white, the garment box filling most of the frame."""
    aspect = _ASPECT[category]
    gh = min(0.84 * H, 0.84 * W * aspect)
    gw = gh / aspect
    x0, y0 = (W - gw) / 2, (H - gh) / 2
    pts = [(x0 + u * gw, y0 + v * gh) for u, v in _TEMPLATES[category]]
    region = _poly_mask(pts, (H, W))
    ys, xs = np.mgrid[0:H, 0:W] + 0.5
    img = np.broadcast_to(_WHITE, (H, W, 3)).copy()
    tex = _texture((xs - x0) / gw, (ys - y0) / gh, style)
    img[region] = tex[region]
    return img


def _to_chw(img_u8: np.ndarray) -> np.ndarray:
    img = np.clip(np.round(img_u8), 0, 255).astype(np.uint8)
    return img.transpose(2, 0, 1).astype(np.float32) / 127.5 - 1.0


def generate_synthetic_pair(seed: int, category: str, spec: tuple[int, int] = (64, 48),
                            defect: str | None = None, pair_id: str | None = None) -> DataPair:
    """Procedural person/garment pair with an exact mask and known defect flags.

    ``defect`` is one of ``DEFECTS``; when None it is drawn from the seed
    (clean 40%, each defect 15%; lower garments never get side views).
    """
    if category not in CATEGORIES:
        raise CategoryError(f"unknown category {category!r}")
    H, W = spec
    rng = np.random.default_rng([int(seed), CATEGORIES.index(category)])
    if defect is None:
        # lower-garment framing leaves the shoulders out of frame, so no side views
        probs = [0.4, 0.2, 0.2, 0.0, 0.2] if category == "lower" else [0.4, 0.15, 0.15, 0.15, 0.15]
        defect = DEFECTS[rng.choice(len(DEFECTS), p=probs)]
    if defect not in DEFECTS:
        raise ConfigError(f"unknown defect {defect!r}")

    style = {
        "color": rng.uniform(20, 235, 3),
        "pattern": ["solid", "hstripes", "vstripes", "checks"][rng.integers(4)],
        "freq": int(rng.integers(2, 5)),
    }
    shade = rng.choice([-1.0, 1.0]) * rng.uniform(50, 90)
    style["color2"] = np.clip(style["color"] + shade, 0, 255)

    aspect = _ASPECT[category]
    if defect == "extreme":
        ratio = rng.uniform(0.03, 0.07)
    elif defect == "side_view":
        ratio = rng.uniform(0.32, 0.45)
    else:
        ratio = rng.uniform(0.22, 0.42)
    gw = math.sqrt(ratio * H * W / aspect)
    gh = gw * aspect
    # keep a clean garment clear of the borders
    shrink = min(1.0, (H - 6) / gh, (W - 6) / gw)
    gw, gh = gw * shrink, gh * shrink
    squeeze = rng.uniform(0.5, 0.6) if defect == "side_view" else 1.0
    kp_squeeze = rng.uniform(0.1, 0.25) if defect == "side_view" else 1.0

    cx = W / 2 + rng.uniform(-1, 1) * max(0.0, (W - gw * squeeze) / 2 - 3)
    cy = H / 2 + rng.uniform(-1, 1) * max(0.0, (H - gh) / 2 - 3)
    if defect == "truncated":
        off = rng.uniform(0.2, 0.35)
        if category == "upper":
            side = rng.choice([-1.0, 1.0])
            cx = W / 2 + side * (W / 2 + (off - 0.5) * gw * squeeze)
        else:
            cy = H - (0.5 - off) * gh
    x0, y0 = cx - gw * squeeze / 2, cy - gh / 2

    def gx(u):
        return cx + (u - 0.5) * gw * squeeze

    def gy(v):
        return y0 + v * gh

    su_l, su_r, sv, hv = _ANCHORS[category]
    sh_y, hip_y = gy(sv), gy(hv)
    torso = hip_y - sh_y
    head_r = 0.22 * torso
    shape = (H, W)

    bg = rng.uniform(150, 225) + rng.uniform(-15, 15, 3)
    skin = np.array([rng.uniform(150, 230), rng.uniform(110, 180), rng.uniform(80, 150)])
    other = rng.uniform(30, 110, 3)
    canvas = np.broadcast_to(bg, (H, W, 3)).copy()
    ys, xs = np.mgrid[0:H, 0:W] + 0.5

    # body behind the garment
    body_w = (su_r - su_l) * gw * squeeze
    _paint(canvas, (xs - cx) ** 2 / max(head_r * squeeze, 1) ** 2 + (ys - (sh_y - 1.3 * head_r)) ** 2
           / max(head_r, 1) ** 2 <= 1.0, skin)
    neck = [(cx - 0.25 * head_r * squeeze, sh_y - 0.6 * head_r), (cx + 0.25 * head_r * squeeze, sh_y - 0.6 * head_r),
            (cx + 0.25 * head_r * squeeze, sh_y + 1), (cx - 0.25 * head_r * squeeze, sh_y + 1)]
    _paint(canvas, _poly_mask(neck, shape), skin)
    torso_poly = [(cx - body_w / 2, sh_y), (cx + body_w / 2, sh_y),
                  (cx + 0.45 * body_w, hip_y), (cx - 0.45 * body_w, hip_y)]
    _paint(canvas, _poly_mask(torso_poly, shape), other if category == "lower" else skin)
    leg_len = 1.35 * torso
    for side in (-1, 1):
        leg = [(cx + side * 0.05 * body_w, hip_y), (cx + side * 0.42 * body_w, hip_y),
               (cx + side * 0.36 * body_w, hip_y + leg_len), (cx + side * 0.12 * body_w, hip_y + leg_len)]
        _paint(canvas, _poly_mask(leg, shape), other if category == "upper" else skin)
        arm = [(cx + side * 0.5 * body_w, sh_y), (cx + side * 0.62 * body_w, sh_y + 0.1 * torso),
               (cx + side * 0.75 * body_w, sh_y + 0.95 * torso), (cx + side * 0.6 * body_w, sh_y + 0.95 * torso)]
        _paint(canvas, _poly_mask(arm, shape), skin)

    pts = [(gx(u), gy(v)) for u, v in _TEMPLATES[category]]
    garment_region = _poly_mask(pts, shape)
    tex = _texture((xs - x0) / (gw * squeeze), (ys - y0) / gh, style)
    canvas[garment_region] = tex[garment_region]

    occluder = None
    visible = garment_region
    hard_case = defect == "clean" and rng.random() < 0.5
    if defect == "occluded" or hard_case:
        frac = rng.uniform(0.45, 0.6) if defect == "occluded" else rng.uniform(0.04, 0.12)
        rows = np.nonzero(garment_region.any(1))[0]
        band_h = max(1, int(round(frac * len(rows))))
        start = rows[0] + (len(rows) - band_h) // 2
        band = np.zeros(shape, dtype=bool)
        band[start:start + band_h] = True
        occ = band & garment_region
        canvas[occ] = rng.uniform(0, 60, 3) if rng.random() < 0.5 else rng.uniform(200, 255, 3) * [1, 0.3, 0.3]
        visible = garment_region & ~occ
        occluder = occ[None].astype(np.float32)

    keypoints = np.array([
        [cx - 0.5 * body_w * kp_squeeze / squeeze, sh_y],
        [cx + 0.5 * body_w * kp_squeeze / squeeze, sh_y],
        [cx, hip_y],
    ])
    if not ((keypoints[:, 0] >= 0) & (keypoints[:, 0] <= W - 1)
            & (keypoints[:, 1] >= 0) & (keypoints[:, 1] <= H - 1)).all():
        keypoints = None

    flags = frozenset() if defect == "clean" else frozenset({_FLAG_OF[defect]})
    garment = _garment_image(category, style, H, W)
    return DataPair(
        person=_to_chw(canvas),
        mask=visible[None].astype(np.float32),
        garment=_to_chw(garment),
        category=category,
        id=pair_id if pair_id is not None else f"{category}-{seed:06d}",
        meta=PairMeta(occluder, keypoints, flags),
    )
