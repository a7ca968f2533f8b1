"""On-disk dataset tree and manifests.

Layout under a root directory::

    person/<id>.png   mask/<id>.png   garment/<id>.png
    occluder/<id>.png (optional)      pose/<id>.txt (optional, three "x y" lines)
    manifest.txt, coarse.txt, fine.txt   ("id,category,status,reason-list,score" lines)
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .curation import DataPair, ManifestEntry, PairMeta
from .errors import DataError, IoError


def image_to_array(img: Image.Image) -> np.ndarray:
    a = np.asarray(img.convert("RGB"), dtype=np.float32)
    return a.transpose(2, 0, 1) / 127.5 - 1.0


def array_to_image(x) -> Image.Image:
    a = np.asarray(x, dtype=np.float64)
    a = np.clip(np.round((a + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return Image.fromarray(a.transpose(1, 2, 0), mode="RGB")


def mask_to_image(m) -> Image.Image:
    a = (np.asarray(m).reshape(np.asarray(m).shape[-2:]) > 0.5).astype(np.uint8) * 255
    return Image.fromarray(a, mode="L")


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise IoError(f"image not found: {path}")
    with Image.open(path) as img:
        return image_to_array(img)


def load_mask(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise IoError(f"mask not found: {path}")
    with Image.open(path) as img:
        a = np.asarray(img.convert("L"))
    return (a[None] > 127).astype(np.float32)


def save_png(img: Image.Image, path: str | Path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        img.save(path, format="PNG", optimize=False)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def write_pair(root: str | Path, pair: DataPair):
    root = Path(root)
    save_png(array_to_image(pair.person), root / "person" / f"{pair.id}.png")
    save_png(mask_to_image(pair.mask), root / "mask" / f"{pair.id}.png")
    save_png(array_to_image(pair.garment), root / "garment" / f"{pair.id}.png")
    if pair.meta.occluder is not None:
        save_png(mask_to_image(pair.meta.occluder), root / "occluder" / f"{pair.id}.png")
    if pair.meta.keypoints is not None:
        lines = "".join(f"{float(x)!r} {float(y)!r}\n" for x, y in np.asarray(pair.meta.keypoints, dtype=float))
        (root / "pose").mkdir(parents=True, exist_ok=True)
        (root / "pose" / f"{pair.id}.txt").write_text(lines)


def read_pose(path: Path) -> np.ndarray:
    try:
        rows = [line.split() for line in path.read_text().splitlines() if line.strip()]
        kp = np.array([[float(x), float(y)] for x, y in rows])
    except ValueError as exc:
        raise DataError(f"{path}: expected three 'x y' lines") from exc
    if kp.shape != (3, 2):
        raise DataError(f"{path}: expected three 'x y' lines, got {len(rows)}")
    return kp


def read_pair(root: str | Path, pid: str, category: str) -> DataPair:
    root = Path(root)
    person = load_image(root / "person" / f"{pid}.png")
    mask = load_mask(root / "mask" / f"{pid}.png")
    garment = load_image(root / "garment" / f"{pid}.png")
    if person.shape[1:] != mask.shape[1:]:
        raise DataError(f"pair {pid}: person {person.shape[1:]} and mask {mask.shape[1:]} sizes differ")
    occ_path, pose_path = root / "occluder" / f"{pid}.png", root / "pose" / f"{pid}.txt"
    occluder = load_mask(occ_path) if occ_path.is_file() else None
    keypoints = read_pose(pose_path) if pose_path.is_file() else None
    if keypoints is not None:
        H, W = person.shape[1:]
        if not ((keypoints[:, 0] >= 0) & (keypoints[:, 0] < W) & (keypoints[:, 1] >= 0)
                & (keypoints[:, 1] < H)).all():
            raise DataError(f"{pose_path}: keypoints outside the {H}x{W} image")
    return DataPair(person, mask, garment, category, pid, PairMeta(occluder, keypoints))


def write_manifest(path: str | Path, entries) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(e.to_line() + "\n" for e in entries))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.is_file():
        raise IoError(f"manifest not found: {path}")
    return [ManifestEntry.from_line(line, str(path))
            for line in path.read_text().splitlines() if line.strip()]


def load_pairs(root: str | Path, entries) -> list[DataPair]:
    return [read_pair(root, e.id, e.category) for e in entries]


def generate_tree(root: str | Path, count: int, seed: int = 0, spec=(64, 48), clean: bool = False) -> list[ManifestEntry]:
    """Write ``count`` seeded synthetic pairs plus an unassessed ``manifest.txt``."""
    from .config import CATEGORIES
    from .curation import generate_synthetic_pair

    root = Path(root)
    entries = []
    for i in range(count):
        category = CATEGORIES[i % len(CATEGORIES)]
        pair = generate_synthetic_pair(seed * 100_003 + i, category, spec,
                                       defect="clean" if clean else None, pair_id=f"{category}-{i:06d}")
        write_pair(root, pair)
        entries.append(ManifestEntry(pair.id, category, "Unassessed", (), 0.0))
    write_manifest(root / "manifest.txt", entries)
    return entries


def curate_tree(root: str | Path, thresholds=None, fraction: float = 0.2):
    """Assess every pair in ``manifest.txt``; write ``coarse.txt`` and ``fine.txt``.

    Pairs needing proportion correction are re-rendered under ``<id>-fix`` and kept
    only if the corrected pair is accepted.
    """
    import logging
    from collections import Counter

    from .curation import (ACCEPT, CORRECT, CurationThresholds, assess_pair, build_fine_subset,
                           resize_and_pad)
    from .errors import CurationError

    root = Path(root)
    thresholds = thresholds or CurationThresholds()
    pairs = load_pairs(root, read_manifest(root / "manifest.txt"))
    coarse, counts = [], Counter()
    for pair in pairs:
        verdict = assess_pair(pair, thresholds=thresholds)
        counts.update(verdict.reasons)
        if verdict.status == ACCEPT:
            coarse.append(ManifestEntry.from_verdict(pair.id, pair.category, verdict))
        elif verdict.status == CORRECT:
            fixed = resize_and_pad(pair, thresholds.target_ratio)
            fixed.id = f"{pair.id}-fix"
            again = assess_pair(fixed, thresholds=thresholds)
            if again.status == ACCEPT:
                write_pair(root, fixed)
                coarse.append(ManifestEntry.from_verdict(fixed.id, fixed.category, again))
            else:
                logging.getLogger(__name__).warning("pair %s still %s after correction", pair.id, again.status)
    if not coarse:
        detail = ", ".join(f"{k}={v}" for k, v in sorted(counts.items())) or "none"
        raise CurationError(f"all {len(pairs)} pairs rejected; reasons: {detail}")
    fine = build_fine_subset(coarse, fraction)
    write_manifest(root / "coarse.txt", coarse)
    write_manifest(root / "fine.txt", fine)
    return coarse, fine, counts
