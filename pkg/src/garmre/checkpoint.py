"""Checkpoint container: a directory holding a text MANIFEST and raw float32 blob files.

MANIFEST holds ``key=value`` header lines followed by one line per tensor::

    name dtype shape offset length file

with ``shape`` written as ``4x3x3x3`` (``scalar`` for 0-d) and offset/length in bytes.
Blobs are little-endian float32, row-major, one file per top-level module.
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, ScheduleConfig, format_value, _coerce
from .errors import ConfigError, CorruptCheckpointError, IncompatibleCheckpointError, IoError

FORMAT_VERSION = 1
MANIFEST = "MANIFEST"
STAGES = ("codec", "coarse", "hqft")


def _shape_str(shape) -> str:
    return "x".join(str(s) for s in shape) if len(shape) else "scalar"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "scalar" else tuple(int(s) for s in text.split("x"))


def tensors_for_stage(model, stage: str) -> dict[str, torch.Tensor]:
    state = model.state_dict()
    if stage == "codec":
        return {k: v for k, v in state.items() if k.startswith("codec.")}
    return state


def save_checkpoint(model, info: dict, path: str | Path) -> Path:
    """Write ``model`` (restricted to what ``info['stage']`` owns) plus header fields."""
    path = Path(path)
    stage = info.get("stage", "coarse")
    header = {"format_version": FORMAT_VERSION}
    header.update({f.name: getattr(model.cfg, f.name) for f in dataclasses.fields(model.cfg)})
    header["latent_scale"] = float(model.codec.latent_scale)
    for key, value in sorted(info.items()):
        header[key] = value
    blobs: dict[str, bytearray] = {}
    lines = []
    for name, tensor in tensors_for_stage(model, stage).items():
        fname = name.split(".", 1)[0] + ".bin"
        buf = blobs.setdefault(fname, bytearray())
        data = tensor.detach().cpu().contiguous().numpy().astype("<f4", copy=False).tobytes()
        lines.append(f"{name} float32 {_shape_str(tuple(tensor.shape))} {len(buf)} {len(data)} {fname}")
        buf.extend(data)
    try:
        path.mkdir(parents=True, exist_ok=True)
        for stale in path.glob("*.bin"):
            if stale.name not in blobs:
                stale.unlink()
        for fname, buf in blobs.items():
            (path / fname).write_bytes(bytes(buf))
        text = "".join(f"{k}={format_value(v)}\n" for k, v in header.items())
        (path / MANIFEST).write_text(text + "".join(line + "\n" for line in lines))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def read_manifest(path: str | Path) -> tuple[dict[str, str], list[tuple]]:
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.is_file():
        raise IoError(f"checkpoint manifest not found: {mpath}")
    header, tensors = {}, []
    for lineno, line in enumerate(mpath.read_text().splitlines(), 1):
        if not line.strip():
            continue
        if "=" in line:
            key, value = line.split("=", 1)
            header[key] = value
            continue
        parts = line.split()
        if len(parts) != 6:
            raise CorruptCheckpointError(f"{mpath}:{lineno}: malformed tensor line {line!r}")
        name, dtype, shape, offset, length, fname = parts
        try:
            tensors.append((name, dtype, _parse_shape(shape), int(offset), int(length), fname))
        except ValueError as exc:
            raise CorruptCheckpointError(f"{mpath}:{lineno}: malformed tensor line {line!r}") from exc
    return header, tensors


def config_from_header(header: dict[str, str]) -> ModelConfig:
    version = header.get("format_version")
    if version != str(FORMAT_VERSION):
        raise IncompatibleCheckpointError(
            f"checkpoint format_version {version!r}, this build reads {FORMAT_VERSION}")
    defaults = ModelConfig()
    kwargs = {}
    for f in dataclasses.fields(ModelConfig):
        if f.name not in header:
            raise IncompatibleCheckpointError(f"checkpoint manifest lacks architecture field {f.name!r}")
        kwargs[f.name] = _coerce(header[f.name], getattr(defaults, f.name), f.name)
    try:
        return ModelConfig(**kwargs)
    except ConfigError as exc:
        raise IncompatibleCheckpointError(f"checkpoint architecture is invalid: {exc}") from exc


def schedule_from_header(header: dict[str, str]) -> ScheduleConfig:
    defaults = ScheduleConfig()
    kwargs = {f.name: _coerce(header[f.name], getattr(defaults, f.name), f.name)
              for f in dataclasses.fields(ScheduleConfig) if f.name in header}
    return ScheduleConfig(**kwargs)


def load_checkpoint(path: str | Path, seed: int = 0):
    """Rebuild the model described by the manifest and fill in every stored tensor.

    Returns ``(model, header)``. Modules a codec-stage checkpoint does not own
    keep their seeded initialisation.
    """
    from .model import GarmentRestorer

    path = Path(path)
    header, entries = read_manifest(path)
    cfg = config_from_header(header)
    stage = header.get("stage", "coarse")
    if stage not in STAGES:
        raise IncompatibleCheckpointError(f"{path}: unknown stage {stage!r}")
    torch.manual_seed(seed)
    model = GarmentRestorer(cfg)
    expected = tensors_for_stage(model, stage)
    seen = set()
    blob_cache: dict[str, bytes] = {}
    state = {}
    for name, dtype, shape, offset, length, fname in entries:
        if name not in expected:
            raise IncompatibleCheckpointError(f"{path}: unexpected tensor {name!r}")
        if dtype != "float32":
            raise IncompatibleCheckpointError(f"{path}: tensor {name} has unsupported dtype {dtype}")
        if tuple(expected[name].shape) != shape:
            raise IncompatibleCheckpointError(
                f"{path}: tensor {name} declared {shape}, architecture expects {tuple(expected[name].shape)}")
        if length != 4 * math.prod(shape):
            raise CorruptCheckpointError(f"{path}: tensor {name} length {length} does not match shape {shape}")
        if fname not in blob_cache:
            fpath = path / fname
            if not fpath.is_file():
                raise CorruptCheckpointError(f"{path}: missing blob file {fname}")
            blob_cache[fname] = fpath.read_bytes()
        blob = blob_cache[fname]
        if offset < 0 or offset + length > len(blob):
            raise CorruptCheckpointError(
                f"{path / fname}: tensor {name} needs bytes [{offset}, {offset + length}) "
                f"but file has {len(blob)}")
        arr = np.frombuffer(blob, dtype="<f4", count=length // 4, offset=offset).reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float32))
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise IncompatibleCheckpointError(f"{path}: manifest lacks tensors {sorted(missing)[:5]}")
    model.load_state_dict(state, strict=False)
    model.codec.latent_scale = float(header.get("latent_scale", 1.0))
    return model, header


def checkpoint_hash(path: str | Path) -> str:
    """Short content hash over the manifest and every blob file."""
    path = Path(path)
    h = hashlib.sha256()
    for f in sorted(path.iterdir()):
        if f.name == MANIFEST or f.suffix == ".bin":
            h.update(f.name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()[:12]
