import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from garmre.config import ModelConfig
from garmre.model import GarmentRestorer

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)


def tiny_config(**kw) -> ModelConfig:
    base = dict(height=16, width=16, codec_widths=(4, 8, 8), unet_widths=(8, 16), heads=2, attn_dim=8,
                text_tokens=2, image_tokens=2, crop_size=8, extractor_widths=(4, 8, 8), norm_groups=4)
    base.update(kw)
    return ModelConfig(**base)


def randomize_zero_inits(module: torch.nn.Module, seed: int = 0, std: float = 0.3):
    """Re-draw every all-zero parameter so no branch is trivially dead."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if p.numel() and torch.count_nonzero(p) == 0:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    m = GarmentRestorer(tiny_config())
    m.codec_ready = True
    return m


def random_pair_tensors(B, H, W, seed=0):
    gen = torch.Generator().manual_seed(seed)
    person = torch.rand(B, 3, H, W, generator=gen) * 2 - 1
    mask = torch.zeros(B, 1, H, W)
    mask[:, :, H // 4: 3 * H // 4, W // 4: 3 * W // 4] = 1
    return person, mask


def fd_check(f, params, eps=1e-6):
    """Largest relative error between autograd and central differences, over all entries of ``params``."""
    loss = f()
    grads = torch.autograd.grad(loss, params)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        num = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            num[i] = (up - down) / (2 * eps)
        err = (g.reshape(-1) - num).abs().max().item() / max(num.abs().max().item(), g.abs().max().item(), 1e-12)
        worst = max(worst, err)
    return worst


def np_rng(seed=0):
    return np.random.default_rng(seed)


TINY_KEYS = dict(height=16, width=16, codec_widths="4,8,8", unet_widths="8,16", heads=2, attn_dim=8,
                 text_tokens=2, image_tokens=2, crop_size=8, extractor_widths="4,8,8", norm_groups=4)


def tiny_run_config(root, out, stage, steps, seed=0, **kw):
    from garmre.config import RunConfig

    cfg = RunConfig()
    for k, v in {**TINY_KEYS, "seed": seed, "stage": stage, "data": str(root), "out": str(out),
                 "steps": steps, "batch_size": 4, "codec_batch_size": 4, **kw}.items():
        cfg.set(k, v)
    cfg.model.__post_init__()
    return cfg


@pytest.fixture(scope="session")
def tiny_tree(tmp_path_factory):
    """Eight clean 16x16 pairs, curated, with a 10-step codec checkpoint."""
    from garmre.dataset import curate_tree, generate_tree
    from garmre.training import run_stage

    root = tmp_path_factory.mktemp("tiny")
    generate_tree(root / "data", 8, spec=(16, 16), clean=True)
    curate_tree(root / "data", fraction=0.25)
    run_stage(tiny_run_config(root / "data", root / "codec", "codec", 10))
    return root


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
