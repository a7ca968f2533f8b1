"""Acceptance criteria 1-10. Each test prints one ``PASS/FAIL criterion N: ...`` line.

Criterion 7/8 run the full desk-scale overfit experiment (about half an hour on one
core). Set ``GARMRE_OVERFIT_DIR`` to a directory to keep its outputs; a stored
result there is reused only if it was produced with identical settings and sources.
"""
import os
import time

import numpy as np
import pytest
import torch

from garmre.cli import main
from garmre.curation import (ManifestEntry, ACCEPT, assess_pair, build_fine_subset, generate_synthetic_pair)
from garmre.config import CATEGORIES
from garmre.denoiser import DecoupledCrossAttention, SelfAttention, fused_cross_attention, fused_self_attention
from garmre.diffusion import (Conditioning, GuidanceConfig, cfg_combine, ddim_sample, ddim_step, ddim_timesteps,
                              forward_diffuse, initial_noise, ldm_loss, make_schedule)
from garmre.experiments import OverfitSettings, load_result, run_overfit
from garmre.metrics import fid, kid, ssim
from garmre.model import GarmentRestorer

from conftest import ACCEPTANCE_LINES, fd_check, random_pair_tensors, randomize_zero_inits, tiny_config
from test_curation import FIXTURES
from test_metrics import brute_mmd2, direct_ssim


def record(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _random_attn(cls, *args, seed=0):
    torch.manual_seed(seed)
    m = cls(*args).double()
    randomize_zero_inits(m, seed)
    return m


# 1 -------------------------------------------------------------------------

def test_criterion_1_gradients():
    t0 = time.time()
    gen = torch.Generator().manual_seed(0)
    sa = _random_attn(SelfAttention, 8, 2)
    f_g = torch.randn(2, 8, 3, 2, generator=gen, dtype=torch.float64, requires_grad=True)
    f_hl = torch.randn(2, 8, 3, 2, generator=gen, dtype=torch.float64, requires_grad=True)
    w = torch.randn(2, 8, 3, 2, generator=gen, dtype=torch.float64)
    err_sa = fd_check(lambda: (fused_self_attention(f_g, f_hl, sa) * w).sum(),
                      [f_g, f_hl, sa.to_q.weight, sa.to_k.weight, sa.to_v.weight, sa.to_out.weight])

    ca = _random_attn(DecoupledCrossAttention, 8, 6, 2, True, seed=1)
    text = torch.randn(2, 3, 6, generator=gen, dtype=torch.float64, requires_grad=True)
    f_ll = torch.randn(2, 4, 6, generator=gen, dtype=torch.float64, requires_grad=True)
    err_ca = fd_check(lambda: (fused_cross_attention(f_g, text, f_ll, ca) * w).sum(),
                      [f_g, text, f_ll, ca.to_q.weight, ca.to_k.weight, ca.to_v_ll.weight, ca.to_k_ll.weight,
                       ca.to_out.weight])

    torch.manual_seed(0)
    m = GarmentRestorer(tiny_config()).double()
    randomize_zero_inits(m)
    person, mask = random_pair_tensors(1, 16, 16)
    prep = m.prepare(person.double(), mask.double())
    s = make_schedule()
    z0 = torch.randn(1, 4, 2, 2, generator=gen, dtype=torch.float64)
    eps = torch.randn(1, 4, 2, 2, generator=gen, dtype=torch.float64)
    z_t = forward_diffuse(z0, 300, eps, s)
    loss = lambda: ldm_loss(m.denoise(z_t, 300, m.condition(prep, ["upper"])), eps)
    err_e2e = fd_check(loss, [m.denoiser.conv_out.weight, m.denoiser.mid_attn.attn1.to_k.weight,
                              m.denoiser.down_attn[0].attn2.to_k_ll.weight, m.garmnet.conv_in.weight,
                              m.extractor.proj.weight, m.text.table])
    dt = time.time() - t0
    record(1, err_sa < 1e-4 and err_ca < 1e-4 and err_e2e < 1e-3 and dt < 120,
           f"self-attn rel err {err_sa:.2e}, cross-attn {err_ca:.2e} (< 1e-4), end-to-end {err_e2e:.2e} (< 1e-3), "
           f"{dt:.0f}s")


# 2 -------------------------------------------------------------------------

def test_criterion_2_cfg_identities():
    t0 = time.time()
    gen = torch.Generator().manual_seed(0)
    c, u = torch.randn(4, 5, generator=gen), torch.randn(4, 5, generator=gen)
    collapse = torch.equal(cfg_combine(c, u, 1.0), c) and torch.equal(cfg_combine(c, u, 0.0), u)

    torch.manual_seed(0)
    m = GarmentRestorer(tiny_config()).eval()
    randomize_zero_inits(m, std=0.1)
    person, mask = random_pair_tensors(2, 16, 16)
    prep = m.prepare(person, mask)
    cond, null = m.condition(prep, ["upper", "lower"]), m.null_conditioning(2)
    s = make_schedule()
    g = GuidanceConfig(1.0, 10, seed=3)
    with torch.no_grad():
        fn = lambda z, t, variant: m.denoise(z, t, variant)
        guided = ddim_sample(fn, Conditioning(cond, null), g, s, (2, 4, 2, 2))
        z = initial_noise((2, 4, 2, 2), 3)
        grid = ddim_timesteps(s.T, 10)
        for t, t_prev in zip(grid[:-1], grid[1:]):
            z = ddim_step(z, m.denoise(z, t, cond), t, t_prev, s)
    bitwise = torch.equal(guided, z)
    dt = time.time() - t0
    record(2, collapse and bitwise and dt < 60,
           f"cfg collapse at s=1,0 exact={collapse}; s=1 sampling bitwise equal to conditional-only={bitwise}, "
           f"{dt:.1f}s")


# 3 -------------------------------------------------------------------------

def test_criterion_3_duplication_identity():
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(100):
        heads = int(rng.integers(1, 4))
        c = heads * int(rng.integers(1, 6))
        h, w, B = (int(v) for v in rng.integers(1, 7, 3))
        attn = _random_attn(SelfAttention, c, heads, seed=i)
        f_g = torch.from_numpy(rng.normal(size=(B, c, h, w)))
        with torch.no_grad():
            fused = fused_self_attention(f_g, f_g.clone(), attn)
            tokens = f_g.flatten(2).transpose(1, 2)
            plain = f_g + attn(tokens).transpose(1, 2).reshape(B, c, h, w)
        worst = max(worst, (fused - plain).abs().max().item())
    dt = time.time() - t0
    record(3, worst < 1e-6 and dt < 60, f"max |fused(F_g, F_g) - selfattn(F_g)| = {worst:.1e} over 100 shapes "
           f"(< 1e-6), {dt:.1f}s")


# 4 -------------------------------------------------------------------------

def test_criterion_4_fusion_contract():
    rng = np.random.default_rng(1)
    shapes_ok = True
    for i in range(50):
        heads = int(rng.integers(1, 4))
        c = heads * int(rng.integers(1, 5))
        h, w = (int(v) for v in rng.integers(1, 7, 2))
        attn = _random_attn(SelfAttention, c, heads, seed=i)
        f_g = torch.from_numpy(rng.normal(size=(c, h, w)))
        f_hl = torch.from_numpy(rng.normal(size=(c, h, w)))
        with torch.no_grad():
            out = fused_self_attention(f_g, f_hl, attn)
            full = attn(torch.cat([f_hl, f_g], -1).flatten(1).T.unsqueeze(0))[0].T.reshape(c, h, 2 * w)
        shapes_ok &= out.shape == (c, h, w) and torch.allclose(out, f_g + full[..., w:], atol=1e-12)

    ca = _random_attn(DecoupledCrossAttention, 8, 6, 2, True)
    with torch.no_grad():
        ca.to_v_ll.weight.zero_()
    gen = torch.Generator().manual_seed(0)
    f_g = torch.randn(2, 8, 3, 4, generator=gen, dtype=torch.float64)
    text = torch.randn(2, 3, 6, generator=gen, dtype=torch.float64)
    f_ll = torch.randn(2, 4, 6, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        additive = torch.equal(fused_cross_attention(f_g, text, f_ll, ca), fused_cross_attention(f_g, text, None, ca))
    record(4, bool(shapes_ok) and additive,
           f"latter-half c x h x w output on 50 shapes={bool(shapes_ok)}; zero V_ll gives text-only exactly={additive}")


# 5 -------------------------------------------------------------------------

def test_criterion_5_variance_preservation():
    s = make_schedule()
    gen = torch.Generator().manual_seed(0)
    draws, shape = 100_000, (4, 8, 6)
    worst, detail = 0.0, []
    for t in (1, 250, 500, 750, 1000):
        total, sq, n = 0.0, 0.0, 0
        for start in range(0, draws, 10_000):
            z0 = torch.randn(10_000, *shape, generator=gen, dtype=torch.float64)
            eps = torch.randn(10_000, *shape, generator=gen, dtype=torch.float64)
            z = forward_diffuse(z0, t, eps, s)
            total += z.sum().item()
            sq += (z * z).sum().item()
            n += z.numel()
        var = sq / n - (total / n) ** 2
        worst = max(worst, abs(var - 1))
        detail.append(f"t={t}:{var:.4f}")
    record(5, worst < 0.01, f"Var[z_t] over 1e5 draws {' '.join(detail)} (|var-1| < 1%)")


# 6 -------------------------------------------------------------------------

def _train_twice(root, seed=11):
    sets = ["--batch-size", "4", "--set", "codec_batch_size=8"]
    data = root / "data"
    assert main(["gen-synthetic", "--out", str(data), "--count", "16", "--seed", "5", "--clean"]) == 0
    assert main(["curate", "--data", str(data)]) == 0
    # both runs use the same paths (config.txt records them); the first is moved aside
    for run in ("a", "b"):
        assert main(["train", "--stage", "codec", "--data", str(data), "--out", str(root / "run" / "codec"),
                     "--steps", "200", "--seed", str(seed), *sets]) == 0
        assert main(["train", "--stage", "coarse", "--data", str(data), "--out", str(root / "run" / "coarse"),
                     "--codec-ckpt", str(root / "run" / "codec"), "--steps", "200", "--seed", str(seed),
                     *sets]) == 0
        (root / "run").rename(root / run)


def test_criterion_6_determinism(tmp_path):
    t0 = time.time()
    _train_twice(tmp_path)
    same_logs = all((tmp_path / "a" / st / "loss.log").read_bytes() == (tmp_path / "b" / st / "loss.log").read_bytes()
                    for st in ("codec", "coarse"))
    n_lines = len((tmp_path / "a" / "coarse" / "loss.log").read_text().splitlines())
    same_ckpt = True
    for st in ("codec", "coarse"):
        files = sorted(p.name for p in (tmp_path / "a" / st).iterdir())
        same_ckpt &= files == sorted(p.name for p in (tmp_path / "b" / st).iterdir())
        same_ckpt &= all((tmp_path / "a" / st / f).read_bytes() == (tmp_path / "b" / st / f).read_bytes()
                         for f in files)
    pid = "upper-000000"
    outs = []
    for i in range(2):
        out = tmp_path / f"sample{i}.png"
        assert main(["sample", "--ckpt", str(tmp_path / "a" / "coarse"),
                     "--person", str(tmp_path / "data" / "person" / f"{pid}.png"),
                     "--mask", str(tmp_path / "data" / "mask" / f"{pid}.png"), "--category", "upper",
                     "--seed", "4", "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    same_sample = outs[0] == outs[1]
    record(6, same_logs and same_ckpt and same_sample and n_lines == 200,
           f"two 200-step train runs: loss logs identical={same_logs}, checkpoints byte-identical={same_ckpt}; "
           f"sample PNG bitwise identical={same_sample}, {time.time() - t0:.0f}s")


# 7 / 8 ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def overfit(tmp_path_factory):
    s = OverfitSettings()
    keep = os.environ.get("GARMRE_OVERFIT_DIR")
    work = keep or tmp_path_factory.mktemp("overfit")
    result = load_result(work, s) if keep else None
    if result is None:
        result = run_overfit(work, s)
    return result


def test_criterion_7_overfit(overfit):
    r = overfit
    ok = (r.codec_psnr > 25 and r.loss_ratio < 0.3 and r.ssim_full >= 0.60 and r.coarse_pairs == 64
          and r.seconds < 3600)
    record(7, ok, f"codec PSNR {r.codec_psnr:.2f} dB (> 25; garment {r.codec_psnr_garment:.2f}, person "
           f"{r.codec_psnr_person:.2f}); loss EMA {r.loss_ema_final:.4f} / step-50 {r.loss_ema_50:.4f} = "
           f"{r.loss_ratio:.3f} (< 0.3); SSIM {r.ssim_full:.4f} (>= 0.60) on 16 pairs; {r.seconds / 60:.1f} min "
           f"(< 60)")


def test_criterion_8_ablation_parity(overfit):
    r = overfit
    ok = r.ssim_no_garmnet is not None and r.ssim_hqft is not None and r.ssim_full >= r.ssim_no_garmnet
    record(8, ok, f"full SSIM {r.ssim_full:.4f} >= w/o GarmNet {r.ssim_no_garmnet:.4f}; w/o HQFT (coarse) "
           f"{r.ssim_no_hqft:.4f}, with HQFT {r.ssim_hqft:.4f} ({r.fine_pairs} fine pairs)")


# 9 -------------------------------------------------------------------------

def test_criterion_9_metric_oracles():
    rng = np.random.default_rng(0)
    d = 2.0 * np.array([1, -1, 1, -1, 1, 1, -1, -1])
    value = fid(rng.normal(size=(10_000, 8)), rng.normal(size=(10_000, 8)) + d)
    fid_err = abs(value - d @ d) / (d @ d)
    x, y = rng.normal(size=(30, 5)), rng.normal(size=(30, 5)) + 0.3
    kid_err = abs(kid(x, y, subset_size=30, subsets=1) - brute_mmd2(x, y))
    a = rng.uniform(-1, 1, (3, 16, 16))
    b = np.clip(a + rng.normal(0, 0.3, a.shape), -1, 1)
    ssim_err = abs(ssim(a, b) - direct_ssim(a, b))
    from garmre.evaluation import KID_FACTOR
    record(9, fid_err < 0.02 and kid_err < 1e-10 and ssim_err < 1e-6 and KID_FACTOR == 1e3,
           f"fid mean shift rel err {fid_err:.4f} (< 2%); kid vs brute MMD2 {kid_err:.1e} (< 1e-10); "
           f"ssim vs direct {ssim_err:.1e} (< 1e-6); KID factor {KID_FACTOR:g}")


# 10 ------------------------------------------------------------------------

def test_criterion_10_curation():
    correct = 0
    for pair, status, reasons in FIXTURES.values():
        v = assess_pair(pair)
        correct += v.status == status and set(v.reasons) == reasons
    sizes_ok = True
    for n in (5, 10, 37, 64, 100, 250):
        entries = [ManifestEntry(f"p{i:04d}", CATEGORIES[i % 3], ACCEPT, (), i / n) for i in range(n)]
        sizes_ok &= len(build_fine_subset(entries, 0.2)) == int(np.floor(0.2 * n))
    agree = 0
    for seed in range(1000):
        p = generate_synthetic_pair(seed, CATEGORIES[seed % 3])
        agree += set(assess_pair(p).reasons) == set(p.meta.flags)
    record(10, correct == 12 and sizes_ok and agree >= 950,
           f"fixtures {correct}/12; fine subset floor(0.2 N)={sizes_ok}; generator/assessor agreement "
           f"{agree / 10:.1f}% over 1000 seeds (>= 95%)")
