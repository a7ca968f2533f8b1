import pytest
import torch

from garmre.checkpoint import load_checkpoint
from garmre.config import TrainConfig
from garmre.curation import ManifestEntry
from garmre.dataset import read_manifest, write_manifest
from garmre.diffusion import make_schedule
from garmre.errors import ConfigError, DataError, IncompatibleCheckpointError, StageError
from garmre.training import batch_indices, loss_ema, make_optimizer, run_stage, train_step

from conftest import random_pair_tensors, tiny_run_config


def _hash_params(module):
    return [p.detach().clone() for p in module.parameters()]


def test_batch_indices_cover_each_epoch():
    seen = [i for s in range(5) for i in batch_indices(10, 2, s, seed=3)]
    assert sorted(seen) == list(range(10))
    assert batch_indices(10, 4, 7, 3) == batch_indices(10, 4, 7, 3)


def test_loss_ema():
    assert loss_ema([1.0, 0.0]) == [1.0, 0.99]


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(steps=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(drop_prob=1.5).validate()
    with pytest.raises(ConfigError):
        TrainConfig(stage="warmup").validate()
    TrainConfig(drop_prob=1.0).validate()


def test_train_step_requires_codec(tiny_model):
    tiny_model.codec_ready = False
    with pytest.raises(StageError):
        train_step(tiny_model, None, TrainConfig(), torch.Generator(), None, make_schedule())


def test_drop_prob_one_trains_only_nulls(tiny_model):
    person, mask = random_pair_tensors(2, 16, 16)
    prep = tiny_model.prepare(person, mask)
    z0 = torch.randn(2, 4, 2, 2)
    opt = make_optimizer(tiny_model, 1e-3, 0.0)
    before = _hash_params(tiny_model.garmnet) + _hash_params(tiny_model.extractor)
    train_step(tiny_model, (prep, z0, ["upper", "lower"]), TrainConfig(drop_prob=1.0),
               torch.Generator().manual_seed(0), opt, make_schedule())
    after = _hash_params(tiny_model.garmnet) + _hash_params(tiny_model.extractor)
    assert all(torch.equal(a, b) for a, b in zip(before, after))


def test_coarse_needs_codec_and_stage_order(tiny_tree, tmp_path):
    with pytest.raises(StageError):
        run_stage(tiny_run_config(tiny_tree / "data", tmp_path / "c", "coarse", 2))
    with pytest.raises(StageError):
        run_stage(tiny_run_config(tiny_tree / "data", tmp_path / "h", "hqft", 2))
    with pytest.raises(StageError, match="stage is 'codec'"):
        run_stage(tiny_run_config(tiny_tree / "data", tmp_path / "h", "hqft", 2,
                                  init_ckpt=str(tiny_tree / "codec"), manifest="fine.txt"))


def test_coarse_freezes_codec_and_is_deterministic(tiny_tree, tmp_path):
    codec_model, _ = load_checkpoint(tiny_tree / "codec")
    runs = []
    for name in ("a", "b"):
        res = run_stage(tiny_run_config(tiny_tree / "data", tmp_path / name, "coarse", 6,
                                        codec_ckpt=str(tiny_tree / "codec")))
        runs.append(res)
    assert runs[0]["losses"] == runs[1]["losses"]
    assert (tmp_path / "a" / "loss.log").read_text() == (tmp_path / "b" / "loss.log").read_text()
    for f in (tmp_path / "a").glob("*.bin"):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    s0, s1 = codec_model.codec.state_dict(), runs[0]["model"].codec.state_dict()
    assert all(torch.equal(s0[k], s1[k]) for k in s0)


def test_resume_matches_uninterrupted(tiny_tree, tmp_path):
    data, codec = tiny_tree / "data", str(tiny_tree / "codec")
    full = run_stage(tiny_run_config(data, tmp_path / "full", "coarse", 6, codec_ckpt=codec))
    run_stage(tiny_run_config(data, tmp_path / "part", "coarse", 3, codec_ckpt=codec))
    rest = run_stage(tiny_run_config(data, tmp_path / "part", "coarse", 3), resume=str(tmp_path / "part"))
    # optimizer moments restart on resume, so only the first resumed loss must agree exactly
    assert rest["info"]["step"] == 6
    assert rest["losses"][0] == full["losses"][3]
    lines = (tmp_path / "part" / "loss.log").read_text().splitlines()
    assert [int(l.split(",")[0]) for l in lines] == list(range(1, 7))


def test_hqft_zero_steps_keeps_weights(tiny_tree, tmp_path):
    data = tiny_tree / "data"
    run_stage(tiny_run_config(data, tmp_path / "c", "coarse", 2, codec_ckpt=str(tiny_tree / "codec")))
    res = run_stage(tiny_run_config(data, tmp_path / "h", "hqft", 1, init_ckpt=str(tmp_path / "c"),
                                    manifest="fine.txt", hqft_steps=0))
    assert res["losses"] == [] and res["info"]["stage"] == "hqft"
    for f in (tmp_path / "c").glob("*.bin"):
        assert f.read_bytes() == (tmp_path / "h" / f.name).read_bytes()
    strip = lambda p: [l for l in (p / "MANIFEST").read_text().splitlines() if not l.startswith(("stage=", "data_manifest="))]
    assert strip(tmp_path / "c") == strip(tmp_path / "h")


def test_hqft_rejects_non_accept_pairs(tiny_tree, tmp_path):
    data = tiny_tree / "data"
    run_stage(tiny_run_config(data, tmp_path / "c", "coarse", 1, codec_ckpt=str(tiny_tree / "codec")))
    entries = read_manifest(data / "fine.txt")
    bad = [ManifestEntry(entries[0].id, entries[0].category, "Reject", ("Occluded",), 0.5)] + entries[1:]
    write_manifest(tmp_path / "bad.txt", bad)
    with pytest.raises(DataError, match="non-Accept"):
        run_stage(tiny_run_config(data, tmp_path / "h", "hqft", 1, init_ckpt=str(tmp_path / "c"),
                                  manifest=str(tmp_path / "bad.txt")))


def test_empty_manifest(tiny_tree, tmp_path):
    (tmp_path / "empty.txt").write_text("")
    with pytest.raises(DataError, match="empty"):
        run_stage(tiny_run_config(tiny_tree / "data", tmp_path / "c", "coarse", 1,
                                  codec_ckpt=str(tiny_tree / "codec"), manifest=str(tmp_path / "empty.txt")))


def test_resume_with_other_manifest_is_incompatible(tiny_tree, tmp_path):
    data = tiny_tree / "data"
    run_stage(tiny_run_config(data, tmp_path / "c", "coarse", 1, codec_ckpt=str(tiny_tree / "codec")))
    with pytest.raises(IncompatibleCheckpointError, match="manifest"):
        run_stage(tiny_run_config(data, tmp_path / "c", "coarse", 1, manifest="fine.txt"),
                  resume=str(tmp_path / "c"))
