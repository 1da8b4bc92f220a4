import numpy as np
import pytest

from red_denoise import training
from red_denoise.checkpoint import load_checkpoint
from red_denoise.ct_sim import make_pair
from red_denoise.errors import DivergedError, InvalidConfig, PatchTooLarge
from red_denoise.fileio import ManifestEntry, save_rtf, write_manifest
from red_denoise.model import RedConfig, build, forward, parameters
from red_denoise.perceptual import joint_loss, make_extractor
from red_denoise.training import (
    PatchStream,
    TrainConfig,
    extract_patches,
    load_config,
    parse_config,
    train,
)


@pytest.fixture(scope="module")
def pairs():
    return [make_pair(s, 32, 60, 1e3) for s in range(8)]


def small_config(**kw):
    base = dict(patch_size=16, patches_per_image=4, batch_size=4, iterations=5, checkpoint_every=0,
                red=RedConfig(4, 4, 3, seed=0))
    base.update(kw)
    return TrainConfig(**base)


def test_full_size_patch_is_whole_image():
    clean = np.random.default_rng(0).random((1, 20, 20))
    noisy = clean + 0.1
    (n, c), = extract_patches((clean, noisy), 20, 1, seed=0)
    assert c.tobytes() == clean.tobytes() and n.tobytes() == noisy.tobytes()


def test_patches_deterministic_and_contained():
    rng = np.random.default_rng(1)
    clean = rng.random((1, 30, 25))
    noisy = rng.random((1, 30, 25))
    a = extract_patches((clean, noisy), 8, 20, seed=4)
    b = extract_patches((clean, noisy), 8, 20, seed=4)
    assert all(x[0].tobytes() == y[0].tobytes() for x, y in zip(a, b))
    for n, c in a:
        assert n.shape == c.shape == (1, 8, 8)
        # a patch is a sub-block of its image; find it and check the twin sits at the same spot
        hits = [(r, s) for r in range(23) for s in range(18) if np.array_equal(clean[0, r:r + 8, s:s + 8], c[0])]
        assert len(hits) == 1
        r, s = hits[0]
        assert np.array_equal(noisy[0, r:r + 8, s:s + 8], n[0])


def test_patch_too_large():
    with pytest.raises(PatchTooLarge):
        extract_patches((np.zeros((1, 8, 8)), np.zeros((1, 8, 8))), 9, 1, seed=0)


def test_patch_stream_cycles_and_hashes(pairs):
    a = PatchStream(pairs, 16, 2, 3, seed=1)
    b = PatchStream(pairs, 16, 2, 3, seed=1)
    for _ in range(12):  # crosses several epoch refills
        na, ca = a.next()
        nb, cb = b.next()
        assert na.shape == (3, 1, 16, 16)
        assert na.tobytes() == nb.tobytes() and ca.tobytes() == cb.tobytes()
    assert a.digest == b.digest
    assert PatchStream(pairs, 16, 2, 3, seed=2).next()[0].tobytes() != na.tobytes()


def test_single_iteration_changes_model(pairs):
    model, history = train(small_config(iterations=1), pairs=pairs)
    assert len(history.records) == 1 and history.records[0].iteration == 1
    init = parameters(build(RedConfig(4, 4, 3, seed=0)))
    assert any(a.data.tobytes() != b.data.tobytes() for a, b in zip(init, parameters(model)))


def test_training_is_deterministic(tmp_path, pairs):
    cfg = small_config(iterations=6, checkpoint_every=3)
    m1, h1 = train(cfg, tmp_path / "a", pairs=pairs)
    m2, h2 = train(cfg, tmp_path / "b", pairs=pairs)
    assert (tmp_path / "a" / "model.rdck").read_bytes() == (tmp_path / "b" / "model.rdck").read_bytes()
    assert (tmp_path / "a" / "history.tsv").read_bytes() == (tmp_path / "b" / "history.tsv").read_bytes()
    assert h1.patch_digest == h2.patch_digest
    assert (tmp_path / "a" / "checkpoint_000003.rdck").exists()
    loaded = load_checkpoint(tmp_path / "a" / "model.rdck")
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(parameters(loaded), parameters(m1)))


def test_history_decomposes(pairs):
    _, history = train(small_config(iterations=4, lambda_p=0.3), pairs=pairs)
    for r in history.records:
        assert abs(r.total - (r.mse + r.lambda_p * r.perceptual)) < 1e-12
        assert r.lambda_p == 0.3


def test_warmup_uses_pixel_loss_only(pairs):
    _, history = train(small_config(iterations=4, warmup_iterations=2), pairs=pairs)
    assert [r.lambda_p for r in history.records] == [0.0, 0.0, 0.1, 0.1]
    assert history.records[0].total == history.records[0].mse


def test_history_matches_recomputed_loss(pairs):
    # the first recorded loss is the joint loss of the untouched model on the first batch
    cfg = small_config(iterations=1)
    _, history = train(cfg, pairs=pairs)
    noisy, clean = PatchStream(pairs, 16, 4, 4, seed=cfg.seed).next()
    model = build(cfg.red)
    total, _, _ = joint_loss(make_extractor(0), forward(model, noisy)[1], clean, 0.1)
    assert history.records[0].total == total.item()


def test_pixel_loss_decreases():
    data = [make_pair(100 + s, 64, 90, 1e4) for s in range(8)]
    cfg = small_config(iterations=200, lambda_p=0.0, patch_size=32, batch_size=8, patches_per_image=8)
    _, history = train(cfg, pairs=data)
    mse = history.column("mse")
    assert mse[-20:].mean() < mse[0]


def test_divergence_raises_with_last_checkpoint(tmp_path, pairs, monkeypatch):
    real = training.joint_loss
    calls = {"n": 0}

    def exploding(*args, **kw):
        calls["n"] += 1
        total, mse, per = real(*args, **kw)
        if calls["n"] == 5:
            return total * float("nan"), mse, per
        return total, mse, per

    monkeypatch.setattr(training, "joint_loss", exploding)
    with pytest.raises(DivergedError) as info:
        train(small_config(iterations=10, checkpoint_every=2), tmp_path, pairs=pairs)
    assert info.value.iteration == 5
    assert info.value.checkpoint == tmp_path / "checkpoint_000004.rdck"
    assert not (tmp_path / "model.rdck").exists()


def test_empty_pairs_rejected():
    with pytest.raises(ValueError):
        train(small_config(), pairs=[])


def test_parse_config_roundtrip(tmp_path):
    text = "# comment\nlayers=4\nchannels=8\nlr=0.002\nlambda_p=0.05\nmanifest=data/manifest.tsv\n"
    cfg = parse_config(text, tmp_path)
    assert cfg.red.num_layers == 4 and cfg.red.channels == 8
    assert cfg.learning_rate == 0.002 and cfg.lambda_p == 0.05
    assert cfg.manifest == tmp_path / "data" / "manifest.tsv"
    again = parse_config(cfg.to_text(), tmp_path)
    assert again == cfg


@pytest.mark.parametrize("text", ["layers=7", "bogus=1", "iterations=abc", "lr=-1", "patch_size", "kernel_size=4"])
def test_parse_config_rejects(text):
    with pytest.raises(InvalidConfig):
        parse_config(text)


def test_train_from_manifest(tmp_path, pairs):
    entries = []
    for i, (clean, noisy) in enumerate(pairs[:3]):
        save_rtf(tmp_path / f"p{i}_clean.rtf", clean)
        save_rtf(tmp_path / f"p{i}_noisy.rtf", noisy)
        entries.append(ManifestEntry(i, 1e3, 60, tmp_path / f"p{i}_clean.rtf", tmp_path / f"p{i}_noisy.rtf"))
    write_manifest(tmp_path / "manifest.tsv", entries)
    (tmp_path / "train.cfg").write_text("manifest=manifest.tsv\nlayers=2\nchannels=2\niterations=2\npatch_size=16\n")
    cfg = load_config(tmp_path / "train.cfg")
    _, history = train(cfg, tmp_path / "out")
    assert len(history.records) == 2
    assert (tmp_path / "out" / "history.tsv").read_text().splitlines()[0] == "iteration\ttotal\tmse\tperceptual\tlambda_p"
