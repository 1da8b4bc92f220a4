import numpy as np
import pytest

from red_denoise import autodiff as ad
from red_denoise.autodiff import Tape, Tensor, grad_check
from red_denoise.errors import FormatError, ImageTooSmall, ShapeMismatch
from red_denoise.perceptual import (
    extract_features,
    joint_loss,
    load_extractor,
    make_extractor,
    perceptual_loss,
    save_extractor,
)

from oracles import features_loops, perceptual_loops


@pytest.fixture(scope="module")
def phi():
    return make_extractor(seed=3)


def test_zero_image_gives_zero_features(phi):
    f = extract_features(phi, np.zeros((1, 16, 16)))
    assert not np.any(f.data)


def test_tap_extent_64(phi):
    f = extract_features(phi, np.random.default_rng(0).random((1, 64, 64)))
    assert f.shape == (64, 8, 8)
    assert phi.output_extent(64, 64) == (8, 8)


def test_features_deterministic():
    img = np.random.default_rng(1).random((1, 20, 20))
    a = extract_features(make_extractor(seed=9), img).data
    b = extract_features(make_extractor(seed=9), img).data
    assert a.tobytes() == b.tobytes()


def test_features_match_loops(phi):
    img = np.random.default_rng(4).random((1, 11, 13))
    ref = features_loops([w.data for w in phi.layers], img, phi.stride, phi.tap_index)
    np.testing.assert_allclose(extract_features(phi, img).data, ref, atol=1e-12)


def test_image_too_small(phi):
    with pytest.raises(ImageTooSmall):
        phi.output_extent(0, 5)
    with pytest.raises(ImageTooSmall):
        extract_features(phi, np.zeros((1, 0, 8)))
    # same-padded stride-2 stages never collapse a non-empty image
    assert extract_features(phi, np.zeros((1, 1, 1))).shape == (64, 1, 1)


def test_extractor_weights_read_only(phi):
    with pytest.raises(ValueError):
        phi.layers[0].data[0, 0, 0, 0] = 1.0
    assert not any(w.requires_grad for w in phi.layers)


def test_perceptual_identical_is_zero(phi):
    x = np.random.default_rng(2).random((1, 16, 16))
    assert perceptual_loss(phi, x, x).item() == 0.0


def test_perceptual_matches_loops(phi):
    rng = np.random.default_rng(6)
    a, b = rng.random((2, 1, 16, 16))
    ref = perceptual_loops([w.data for w in phi.layers], a, b, phi.stride, phi.tap_index)
    assert abs(perceptual_loss(phi, a, b).item() - ref) < 1e-12


def test_perceptual_symmetric_nonnegative(phi):
    rng = np.random.default_rng(8)
    for _ in range(5):
        a, b = rng.random((2, 1, 16, 16))
        ab = perceptual_loss(phi, a, b).item()
        assert ab >= 0
        assert ab == pytest.approx(perceptual_loss(phi, b, a).item(), rel=1e-15, abs=0)


def test_perceptual_batch_is_mean_of_images(phi):
    rng = np.random.default_rng(10)
    a, b = rng.random((2, 3, 1, 16, 16))
    batched = perceptual_loss(phi, a, b).item()
    singles = [perceptual_loss(phi, a[i], b[i]).item() for i in range(3)]
    assert batched == pytest.approx(np.mean(singles), rel=1e-12)


def test_perceptual_shape_mismatch(phi):
    with pytest.raises(ShapeMismatch):
        perceptual_loss(phi, np.zeros((1, 16, 16)), np.zeros((1, 16, 17)))


def test_perceptual_gradient(phi):
    rng = np.random.default_rng(12)
    target = Tensor(rng.random((1, 16, 16)))
    x = rng.random((1, 16, 16))
    assert grad_check(lambda t: perceptual_loss(phi, t, target), x) < 1e-4


def test_joint_loss_parts(phi):
    rng = np.random.default_rng(14)
    a, b = rng.random((2, 1, 16, 16))
    total, mse, per = joint_loss(phi, a, b, 0.0)
    assert total.item() == mse.item()
    total, mse, per = joint_loss(phi, a, b, 0.1)
    mse_ref = np.mean((a - b) ** 2)
    per_ref = perceptual_loops([w.data for w in phi.layers], a, b, phi.stride, phi.tap_index)
    assert abs(total.item() - (mse_ref + 0.1 * per_ref)) < 1e-12
    assert abs(total.item() - (mse.item() + 0.1 * per.item())) < 1e-12
    t, m, p = joint_loss(phi, a, a, 0.1)
    assert t.item() == m.item() == p.item() == 0.0


def test_gradient_flows_to_image_not_extractor(phi):
    rng = np.random.default_rng(15)
    x = Tensor(rng.random((1, 16, 16)), requires_grad=True)
    before = [w.data.tobytes() for w in phi.layers]
    with Tape() as tape:
        total, _, _ = joint_loss(phi, x, Tensor(rng.random((1, 16, 16))), 0.1)
    ad.backward(tape, total)
    assert x.grad is not None and np.any(x.grad)
    assert all(w.grad is None for w in phi.layers)
    assert [w.data.tobytes() for w in phi.layers] == before


def test_weight_file_roundtrip(tmp_path, phi):
    path = tmp_path / "phi.rfex"
    save_extractor(phi, path)
    loaded = load_extractor(path)
    assert loaded.tap_index == phi.tap_index and loaded.stride == phi.stride
    for a, b in zip(phi.layers, loaded.layers):
        assert a.data.tobytes() == b.data.tobytes()
    img = np.random.default_rng(0).random((1, 16, 16))
    assert extract_features(loaded, img).data.tobytes() == extract_features(phi, img).data.tobytes()


def test_weight_file_shape_check(tmp_path, phi):
    path = tmp_path / "phi.rfex"
    save_extractor(phi, path)
    raw = path.read_bytes().replace(b"stage0=16,1,3,3", b"stage0=16,1,5,5")
    path.write_bytes(raw)
    with pytest.raises(FormatError):
        load_extractor(path)
