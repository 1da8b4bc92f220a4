import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import array_shapes, arrays

from red_denoise.checkpoint import (
    MAGIC,
    checkpoint_bytes,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from red_denoise.errors import ChecksumMismatch, FormatError, VersionMismatch
from red_denoise.fileio import (
    ManifestEntry,
    load_image,
    load_rtf,
    read_manifest,
    read_pgm,
    rtf_bytes,
    save_rtf,
    sniff_format,
    write_manifest,
    write_pgm,
)
from red_denoise.model import RedConfig, apply_update, build, forward, parameters


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, array_shapes(min_dims=0, max_dims=4, max_side=5)))
def test_rtf_roundtrip_bit_exact(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("rtf") / "a.rtf"
    save_rtf(path, arr)
    back = load_rtf(path)
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_rtf_layout():
    data = rtf_bytes(np.arange(6, dtype=float).reshape(2, 3))
    assert data[:8] == b"RTENSOR1"
    assert struct.unpack("<3I", data[8:20]) == (2, 2, 3)
    assert np.frombuffer(data[20:], "<f8").tolist() == [0, 1, 2, 3, 4, 5]


def test_rtf_errors(tmp_path):
    path = tmp_path / "bad.rtf"
    path.write_bytes(b"RTENSOR2" + bytes(8))
    with pytest.raises(VersionMismatch):
        load_rtf(path)
    path.write_bytes(rtf_bytes(np.ones((3, 3)))[:-5])
    with pytest.raises(FormatError):
        load_rtf(path)


def test_pgm_roundtrip(tmp_path):
    img = np.random.default_rng(0).random((1, 13, 17))
    path = tmp_path / "a.pgm"
    write_pgm(path, img)
    back, maxval = read_pgm(path)
    assert maxval == 65535 and back.shape == (1, 13, 17)
    assert np.max(np.abs(back - img)) <= 0.5 / 65535 + 1e-15
    # second pass is lossless once quantised
    write_pgm(path, back)
    assert read_pgm(path)[0].tobytes() == back.tobytes()


def test_pgm_is_big_endian_16bit(tmp_path):
    path = tmp_path / "a.pgm"
    write_pgm(path, np.array([[[1.0, 0.0]]]))
    data = path.read_bytes()
    assert data.startswith(b"P5\n2 1\n65535\n")
    assert data.endswith(b"\xff\xff\x00\x00")


def test_pgm_8bit_and_comments(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 2\n255\n" + bytes([0, 255, 51, 102]))
    img, maxval = read_pgm(path)
    assert maxval == 255
    np.testing.assert_allclose(img[0], [[0, 1], [0.2, 0.4]])


def test_sniff_and_load_image(tmp_path):
    img = np.random.default_rng(1).random((1, 4, 4))
    save_rtf(tmp_path / "a.rtf", img)
    write_pgm(tmp_path / "a.pgm", img)
    (tmp_path / "a.txt").write_text("hello")
    assert sniff_format(tmp_path / "a.rtf") == "rtf"
    assert sniff_format(tmp_path / "a.pgm") == "pgm"
    with pytest.raises(FormatError):
        sniff_format(tmp_path / "a.txt")
    assert load_image(tmp_path / "a.rtf").tobytes() == img.tobytes()
    assert load_image(tmp_path / "a.pgm").shape == (1, 4, 4)


def test_manifest_roundtrip(tmp_path):
    entries = [
        ManifestEntry(i, 1e4, 90, tmp_path / f"pair_{i:04d}_clean.rtf", tmp_path / f"pair_{i:04d}_noisy.rtf")
        for i in range(3)
    ]
    path = tmp_path / "manifest.tsv"
    write_manifest(path, entries)
    assert path.read_text().splitlines()[0] == "0\t10000\t90\tpair_0000_clean.rtf\tpair_0000_noisy.rtf"
    back = read_manifest(path)
    assert [e.id for e in back] == ["pair_0000", "pair_0001", "pair_0002"]
    assert back[2].clean == tmp_path / "pair_0002_clean.rtf"


def test_manifest_skips_comments_and_rejects_junk(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text("# header\n\n1\t1000\t60\ta.rtf\tb.rtf\n")
    assert len(read_manifest(path)) == 1
    path.write_text("1\t1000\ta.rtf\tb.rtf\n")
    with pytest.raises(FormatError):
        read_manifest(path)


def trained_like(seed=0):
    model = build(RedConfig(4, 3, 3, seed=seed))
    rng = np.random.default_rng(seed)
    return apply_update(model, [rng.normal(scale=0.1, size=p.shape) for p in parameters(model)])


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = trained_like()
    path = tmp_path / "m.rdck"
    ident = save_checkpoint(model, path)
    assert len(ident) == 16
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    for a, b in zip(parameters(model), parameters(loaded)):
        assert a.data.tobytes() == b.data.tobytes()
    x = np.random.default_rng(3).random((1, 12, 12))
    assert forward(model, x)[1].data.tobytes() == forward(loaded, x)[1].data.tobytes()
    assert checkpoint_bytes(loaded) == path.read_bytes()


@pytest.mark.parametrize("cut", [1, 8, 100])
def test_checkpoint_truncated(cut):
    data = checkpoint_bytes(trained_like())
    with pytest.raises(ChecksumMismatch):
        parse_checkpoint(data[:-cut])


def test_checkpoint_bit_flip():
    data = bytearray(checkpoint_bytes(trained_like()))
    data[len(data) // 2] ^= 0x10
    with pytest.raises(ChecksumMismatch):
        parse_checkpoint(bytes(data))


def test_checkpoint_wrong_magic():
    data = checkpoint_bytes(trained_like())
    with pytest.raises(VersionMismatch):
        parse_checkpoint(b"RDCK2\0\0\0" + data[len(MAGIC):])


def test_checkpoint_no_tmp_left(tmp_path):
    save_checkpoint(trained_like(), tmp_path / "m.rdck")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["m.rdck"]
