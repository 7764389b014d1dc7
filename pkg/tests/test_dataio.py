import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from redfuse.dataio import (
    SYNTH_KINDS,
    DataError,
    ImagePair,
    pair_dataset,
    quantize,
    read_pgm,
    sample_patches,
    save_pairs,
    synth_pairs,
    write_pgm,
)
from redfuse.metrics import metric_sf
from redfuse.rng import SplitMix64


def test_read_example(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 128, 255, 64]))
    img = read_pgm(p)
    assert img.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(img[0, 0], [[0.0, 128 / 255], [1.0, 64 / 255]])


def test_read_comments_and_sixteen_bit(tmp_path):
    p = tmp_path / "b.pgm"
    p.write_bytes(b"P5 # made by hand\n3 1\n# max\n1000\n" + np.array([0, 500, 1000], ">u2").tobytes())
    np.testing.assert_allclose(read_pgm(p)[0, 0, 0], [0.0, 0.5, 1.0])


@pytest.mark.parametrize(
    "blob,match",
    [
        (b"P2\n2 2\n255\n0 1 2 3", "unsupported"),
        (b"P5\n2 2\n255\n\x00\x01", "truncated payload"),
        (b"P5\n2 2\n0\n\x00\x00\x00\x00", "maxval"),
        (b"P5\n2 x\n255\n\x00\x00\x00\x00", "malformed"),
        (b"P5\n2 2", "truncated PGM header"),
    ],
)
def test_read_errors(tmp_path, blob, match):
    p = tmp_path / "bad.pgm"
    p.write_bytes(blob)
    with pytest.raises(DataError, match=match):
        read_pgm(p)


def test_write_header_and_rounding(tmp_path):
    p = tmp_path / "c.pgm"
    img = np.zeros((3, 4))
    img[0, 0] = 0.5
    write_pgm(img, p)
    data = p.read_bytes()
    assert data.startswith(b"P5\n4 3\n255\n")
    payload = data[len(b"P5\n4 3\n255\n"):]
    assert len(payload) == 12 and payload[0] == 128 and not any(payload[1:])


def test_quantize_half_away_from_zero():
    assert list(quantize(np.array([0.5, 1.5 / 255, 2.5 / 255]))) == [128, 2, 3]


def test_write_clamps_with_warning(tmp_path, caplog):
    p = tmp_path / "d.pgm"
    with caplog.at_level(logging.WARNING):
        write_pgm(np.array([[-0.2, 1.4]]), p)
    assert "clamped" in caplog.text
    np.testing.assert_array_equal(read_pgm(p)[0, 0], [[0.0, 1.0]])


@given(arrays(np.uint8, (3, 5)))
def test_roundtrip_on_the_byte_grid(tmp_path_factory, raw):
    p = tmp_path_factory.mktemp("rt") / "x.pgm"
    write_pgm(raw / 255.0, p)
    assert read_pgm(p)[0, 0].tobytes() == (raw / 255.0).tobytes()
    assert p.read_bytes().endswith(raw.tobytes())


def test_sixteen_bit_roundtrip(tmp_path):
    raw = np.array([[0, 1, 40000, 65535]], dtype=np.uint16)
    write_pgm(raw / 65535.0, tmp_path / "e.pgm", maxval=65535)
    np.testing.assert_array_equal(quantize(read_pgm(tmp_path / "e.pgm")[0, 0], 65535), raw)


def _write_set(root, names, shape=(8, 8), value=0.5):
    root.mkdir(parents=True, exist_ok=True)
    for n in names:
        write_pgm(np.full(shape, value), root / f"{n}.pgm")


def test_pairing_by_stem(tmp_path, caplog):
    _write_set(tmp_path / "vis", ["a", "b"])
    _write_set(tmp_path / "ir", ["b", "c"])
    with caplog.at_level(logging.WARNING):
        pairs = pair_dataset(tmp_path / "vis", tmp_path / "ir")
    assert [p.name for p in pairs] == ["b"]
    assert caplog.text.count("unpaired") == 2


def test_pairing_sorted_and_errors(tmp_path):
    _write_set(tmp_path / "vis", ["z", "b", "m"])
    _write_set(tmp_path / "ir", ["m", "z", "b"])
    assert [p.name for p in pair_dataset(tmp_path / "vis", tmp_path / "ir")] == ["b", "m", "z"]
    _write_set(tmp_path / "ir", ["m"], shape=(8, 6))
    with pytest.raises(DataError, match=r"m\.pgm.*m\.pgm"):
        pair_dataset(tmp_path / "vis", tmp_path / "ir")
    _write_set(tmp_path / "other", ["q"])
    with pytest.raises(DataError, match="no paired"):
        pair_dataset(tmp_path / "vis", tmp_path / "other")
    with pytest.raises(DataError, match="missing"):
        pair_dataset(tmp_path / "vis", tmp_path / "nope")


def test_image_pair_shape_check():
    with pytest.raises(DataError):
        ImagePair("x", np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 5)))


def _pairs():
    rng = np.random.default_rng(5)
    return [ImagePair(f"p{k}", rng.random((1, 1, 12, 16)), rng.random((1, 1, 12, 16))) for k in range(3)]


def test_patches_are_deterministic_and_aligned():
    pairs = _pairs()
    a = sample_patches(pairs, 8, 5, 99)
    b = sample_patches(pairs, 8, 5, SplitMix64(99))
    assert a.vis.tobytes() == b.vis.tobytes() and a.ir.tobytes() == b.ir.tobytes()
    assert a.vis.shape == (5, 1, 8, 8)
    for n, (k, (y, x)) in enumerate(zip(a.indices, a.offsets)):
        assert 0 <= y <= 4 and 0 <= x <= 8
        np.testing.assert_array_equal(a.vis[n, 0], pairs[k].vis[0, 0, y:y + 8, x:x + 8])
        np.testing.assert_array_equal(a.ir[n, 0], pairs[k].ir[0, 0, y:y + 8, x:x + 8])


def test_full_size_patch():
    pairs = [ImagePair("s", np.ones((1, 1, 8, 8)), np.zeros((1, 1, 8, 8)))]
    b = sample_patches(pairs, 8, 2, 0)
    np.testing.assert_array_equal(b.offsets, [[0, 0], [0, 0]])


def test_patch_errors():
    with pytest.raises(DataError, match="exceeds"):
        sample_patches(_pairs(), 14, 1, 0)
    with pytest.raises(DataError, match="even"):
        sample_patches(_pairs(), 7, 1, 0)


@pytest.mark.parametrize("kind", SYNTH_KINDS)
def test_synth_is_reproducible_and_in_range(kind):
    a, b = synth_pairs(kind, 32, 3, 11), synth_pairs(kind, 32, 3, 11)
    for p, q in zip(a, b):
        assert p.name == q.name and p.vis.tobytes() == q.vis.tobytes() and p.ir.tobytes() == q.ir.tobytes()
        assert p.vis.min() >= 0 and p.vis.max() <= 1 and p.ir.min() >= 0 and p.ir.max() <= 1
    c = synth_pairs(kind, 32, 3, 12)
    assert any(p.vis.tobytes() != q.vis.tobytes() or p.ir.tobytes() != q.ir.tobytes() for p, q in zip(a, c))


@given(st.integers(0, 2**32))
def test_complementary_halves_properties(seed):
    for p in synth_pairs("complementary-halves", 32, 2, seed):
        v, i = p.vis[0, 0], p.ir[0, 0]
        assert not np.any(v[:, 16:]) and not np.any(i[:, :16])
        assert not np.any(v * i)
        fused = np.maximum(v, i)
        if v.any() and i.any():
            assert metric_sf(fused) > max(metric_sf(v), metric_sf(i))


def test_synth_errors():
    with pytest.raises(ValueError, match="unknown"):
        synth_pairs("clouds", 32, 1, 0)
    with pytest.raises(ValueError, match="even"):
        synth_pairs("step-edges", 31, 1, 0)


def test_save_pairs_layout(tmp_path):
    pairs = synth_pairs("step-edges", 16, 2, 0)
    save_pairs(pairs, tmp_path)
    loaded = pair_dataset(tmp_path / "vis", tmp_path / "ir")
    assert [p.name for p in loaded] == [p.name for p in pairs]
    np.testing.assert_allclose(loaded[0].vis, pairs[0].vis, atol=0.5 / 255)
