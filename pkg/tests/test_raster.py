import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cdtrust.exceptions import CorruptionError, FormatError, ShapeError, ValidationError
from cdtrust.raster import (
    HEADER_SIZE,
    ChangeMask,
    NormStats,
    Raster,
    ScenePair,
    compute_norm_stats,
    decode_raster,
    encode_raster,
    load_manifest,
    read_mask,
    read_raster,
    save_scene,
    standardize,
    write_manifest,
    write_mask,
    write_raster,
)

from conftest import make_scene


def test_header_layout():
    buf = encode_raster(np.zeros((3, 2, 5), np.float32))
    assert HEADER_SIZE == 24
    assert buf[:8] == b"CDRAST1\x00"
    # h, w, c, dtype code, little endian
    assert buf[8:24] == (2).to_bytes(4, "little") + (5).to_bytes(4, "little") + (3).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert len(buf) == 24 + 3 * 2 * 5 * 4


def test_planar_order():
    data = np.arange(2 * 2 * 3, dtype=np.float32).reshape(2, 2, 3)
    payload = np.frombuffer(encode_raster(data)[24:], "<f4")
    np.testing.assert_array_equal(payload, np.arange(12))


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=6),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_f32_round_trip_bytes(arr):
    buf = encode_raster(arr)
    back, code = decode_raster(buf)
    assert code == 2
    assert encode_raster(back) == buf
    np.testing.assert_array_equal(back, arr)


@pytest.mark.parametrize("dtype,code,hi", [("u8", 0, 255), ("u16", 1, 65535)])
def test_integer_round_trip(dtype, code, hi):
    arr = np.array([[[0, 1, hi]]], dtype=np.float32)
    buf = encode_raster(arr, dtype)
    back, c = decode_raster(buf)
    assert c == code
    np.testing.assert_array_equal(back, arr)


def test_integer_encoding_rejects_unrepresentable():
    with pytest.raises(ValidationError):
        encode_raster(np.array([[[256.0]]]), "u8")
    with pytest.raises(ValidationError):
        encode_raster(np.array([[[0.5]]]), "u16")


def test_decode_errors():
    good = encode_raster(np.ones((1, 2, 2), np.float32))
    with pytest.raises(FormatError):
        decode_raster(b"NOTMAGIC" + good[8:])
    with pytest.raises(CorruptionError):
        decode_raster(good[:-1])
    with pytest.raises(CorruptionError):
        decode_raster(good + b"\x00")
    with pytest.raises(CorruptionError):
        decode_raster(good[:12])
    bad_code = bytearray(good)
    bad_code[20] = 7
    with pytest.raises(FormatError):
        decode_raster(bytes(bad_code))
    zero = bytearray(good)
    zero[8:12] = (0).to_bytes(4, "little")
    with pytest.raises(ValidationError):
        decode_raster(bytes(zero))


def test_raster_rejects_nonfinite_and_is_readonly():
    with pytest.raises(ValidationError):
        Raster(np.array([[[np.nan]]]))
    r = Raster(np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        r.data[0, 0, 0] = 1.0
    assert r == Raster(np.zeros((1, 2, 2)))
    with pytest.raises(ShapeError):
        Raster(np.zeros(3))


def test_mask_values():
    ChangeMask(np.array([[0, 1, 255]])).check_values(1)
    with pytest.raises(ValidationError):
        ChangeMask(np.array([[0, 2]])).check_values(1)
    ChangeMask(np.array([[0, 2]])).check_values(2)
    with pytest.raises(ValidationError):
        ChangeMask(np.array([[0.5]]))


def test_scene_shape_mismatch():
    a = Raster(np.zeros((2, 4, 4)))
    with pytest.raises(ShapeError):
        ScenePair("x", a, Raster(np.zeros((2, 4, 5))))
    with pytest.raises(ShapeError):
        ScenePair("x", a, a, ChangeMask(np.zeros((3, 4))))


def test_file_round_trip(tmp_path, scene):
    write_raster(scene.pre, tmp_path / "a.cdr")
    assert read_raster(tmp_path / "a.cdr") == scene.pre
    write_mask(scene.mask, tmp_path / "m.cdr")
    assert read_mask(tmp_path / "m.cdr") == scene.mask
    assert (tmp_path / "m.cdr").read_bytes() == encode_raster(scene.mask.labels[None], "u8")
    with pytest.raises(FormatError):
        read_mask(tmp_path / "a.cdr")


def test_manifest_round_trip(tmp_path):
    scenes = [make_scene("a", seed=1), make_scene("b", seed=2, split="test")]
    entries = [save_scene(s, tmp_path) for s in scenes]
    write_manifest(tmp_path / "manifest.json", 4, entries)
    m = load_manifest(tmp_path / "manifest.json")
    assert m.I == 1 and m.J == 1
    assert m.scene("a").pre == scenes[0].pre
    assert m.test[0].mask == scenes[1].mask


def test_manifest_errors_name_scene(tmp_path):
    s = make_scene("bad")
    entries = [save_scene(s, tmp_path)]
    write_manifest(tmp_path / "manifest.json", 3, entries)
    with pytest.raises(ShapeError, match="bad"):
        load_manifest(tmp_path / "manifest.json")
    write_manifest(tmp_path / "manifest.json", 4, entries)
    (tmp_path / "bad_post.cdr").unlink()
    with pytest.raises(FileNotFoundError, match="bad"):
        load_manifest(tmp_path / "manifest.json")
    doc = {"band_count": 4, "scenes": [{"id": "x", "pre": "p", "post": "p"}] * 2}
    (tmp_path / "dup.json").write_text(json.dumps(doc))
    with pytest.raises((ValidationError, FileNotFoundError)):
        load_manifest(tmp_path / "dup.json")
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(ValidationError):
        load_manifest(tmp_path / "broken.json")


def test_norm_stats_pooled_population_std():
    s1, s2 = make_scene("a", seed=1), make_scene("b", seed=2)
    st_ = compute_norm_stats([s1, s2])
    allv = np.concatenate([x.data.reshape(4, -1) for x in (s1.pre, s1.post, s2.pre, s2.post)], axis=1).astype(np.float64)
    np.testing.assert_allclose(st_.mean, allv.mean(axis=1), rtol=1e-6)
    np.testing.assert_allclose(st_.std, allv.std(axis=1, ddof=0), rtol=1e-6)
    z = standardize(s1.pre.data, st_)
    assert z.dtype == np.float32


def test_norm_stats_zero_variance_band():
    pre = np.ones((2, 4, 4), np.float32)
    pre[1] = np.arange(16).reshape(4, 4)
    s = ScenePair("c", Raster(pre), Raster(pre), ChangeMask(np.zeros((4, 4))), split="train")
    st_ = compute_norm_stats([s])
    assert st_.std[0] == 1.0 and list(st_.flagged) == [True, False]
    assert NormStats.from_dict(st_.to_dict()) == st_
