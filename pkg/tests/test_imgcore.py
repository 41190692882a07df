import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from conftest import write_gray_png
from lesionkit.imgcore import (BinaryMask, ClassDistribution, ConfusionMatrix, DataError,
                               FormatError, ProbMap, RgbImage, decode_pmap, encode_pmap,
                               load_mask_png, load_probmap, read_class_table, save_mask_png,
                               save_probmap, save_probmap_png16, write_class_table)


def test_load_mask_saturated(tmp_path):
    m = load_mask_png(write_gray_png(tmp_path / "m.png", np.full((4, 4), 255)))
    assert m.shape == (4, 4)
    assert m.data.sum() == 16


def test_load_mask_zero(tmp_path):
    m = load_mask_png(write_gray_png(tmp_path / "m.png", np.zeros((3, 5))))
    assert m.width == 5 and m.height == 3
    assert not m.data.any()


def test_load_mask_threshold_128(tmp_path):
    m = load_mask_png(write_gray_png(tmp_path / "m.png", [[0, 127, 128, 255]]))
    assert m.data.tolist() == [[0, 0, 1, 1]]


def test_load_mask_rejects_rgb(tmp_path):
    path = tmp_path / "rgb.png"
    Image.fromarray(np.zeros((2, 2, 3), np.uint8)).save(path)
    with pytest.raises(FormatError, match="mode 'RGB'"):
        load_mask_png(path)


def test_load_mask_rejects_16bit(tmp_path):
    path = tmp_path / "deep.png"
    Image.fromarray(np.zeros((2, 2), np.uint16)).save(path)
    with pytest.raises(FormatError, match="8-bit"):
        load_mask_png(path)


def test_load_mask_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mask_png(tmp_path / "nope.png")


def test_save_mask_single_pixel(tmp_path):
    arr = np.zeros((3, 3), np.uint8)
    arr[0, 0] = 1
    save_mask_png(BinaryMask(arr), tmp_path / "m.png")
    with Image.open(tmp_path / "m.png") as im:
        assert im.mode == "L"
        px = np.asarray(im)
    assert px[0, 0] == 255
    assert px.sum() == 255


def test_save_mask_1x1(tmp_path):
    save_mask_png(BinaryMask(np.ones((1, 1), np.uint8)), tmp_path / "m.png")
    with Image.open(tmp_path / "m.png") as im:
        assert np.asarray(im).tolist() == [[255]]


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 20), st.integers(1, 20)),
              elements=st.integers(0, 1)))
def test_mask_roundtrip(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("rt") / "m.png"
    save_mask_png(BinaryMask(arr), path)
    assert np.array_equal(load_mask_png(path).data, arr)


def test_png16_endpoints(tmp_path):
    path = tmp_path / "p.png"
    Image.fromarray(np.array([[0, 65535]], np.uint16)).save(path)
    p = load_probmap(path)
    assert p.channels == 1
    assert p.data[0, 0, 0] == 0.0
    assert p.data[0, 1, 0] == 1.0


def test_png16_roundtrip(tmp_path):
    vals = np.array([[0.0, 0.25, 1.0]])
    save_probmap_png16(ProbMap(vals), tmp_path / "p.png")
    got = load_probmap(tmp_path / "p.png").data[:, :, 0]
    assert np.allclose(got, vals, atol=1 / 65535)


def test_pmap_direct_decode(tmp_path):
    raw = b"PMAP" + struct.pack("<III", 2, 1, 1) + struct.pack("<2f", 0.25, 0.75)
    (tmp_path / "p.pmap").write_bytes(raw)
    p = load_probmap(tmp_path / "p.pmap")
    assert p.width == 2 and p.height == 1 and p.channels == 1
    assert p.data[0, :, 0].tolist() == [0.25, 0.75]


def test_pmap_layout_is_channel_interleaved():
    arr = np.arange(2 * 3 * 5, dtype=np.float32).reshape(2, 3, 5) / 100
    buf = encode_pmap(ProbMap(arr))
    assert buf[:4] == b"PMAP"
    assert struct.unpack("<III", buf[4:16]) == (3, 2, 5)
    first_pixel = struct.unpack("<5f", buf[16:36])
    assert np.allclose(first_pixel, arr[0, 0])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 8), st.integers(1, 8), st.integers(1, 5)),
              elements=st.floats(0, 1, width=32)))
def test_pmap_roundtrip_bit_exact(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("pm") / "p.pmap"
    save_probmap(ProbMap(arr), path)
    back = load_probmap(path).data
    assert back.tobytes() == arr.astype("<f4").tobytes()


@pytest.mark.parametrize("raw, msg", [
    (b"PMAX" + bytes(12), "magic"),
    (b"PMAP" + struct.pack("<III", 2, 2, 1) + bytes(8), "truncated"),
    (b"PMAP" + struct.pack("<III", 1, 1, 1) + struct.pack("<f", 1.5), "outside"),
    (b"PMAP" + struct.pack("<III", 1, 1, 1) + struct.pack("<f", float("nan")), "outside"),
])
def test_pmap_errors(raw, msg):
    with pytest.raises(FormatError, match=msg):
        decode_pmap(raw)


def test_types_reject_bad_invariants():
    with pytest.raises(DataError):
        BinaryMask(np.array([[0, 2]]))
    with pytest.raises(DataError):
        RgbImage(np.zeros((2, 2, 4), np.uint8))
    with pytest.raises(DataError):
        RgbImage(np.zeros((2, 2, 3), np.float64))
    with pytest.raises(DataError):
        ProbMap(np.array([[1.2]]))
    with pytest.raises(DataError):
        ClassDistribution((0.5, 0.6, 0, 0, 0, 0, 0))
    with pytest.raises(DataError):
        ConfusionMatrix(-np.ones((7, 7), int))


def test_types_are_immutable():
    m = BinaryMask(np.zeros((2, 2), np.uint8))
    with pytest.raises(ValueError):
        m.data[0, 0] = 1


def test_class_table_roundtrip(tmp_path):
    rows = {"ISIC_2": (0, 1, 0, 0, 0, 0, 0), "ISIC_1": (0.5, 0.25, 0.25, 0, 0, 0, 0)}
    write_class_table(rows, tmp_path / "t.csv")
    text = (tmp_path / "t.csv").read_text().splitlines()
    assert text[0] == "image,MEL,NV,BCC,AKIEC,BKL,DF,VASC"
    assert text[1].startswith("ISIC_1,")
    back = read_class_table(tmp_path / "t.csv")
    assert back == {k: tuple(float(x) for x in v) for k, v in rows.items()}


def test_class_table_column_order_independent(tmp_path):
    (tmp_path / "t.csv").write_text("image,NV,MEL,BCC,AKIEC,BKL,DF,VASC\na,1,0,0,0,0,0,0\n")
    assert read_class_table(tmp_path / "t.csv")["a"] == (0, 1, 0, 0, 0, 0, 0)


def test_class_table_bad_value_names_row(tmp_path):
    (tmp_path / "t.csv").write_text("image,MEL,NV,BCC,AKIEC,BKL,DF,VASC\nx7,a,0,0,0,0,0,0\n")
    with pytest.raises(FormatError, match="x7"):
        read_class_table(tmp_path / "t.csv")
