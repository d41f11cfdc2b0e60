import math
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bhxct.core import (
    ArrayHeader,
    FormatError,
    Geometry,
    Image2D,
    Sinogram,
    export_pgm,
    fan_geometry,
    load_image,
    load_sinogram,
    parallel_geometry,
    read_array,
    save_image,
    save_sinogram,
    write_array,
)


def test_write_2x2_image_is_16_bytes(tmp_path):
    write_array(tmp_path / "a", ArrayHeader("image", (2, 2), 1.0), np.arange(4.0))
    assert (tmp_path / "a.raw").stat().st_size == 16
    header, data = read_array(tmp_path / "a")
    assert header.shape == (2, 2)
    assert data.ravel().tolist() == [0.0, 1.0, 2.0, 3.0]


def test_one_is_encoded_little_endian(tmp_path):
    write_array(tmp_path / "a", ArrayHeader("image", (3,)), [0.0, 1.0, 2.0])
    raw = (tmp_path / "a.raw").read_bytes()
    assert raw[4:8] == bytes([0x00, 0x00, 0x80, 0x3F])


def test_shape_mismatch_on_write(tmp_path):
    with pytest.raises(ValueError, match="shape"):
        write_array(tmp_path / "a", ArrayHeader("image", (3, 3)), np.zeros(4))


def test_truncated_raw_is_rejected(tmp_path):
    write_array(tmp_path / "a", ArrayHeader("image", (2, 2), 1.0), np.arange(4.0))
    raw = tmp_path / "a.raw"
    raw.write_bytes(raw.read_bytes()[:12])
    with pytest.raises(FormatError, match="length mismatch"):
        read_array(tmp_path / "a")


def test_shape_3_with_12_bytes(tmp_path):
    (tmp_path / "b.json").write_text('{"kind": "image", "shape": [3], "future_field": 7}')
    (tmp_path / "b.raw").write_bytes(np.array([1, 2, 3], "<f4").tobytes())
    header, data = read_array(tmp_path / "b")
    assert data.tolist() == [1.0, 2.0, 3.0]


def test_non_finite_values_are_rejected(tmp_path):
    (tmp_path / "b.json").write_text('{"kind": "image", "shape": [2]}')
    (tmp_path / "b.raw").write_bytes(np.array([1, np.nan], "<f4").tobytes())
    with pytest.raises(FormatError, match="non-finite"):
        read_array(tmp_path / "b")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_array(tmp_path / "nothing")


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.integers(1, 50), elements=st.floats(-(2.0 ** 100), 2.0 ** 100, width=32, allow_subnormal=False)))
def test_round_trip_is_bit_exact(values):
    path = Path(tempfile.mkdtemp()) / "x"
    header = ArrayHeader("image", (values.size,), 0.5)
    write_array(path, header, values)
    h2, back = read_array(path)
    assert h2 == header
    assert back.tobytes() == values.astype("<f4").tobytes()
    assert (path.with_suffix(".raw")).stat().st_size == 4 * values.size


def test_image_and_sinogram_round_trip(tmp_path):
    img = Image2D(np.random.default_rng(0).random((4, 5)).astype(np.float32), 0.25)
    save_image(tmp_path / "img", img)
    back = load_image(tmp_path / "img")
    assert back.pixel_size == 0.25 and np.array_equal(back.data, img.data)

    g = fan_geometry(6, 3, 0.5, 50.0, 80.0, detector_offset=0.1)
    sino = Sinogram(np.arange(18.0).reshape(6, 3), g)
    save_sinogram(tmp_path / "s", sino)
    s2 = load_sinogram(tmp_path / "s")
    assert s2.geometry.same_as(g)
    assert np.array_equal(s2.data, sino.data)


def test_invariants():
    with pytest.raises(ValueError):
        Image2D(np.zeros((2, 2)), 0.0)
    with pytest.raises(ValueError):
        Image2D(np.array([[np.inf]]), 1.0)
    with pytest.raises(ValueError, match="increasing"):
        Geometry("parallel", [0.0, 0.0], 3, 1.0)
    with pytest.raises(ValueError, match=r"\[0, 2\*pi\)"):
        Geometry("parallel", [0.0, 2 * math.pi], 3, 1.0)
    with pytest.raises(ValueError, match="source_to_center"):
        Geometry("fan", [0.0], 3, 1.0, 0.0, 100.0, 50.0)
    with pytest.raises(ValueError):
        Geometry("parallel", [0.0], 3, -1.0)
    with pytest.raises(ValueError, match="does not match"):
        Sinogram(np.zeros((2, 2)), parallel_geometry(3, 2, 1.0))


def _pgm_pixels(path):
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n")
    return np.frombuffer(raw.split(b"255\n", 1)[1], np.uint8)


@pytest.mark.parametrize("value, expected", [(-1.0, 0), (3.0, 255), (1.0, 128), (-5.0, 0), (9.0, 255)])
def test_pgm_window(tmp_path, value, expected):
    img = Image2D(np.full((3, 4), value), 1.0)
    export_pgm(img, tmp_path / "a.pgm", (-1.0, 3.0))
    pix = _pgm_pixels(tmp_path / "a.pgm")
    assert pix.size == 12
    assert np.all(pix == expected)


def test_pgm_rejects_empty_window(tmp_path):
    with pytest.raises(ValueError):
        export_pgm(Image2D(np.zeros((2, 2)), 1.0), tmp_path / "a.pgm", (1.0, 1.0))
