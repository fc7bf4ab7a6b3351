import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moment_fields.imageio import (format_float, read_csv, read_pfm, read_ppm,
                                   tone_map_variance, write_csv, write_pfm, write_ppm)


def test_tone_map():
    v = np.array([0.0, 1.0, 2.0, 3.0, 100.0])
    out = tone_map_variance(v)
    np.testing.assert_allclose(out, v / (v + 2.0))
    assert np.all(tone_map_variance(np.zeros(4)) == 0)
    np.testing.assert_allclose(tone_map_variance(np.array([0, 0, 0, 4.0])), [0, 0, 0, 1])


def test_ppm_round_trip(tmp_path, rng):
    img = rng.random((7, 5, 3))
    write_ppm(tmp_path / "a.ppm", img)
    back = read_ppm(tmp_path / "a.ppm")
    assert back.shape == (7, 5, 3) and back.dtype == np.uint8
    np.testing.assert_array_equal(back, np.round(img * 255).astype(np.uint8))
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n5 7\n255\n")
    write_ppm(tmp_path / "g.ppm", np.full((2, 3), 2.0))
    assert np.all(read_ppm(tmp_path / "g.ppm") == 255)
    with pytest.raises(ValueError):
        write_ppm(tmp_path / "x.ppm", np.zeros((2, 2, 4)))


@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6),
                                    st.sampled_from([1, 3])),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_pfm_round_trip_is_exact(img):
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        write_pfm(f"{d}/x.pfm", img)
        back = read_pfm(f"{d}/x.pfm")
    expected = img[..., 0] if img.shape[2] == 1 else img
    np.testing.assert_array_equal(back, expected)


def test_pfm_layout(tmp_path):
    img = np.array([[1.0, 2.0], [3.0, 4.0]])
    write_pfm(tmp_path / "x.pfm", img)
    blob = (tmp_path / "x.pfm").read_bytes()
    assert blob.startswith(b"Pf\n2 2\n-1.0\n")
    # bottom row first, little-endian float32
    np.testing.assert_array_equal(np.frombuffer(blob[-16:], "<f4"), [3, 4, 1, 2])
    with pytest.raises(ValueError):
        write_pfm(tmp_path / "y.pfm", np.zeros((2, 2, 2)))


def test_csv_format(tmp_path):
    write_csv(tmp_path / "t.csv", ["a", "b", "c"], [[1, 0.1, None], ["x", float("nan"), 2.5]])
    text = (tmp_path / "t.csv").read_bytes()
    assert text == b"a,b,c\n1,0.1,\nx,,2.5\n"
    header, rows = read_csv(tmp_path / "t.csv")
    assert header == ["a", "b", "c"] and rows[1] == ["x", "", "2.5"]


@given(st.floats(allow_nan=False))
def test_format_float_round_trips(x):
    assert float(format_float(x)) == x
