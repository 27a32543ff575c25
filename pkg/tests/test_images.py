import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from anima4d.errors import DataFormatError
from anima4d.images import (FrameRecord, read_manifest, read_pfm, read_pgm, read_ppm,
                            write_manifest, write_pfm, write_pgm, write_ppm)


def test_ppm_round_trip_exact(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(5, 7, 3)).astype(np.float32) / 255.0
    p = tmp_path / "a.ppm"
    write_ppm(p, img)
    back = read_ppm(p)
    assert back.dtype == np.float32
    assert np.array_equal(back, img)


def test_ppm_write_read_write_byte_identical(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.random((9, 4, 3))
    p1, p2 = tmp_path / "a.ppm", tmp_path / "b.ppm"
    write_ppm(p1, img)
    write_ppm(p2, read_ppm(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_pgm_round_trip(tmp_path):
    img = np.linspace(0, 1, 12, dtype=np.float32).reshape(3, 4)
    p = tmp_path / "m.pgm"
    write_pgm(p, img)
    back = read_pgm(p)
    assert np.array_equal(back, np.rint(img * 255) / np.float32(255.0))


@pytest.mark.parametrize("shape", [(6, 5), (6, 5, 3)])
def test_pfm_round_trip_bit_exact(tmp_path, shape):
    rng = np.random.default_rng(2)
    img = (rng.standard_normal(shape) * 100).astype(np.float32)
    img.flat[0] = -0.0
    p = tmp_path / "d.pfm"
    write_pfm(p, img)
    back = read_pfm(p)
    assert back.dtype == np.float32
    assert np.array_equal(back.view(np.uint32), img.view(np.uint32))  # bitwise, incl. -0.0


@given(hnp.arrays(np.uint8, hnp.array_shapes(min_dims=3, max_dims=3, min_side=1, max_side=8)
                  .filter(lambda s: s[2] == 3)))
def test_ppm_round_trips_any_u8(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("ppm") / "x.ppm"
    write_ppm(p, arr.astype(np.float32) / 255.0)
    assert np.array_equal(read_ppm(p) * 255, arr)


@given(hnp.arrays(np.float32, (3, 4),
                  elements=st.floats(-1e6, 1e6, width=32, allow_nan=False)))
def test_pfm_round_trips_any_f32(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("pfm") / "x.pfm"
    write_pfm(p, arr)
    assert np.array_equal(read_pfm(p), arr)


def test_truncated_payloads_error(tmp_path):
    img = np.zeros((4, 4, 3), dtype=np.float32)
    p = tmp_path / "a.ppm"
    write_ppm(p, img)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(DataFormatError, match="truncated"):
        read_ppm(p)

    d = tmp_path / "d.pfm"
    write_pfm(d, np.zeros((4, 4), dtype=np.float32))
    d.write_bytes(d.read_bytes()[:-1])
    with pytest.raises(DataFormatError, match="truncated"):
        read_pfm(d)


def test_header_errors(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes(12))
    with pytest.raises(DataFormatError, match="magic"):
        read_ppm(p)
    p.write_bytes(b"P6\n2 2\n65535\n" + bytes(12))
    with pytest.raises(DataFormatError, match="maxval"):
        read_ppm(p)
    p.write_bytes(b"P6\n2\n")
    with pytest.raises(DataFormatError):
        read_ppm(p)
    p.write_bytes(b"Pf\n2 2\n1.0\n" + bytes(16))
    with pytest.raises(DataFormatError, match="negative"):
        read_pfm(p)


def test_ppm_header_comments_allowed(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# a comment\n2 1\n255\n" + bytes([1, 2, 3, 4, 5, 6]))
    img = read_ppm(p)
    assert img.shape == (1, 2, 3)
    assert np.array_equal(np.rint(img * 255), [[[1, 2, 3], [4, 5, 6]]])


def test_bad_shapes_rejected(tmp_path):
    with pytest.raises(DataFormatError):
        write_ppm(tmp_path / "x", np.zeros((2, 2)))
    with pytest.raises(DataFormatError):
        write_pgm(tmp_path / "x", np.zeros((2, 2, 3)))
    with pytest.raises(DataFormatError):
        write_pfm(tmp_path / "x", np.zeros((2, 2, 4), dtype=np.float32))


def test_manifest_round_trip(tmp_path):
    records = [FrameRecord(0, 90.0, 0.0, 1.8, 40.0, 0.0),
               FrameRecord(1, 75.5, -36.25, 1.8, 40.0, 1 / 3)]
    p = tmp_path / "manifest.txt"
    write_manifest(p, records)
    assert read_manifest(p) == records  # float repr round-trips exactly


def test_manifest_field_count_enforced(tmp_path):
    p = tmp_path / "manifest.txt"
    p.write_text("0 90.0 0.0 1.8 0.0\n")  # five fields, missing fov
    with pytest.raises(DataFormatError, match="6 fields"):
        read_manifest(p)
    p.write_text("0 90.0 x 1.8 40.0 0.0\n")
    with pytest.raises(DataFormatError, match="malformed"):
        read_manifest(p)
