import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oemdeconv import CoreMap
from oemdeconv import io as fio


def test_pgm_round_trip_8_and_16_bit(tmp_path):
    img8 = np.arange(12, dtype=float).reshape(3, 4) * 20
    fio.write_pgm(tmp_path / "a.pgm", img8)
    assert np.array_equal(fio.read_pgm(tmp_path / "a.pgm"), img8)
    img16 = img8 * 200
    fio.write_pgm(tmp_path / "b.pgm", img16)
    raw = (tmp_path / "b.pgm").read_bytes()
    assert raw.startswith(b"P5\n4 3\n65535\n")
    # big-endian sample order
    assert raw[-2:] == int(img16[-1, -1]).to_bytes(2, "big")
    assert np.array_equal(fio.read_pgm(tmp_path / "b.pgm"), img16)


def test_pgm_header_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1 # size\n255\n" + bytes([7, 9]))
    assert np.array_equal(fio.read_pgm(p), [[7.0, 9.0]])


@pytest.mark.parametrize("content", [b"P2\n1 1\n255\n0", b"P5\n2 2\n255\n\x00", b"P5\n2"])
def test_pgm_rejects_bad_files(tmp_path, content):
    p = tmp_path / "bad.pgm"
    p.write_bytes(content)
    with pytest.raises(fio.FormatError):
        fio.read_pgm(p)


def test_raw_round_trip_and_sidecar(tmp_path):
    img = np.random.default_rng(0).normal(size=(5, 7))
    fio.write_raw(tmp_path / "g.f64", img)
    assert (tmp_path / "g.f64").read_bytes() == img.astype("<f8").tobytes()
    assert np.array_equal(fio.read_image(tmp_path / "g.f64"), img)
    (tmp_path / "g.f64").write_bytes(b"\x00" * 8)
    with pytest.raises(fio.FormatError):
        fio.read_raw(tmp_path / "g.f64")
    with pytest.raises(fio.FormatError):
        fio.read_raw(tmp_path / "missing.f64")


def test_preview_scaling(tmp_path):
    scale = fio.write_preview_pgm(tmp_path / "p.pgm", np.array([[1.0, 3.0]]))
    assert scale == {"min": 1.0, "max": 3.0}
    assert np.array_equal(fio.read_pgm(tmp_path / "p.pgm"), [[0.0, 65535.0]])


def test_cores_csv_format(tmp_path):
    cm = CoreMap(10, 10, [[1.25, 2.0], [3.5, 4.75]])
    fio.write_cores_csv(tmp_path / "c.csv", cm)
    text = (tmp_path / "c.csv").read_bytes()
    assert text == b"x,y\n1.25,2.0\n3.5,4.75\n"
    back = fio.read_cores_csv(tmp_path / "c.csv", 10, 10)
    assert np.array_equal(back.positions, cm.positions)
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(fio.FormatError):
        fio.read_cores_csv(tmp_path / "bad.csv", 10, 10)


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=30))
def test_vector_csv_exact_round_trip(tmp_path_factory, values):
    p = tmp_path_factory.mktemp("v") / "v.csv"
    fio.write_vector_csv(p, values, "y")
    assert np.array_equal(fio.read_vector_csv(p), np.array(values, dtype=float))


def test_points_csv(tmp_path):
    (tmp_path / "p.csv").write_text("x,y\n1,2\n3.5,4\n")
    assert np.array_equal(fio.read_points_csv(tmp_path / "p.csv"), [[1, 2], [3.5, 4]])


def test_json_is_sorted_and_hash_stable(tmp_path):
    fio.write_json(tmp_path / "a.json", {"b": 1, "a": [1.5]})
    assert (tmp_path / "a.json").read_text() == '{\n  "a": [\n    1.5\n  ],\n  "b": 1\n}\n'
    h = fio.sha256_file(tmp_path / "a.json")
    assert len(h) == 64 and h == fio.sha256_file(tmp_path / "a.json")
