import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from purge_gate.cloudio import decode_cloud, encode_cloud, read_cloud, write_cloud
from purge_gate.errors import FormatError
from purge_gate.tokenizer import PointCloud

f32 = st.floats(-1e6, 1e6, allow_nan=False, width=32)


@settings(max_examples=50)
@given(arrays(np.float32, st.tuples(st.integers(1, 40), st.just(3)), elements=f32))
def test_binary_round_trip(pts):
    cloud = PointCloud(pts.astype(np.float64))
    np.testing.assert_array_equal(decode_cloud(encode_cloud(cloud)).points, cloud.points)


def test_binary_layout():
    blob = encode_cloud(PointCloud(np.array([[1.0, 2.0, 3.0]])))
    assert blob[:4] == b"PGPC" and blob[4:8] == (1).to_bytes(4, "little") and len(blob) == 20


@pytest.mark.parametrize("blob", [b"PG", b"XXXX\x01\x00\x00\x00" + bytes(12), b"PGPC\x02\x00\x00\x00" + bytes(12)])
def test_binary_rejects_garbage(blob):
    with pytest.raises(FormatError):
        decode_cloud(blob)


@pytest.mark.parametrize("suffix", [".pgpc", ".xyz"])
def test_file_round_trip(tmp_path, suffix):
    pts = np.random.default_rng(0).standard_normal((17, 3)).astype(np.float32).astype(np.float64)
    path = tmp_path / f"c{suffix}"
    write_cloud(path, PointCloud(pts))
    np.testing.assert_array_equal(read_cloud(path).points, pts)


def test_text_rejects_bad_rows(tmp_path):
    path = tmp_path / "bad.xyz"
    path.write_text("1 2 3\n1 2\n")
    with pytest.raises(FormatError):
        read_cloud(path)
