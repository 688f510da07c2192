import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dirlcc.errors import FormatError
from dirlcc.featio import HEADER_SIZE, MAGIC, load_dataset, read_features, save_dataset, write_features
from dirlcc.scenes import FeatureGrid, generate_dataset

f32 = st.floats(-1e6, 1e6, allow_nan=False, width=32)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 7)), elements=f32))
def test_round_trip_is_bit_exact(tmp_path_factory, vals):
    path = tmp_path_factory.mktemp("f") / "x.feat"
    grid = FeatureGrid(vals.astype(np.float64))
    write_features(grid, path)
    assert read_features(path) == grid


def test_paper_shaped_grid_is_accepted(tmp_path):
    vals = np.random.default_rng(0).normal(size=(14, 14, 1024)).astype(np.float32)
    write_features(FeatureGrid(vals), tmp_path / "r.feat")
    back = read_features(tmp_path / "r.feat")
    assert back.values.shape == (14, 14, 1024)
    np.testing.assert_array_equal(back.values, vals)


def test_layout_is_row_major_little_endian(tmp_path):
    vals = np.arange(2 * 3 * 4, dtype=np.float64).reshape(2, 3, 4)
    write_features(FeatureGrid(vals), tmp_path / "a.feat")
    raw = (tmp_path / "a.feat").read_bytes()
    assert raw[:8] == b"DIRLFEAT"
    assert struct.unpack("<IIII", raw[8:24]) == (1, 2, 3, 4)
    assert struct.unpack("<f", raw[24 + 4 * 5: 24 + 4 * 6])[0] == 5.0


def _write(tmp_path, raw):
    p = tmp_path / "bad.feat"
    p.write_bytes(raw)
    return p


def _good_bytes(tmp_path):
    write_features(FeatureGrid(np.ones((2, 2, 3))), tmp_path / "g.feat")
    return (tmp_path / "g.feat").read_bytes()


def test_wrong_magic(tmp_path):
    raw = _good_bytes(tmp_path)
    with pytest.raises(FormatError, match="offset 0"):
        read_features(_write(tmp_path, b"NOTAFEAT" + raw[8:]))


def test_truncated_payload_reports_offset(tmp_path):
    raw = _good_bytes(tmp_path)
    with pytest.raises(FormatError) as err:
        read_features(_write(tmp_path, raw[:-5]))
    assert err.value.offset == len(raw) - 5


def test_truncated_header(tmp_path):
    with pytest.raises(FormatError):
        read_features(_write(tmp_path, MAGIC + b"\x01\x00"))


def test_dimension_overflow(tmp_path):
    raw = MAGIC + struct.pack("<IIII", 1, 65535, 65535, 65535)
    with pytest.raises(FormatError, match="dimensions") as err:
        read_features(_write(tmp_path, raw))
    assert err.value.offset == len(MAGIC) + 4


def test_wrong_version_and_trailing_bytes(tmp_path):
    raw = _good_bytes(tmp_path)
    with pytest.raises(FormatError, match="version"):
        read_features(_write(tmp_path, MAGIC + struct.pack("<I", 2) + raw[12:]))
    with pytest.raises(FormatError, match="trailing"):
        read_features(_write(tmp_path, raw + b"\x00"))


def test_non_finite_payload(tmp_path):
    raw = bytearray(_good_bytes(tmp_path))
    raw[HEADER_SIZE + 8: HEADER_SIZE + 12] = struct.pack("<f", float("nan"))
    with pytest.raises(FormatError) as err:
        read_features(_write(tmp_path, bytes(raw)))
    assert err.value.offset == HEADER_SIZE + 8


def test_dataset_manifest_round_trip(tmp_path):
    samples = generate_dataset(7, 3)
    manifest = save_dataset(samples, tmp_path)
    records = [json.loads(line) for line in manifest.read_text().splitlines()]
    assert {"seed", "change_type", "caption", "before_path", "after_path",
            "change_cells", "distractor"} <= set(records[0])
    back = load_dataset(tmp_path)
    for a, b in zip(samples, back):
        assert a.digest() == b.digest()
        assert a.change_cells() == b.change_cells()


def test_bad_manifest(tmp_path):
    with pytest.raises(FormatError):
        load_dataset(tmp_path)
    (tmp_path / "manifest.jsonl").write_text('{"seed": 1}\n')
    with pytest.raises(FormatError, match="offset 0"):
        load_dataset(tmp_path)
