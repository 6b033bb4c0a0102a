import json
import logging
import struct

import numpy as np
import pytest

from tfk.errors import (BadMagic, MissingSidecar, SchemaVersionError, SizeMismatch,
                        UnknownDtype, UnsupportedDatatype)
from tfk.grid import GridSpec, LabelMask, ScalarField3D, TissueMap
from tfk.io import (read_csv, read_json, read_nifti_subset, read_volume, sidecar_path,
                    write_csv, write_json, write_volume)


def _nifti(dims, datatype=16, bitpix=32, payload=b"", magic=b"n+1\x00", pixdim=(1, 1, 1),
           qform=0, slope=0.0, inter=0.0):
    # field offsets from the NIfTI-1 header layout (348 bytes, data at 352)
    h = bytearray(348)
    struct.pack_into("<i", h, 0, 348)
    struct.pack_into("<8h", h, 40, len(dims), *dims, *([1] * (7 - len(dims))))
    struct.pack_into("<hh", h, 70, datatype, bitpix)
    struct.pack_into("<8f", h, 76, 1.0, *pixdim, 1, 1, 1, 1)
    struct.pack_into("<f", h, 108, 352.0)
    struct.pack_into("<ff", h, 112, slope, inter)
    struct.pack_into("<hh", h, 252, qform, 0)
    h[344:348] = magic
    return bytes(h) + b"\x00" * 4 + payload


def test_f32_payload_loads(tmp_path):
    p = tmp_path / "v.f32"
    vals = np.arange(64, dtype="<f4")
    p.write_bytes(vals.tobytes())
    assert p.stat().st_size == 256
    sidecar_path(p).write_text(json.dumps(
        {"nx": 4, "ny": 4, "nz": 4, "dtype": "f32le", "order": "zyx", "schema_version": 1}))
    f = read_volume(p)
    assert isinstance(f, ScalarField3D) and np.array_equal(f.values, vals)


def test_short_payload_is_size_mismatch(tmp_path):
    p = tmp_path / "v.f32"
    p.write_bytes(b"\x00" * 255)
    sidecar_path(p).write_text(json.dumps(
        {"nx": 4, "ny": 4, "nz": 4, "dtype": "f32le", "schema_version": 1}))
    with pytest.raises(SizeMismatch):
        read_volume(p)


def test_missing_sidecar_and_unknown_dtype(tmp_path):
    p = tmp_path / "v.f32"
    p.write_bytes(b"\x00" * 8)
    with pytest.raises(MissingSidecar):
        read_volume(p)
    sidecar_path(p).write_text(json.dumps(
        {"nx": 2, "ny": 1, "nz": 1, "dtype": "f64le", "schema_version": 1}))
    with pytest.raises(UnknownDtype):
        read_volume(p)


@pytest.mark.parametrize("kind", ["conc", "tissue", "mask"])
def test_round_trip_bitwise(tmp_path, kind, rng):
    spec = GridSpec(5, 3, 2, 1.0, 0.5, 2.0)
    if kind == "conc":
        vol = ScalarField3D(spec, rng.random(spec.size).astype(np.float32))
    elif kind == "tissue":
        vol = TissueMap(spec, rng.integers(0, 4, spec.size))
    else:
        vol = LabelMask(spec, rng.integers(0, 3, spec.size))
    write_volume(tmp_path / "x", vol)
    back = read_volume(tmp_path / "x")
    assert type(back) is type(vol) and back.spec == spec
    assert np.array_equal(back.values, vol.values)


def test_image_rescale(tmp_path):
    spec = GridSpec(2, 1, 1)
    write_volume(tmp_path / "i", ScalarField3D(spec, [10.0, 30.0]), intent="image",
                 rescale=(10.0, 30.0))
    assert np.array_equal(read_volume(tmp_path / "i").values, [0.0, 1.0])


def test_nifti_float32_byte_layout(tmp_path):
    vals = np.arange(512, dtype="<f4") / 7
    p = tmp_path / "a.nii"
    p.write_bytes(_nifti((8, 8, 8), payload=vals.tobytes(), pixdim=(1.0, 2.0, 0.5)))
    f = read_nifti_subset(p)
    assert f.spec.size == 512 and f.spec.shape == (8, 8, 8)
    assert f.spec.spacing == (1.0, 2.0, 0.5)
    assert np.array_equal(f.values, vals.astype(np.float64))


def test_nifti_uint8_scaling_and_orientation_warning(tmp_path, caplog):
    p = tmp_path / "b.nii"
    p.write_bytes(_nifti((2, 2, 1), datatype=2, bitpix=8, payload=bytes([0, 1, 2, 3]),
                         qform=1, slope=2.0, inter=1.0))
    with caplog.at_level(logging.WARNING):
        f = read_nifti_subset(p)
    assert np.array_equal(f.values, [1.0, 3.0, 5.0, 7.0])
    assert "orientation" in caplog.text


def test_nifti_errors(tmp_path):
    p = tmp_path / "c.nii"
    p.write_bytes(_nifti((2, 2, 2), payload=b"\x00" * 32, magic=b"ni1\x00"))
    with pytest.raises(BadMagic):
        read_nifti_subset(p)
    p.write_bytes(_nifti((2, 2, 2), datatype=1024, bitpix=64, payload=b"\x00" * 64))
    with pytest.raises(UnsupportedDatatype):
        read_nifti_subset(p)
    p.write_bytes(_nifti((2, 2, 2), payload=b"\x00" * 31))
    with pytest.raises(SizeMismatch):
        read_nifti_subset(p)


def test_json_schema_version(tmp_path):
    write_json(tmp_path / "a.json", {"x": 1})
    assert read_json(tmp_path / "a.json")["schema_version"] == 1
    (tmp_path / "b.json").write_text(json.dumps({"x": 1, "schema_version": 2}))
    with pytest.raises(SchemaVersionError):
        read_json(tmp_path / "b.json")
    (tmp_path / "c.json").write_text("{}")
    with pytest.raises(SchemaVersionError):
        read_json(tmp_path / "c.json")


def test_csv_round_trip(tmp_path):
    write_csv(tmp_path / "t.csv", ["a", "b"], [[1, "x"], [2.5, "y"]])
    assert read_csv(tmp_path / "t.csv") == [{"a": "1", "b": "x"}, {"a": "2.5", "b": "y"}]
