"""Volume and config persistence.

Native volumes are a headerless little-endian payload (``f32le`` for real
fields, ``u8`` for tissue maps and label masks) plus a JSON sidecar next to
it::

    conc_t10.f32        raw payload, x fastest, z slowest
    conc_t10.f32.json   {"nx":.., "ny":.., "nz":.., "dx":.., "dy":.., "dz":..,
                         "dtype": "f32le", "order": "zyx", "intent": "concentration",
                         "schema_version": 1}

An optional ``"rescale": {"min": a, "max": b}`` block on image volumes maps
stored values to [0, 1] on read. Float fields are stored as float32, so a
float64 field round-trips exactly only if its values are float32-representable.

A read-only subset of single-file NIfTI-1 (float32 / uint8 data) is
supported for ingesting external masks and tissue maps.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .errors import (BadMagic, MissingSidecar, SchemaVersionError, SizeMismatch,
                     UnknownDtype, UnsupportedDatatype, VolumeFormatError)
from .grid import GridSpec, LabelMask, ScalarField3D, TissueMap

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
INTENTS = ("concentration", "image", "tissue", "mask")
_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}

Volume = Union[ScalarField3D, TissueMap, LabelMask]


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, payload: dict) -> None:
    body = dict(payload)
    body.setdefault("schema_version", SCHEMA_VERSION)
    atomic_write_bytes(path, (json.dumps(body, indent=2, sort_keys=True) + "\n").encode())


def read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    check_schema(data, path)
    return data


def check_schema(data: dict, where="config") -> None:
    ver = data.get("schema_version")
    if ver is None:
        raise SchemaVersionError(f"{where}: missing schema_version")
    if int(float(ver)) != SCHEMA_VERSION:
        raise SchemaVersionError(f"{where}: unsupported schema_version {ver}")


def write_volume(path, vol: Volume, intent: str | None = None,
                 rescale: tuple[float, float] | None = None) -> None:
    path = Path(path)
    if isinstance(vol, TissueMap):
        dtype, intent = "u8", intent or "tissue"
    elif isinstance(vol, LabelMask):
        dtype, intent = "u8", intent or "mask"
    elif isinstance(vol, ScalarField3D):
        dtype, intent = "f32le", intent or "concentration"
    else:
        raise TypeError(f"cannot write {type(vol).__name__}")
    if intent not in INTENTS:
        raise ValueError(f"unknown intent {intent!r}")
    header = {**vol.spec.to_dict(), "dtype": dtype, "order": "zyx", "intent": intent,
              "schema_version": SCHEMA_VERSION}
    if rescale is not None:
        header["rescale"] = {"min": float(rescale[0]), "max": float(rescale[1])}
    atomic_write_bytes(path, vol.values.astype(_DTYPES[dtype]).tobytes())
    write_json(sidecar_path(path), header)


def write_array(path, spec: GridSpec, values: np.ndarray, intent: str = "image") -> None:
    write_volume(path, ScalarField3D(spec, np.asarray(values).reshape(-1)), intent=intent)


def read_volume(path) -> Volume:
    path = Path(path)
    side = sidecar_path(path)
    if not side.exists():
        raise MissingSidecar(f"{path}: sidecar {side.name} not found")
    header = read_json(side)
    dtype = header.get("dtype")
    if dtype not in _DTYPES:
        raise UnknownDtype(f"{side}: unknown dtype {dtype!r}")
    if header.get("order", "zyx") != "zyx":
        raise VolumeFormatError(f"{side}: only axis order 'zyx' is supported")
    spec = GridSpec(int(header["nx"]), int(header["ny"]), int(header["nz"]),
                    float(header.get("dx", 1.0)), float(header.get("dy", 1.0)),
                    float(header.get("dz", 1.0)))
    npdt = _DTYPES[dtype]
    expected = spec.size * npdt.itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise SizeMismatch(f"{path}: payload is {actual} bytes, header implies {expected}")
    raw = np.fromfile(path, dtype=npdt)
    intent = header.get("intent", "concentration" if dtype == "f32le" else "tissue")
    if intent == "tissue":
        return TissueMap(spec, raw)
    if intent == "mask":
        return LabelMask(spec, raw)
    vals = raw.astype(np.float64)
    rs = header.get("rescale")
    if intent == "image" and rs:
        lo, hi = float(rs["min"]), float(rs["max"])
        if hi <= lo:
            raise VolumeFormatError(f"{side}: rescale max must exceed min")
        vals = (vals - lo) / (hi - lo)
    return ScalarField3D(spec, vals)


# -- NIfTI-1 --------------------------------------------------------------------------

_NIFTI_DTYPES = {2: np.dtype("u1"), 16: np.dtype("f4")}


def read_nifti_subset(path) -> ScalarField3D:
    """Read a single-file NIfTI-1 volume with uint8 or float32 voxels.

    Only dims and pixdim are honoured; qform/sform orientation is ignored
    with a warning. Scaling (scl_slope/scl_inter) is applied when set.
    """
    data = Path(path).read_bytes()
    if len(data) < 348:
        raise BadMagic(f"{path}: too short for a NIfTI-1 header")
    if data[344:348] not in (b"n+1\x00", b"n+1"):
        raise BadMagic(f"{path}: magic {data[344:348]!r} is not single-file NIfTI-1")
    for endian in ("<", ">"):
        if struct.unpack(endian + "i", data[0:4])[0] == 348:
            break
    else:
        raise BadMagic(f"{path}: sizeof_hdr is not 348")
    dim = struct.unpack(endian + "8h", data[40:56])
    datatype, bitpix = struct.unpack(endian + "hh", data[70:74])
    pixdim = struct.unpack(endian + "8f", data[76:108])
    (vox_offset,) = struct.unpack(endian + "f", data[108:112])
    scl_slope, scl_inter = struct.unpack(endian + "ff", data[112:120])
    qform_code, sform_code = struct.unpack(endian + "hh", data[252:256])
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDatatype(f"{path}: NIfTI datatype {datatype} (only uint8=2, float32=16)")
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise VolumeFormatError(f"{path}: invalid dim[0]={ndim}")
    shape = [max(1, int(d)) for d in dim[1:4]]
    if ndim > 3 and any(d > 1 for d in dim[4:1 + ndim]):
        raise VolumeFormatError(f"{path}: only 3D volumes are supported, dims {dim}")
    spacing = [abs(float(p)) if p else 1.0 for p in pixdim[1:4]]
    spec = GridSpec(shape[0], shape[1], shape[2], *spacing)
    if qform_code or sform_code:
        log.warning("%s: orientation (qform/sform) ignored; only voxel spacing is used", path)
    dt = _NIFTI_DTYPES[datatype].newbyteorder(endian)
    offset = int(vox_offset) if vox_offset >= 348 else 352
    need = spec.size * dt.itemsize
    if len(data) - offset < need:
        raise SizeMismatch(f"{path}: {len(data) - offset} payload bytes, header implies {need}")
    vals = np.frombuffer(data, dtype=dt, count=spec.size, offset=offset).astype(np.float64)
    if scl_slope != 0.0 and (scl_slope, scl_inter) != (1.0, 0.0):
        vals = vals * scl_slope + scl_inter
    return ScalarField3D(spec, vals)


# -- CSV -------------------------------------------------------------------------------

def write_csv(path, header: list[str], rows: Iterable[list]) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow(r)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
