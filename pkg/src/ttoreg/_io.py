"""Header + raw payload file pairs shared by volumes, masks, fields and checkpoints."""
import json
import os
import tempfile
from pathlib import Path

import numpy as np

DTYPES = {
    "f32le": (np.dtype("<f4"), 1),
    "u8": (np.dtype("u1"), 1),
    "f32le_vec3": (np.dtype("<f4"), 3),
}


class FormatError(ValueError):
    """A header/payload pair is malformed or inconsistent."""


def header_path(path):
    """Normalise ``foo``, ``foo.json`` or ``foo.raw`` to the header path."""
    p = Path(path)
    if p.suffix == ".json":
        return p
    if p.suffix == ".raw":
        return p.with_suffix(".json")
    return p.with_name(p.name + ".json")


def atomic_write_bytes(path, data):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-" + path.name)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write_bytes(path, (json.dumps(obj, indent=2) + "\n").encode())


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_grid(path, array, dtype_tag, spacing):
    """Write a ``(nz, ny, nx[, 3])`` array as header + little-endian payload."""
    hdr = header_path(path)
    raw = hdr.with_suffix(".raw")
    dt, ncomp = DTYPES[dtype_tag]
    nz, ny, nx = array.shape[:3]
    payload = np.ascontiguousarray(array, dtype=dt).tobytes()
    atomic_write_bytes(raw, payload)
    write_json(hdr, {
        "dims": [int(nx), int(ny), int(nz)],
        "spacing_mm": [float(s) for s in spacing],
        "dtype": dtype_tag,
        "data": raw.name,
    })
    return hdr


def read_grid(path, expect=None):
    """Read a header + payload pair; returns ``(array, spacing, dtype_tag)``."""
    hdr = header_path(path)
    if not hdr.exists():
        raise FileNotFoundError(f"missing header {hdr}")
    meta = read_json(hdr)
    for key in ("dims", "spacing_mm", "dtype", "data"):
        if key not in meta:
            raise FormatError(f"{hdr}: header lacks {key!r}")
    tag = meta["dtype"]
    if tag not in DTYPES:
        raise FormatError(f"{hdr}: unknown dtype {tag!r}")
    if expect is not None and tag not in expect:
        raise FormatError(f"{hdr}: expected dtype in {expect}, got {tag!r}")
    raw = hdr.parent / meta["data"]
    if not raw.exists():
        raise FileNotFoundError(f"missing payload {raw}")
    nx, ny, nz = (int(d) for d in meta["dims"])
    dt, ncomp = DTYPES[tag]
    payload = raw.read_bytes()
    want = nx * ny * nz * ncomp * dt.itemsize
    if len(payload) != want:
        raise FormatError(
            f"{raw}: payload is {len(payload)} bytes, header dims {[nx, ny, nz]} "
            f"with dtype {tag} need {want}"
        )
    shape = (nz, ny, nx) if ncomp == 1 else (nz, ny, nx, ncomp)
    arr = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return arr, tuple(float(s) for s in meta["spacing_mm"]), tag
