"""Versioned binary container for named arrays, with a plain-text sidecar.

Layout: 16-byte magic, little-endian uint64 header length, UTF-8 JSON
header (array names, dtypes, shapes, byte offsets, free-form metadata),
then the raw little-endian 64-bit arrays back to back.  The sidecar
``<file>.txt`` lists the same information one array per line.
"""

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"ROMNETARRAYS\x00v01"
VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}

assert len(MAGIC) == 16


class ContainerError(IOError):
    pass


def _as_storable(a):
    a = np.asarray(a)
    if a.dtype.kind in "biu":
        return "i8", np.ascontiguousarray(a, dtype=_DTYPES["i8"])
    if a.dtype.kind == "f":
        return "f8", np.ascontiguousarray(a, dtype=_DTYPES["f8"])
    raise ContainerError(f"unsupported dtype {a.dtype}")


def atomic_write_bytes(path, data):
    """Write ``data`` to a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def save_arrays(path, arrays, meta=None):
    """Store a mapping ``name -> array``; returns the sha256 of the file."""
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        code, a = _as_storable(arrays[name])
        raw = a.tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(a.shape), "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": VERSION, "arrays": entries, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    data = MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)
    atomic_write_bytes(path, data)
    digest = hashlib.sha256(data).hexdigest()
    lines = [f"format romnet-arrays v{VERSION}", f"sha256 {digest}"]
    for e in entries:
        lines.append(f"array {e['name']} {e['dtype']} {'x'.join(map(str, e['shape'])) or 'scalar'}")
    for k in sorted(meta or {}):
        lines.append(f"meta {k} {json.dumps(meta[k])}")
    atomic_write_text(os.fspath(path) + ".txt", "\n".join(lines) + "\n")
    return digest


def load_arrays(path, with_meta=False):
    with open(path, "rb") as f:
        data = f.read()
    if data[:16] != MAGIC:
        raise ContainerError(f"{path}: bad magic")
    (hlen,) = struct.unpack("<Q", data[16:24])
    header = json.loads(data[24:24 + hlen].decode("utf-8"))
    if header.get("version") != VERSION:
        raise ContainerError(f"{path}: unsupported container version {header.get('version')}")
    base = 24 + hlen
    out = {}
    for e in header["arrays"]:
        buf = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise ContainerError(f"{path}: truncated array {e['name']}")
        out[e["name"]] = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return (out, header["meta"]) if with_meta else out


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
