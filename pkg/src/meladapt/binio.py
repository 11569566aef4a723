"""Versioned binary container shared by corpus and checkpoint files.

Layout: 8-byte magic, u32 little-endian format version, u64 little-endian
header length, canonical JSON header (sorted keys, compact separators),
then the raw array buffers concatenated in header order (C order,
little-endian). Canonical JSON plus a fixed array ordering makes
save -> load -> save byte-identical.
"""

import json
import struct

import numpy as np

from . import errors

_DTYPES = {"f8": "<f8", "i8": "<i8"}


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, magic: bytes, version: int, meta: dict, arrays: dict):
    """`arrays` maps name -> ndarray (float64 or int64); written name-sorted."""
    assert len(magic) == 8
    entries = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype == np.float64:
            code = "f8"
        elif arr.dtype == np.int64:
            code = "i8"
        else:
            raise errors.CheckpointFormatError(
                f"array '{name}' has unsupported dtype {arr.dtype}"
            )
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape)})
    header = _canonical_json({"meta": meta, "arrays": entries})
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", version))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for entry in entries:
            arr = np.ascontiguousarray(arrays[entry["name"]])
            fh.write(arr.astype(_DTYPES[entry["dtype"]], copy=False).tobytes())


def read_container(path, magic: bytes, version: int):
    """Returns (meta, arrays). Raises CheckpointFormatError with a specific
    code on bad magic, wrong version, truncation, or trailing garbage."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20:
        raise errors.truncated(f"{path}: file shorter than any valid header")
    if blob[:8] != magic:
        raise errors.magic_mismatch(
            f"{path}: magic {blob[:8]!r} does not match expected {magic!r}"
        )
    (got_version,) = struct.unpack("<I", blob[8:12])
    if got_version != version:
        raise errors.version_mismatch(
            f"{path}: format version {got_version}, this build reads {version}"
        )
    (hlen,) = struct.unpack("<Q", blob[12:20])
    if len(blob) < 20 + hlen:
        raise errors.truncated(f"{path}: header cut short")
    try:
        header = json.loads(blob[20:20 + hlen].decode("utf-8"))
        meta, entries = header["meta"], header["arrays"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise errors.CheckpointFormatError(f"{path}: unreadable header: {exc}") from exc
    arrays = {}
    offset = 20 + hlen
    for entry in entries:
        try:
            name, dtype, shape = entry["name"], entry["dtype"], tuple(entry["shape"])
        except (KeyError, TypeError) as exc:
            raise errors.CheckpointFormatError(f"{path}: malformed array entry") from exc
        if dtype not in _DTYPES:
            raise errors.CheckpointFormatError(f"{path}: unknown dtype '{dtype}'")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + nbytes > len(blob):
            raise errors.truncated(f"{path}: array '{name}' cut short")
        arrays[name] = np.frombuffer(
            blob, dtype=_DTYPES[dtype], count=nbytes // 8, offset=offset
        ).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise errors.CheckpointFormatError(
            f"{path}: {len(blob) - offset} trailing bytes after last array"
        )
    return meta, arrays
