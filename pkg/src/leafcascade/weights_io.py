"""Binary weight archive.

Layout, all integers little-endian::

    b"SWPL" | u32 version | u32 entry count
    per entry: u16 name length | UTF-8 name | u8 dtype (1 = float32) | u8 rank
               | u64 extent * rank | raw payload
    u32 CRC32 of every preceding byte

Entries are written in dict order, which for network weights is definition
order, so saving the same weights twice yields identical bytes.
"""
import json
import struct
import zlib
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"SWPL"
VERSION = 1
DTYPE_F32 = 1
_DTYPES = {DTYPE_F32: np.dtype("<f4")}


class ArchiveError(ValueError):
    """Malformed archive: bad magic, version or structure."""


class IntegrityError(ArchiveError):
    """CRC mismatch."""


class UnsupportedDtype(ArchiveError):
    pass


def dumps(weights: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(weights))]
    for name, arr in weights.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise UnsupportedDtype(f"{name}: only float32 tensors can be archived, got {arr.dtype}")
        if arr.ndim > 255:
            raise ArchiveError(f"{name}: rank {arr.ndim} too large")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ArchiveError(f"{name}: name too long")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(data: bytes) -> dict:
    if len(data) < 16:
        raise ArchiveError("archive truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise IntegrityError("archive CRC mismatch")
    if body[:4] != MAGIC:
        raise ArchiveError(f"bad magic {body[:4]!r}")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            if code not in _DTYPES:
                raise UnsupportedDtype(f"{name}: unknown dtype code {code}")
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            dt = _DTYPES[code]
            nbytes = dt.itemsize * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(body):
                raise ArchiveError(f"{name}: payload truncated")
            if name in out:
                raise ArchiveError(f"duplicate entry {name!r}")
            out[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos) \
                .astype(np.float32).reshape(dims)
            pos += nbytes
    except struct.error as exc:
        raise ArchiveError(f"archive truncated: {exc}") from None
    if pos != len(body):
        raise ArchiveError("trailing bytes after last entry")
    return out


def save(weights: dict, path, netdef=None, trainable: Optional[dict] = None) -> Path:
    """Write the archive plus a ``.manifest.txt`` sidecar; returns the archive path."""
    path = Path(path)
    path.write_bytes(dumps(weights))
    write_manifest(weights, manifest_path(path), netdef, trainable)
    return path


def load(path) -> dict:
    return loads(Path(path).read_bytes())


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.txt")


def write_manifest(weights: dict, path, netdef=None, trainable: Optional[dict] = None) -> None:
    """Human-readable ``name<TAB>shape<TAB>trainable`` listing.

    When a NetworkDef is given its JSON form is stored on a ``# netdef``
    header line (this is where batchnorm epsilon/momentum are recorded).
    """
    from .netdef import netdef_to_dict, param_specs

    if trainable is None and netdef is not None:
        trainable = {name: flag for name, _, flag in param_specs(netdef)}
    lines = []
    if netdef is not None:
        lines.append("# netdef " + json.dumps(netdef_to_dict(netdef), separators=(",", ":")))
    for name, arr in weights.items():
        flag = "" if trainable is None else ("trainable" if trainable.get(name, False) else "non-trainable")
        lines.append(f"{name}\t{'x'.join(map(str, np.shape(arr)))}\t{flag}".rstrip())
    Path(path).write_text("\n".join(lines) + "\n")


def read_netdef(path):
    """NetworkDef stored next to an archive, or None."""
    from .netdef import netdef_from_dict

    mpath = manifest_path(path)
    if not mpath.exists():
        return None
    for line in mpath.read_text().splitlines():
        if line.startswith("# netdef "):
            return netdef_from_dict(json.loads(line[len("# netdef "):]))
    return None
