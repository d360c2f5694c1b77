"""Sectioned little-endian binary container used by checkpoints and bitstreams.

Layout: 4-byte magic, u16 version, u32 section count, then per section a
(u8 tag, u64 length) table entry, then all payloads in table order.
"""

from __future__ import annotations

import struct

from .errors import IntegrityError

_HEADER = struct.Struct("<4sHI")
_ENTRY = struct.Struct("<BQ")


def write_container(magic: bytes, version: int, sections: list[tuple[int, bytes]]) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    parts = [_HEADER.pack(magic, version, len(sections))]
    for tag, payload in sections:
        parts.append(_ENTRY.pack(tag, len(payload)))
    for _, payload in sections:
        parts.append(payload)
    return b"".join(parts)


def read_container(blob: bytes, magic: bytes, max_version: int) -> tuple[int, list[tuple[int, bytes]]]:
    if len(blob) < _HEADER.size:
        raise IntegrityError("container truncated before header")
    got_magic, version, count = _HEADER.unpack_from(blob, 0)
    if got_magic != magic:
        raise IntegrityError(f"bad magic {got_magic!r}, expected {magic!r}")
    if version > max_version:
        raise IntegrityError(f"unsupported container version {version} (max {max_version})")
    off = _HEADER.size
    table = []
    for _ in range(count):
        if off + _ENTRY.size > len(blob):
            raise IntegrityError("container truncated in section table")
        tag, length = _ENTRY.unpack_from(blob, off)
        table.append((tag, length))
        off += _ENTRY.size
    sections = []
    for tag, length in table:
        if off + length > len(blob):
            raise IntegrityError(f"section {tag} overruns container")
        sections.append((tag, blob[off:off + length]))
        off += length
    if off != len(blob):
        raise IntegrityError(f"{len(blob) - off} trailing bytes after sections")
    return version, sections


def header_size(n_sections: int) -> int:
    return _HEADER.size + n_sections * _ENTRY.size
