"""Versioned little-endian binary container with a CRC32 check.

Layout::

    magic (4 bytes) | version u32 | header length u32 | header bytes
    | payload length u64 | crc32 u32 of (header bytes + payload) | payload
"""
import struct
import zlib
from pathlib import Path


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedFileError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


def write_container(path, magic: bytes, version: int, header: bytes, payload: bytes):
    assert len(magic) == 4
    crc = zlib.crc32(header + payload) & 0xFFFFFFFF
    blob = b"".join([
        magic,
        struct.pack("<II", version, len(header)),
        header,
        struct.pack("<QI", len(payload), crc),
        payload,
    ])
    Path(path).write_bytes(blob)


def read_container(path, magic: bytes, version: int):
    """Return ``(header, payload)``; raises a specific ContainerError subclass on any defect."""
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise TruncatedFileError(f"{path}: file too short for a header ({len(blob)} bytes)")
    if blob[:4] != magic:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}, expected {magic!r}")
    found_version, hlen = struct.unpack_from("<II", blob, 4)
    if found_version != version:
        raise VersionMismatchError(f"{path}: format version {found_version}, this build reads {version}")
    pos = 12
    if len(blob) < pos + hlen + 12:
        raise TruncatedFileError(f"{path}: truncated header")
    header = blob[pos:pos + hlen]
    pos += hlen
    plen, crc = struct.unpack_from("<QI", blob, pos)
    pos += 12
    payload = blob[pos:pos + plen]
    if len(payload) != plen:
        raise TruncatedFileError(f"{path}: payload has {len(payload)} of {plen} bytes")
    if len(blob) != pos + plen:
        raise ContainerError(f"{path}: {len(blob) - pos - plen} trailing bytes")
    if zlib.crc32(header + payload) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{path}: CRC32 mismatch")
    return header, payload
