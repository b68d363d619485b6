"""Self-describing ``.dpcc`` bitstream: fixed header then three length-prefixed streams.

Stream order is (y_l, z, y_h) so the hyper latent is available before the
detail stream whose tables it parameterizes. All integers are little-endian.
"""
import struct
from typing import Sequence, Tuple

from pydantic import ValidationError

from app.core.exceptions import ContainerError
from app.schemas.records import ContainerHeader

MAGIC = b"DPCC"
VERSION = 1
HEADER_FORMAT = "<4sBIHHHHQh3ff"
HEADER_SIZE = struct.calcsize(HEADER_FORMAT)
LENGTH_FORMAT = "<I"
LENGTH_SIZE = struct.calcsize(LENGTH_FORMAT)
STREAM_NAMES = ("y_l", "z", "y_h")


def container_size(payload_lengths: Sequence[int]) -> int:
    return HEADER_SIZE + sum(LENGTH_SIZE + n for n in payload_lengths)


def pack_container(header: ContainerHeader, payloads: Sequence[bytes]) -> bytes:
    if len(payloads) != len(STREAM_NAMES):
        raise ContainerError(
            "Container holds exactly three streams", details={"got": len(payloads)}
        )
    parts = [
        struct.pack(
            HEADER_FORMAT,
            MAGIC,
            VERSION,
            header.N,
            header.S,
            header.C,
            header.C_z,
            header.T,
            header.seed,
            header.label,
            *header.center,
            header.scale,
        )
    ]
    for name, payload in zip(STREAM_NAMES, payloads):
        if len(payload) > 0xFFFFFFFF:
            raise ContainerError("Stream too long for a u32 length", details={"stream": name})
        parts.append(struct.pack(LENGTH_FORMAT, len(payload)))
        parts.append(bytes(payload))
    return b"".join(parts)


def unpack_container(data: bytes) -> Tuple[ContainerHeader, Tuple[bytes, bytes, bytes]]:
    if len(data) < HEADER_SIZE:
        raise ContainerError(
            "Short read in container header", details={"bytes": len(data), "needed": HEADER_SIZE}
        )
    magic, version, N, S, C, C_z, T, seed, label, cx, cy, cz, scale = struct.unpack_from(
        HEADER_FORMAT, data, 0
    )
    if magic != MAGIC:
        raise ContainerError("Not a DPCC container", details={"magic": magic.hex()})
    if version != VERSION:
        raise ContainerError(
            "Unsupported container version", details={"version": version, "supported": VERSION}
        )
    try:
        header = ContainerHeader(
            N=N, S=S, C=C, C_z=C_z, T=T, seed=seed, label=label, center=(cx, cy, cz), scale=scale
        )
    except ValidationError as exc:
        raise ContainerError("Invalid container header", details={"errors": str(exc)})

    offset = HEADER_SIZE
    payloads = []
    for name in STREAM_NAMES:
        if offset + LENGTH_SIZE > len(data):
            raise ContainerError("Short read in stream length", details={"stream": name})
        (length,) = struct.unpack_from(LENGTH_FORMAT, data, offset)
        offset += LENGTH_SIZE
        if offset + length > len(data):
            raise ContainerError(
                "Stream length overruns the container",
                details={"stream": name, "length": length, "available": len(data) - offset},
            )
        payloads.append(bytes(data[offset : offset + length]))
        offset += length
    if offset != len(data):
        raise ContainerError(
            "Trailing bytes after the last stream", details={"extra": len(data) - offset}
        )
    return header, (payloads[0], payloads[1], payloads[2])
