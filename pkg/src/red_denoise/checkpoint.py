"""RDCK1 model checkpoints.

Layout::

    b"RDCK1\\0\\0\\0"            8-byte magic
    u32 length + UTF-8 block   "key=value" lines of the RedConfig
    RTF1 tensor * P            parameters in ``parameters()`` order
    u64 checksum               BLAKE2b-64 of every preceding byte

Loading verifies the magic first, then the checksum, then the topology.
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

from .errors import ChecksumMismatch, FormatError, VersionMismatch
from .fileio import read_rtf, write_rtf
from .model import RedConfig, RedModel, build, parameters, with_parameters

MAGIC = b"RDCK1\x00\x00\x00"
_CONFIG_KEYS = ("num_layers", "channels", "kernel_size", "seed")


def _digest(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def checkpoint_bytes(model: RedModel) -> bytes:
    cfg = "".join(f"{k}={getattr(model.config, k)}\n" for k in _CONFIG_KEYS).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    for p in parameters(model):
        write_rtf(buf, p.data)
    body = buf.getvalue()
    return body + _digest(body)


def checkpoint_id(data: bytes) -> str:
    """Short identifier of a serialized checkpoint (its checksum in hex)."""
    return data[-8:].hex()


def save_checkpoint(model: RedModel, path) -> str:
    """Write ``model`` to ``path``; returns the checkpoint id."""
    data = checkpoint_bytes(model)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return checkpoint_id(data)


def parse_checkpoint(data: bytes) -> RedModel:
    if len(data) >= len(MAGIC) and data[: len(MAGIC)] != MAGIC:
        raise VersionMismatch(f"not an RDCK1 checkpoint (magic {data[:8]!r})")
    if len(data) < len(MAGIC) + 4 + 8:
        raise ChecksumMismatch("checkpoint truncated")
    body, stored = data[:-8], data[-8:]
    if _digest(body) != stored:
        raise ChecksumMismatch("checkpoint checksum does not match its contents")

    stream = io.BytesIO(body)
    stream.seek(len(MAGIC))
    (n,) = struct.unpack("<I", stream.read(4))
    text = stream.read(n).decode("utf-8")
    values = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep or key not in _CONFIG_KEYS:
            raise FormatError(f"bad checkpoint config line {line!r}")
        values[key] = int(value)
    config = RedConfig(**values)
    template = build(config)
    arrays = [read_rtf(stream) for _ in parameters(template)]
    if stream.read(1):
        raise FormatError("trailing bytes after checkpoint parameters")
    return with_parameters(template, arrays)


def load_checkpoint(path) -> RedModel:
    """Read an RDCK1 file.

    Raises:
        OSError: file unreadable.
        VersionMismatch: wrong magic.
        ChecksumMismatch: truncated or corrupted payload.
    """
    return parse_checkpoint(Path(path).read_bytes())
