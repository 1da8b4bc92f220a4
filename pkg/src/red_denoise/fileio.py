"""Binary and text file formats: RTF1 tensors, 16-bit PGM images, pair manifests.

RTF1 layout (little-endian)::

    b"RTENSOR1" | u32 rank | rank x u32 extents | row-major float64 values

Manifest: one tab-separated line per image pair,
``seed  N0  views  clean_path  noisy_path``; paths are relative to the
manifest's directory.  Blank lines and lines starting with ``#`` are skipped.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from .errors import FormatError, VersionMismatch

RTF_MAGIC = b"RTENSOR1"
PGM_MAX16 = 65535

PathLike = Union[str, Path]


def write_rtf(stream: BinaryIO, array) -> None:
    arr = np.asarray(array, dtype="<f8", order="C")
    stream.write(RTF_MAGIC)
    stream.write(struct.pack("<I", arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    stream.write(arr.tobytes(order="C"))


def read_rtf(stream: BinaryIO) -> np.ndarray:
    magic = stream.read(8)
    if magic != RTF_MAGIC:
        raise VersionMismatch(f"not an RTF1 tensor (magic {magic!r})")
    head = stream.read(4)
    if len(head) != 4:
        raise FormatError("truncated RTF1 header")
    (rank,) = struct.unpack("<I", head)
    ext = stream.read(4 * rank)
    if len(ext) != 4 * rank:
        raise FormatError("truncated RTF1 extents")
    shape = struct.unpack(f"<{rank}I", ext)
    count = int(np.prod(shape, dtype=np.int64))
    payload = stream.read(8 * count)
    if len(payload) != 8 * count:
        raise FormatError(f"truncated RTF1 payload: expected {8 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def rtf_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_rtf(buf, array)
    return buf.getvalue()


def save_rtf(path: PathLike, array) -> None:
    with open(path, "wb") as fh:
        write_rtf(fh, array)


def load_rtf(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_rtf(fh)


# ---------------------------------------------------------------------------
# PGM


def _pgm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers after the magic."""
    tokens = []
    pos = 2
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed PGM header")
        tokens.append(int(data[start:pos]))
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pgm(path: PathLike) -> tuple[np.ndarray, int]:
    """Load a binary (P5) PGM.

    Returns:
        (image, maxval) where ``image`` is ``[1, H, W]`` float64 scaled to
        [0, 1] by dividing by ``maxval``.
    """
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    (width, height, maxval), offset = _pgm_tokens(data, 3)
    if not 0 < maxval <= PGM_MAX16:
        raise FormatError(f"{path}: bad maxval {maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    nbytes = width * height * np.dtype(dtype).itemsize
    raster = data[offset : offset + nbytes]
    if len(raster) != nbytes:
        raise FormatError(f"{path}: truncated raster")
    pix = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    return (pix.astype(np.float64) / maxval)[None], maxval


def write_pgm(path: PathLike, image, maxval: int = PGM_MAX16) -> None:
    """Write a ``[1, H, W]`` or ``[H, W]`` image in [0, 1] as binary PGM.

    Values are clipped to [0, 1] and stored as ``round(pixel * maxval)``.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise FormatError(f"PGM holds a single channel, got shape {img.shape}")
        img = img[0]
    if img.ndim != 2:
        raise FormatError(f"cannot write shape {img.shape} as PGM")
    h, w = img.shape
    dtype = ">u2" if maxval > 255 else "u1"
    pix = np.rint(np.clip(img, 0.0, 1.0) * maxval).astype(dtype)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(pix.tobytes())


def sniff_format(path: PathLike) -> str:
    """Return ``"rtf"`` or ``"pgm"`` based on the file's leading bytes."""
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == RTF_MAGIC:
        return "rtf"
    if head[:2] == b"P5":
        return "pgm"
    raise FormatError(f"{path}: unrecognised image format")


def load_image(path: PathLike) -> np.ndarray:
    """Load an RTF1 or PGM image as ``[1, H, W]`` float64."""
    if sniff_format(path) == "pgm":
        return read_pgm(path)[0]
    img = load_rtf(path)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] != 1:
        raise FormatError(f"{path}: expected a single-channel image, got shape {img.shape}")
    return img


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    seed: int
    photons: float
    views: int
    clean: Path
    noisy: Path

    @property
    def id(self) -> str:
        stem = self.clean.stem
        return stem[: -len("_clean")] if stem.endswith("_clean") else stem


def format_manifest_line(entry: ManifestEntry, root: Path) -> str:
    clean, noisy = (Path(os.path.relpath(Path(p).resolve(), root)).as_posix() for p in (entry.clean, entry.noisy))
    return f"{entry.seed}\t{entry.photons:g}\t{entry.views}\t{clean}\t{noisy}\n"


def write_manifest(path: PathLike, entries) -> None:
    path = Path(path)
    root = path.parent.resolve()
    lines = [format_manifest_line(e, root) for e in entries]
    path.write_text("".join(lines), encoding="utf-8", newline="\n")


def read_manifest(path: PathLike) -> list[ManifestEntry]:
    path = Path(path)
    root = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise FormatError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(fields)}")
        try:
            seed, photons, views = int(fields[0]), float(fields[1]), int(fields[2])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        entries.append(ManifestEntry(seed, photons, views, root / fields[3], root / fields[4]))
    return entries
