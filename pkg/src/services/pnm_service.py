"""Binary PGM (16-bit depth) and PPM (8-bit normals) reading and writing."""

import os

import numpy as np

from .errors import ImageFormatError

_WHITESPACE = b" \t\r\n"


def _header(magic: bytes, width: int, height: int, maxval: int, comment: str | None) -> bytes:
    lines = [magic]
    if comment:
        lines.append(b"# " + comment.replace("\n", " ").encode("ascii", errors="replace"))
    lines.append(f"{width} {height}".encode("ascii"))
    lines.append(str(maxval).encode("ascii"))
    return b"\n".join(lines) + b"\n"


def _parse(data: bytes, path) -> tuple[bytes, int, int, int, str | None, int]:
    """Returns (magic, width, height, maxval, comment, payload offset)."""
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: not a binary PGM/PPM file")
    magic = data[:2]
    pos = 2
    fields: list[int] = []
    comment = None
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1] in (b" ", b"\t", b"\r", b"\n"):
            pos += 1
        if pos >= len(data):
            raise ImageFormatError(f"{path}: header ends early")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise ImageFormatError(f"{path}: unterminated comment")
            if comment is None:
                comment = data[pos + 1:end].decode("ascii", errors="replace").strip()
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and data[pos] not in _WHITESPACE and data[pos:pos + 1] != b"#":
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise ImageFormatError(f"{path}: bad header field {token!r}")
        fields.append(int(token))
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise ImageFormatError(f"{path}: missing separator before raster")
    width, height, maxval = fields
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: bad dimensions {width}x{height} or maxval {maxval}")
    return magic, width, height, maxval, comment, pos + 1


def write_pgm16(path: str | os.PathLike, pixels: np.ndarray, comment: str | None = None) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError(f"PGM raster must be 2-D, got shape {pixels.shape}")
    height, width = pixels.shape
    with open(path, "wb") as f:
        f.write(_header(b"P5", width, height, 65535, comment))
        f.write(pixels.astype(">u2").tobytes())


def write_ppm(path: str | os.PathLike, pixels: np.ndarray, comment: str | None = None) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"PPM raster must be (H, W, 3), got shape {pixels.shape}")
    height, width, _ = pixels.shape
    with open(path, "wb") as f:
        f.write(_header(b"P6", width, height, 255, comment))
        f.write(pixels.astype(np.uint8).tobytes())


def read_pnm(path: str | os.PathLike) -> tuple[np.ndarray, str | None]:
    """Reads a P5 (16-bit) or P6 (8-bit) file; returns (raster, comment)."""
    with open(path, "rb") as f:
        data = f.read()
    magic, width, height, maxval, comment, offset = _parse(data, path)
    channels = 1 if magic == b"P5" else 3
    sample_size = 2 if maxval > 255 else 1
    expected = width * height * channels * sample_size
    payload = data[offset:]
    if len(payload) != expected:
        raise ImageFormatError(f"{path}: raster is {len(payload)} bytes, expected {expected}")
    dtype = ">u2" if sample_size == 2 else np.uint8
    raster = np.frombuffer(payload, dtype=dtype)
    if sample_size == 2:
        raster = raster.astype(np.uint16)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return raster.reshape(shape).copy(), comment


def read_pgm16(path: str | os.PathLike) -> tuple[np.ndarray, str | None]:
    raster, comment = read_pnm(path)
    if raster.ndim != 2 or raster.dtype != np.uint16:
        raise ImageFormatError(f"{path}: expected a 16-bit P5 depth image")
    return raster, comment


def read_ppm(path: str | os.PathLike) -> tuple[np.ndarray, str | None]:
    raster, comment = read_pnm(path)
    if raster.ndim != 3 or raster.dtype != np.uint8:
        raise ImageFormatError(f"{path}: expected an 8-bit P6 image")
    return raster, comment
