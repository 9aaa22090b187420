"""Binary PGM/PPM (Netpbm P5/P6) and 8-bit PNG encode/decode using only the stdlib.

Arrays are uint8 of shape (H, W) for grayscale or (H, W, 3) for RGB.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


# Netpbm ------------------------------------------------------------------------

def _pnm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace() and buf[j:j + 1] != b"#":
            j += 1
        if j == i:
            raise ImageFormatError("truncated Netpbm header")
        tokens.append(buf[i:j])
        i = j
    return tokens, i + 1  # exactly one whitespace byte ends the header


def decode_pnm(buf: bytes) -> np.ndarray:
    (magic, w, h, maxval), off = _pnm_tokens(buf, 4)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported Netpbm magic {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"bad maxval {maxval}")
    ch = 3 if magic == b"P6" else 1
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * ch
    if len(buf) - off < n * np.dtype(dtype).itemsize:
        raise ImageFormatError("truncated Netpbm pixel data")
    data = np.frombuffer(buf, dtype=dtype, count=n, offset=off)
    arr = data.astype(np.float64) * (255.0 / maxval)
    arr = np.rint(arr).astype(np.uint8)
    return arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)


def encode_pnm(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"cannot encode array of shape {arr.shape} as PGM/PPM")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + arr.tobytes()


# PNG ----------------------------------------------------------------------------

def _chunk(kind: bytes, data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", zlib.crc32(kind + data))


def encode_png(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim == 2:
        color, ch = 0, 1
    elif arr.ndim == 3 and arr.shape[2] == 3:
        color, ch = 2, 3
    else:
        raise ImageFormatError(f"cannot encode array of shape {arr.shape} as PNG")
    h, w = arr.shape[:2]
    rows = arr.reshape(h, w * ch)
    raw = b"".join(b"\x00" + rows[y].tobytes() for y in range(h))
    return (PNG_SIGNATURE
            + _chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, color, 0, 0, 0))
            + _chunk(b"IDAT", zlib.compress(raw, 9))
            + _chunk(b"IEND", b""))


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(raw: bytes, h: int, stride: int, bpp: int) -> np.ndarray:
    out = np.zeros((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int32)
    pos = 0
    for y in range(h):
        ftype = raw[pos]
        line = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=pos + 1).astype(np.int32)
        pos += stride + 1
        if ftype == 0:
            cur = line
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype in (1, 3, 4):
            cur = line.copy()
            for x in range(stride):
                left = cur[x - bpp] if x >= bpp else 0
                if ftype == 1:
                    cur[x] = (cur[x] + left) & 0xFF
                elif ftype == 3:
                    cur[x] = (cur[x] + ((left + prev[x]) >> 1)) & 0xFF
                else:
                    ul = prev[x - bpp] if x >= bpp else 0
                    cur[x] = (cur[x] + _paeth(left, int(prev[x]), int(ul))) & 0xFF
        else:
            raise ImageFormatError(f"bad PNG filter type {ftype}")
        out[y] = cur
        prev = cur
    return out


def decode_png(buf: bytes) -> np.ndarray:
    """Decode 8-bit, non-interlaced gray/gray+alpha/RGB/RGBA PNGs (alpha is dropped)."""
    if not buf.startswith(PNG_SIGNATURE):
        raise ImageFormatError("not a PNG file")
    pos = len(PNG_SIGNATURE)
    ihdr, idat = None, []
    while pos + 8 <= len(buf):
        length, kind = struct.unpack(">I4s", buf[pos:pos + 8])
        data = buf[pos + 8:pos + 8 + length]
        if len(data) != length or pos + 12 + length > len(buf):
            raise ImageFormatError("truncated PNG chunk")
        (crc,) = struct.unpack(">I", buf[pos + 8 + length:pos + 12 + length])
        if crc != zlib.crc32(kind + data):
            raise ImageFormatError(f"CRC mismatch in {kind!r} chunk")
        pos += 12 + length
        if kind == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", data)
        elif kind == b"IDAT":
            idat.append(data)
        elif kind == b"IEND":
            break
    if ihdr is None or not idat:
        raise ImageFormatError("PNG missing IHDR or IDAT")
    w, h, depth, color, _, _, interlace = ihdr
    channels = {0: 1, 2: 3, 4: 2, 6: 4}.get(color)
    if depth != 8 or channels is None or interlace:
        raise ImageFormatError(f"unsupported PNG (depth={depth}, color={color}, interlace={interlace})")
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise ImageFormatError(f"corrupt PNG data: {exc}") from exc
    stride = w * channels
    if len(raw) < h * (stride + 1):
        raise ImageFormatError("truncated PNG image data")
    px = _unfilter(raw, h, stride, channels).reshape(h, w, channels)
    if channels in (1, 2):
        return px[:, :, 0].copy()
    return px[:, :, :3].copy()


# file level ----------------------------------------------------------------------

SUFFIXES = {".pgm": "pnm", ".ppm": "pnm", ".pnm": "pnm", ".png": "png"}


def read_image(path) -> np.ndarray:
    path = Path(path)
    kind = SUFFIXES.get(path.suffix.lower())
    if kind is None:
        raise ImageFormatError(f"{path}: unsupported extension")
    buf = path.read_bytes()
    return decode_png(buf) if kind == "png" else decode_pnm(buf)


def write_image(path, arr: np.ndarray) -> None:
    path = Path(path)
    kind = SUFFIXES.get(path.suffix.lower())
    if kind is None:
        raise ImageFormatError(f"{path}: unsupported extension")
    path.write_bytes(encode_png(arr) if kind == "png" else encode_pnm(arr))


def to_uint8(img: np.ndarray) -> np.ndarray:
    """CHW float in [0, 1] -> HW or HW3 uint8 (values clipped)."""
    img = np.asarray(img)
    q = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if q.ndim == 3:
        q = q[0] if q.shape[0] == 1 else q.transpose(1, 2, 0)
    return q


def from_uint8(arr: np.ndarray) -> np.ndarray:
    """HW or HW3 uint8 -> CHW float32 in [0, 1]."""
    f = np.asarray(arr, dtype=np.float32) / 255.0
    return f[None] if f.ndim == 2 else f.transpose(2, 0, 1).copy()


def tile(images: np.ndarray, ncols: int = 8, pad: int = 1, fill: float = 1.0) -> np.ndarray:
    """Arrange a (N, C, H, W) batch into one CHW grid image, row-major."""
    images = np.asarray(images)
    n, c, h, w = images.shape
    ncols = max(1, min(ncols, n))
    nrows = -(-n // ncols)
    grid = np.full((c, nrows * (h + pad) + pad, ncols * (w + pad) + pad), fill, dtype=np.float64)
    for i in range(n):
        r, q = divmod(i, ncols)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        grid[:, y:y + h, x:x + w] = images[i]
    return grid
