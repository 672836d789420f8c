"""Convert raw binaries into normalized image tensors.

Pipeline: bytes -> 1-D array in [0,1] (divide by 255) -> 2-D gray image whose
width comes from the file-size lookup table (zero-padded to a full last row)
-> bilinear resize to a square -> optional channel replication to RGB.

Images are float32 throughout so that the ``.mimg`` store (raw f32) round-trips
bit-exactly. Resizing interpolates in float64 and casts the result once.
"""

from __future__ import annotations

import struct
from typing import Sequence

import numpy as np

from .errors import BadMagic, EmptyInput, ShapeMismatch, TruncatedFile

# (upper bound in kb, width); intervals are half-open (lo, hi] with 1 kb = 1024
# bytes. Sizes above the last bound map to width 2048.
WIDTH_TABLE = [
    (10, 32),
    (30, 64),
    (60, 128),
    (100, 256),
    (200, 384),
    (500, 512),
    (1000, 768),
    (2000, 1024),
]
WIDTH_ABOVE_TABLE = 2048

MIMG_MAGIC = b"MIMG"
MIMG_VERSION = 1


def width_for_size(file_size_bytes: int) -> int:
    """Image width for a file of the given size in bytes."""
    if file_size_bytes < 1:
        raise EmptyInput("file size must be >= 1 byte")
    for hi_kb, width in WIDTH_TABLE:
        if file_size_bytes <= hi_kb * 1024:
            return width
    return WIDTH_ABOVE_TABLE


def bytes_to_gray(data: bytes) -> np.ndarray:
    """Map a byte string to a (height, width) float32 image in [0,1].

    Width is chosen by ``width_for_size``; the height is rounded up and the
    trailing pixels of the last row are zero-padded. Each byte b becomes
    b / 255.
    """
    n = len(data)
    if n == 0:
        raise EmptyInput("cannot image an empty byte stream")
    width = width_for_size(n)
    height = -(-n // width)
    flat = np.zeros(height * width, dtype=np.float32)
    flat[:n] = np.frombuffer(data, dtype=np.uint8).astype(np.float32)
    flat /= np.float32(255.0)
    return flat.reshape(height, width)


def resize_bilinear(img: np.ndarray, side: int) -> np.ndarray:
    """Resize a 2-D image to side x side with pixel-center bilinear sampling.

    Output pixel centers map to input coordinates (i + 0.5) * scale - 0.5,
    clamped to the image; values are convex combinations of inputs so the
    [0,1] range is preserved.
    """
    if img.ndim != 2:
        raise ShapeMismatch(f"expected 2-D image, got shape {img.shape}")
    if side < 1:
        raise ShapeMismatch("side must be >= 1")
    h, w = img.shape
    if (h, w) == (side, side):
        return img.astype(np.float32, copy=True)

    src = img.astype(np.float64)
    ys = (np.arange(side) + 0.5) * (h / side) - 0.5
    xs = (np.arange(side) + 0.5) * (w / side) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)

    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ty = (ys - y0)[:, None]
    tx = (xs - x0)[None, :]

    top = src[y0][:, x0] * (1.0 - tx) + src[y0][:, x1] * tx
    bot = src[y1][:, x0] * (1.0 - tx) + src[y1][:, x1] * tx
    out = top * (1.0 - ty) + bot * ty
    return out.astype(np.float32)


def replicate_channels(img: np.ndarray) -> np.ndarray:
    """Stack a square gray image into an identical-plane (m, m, 3) tensor."""
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ShapeMismatch(f"expected square 2-D image, got shape {img.shape}")
    return np.repeat(img[:, :, None], 3, axis=2)


def to_small(img: np.ndarray, side: int = 28) -> np.ndarray:
    """Resize a gray image to the small single-channel square (default 28)."""
    return resize_bilinear(img, side)


def image_from_file(path, side: int) -> np.ndarray:
    """Read a binary file and run the full gray pipeline at the given side."""
    with open(path, "rb") as fh:
        data = fh.read()
    return resize_bilinear(bytes_to_gray(data), side)


# --- .mimg image store ------------------------------------------------------
#
# magic "MIMG" | version u8 | record count u32 LE | records...
# record: id length u16 LE | id UTF-8 | width u16 | height u16 | channels u8 |
#         raw f32 LE pixels, row-major, channel-last.


def write_image_store(path, records: Sequence[tuple[str, np.ndarray]]) -> None:
    with open(path, "wb") as fh:
        fh.write(MIMG_MAGIC)
        fh.write(struct.pack("<BI", MIMG_VERSION, len(records)))
        for sample_id, img in records:
            arr = np.ascontiguousarray(img, dtype=np.float32)
            if arr.ndim == 2:
                h, w, c = arr.shape[0], arr.shape[1], 1
            elif arr.ndim == 3:
                h, w, c = arr.shape
            else:
                raise ShapeMismatch(f"record {sample_id!r}: bad shape {arr.shape}")
            ident = sample_id.encode("utf-8")
            fh.write(struct.pack("<H", len(ident)))
            fh.write(ident)
            fh.write(struct.pack("<HHB", w, h, c))
            fh.write(arr.astype("<f4").tobytes())


def read_image_store(path) -> list[tuple[str, np.ndarray]]:
    """Load all records; 1-channel images come back as (h, w) arrays."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MIMG_MAGIC:
        raise BadMagic(f"{path}: bad magic at offset 0 (want MIMG)")
    if len(blob) < 9:
        raise TruncatedFile(f"{path}: header truncated at offset {len(blob)}")
    version, count = struct.unpack_from("<BI", blob, 4)
    if version != MIMG_VERSION:
        raise BadMagic(f"{path}: unsupported version {version} at offset 4")
    off = 9
    records = []
    for _ in range(count):
        if off + 2 > len(blob):
            raise TruncatedFile(f"{path}: record header truncated at offset {off}")
        (id_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        if off + id_len + 5 > len(blob):
            raise TruncatedFile(f"{path}: record truncated at offset {off}")
        sample_id = blob[off:off + id_len].decode("utf-8")
        off += id_len
        w, h, c = struct.unpack_from("<HHB", blob, off)
        off += 5
        nbytes = 4 * w * h * c
        if off + nbytes > len(blob):
            raise TruncatedFile(f"{path}: pixel data truncated at offset {off}")
        arr = np.frombuffer(blob, dtype="<f4", count=w * h * c, offset=off)
        off += nbytes
        shape = (h, w) if c == 1 else (h, w, c)
        records.append((sample_id, arr.reshape(shape).copy()))
    return records
