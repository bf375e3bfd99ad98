"""Persistence: checksummed checkpoints, PNG export, metrics CSV, atomic writes."""

from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"SDSC"
VERSION = 1


class IntegrityError(IOError):
    """Checkpoint bytes failed validation (magic, structure or CRC)."""


def atomic_write(path, data: bytes) -> None:
    """Write to a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# checkpoints

def encode_checkpoint(sections: dict) -> bytes:
    """Sections are name -> array; payloads are stored as little-endian float32."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(sections)))
    for name, arr in sections.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(a.tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(data: bytes) -> dict:
    if len(data) < 16 or data[:4] != MAGIC:
        raise IntegrityError("not a checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise IntegrityError("checkpoint CRC mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<Q", body, off)
            off += 8
            shape = struct.unpack_from(f"<{rank}Q", body, off)
            off += 8 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"truncated or malformed checkpoint: {exc}") from None
    if off != len(body):
        raise IntegrityError("trailing bytes after last section")
    return out


def save_checkpoint(path, sections: dict) -> None:
    atomic_write(path, encode_checkpoint(sections))


def load_checkpoint(path) -> dict:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read checkpoint {path}: {exc}") from None
    return decode_checkpoint(data)


# --------------------------------------------------------------------------
# images

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_png(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img)).save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def save_png(path, img: np.ndarray) -> None:
    """``img`` is (H, W, 3) in [0, 1]; values are clamped and quantised to 8 bits."""
    atomic_write(path, encode_png(img))


def image_grid(images: np.ndarray, rows: int, cols: int, pad: int = 1) -> np.ndarray:
    """Tile (rows*cols, H, W, C) images row-major with a white gutter."""
    images = np.asarray(images)
    n, h, w, c = images.shape
    if n != rows * cols:
        raise ValueError(f"{n} images do not fill a {rows}x{cols} grid")
    out = np.ones((rows * (h + pad) + pad, cols * (w + pad) + pad, c), images.dtype)
    for k in range(n):
        r, q = divmod(k, cols)
        out[pad + r * (h + pad): pad + r * (h + pad) + h, pad + q * (w + pad): pad + q * (w + pad) + w] = images[k]
    return out


# --------------------------------------------------------------------------
# metrics

class MetricsLog:
    """CSV with a fixed header; rows are appended and flushed as they arrive."""

    def __init__(self, path, fields: list[str]):
        self.path = Path(path)
        self.fields = list(fields)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(self.path, "w", newline="")
        self._w = csv.DictWriter(self._f, fieldnames=self.fields, extrasaction="ignore")
        self._w.writeheader()
        self._last = None

    def write(self, row: dict) -> None:
        step = row.get("step")
        if step is not None and self._last is not None and step <= self._last:
            raise ValueError(f"metrics steps must increase ({step} after {self._last})")
        self._last = step
        self._w.writerow({k: _fmt(row.get(k, "")) for k in self.fields})
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
