"""PNG images and the binary weight-file format.

Weight file layout (all integers little-endian)::

    b"IDFW" | version u32 | tensor_count u32
    per tensor: name_len u16 | name (UTF-8) | rank u8 | dims u32 * rank | f32 payload
    CRC32 u32 of every preceding byte
"""

import os
import struct
import zlib

import numpy as np
from PIL import Image as PILImage

from .modules import PARAM_NAMES, ModelWeights, param_shapes

MAGIC = b"IDFW"
VERSION = 1


class ImageFormatError(ValueError):
    pass


class WeightFileError(ValueError):
    pass


def _check_sandbox(path, sandbox_root):
    if sandbox_root is None:
        return
    root = os.path.realpath(sandbox_root)
    full = os.path.realpath(path)
    if os.path.commonpath([root, full]) != root:
        raise PermissionError(f"{path} is outside the working tree {root}")


def load_image(path, sandbox_root=None):
    """Read an 8-bit grayscale or RGB PNG as a (C, H, W) float64 array in [0, 1]."""
    _check_sandbox(path, sandbox_root)
    with PILImage.open(path) as im:
        if im.format != "PNG":
            raise ImageFormatError(f"{path}: only PNG is supported, got {im.format}")
        if im.mode not in ("L", "RGB"):
            raise ImageFormatError(
                f"{path}: unsupported PNG mode {im.mode!r} (need 8-bit grayscale or RGB)")
        a = np.asarray(im, dtype=np.uint8)
    a = a[None] if a.ndim == 2 else a.transpose(2, 0, 1)
    return a.astype(np.float64) / 255.0


def to_uint8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img, path, sandbox_root=None):
    _check_sandbox(path, sandbox_root)
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ImageFormatError(f"expected a (1|3, H, W) image, got shape {img.shape}")
    q = to_uint8(img)
    if q.shape[0] == 1:
        PILImage.fromarray(q[0], mode="L").save(path, format="PNG")
    else:
        PILImage.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def list_pngs(directory):
    return sorted(f for f in os.listdir(directory)
                  if f.lower().endswith(".png") and os.path.isfile(os.path.join(directory, f)))


def load_dataset(directory, sandbox_root=None):
    """(basename, image) for every PNG directly inside ``directory``, sorted by name."""
    return [(f, load_image(os.path.join(directory, f), sandbox_root)) for f in list_pngs(directory)]


def save_weights(w, path):
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(PARAM_NAMES))
    for name in PARAM_NAMES:
        t = np.asarray(w.params[name])
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
        buf += t.astype("<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    with open(path, "wb") as fh:
        fh.write(buf)


def load_weights(path, hidden_width=None, kernel_size=None, channels=None):
    """Parse a weight file; optional config values are checked against its shapes."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != MAGIC:
        raise WeightFileError(f"{path}: bad magic, not a weight file")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise WeightFileError(f"{path}: CRC mismatch, file is corrupt")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise WeightFileError(f"{path}: unsupported version {version}")
    off = 12
    params = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, off)
            name = data[off + 2:off + 2 + n].decode("utf-8")
            off += 2 + n
            (rank,) = struct.unpack_from("<B", data, off)
            dims = struct.unpack_from(f"<{rank}I", data, off + 1)
            off += 1 + 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=off)
            off += 4 * size
            if name in params:
                raise WeightFileError(f"{path}: duplicate tensor {name}")
            params[name] = arr.astype(np.float64).reshape(dims)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        if isinstance(e, WeightFileError):
            raise
        raise WeightFileError(f"{path}: truncated or malformed tensor table ({e})") from e
    if off != len(data) - 4:
        raise WeightFileError(f"{path}: {len(data) - 4 - off} trailing bytes after tensor table")
    missing = [n for n in PARAM_NAMES if n not in params]
    extra = [n for n in params if n not in PARAM_NAMES]
    if missing or extra:
        raise WeightFileError(f"{path}: missing tensors {missing}, unexpected tensors {extra}")
    ch, c = params["fem.conv1.w"].shape[:2]
    k = int(round(np.sqrt(params["kpm.conv.b"].shape[0])))
    expected = param_shapes(hidden_width or ch, kernel_size or k, channels or c)
    for name in PARAM_NAMES:
        if params[name].shape != expected[name]:
            raise WeightFileError(
                f"{path}: tensor {name} has shape {params[name].shape}, config expects {expected[name]}")
    return ModelWeights(params, hidden_width or ch, kernel_size or k, channels or c)
