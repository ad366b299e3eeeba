"""File formats: GMM JSON, point CSV, binary matrices, PNG images, metric CSV."""
import csv
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from diffem.errors import ArgumentError, MalformedImage
from diffem.gmm import GmmParams

_HEADER = struct.Struct("<ii")


def write_matrix(path, a):
    """Binary matrix: int32 n, int32 d (little-endian), then float64 row-major."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ArgumentError("binary matrix format stores 2-D arrays only")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(*a.shape))
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_matrix(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ArgumentError(f"{path}: truncated header")
    n, d = _HEADER.unpack_from(raw)
    if n < 0 or d < 0 or len(raw) != _HEADER.size + 8 * n * d:
        raise ArgumentError(f"{path}: payload size does not match header ({n} x {d})")
    return np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(n, d).astype(np.float64)


def write_points_csv(path, x):
    x = np.asarray(x, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in x:
            w.writerow([repr(float(v)) for v in row])


def read_points_csv(path):
    try:
        x = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise ArgumentError(f"{path}: {exc}") from None
    return x


def read_points(path):
    """Points from ``.csv`` or the binary matrix format (any other suffix)."""
    return read_points_csv(path) if str(path).endswith(".csv") else read_matrix(path)


def write_gmm_json(path, theta):
    Path(path).write_text(json.dumps(theta.to_dict(), indent=2))


def read_gmm_json(path, normalised=True):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ArgumentError(f"{path}: invalid JSON ({exc})") from None
    return GmmParams.from_dict(doc, normalised)


def to_uint8(img):
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(img, path):
    """Write an (H, W, 3) image; floats are taken in [0, 1] and quantised to 8 bits."""
    img = to_uint8(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ArgumentError(f"expected an (H, W, 3) RGB image, got {img.shape}")
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def read_png(path):
    """Read an 8-bit RGB PNG as a uint8 (H, W, 3) array."""
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise MalformedImage(f"{path}: not a PNG file ({im.format})")
            return np.array(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise MalformedImage(f"{path}: {exc}") from None


def read_image_float(path):
    return read_png(path).astype(np.float64) / 255.0


def write_rows_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
