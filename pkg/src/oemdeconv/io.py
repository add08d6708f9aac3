"""File formats: binary PGM, core/intensity CSV, raw float64 images with a JSON sidecar."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .model import CoreMap, ParameterError


class FormatError(ValueError):
    pass


def _pgm_tokens(data: bytes, count: int):
    """First ``count`` header tokens and the offset just past the single whitespace byte."""
    tokens = []
    i = 0
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:i])
    return tokens, i + 1


def read_pgm(path) -> np.ndarray:
    """Binary (P5) PGM, 8- or 16-bit, as a float array of shape (height, width)."""
    data = Path(path).read_bytes()
    tokens, offset = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: only binary PGM (P5) is supported")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PGM header") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad PGM header")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    size = width * height * dtype.itemsize
    if len(data) - offset < size:
        raise FormatError(f"{path}: truncated PGM data")
    img = np.frombuffer(data, dtype=dtype, count=width * height, offset=offset)
    return img.reshape(height, width).astype(float)


def write_pgm(path, image, maxval: int | None = None) -> None:
    """Write integer-valued ``image`` as P5; 16-bit when ``maxval`` > 255."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ParameterError("PGM image must be 2-D")
    if maxval is None:
        maxval = 255 if img.max(initial=0) <= 255 else 65535
    vals = np.clip(np.rint(img), 0, maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode()
    Path(path).write_bytes(header + vals.astype(dtype).tobytes())


def write_preview_pgm(path, image) -> dict:
    """16-bit PGM preview scaled linearly from [min, max]; returns the scaling."""
    img = np.asarray(image, dtype=float)
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo if hi > lo else 1.0
    write_pgm(path, (img - lo) / span * 65535.0, maxval=65535)
    return {"min": lo, "max": hi}


def write_raw(path, image) -> None:
    """Raw little-endian float64 plus ``<path>.json`` with {width, height, dtype}."""
    img = np.asarray(image, dtype=float)
    if img.ndim == 1:
        img = img.reshape(1, -1)
    path = Path(path)
    path.write_bytes(img.astype("<f8").tobytes())
    meta = {"width": int(img.shape[1]), "height": int(img.shape[0]), "dtype": "f64le"}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2) + "\n")


def read_raw(path) -> np.ndarray:
    path = Path(path)
    try:
        meta = json.loads(Path(str(path) + ".json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: missing JSON sidecar") from exc
    if meta.get("dtype") != "f64le":
        raise FormatError(f"{path}: unsupported dtype {meta.get('dtype')!r}")
    w, h = int(meta["width"]), int(meta["height"])
    data = np.frombuffer(path.read_bytes(), dtype="<f8")
    if data.size != w * h:
        raise FormatError(f"{path}: expected {w * h} values, found {data.size}")
    return data.reshape(h, w).astype(float)


def read_image(path) -> np.ndarray:
    """PGM, or raw float64 when a ``.json`` sidecar sits next to the file."""
    path = Path(path)
    if Path(str(path) + ".json").exists():
        return read_raw(path)
    return read_pgm(path)


def write_cores_csv(path, cores: CoreMap) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y"])
        for x, y in cores.positions:
            w.writerow([repr(float(x)), repr(float(y))])


def read_cores_csv(path, width: int, height: int) -> CoreMap:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["x", "y"]:
        raise FormatError(f"{path}: expected header 'x,y'")
    try:
        pts = np.array([[float(a), float(b)] for a, b in (r for r in rows[1:] if r)])
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric coordinate") from exc
    if pts.size == 0:
        raise FormatError(f"{path}: no cores")
    return CoreMap(int(width), int(height), pts)


def write_vector_csv(path, values, name: str = "value") -> None:
    """One value per line under a single-column header; exact round trip via repr."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([name])
        for v in np.asarray(values, dtype=float):
            w.writerow([repr(float(v))])


def read_vector_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise FormatError(f"{path}: empty file")
    try:
        return np.array([float(r[0]) for r in rows[1:]])
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric value") from exc


def read_points_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or [c.strip() for c in rows[0]] != ["x", "y"]:
        raise FormatError(f"{path}: expected header 'x,y'")
    try:
        return np.array([[float(a), float(b)] for a, b in rows[1:]]).reshape(-1, 2)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric coordinate") from exc


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
