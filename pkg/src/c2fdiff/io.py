"""File formats: mixture JSON, images, CSV tables."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .oracle import GaussianMixtureModel


def load_mixture(path) -> GaussianMixtureModel:
    with open(path) as fh:
        return GaussianMixtureModel.from_dict(json.load(fh))


def save_mixture(gmm: GaussianMixtureModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(gmm.to_dict(), fh)


def to_bytes(batch) -> np.ndarray:
    """Map [-1, 1] to [0, 255] with round-half-up and clamping."""
    v = np.floor((np.asarray(batch, dtype=np.float64) + 1.0) * 127.5 + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def export_images(batch, directory, fmt: str = "pgm", prefix: str = "sample") -> list[Path]:
    """Write a ``(n, C, H, W)`` batch to ``directory``; returns the files written.

    ``pgm`` writes one P5 file per sample and channel, ``ppm`` needs three
    channels and writes one P6 file per sample, ``raw`` writes a single
    little-endian float32 file with a JSON sidecar.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"expected (n, C, H, W), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot export non-finite values")
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    n, c, h, w = x.shape
    files = []
    if fmt == "raw":
        path = out / f"{prefix}.f32"
        path.write_bytes(x.astype("<f4").tobytes(order="C"))
        sidecar = out / f"{prefix}.json"
        sidecar.write_text(json.dumps({
            "shape": [n, c, h, w], "dtype": "float32", "byte_order": "little",
            "ordering": ["sample", "channel", "row", "column"],
        }, indent=2))
        return [path, sidecar]
    data = to_bytes(x)
    if fmt == "pgm":
        for i in range(n):
            for ch in range(c):
                suffix = f"_c{ch}" if c > 1 else ""
                path = out / f"{prefix}_{i:04d}{suffix}.pgm"
                path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + data[i, ch].tobytes())
                files.append(path)
    elif fmt == "ppm":
        if c != 3:
            raise ValueError("ppm export needs exactly three channels")
        for i in range(n):
            path = out / f"{prefix}_{i:04d}.ppm"
            pixels = np.transpose(data[i], (1, 2, 0)).tobytes()
            path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + pixels)
            files.append(path)
    else:
        raise ValueError(f"unknown image format {fmt!r}")
    return files


def import_raw(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    return data.reshape(meta["shape"]).astype(np.float64)


def read_pnm(path) -> tuple[str, np.ndarray]:
    """Parse a binary P5/P6 file as written by :func:`export_images`."""
    raw = Path(path).read_bytes()
    magic, dims, maxval, payload = raw.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    if int(maxval) != 255:
        raise ValueError("only maxval 255 is supported")
    arr = np.frombuffer(payload, dtype=np.uint8)
    shape = (h, w) if magic == b"P5" else (h, w, 3)
    return magic.decode(), arr.reshape(shape)


def format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def rows_to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(row.get(col)) for col in columns])
    return buf.getvalue()
