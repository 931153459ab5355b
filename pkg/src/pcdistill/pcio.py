"""Point cloud files: CSV text and the little-endian ``PCLD`` binary."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .pointops import PointCloud

PCLD_MAGIC = b"PCLD"


def _rows(cloud: PointCloud) -> np.ndarray:
    if cloud.features is None:
        return cloud.positions
    return np.hstack([cloud.positions, cloud.features])


def _from_rows(rows: np.ndarray) -> PointCloud:
    if rows.ndim != 2 or rows.shape[1] < 3:
        raise ValueError("each row needs at least x,y,z")
    feats = rows[:, 3:] if rows.shape[1] > 3 else None
    return PointCloud(rows[:, :3].copy(), None if feats is None else feats.copy())


def write_csv(cloud: PointCloud, path) -> None:
    lines = [",".join(repr(float(v)) for v in row) for row in _rows(cloud)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_csv(path) -> PointCloud:
    rows = [
        [float(tok) for tok in line.split(",")]
        for line in Path(path).read_text(encoding="ascii").splitlines()
        if line.strip()
    ]
    if not rows:
        raise ValueError(f"{path}: no points")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{path}: ragged rows")
    return _from_rows(np.array(rows, dtype=np.float64))


def encode_pcld(cloud: PointCloud) -> bytes:
    rows = _rows(cloud)
    n, width = rows.shape
    header = PCLD_MAGIC + struct.pack("<II", n, width - 3)
    return header + rows.astype("<f8").tobytes(order="C")


def decode_pcld(buf: bytes) -> PointCloud:
    if buf[:4] != PCLD_MAGIC:
        raise ValueError("not a PCLD stream")
    n, d = struct.unpack_from("<II", buf, 4)
    expected = 12 + 8 * n * (3 + d)
    if len(buf) != expected:
        raise ValueError(f"PCLD length {len(buf)} != expected {expected}")
    rows = np.frombuffer(buf, dtype="<f8", offset=12).reshape(n, 3 + d)
    return _from_rows(rows.astype(np.float64))


def write_pcld(cloud: PointCloud, path) -> None:
    Path(path).write_bytes(encode_pcld(cloud))


def read_pcld(path) -> PointCloud:
    return decode_pcld(Path(path).read_bytes())


def read_cloud(path) -> PointCloud:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_csv(path)
    return read_pcld(path)
