"""Binary and text formats shared by the pipeline stages.

Raster layout (little endian)::

    b"MVRA"  u32 version  u8 ndim  u8 dtype (0=f32, 1=u8)  u8 has_mask  u8 pad
    f64[3] origin  f64 cell_size  u32[3] dims  u32 channels
    payload   dims[0] * dims[1] * channels values, row-major [ix, iy, c]
    mask      dims[0] * dims[1] bytes (0/1) when has_mask

Only 2-D grids carry rasters; the third origin/dim slot is stored for
completeness (zero and one for 2-D grids).
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from pathlib import Path

import numpy as np

from .geometry import GridSpec, Pose

RASTER_MAGIC = b"MVRA"
RASTER_VERSION = 1
_HEADER = struct.Struct("<4sIBBBB3ddIII I")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_TAGS = {"f32": 0, "u8": 1}


def write_raster(path, grid: GridSpec, data: np.ndarray, dtype: str = "f32", coverage: np.ndarray | None = None):
    """Write ``data`` shaped ``(X, Y)`` or ``(X, Y, C)`` on a 2-D grid."""
    if dtype not in _TAGS:
        raise ValueError(f"unsupported raster dtype {dtype!r}")
    g = grid.as_2d() if grid.ndim == 3 else grid
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.shape[:2] != tuple(g.dims):
        raise ValueError(f"raster data {arr.shape[:2]} does not match grid dims {g.dims}")
    if coverage is not None and np.shape(coverage) != tuple(g.dims):
        raise ValueError("coverage mask does not match grid dims")
    tag = _TAGS[dtype]
    if dtype == "u8" and (np.any(arr < 0) or np.any(arr > 255)):
        raise ValueError("u8 raster values must lie in [0, 255]")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
    head = _HEADER.pack(RASTER_MAGIC, RASTER_VERSION, 2, tag, coverage is not None, 0,
                        g.origin[0], g.origin[1], 0.0, g.cell_size, g.dims[0], g.dims[1], 1, arr.shape[2])
    mask = b"" if coverage is None else np.ascontiguousarray(coverage, dtype=np.uint8).tobytes()
    Path(path).write_bytes(head + payload + mask)


def read_raster(path):
    """``(grid, data (X, Y, C), coverage or None)``; data keeps the stored dtype."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != RASTER_MAGIC:
        raise ValueError(f"{path}: not a raster file (bad magic)")
    (_, version, ndim, tag, has_mask, _, ox, oy, _, cell, nx, ny, _, ch) = _HEADER.unpack_from(raw)
    if version != RASTER_VERSION or ndim != 2 or tag not in _DTYPES:
        raise ValueError(f"{path}: unsupported raster header")
    dt = _DTYPES[tag]
    n = nx * ny * ch * dt.itemsize
    expect = _HEADER.size + n + (nx * ny if has_mask else 0)
    if len(raw) != expect:
        raise ValueError(f"{path}: raster length {len(raw)} != expected {expect}")
    grid = GridSpec((ox, oy), cell, (nx, ny))
    data = np.frombuffer(raw, dt, nx * ny * ch, _HEADER.size).reshape(nx, ny, ch).copy()
    cov = None
    if has_mask:
        cov = np.frombuffer(raw, np.uint8, nx * ny, _HEADER.size + n).reshape(nx, ny).astype(bool)
    return grid, data, cov


# --------------------------------------------------------------------------
# images

def to_u8(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray):
    """Binary PPM (P6, maxval 255) from ``(H, W, 3)`` uint8 or float in [0, 1]."""
    a = np.asarray(img)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=-1)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError("PPM needs an (H, W, 3) image")
    if a.dtype != np.uint8:
        a = to_u8(a)
    h, w = a.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(a).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: only P6 maxval 255 is supported")
    w, h = int(fields[1]), int(fields[2])
    pos += 1
    data = raw[pos:pos + w * h * 3]
    if len(data) != w * h * 3:
        raise ValueError(f"{path}: truncated PPM payload")
    return np.frombuffer(data, np.uint8).reshape(h, w, 3).copy()


def grey_panel(values: np.ndarray, mask: np.ndarray | None = None, vmax: float | None = None) -> np.ndarray:
    """Grayscale ``(Y, X)`` uint8 panel of a BEV map, darker = smaller, +y up."""
    v = np.asarray(values, dtype=np.float64)
    m = np.ones(v.shape, bool) if mask is None else mask
    top = vmax if vmax is not None else (float(v[m].max()) if m.any() else 1.0)
    g = np.where(m, np.clip(v / max(top, 1e-12), 0.0, 1.0), 0.0)
    return to_u8(g).T[::-1]


# --------------------------------------------------------------------------
# poses

def write_poses(path, poses):
    """One pose per line: 9 rotation entries (row-major) then 3 translation entries."""
    lines = [" ".join(repr(float(x)) for x in np.concatenate([p.rotation.ravel(), p.translation]))
             for p in poses]
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path):
    out = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        vals = np.array([float(x) for x in line.split()])
        if len(vals) != 12:
            raise ValueError(f"{path}:{i + 1}: expected 12 numbers, got {len(vals)}")
        out.append(Pose(vals[:9].reshape(3, 3), vals[9:]))
    return out


# --------------------------------------------------------------------------
# hashing and manifests

def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_hashes(root, paths) -> dict:
    """Relative path -> sha256 for every file under the given paths."""
    root = Path(root)
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            out[str(f.relative_to(root))] = file_hash(f)
    return dict(sorted(out.items()))


def append_manifest(artifacts, record: dict):
    """Append one JSON line to ``<artifacts>/manifest.jsonl``."""
    path = Path(artifacts) / "manifest.jsonl"
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def read_manifest(artifacts) -> list:
    path = Path(artifacts) / "manifest.jsonl"
    if not path.exists():
        return []
    return [json.loads(l) for l in path.read_text().splitlines() if l.strip()]


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
