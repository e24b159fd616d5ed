"""Ground-truth dataset generation and persistence.

A dataset holds, per shape, a set of orthographic view maps: per-pixel
status (hit / miss / missing), hit point, hit normal, and silhouette
distance. Miss-pixel silhouettes are approximated by sphere-tracing along
the ray against a nearest-neighbor index over the view's own hit points,
with a 25% step length.

Binary format (little endian), magic "MARFDS1\\0":
  header: version u32, shape_count u32, view_count u32, width u32, height u32
  per shape: transform 4 x f64 (scale, cx, cy, cz)
    per view: camera direction 3 x f64,
      W*H pixel records {status u8, p 3 x f32, n 3 x f32, s f32}, row major
A JSON sidecar (<path>.json) carries seed and generation parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from .cameras import camera_frame, fibonacci_sphere, pixel_grid
from .losses import BatchItem
from .shapes import ShapeSource, parse_shape

MAGIC = b"MARFDS1\x00"
VERSION = 1

STATUS_MISS = 0
STATUS_HIT = 1
STATUS_MISSING = 2

# Silhouette march bounds: stay inside the unit volume plus margin, floor
# the step so grazing rays terminate (floor only affects resolution, which
# the hit-point cloud already limits).
_MARCH_MARGIN = 0.3
_MARCH_STEP_FLOOR = 5e-3
_MARCH_MAX_STEPS = 2000


class DatasetFormatError(ValueError):
    """Unreadable or corrupt dataset file."""


@dataclass
class ViewMap:
    direction: np.ndarray              # (3,) f64 unit
    status: np.ndarray                 # (H, W) u8
    points: np.ndarray                 # (H, W, 3) f32
    normals: np.ndarray                # (H, W, 3) f32
    silhouettes: np.ndarray            # (H, W) f32

    @property
    def resolution(self) -> tuple[int, int]:
        return self.status.shape[1], self.status.shape[0]

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Reconstruct per-pixel rays, flattened row major."""
        h, w = self.status.shape
        right, up, d = camera_frame(self.direction)
        uu, vv = pixel_grid(w, h)
        origins = uu[..., None] * right + vv[..., None] * up
        dirs = np.broadcast_to(d, origins.shape)
        return origins.reshape(-1, 3), np.ascontiguousarray(dirs.reshape(-1, 3))


@dataclass
class ShapeRecord:
    transform: tuple
    views: list = field(default_factory=list)


@dataclass
class RayDataset:
    width: int
    height: int
    shapes: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def view_count(self) -> int:
        return len(self.shapes[0].views) if self.shapes else 0


def sample_views(count: int, seed: int = 0) -> np.ndarray:
    """Approximately equidistant view directions (Fibonacci spiral).

    Deterministic given count; the seed parameter is accepted for interface
    stability but the spiral construction does not use randomness.
    """
    del seed
    return fibonacci_sphere(count)


def approximate_silhouettes(hit_points: np.ndarray, origins: np.ndarray,
                            dirs: np.ndarray) -> np.ndarray:
    """Sphere-trace miss rays against the hit-point cloud, 25% step length.

    Returns, per ray, the minimum distance to the cloud observed along the
    march through the unit volume (plus margin). With no hit points at all,
    falls back on the ray's distance to the unit sphere.
    """
    n = len(origins)
    if len(hit_points) == 0:
        t_c = -np.einsum("ij,ij->i", origins, dirs)
        closest = origins + t_c[:, None] * dirs
        d_perp = np.linalg.norm(closest, axis=1)
        return np.maximum(d_perp - 1.0, 0.0)

    tree = cKDTree(hit_points)
    t_c = -np.einsum("ij,ij->i", origins, dirs)
    half = 1.0 + _MARCH_MARGIN
    t = t_c - half
    t_end = t_c + half
    s_min = np.full(n, np.inf)
    active = np.ones(n, dtype=bool)
    for _ in range(_MARCH_MAX_STEPS):
        if not active.any():
            break
        pos = origins[active] + t[active, None] * dirs[active]
        dist, _ = tree.query(pos)
        s_min[active] = np.minimum(s_min[active], dist)
        t[active] += np.maximum(0.25 * dist, _MARCH_STEP_FLOOR)
        active &= t <= t_end
    return s_min


def render_view(shape: ShapeSource, direction: np.ndarray,
                resolution: int | tuple[int, int]) -> ViewMap:
    """Cast one orthographic view and fill all per-pixel ground truth.

    Back-facing first intersections (possible on non-watertight meshes) are
    marked MISSING: they neither hit nor miss for supervision purposes.
    """
    w, h = (resolution, resolution) if isinstance(resolution, int) else resolution
    direction = np.asarray(direction, dtype=np.float64)
    direction = direction / np.linalg.norm(direction)
    right, up, d = camera_frame(direction)
    uu, vv = pixel_grid(w, h)
    origins = (uu[..., None] * right + vv[..., None] * up).reshape(-1, 3)
    dirs = np.broadcast_to(d, (h * w, 3))

    hit, p, n = shape.cast(origins, dirs)
    backface = hit & (np.einsum("ij,j->i", n, d) > 0)

    status = np.full(h * w, STATUS_MISS, dtype=np.uint8)
    status[hit] = STATUS_HIT
    status[backface] = STATUS_MISSING

    sil = np.zeros(h * w, dtype=np.float64)
    miss = status == STATUS_MISS
    if miss.any():
        sil[miss] = approximate_silhouettes(p[status == STATUS_HIT],
                                            origins[miss], dirs[miss])

    points = np.where((status == STATUS_HIT)[:, None], p, 0.0)
    normals = np.where((status == STATUS_HIT)[:, None], n, 0.0)
    return ViewMap(
        direction=direction,
        status=status.reshape(h, w),
        points=points.reshape(h, w, 3).astype(np.float32),
        normals=normals.reshape(h, w, 3).astype(np.float32),
        silhouettes=sil.reshape(h, w).astype(np.float32),
    )


def build_dataset(shape_specs: list[str] | str, views: int, resolution: int,
                  seed: int = 0) -> RayDataset:
    """Render all views for one or more shape specs into a dataset."""
    if isinstance(shape_specs, str):
        shape_specs = [shape_specs]
    dirs = sample_views(views, seed)
    ds = RayDataset(width=resolution, height=resolution)
    ds.provenance = {
        "seed": seed,
        "views": views,
        "resolution": resolution,
        "shapes": list(shape_specs),
    }
    for spec in shape_specs:
        shape = parse_shape(spec) if isinstance(spec, str) else spec
        record = ShapeRecord(transform=shape.transform)
        for d in dirs:
            record.views.append(render_view(shape, d, resolution))
        ds.shapes.append(record)
    return ds


# ---------------------------------------------------------------------------
# Strided sub-images and batching


def stride_split(view: ViewMap, stride: int) -> list[np.ndarray]:
    """Row-major pixel-index grids of the stride^2 interleaved sub-images.

    Sub-image (a, b) holds pixels (a + i*stride, b + j*stride); together
    they partition the view. Width and height must be divisible by the
    stride.
    """
    h, w = view.status.shape
    if h % stride or w % stride:
        raise ValueError("resolution must be divisible by the stride")
    flat = np.arange(h * w).reshape(h, w)
    return [flat[a::stride, b::stride] for a in range(stride) for b in range(stride)]


@dataclass(frozen=True)
class SubImageRef:
    shape_id: int
    view_id: int
    offset_row: int
    offset_col: int
    stride: int


def enumerate_subimages(ds: RayDataset, stride: int) -> list[SubImageRef]:
    refs = []
    for si, rec in enumerate(ds.shapes):
        for vi in range(len(rec.views)):
            for a in range(stride):
                for b in range(stride):
                    refs.append(SubImageRef(si, vi, a, b, stride))
    return refs


def make_batches(ds: RayDataset, batch_size: int, seed: int, epoch: int,
                 stride: int) -> list[list[SubImageRef]]:
    """Shuffle sub-images across shapes and views, chunk into batches.

    Each sub-image appears exactly once per epoch; the order differs per
    epoch under the same seed stream.
    """
    refs = enumerate_subimages(ds, stride)
    gen = np.random.default_rng([seed & 0x7FFFFFFF, 0x5A17, epoch])
    order = gen.permutation(len(refs))
    shuffled = [refs[i] for i in order]
    return [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]


def materialize_item(ds: RayDataset, ref: SubImageRef) -> BatchItem:
    """Pull one sub-image's rays and ground truth into torch tensors."""
    view = ds.shapes[ref.shape_id].views[ref.view_id]
    h, w = view.status.shape
    origins, dirs = view.rays()
    idx = (np.arange(h * w).reshape(h, w)
           [ref.offset_row::ref.stride, ref.offset_col::ref.stride].reshape(-1))
    status = view.status.reshape(-1)[idx]
    h_gt = status == STATUS_HIT
    s_gt = view.silhouettes.reshape(-1)[idx].astype(np.float64)
    m_gt = (status == STATUS_MISS) & (s_gt > 0)
    return BatchItem(
        origins=torch.from_numpy(origins[idx]),
        directions=torch.from_numpy(dirs[idx]),
        p_gt=torch.from_numpy(view.points.reshape(-1, 3)[idx].astype(np.float64)),
        n_gt=torch.from_numpy(view.normals.reshape(-1, 3)[idx].astype(np.float64)),
        s_gt=torch.from_numpy(s_gt),
        h_gt=torch.from_numpy(h_gt),
        m_gt=torch.from_numpy(m_gt),
        shape_id=ref.shape_id,
    )


# ---------------------------------------------------------------------------
# Persistence


def write_dataset(ds: RayDataset, path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<5I", VERSION, len(ds.shapes), ds.view_count,
                             ds.width, ds.height))
        for rec in ds.shapes:
            fh.write(struct.pack("<4d", *rec.transform))
            for view in rec.views:
                fh.write(struct.pack("<3d", *view.direction))
                n_px = ds.width * ds.height
                block = np.empty(n_px, dtype=_pixel_dtype())
                block["status"] = view.status.reshape(-1)
                block["p"] = view.points.reshape(-1, 3)
                block["n"] = view.normals.reshape(-1, 3)
                block["s"] = view.silhouettes.reshape(-1)
                fh.write(block.tobytes())
    sidecar = dict(ds.provenance)
    sidecar["format"] = {"magic": "MARFDS1", "version": VERSION}
    with open(path.with_suffix(path.suffix + ".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def _pixel_dtype():
    return np.dtype([("status", "u1"), ("p", "<f4", 3), ("n", "<f4", 3), ("s", "<f4")])


def read_dataset(path) -> RayDataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetFormatError(f"cannot read dataset: {exc}") from exc
    if raw[:8] != MAGIC:
        raise DatasetFormatError("bad magic: not a MARFDS1 dataset")
    version, n_shapes, n_views, width, height = struct.unpack_from("<5I", raw, 8)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    off = 8 + 20
    n_px = width * height
    px = _pixel_dtype()
    ds = RayDataset(width=width, height=height)
    try:
        for _ in range(n_shapes):
            transform = struct.unpack_from("<4d", raw, off)
            off += 32
            rec = ShapeRecord(transform=transform)
            for _ in range(n_views):
                direction = np.array(struct.unpack_from("<3d", raw, off))
                off += 24
                block = np.frombuffer(raw, dtype=px, count=n_px, offset=off)
                off += px.itemsize * n_px
                rec.views.append(ViewMap(
                    direction=direction,
                    status=block["status"].reshape(height, width).copy(),
                    points=block["p"].reshape(height, width, 3).copy(),
                    normals=block["n"].reshape(height, width, 3).copy(),
                    silhouettes=block["s"].reshape(height, width).copy(),
                ))
            ds.shapes.append(rec)
    except struct.error as exc:
        raise DatasetFormatError(f"truncated dataset file: {exc}") from exc
    if off != len(raw):
        raise DatasetFormatError("trailing bytes after dataset payload")
    sidecar = path.with_suffix(path.suffix + ".json")
    if sidecar.exists():
        ds.provenance = json.loads(sidecar.read_text())
    return ds
