"""Simulated single-view sensors: spinning LiDAR and a depth camera.

Rays are cast against triangle meshes through a uniform-grid spatial index
with a watertight-style Moller-Trumbore test (closed barycentric bounds, so
shared edges register in both adjacent triangles rather than leaking).
Per-ray randomness (drop-out, range noise) comes from a counter-based
generator keyed by the seed and indexed by the fixed ray order, so results
do not depend on evaluation order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .geomcore import (Camera, FeatureMap2D, RigidTransform, TriangleMesh,
                       VoxelGrid, rotation_about_axis, unit)

POINT_CLOUD_MAGIC = b"S3PC"
_RAY_EPS = 1e-9


class PointCloudFormatError(ValueError):
    """Raised on malformed point-cloud / image files."""


# ---------------------------------------------------------------------------
# Ray casting


def _moller_trumbore(orig, dirs, v0, v1, v2):
    """Ray-triangle intersections for paired rays and triangles.

    Closed comparisons (>= 0, <= 1) keep shared-edge hits in both triangles.
    Returns (t, hit) with t in units of the ray direction length.
    """
    e1 = v1 - v0
    e2 = v2 - v0
    pvec = np.cross(dirs, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    parallel = np.abs(det) < 1e-14
    inv = np.where(parallel, 1.0, 1.0 / np.where(parallel, 1.0, det))
    tvec = orig - v0
    u = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = np.einsum("ij,ij->i", dirs, qvec) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    hit = (~parallel & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > _RAY_EPS))
    return t, hit


class TriangleGridIndex:
    """Uniform grid over a mesh for front-to-back ray traversal."""

    def __init__(self, mesh: TriangleMesh, target_tris_per_cell: float = 2.0):
        if mesh.n_faces == 0:
            raise ValueError("cannot index an empty mesh")
        self.mesh = mesh
        v = mesh.vertices
        self.tri = v[mesh.faces]                      # (m, 3, 3)
        lo, hi = mesh.bounds()
        pad = max(1e-6, 1e-6 * float(np.abs(hi - lo).max()))
        self.lo = lo - pad
        self.hi = hi + pad
        extent = self.hi - self.lo
        m = mesh.n_faces
        scale = (m / target_tris_per_cell) ** (1.0 / 3.0)
        norm = extent / max(extent.max(), 1e-12)
        self.res = np.clip((scale * norm).astype(np.int64), 1, 96)
        self.cell = extent / self.res
        tlo = self.tri.min(axis=1)
        thi = self.tri.max(axis=1)
        clo = np.clip(((tlo - self.lo) / self.cell).astype(np.int64), 0, self.res - 1)
        chi = np.clip(((thi - self.lo) / self.cell).astype(np.int64), 0, self.res - 1)
        spans = chi - clo + 1
        per = spans.prod(axis=1)
        total = int(per.sum())
        tri_ids = np.repeat(np.arange(m), per)
        starts = np.repeat(np.cumsum(per) - per, per)
        off = np.arange(total) - starts
        sp = spans[tri_ids]
        oz = off % sp[:, 2]
        oy = (off // sp[:, 2]) % sp[:, 1]
        ox = off // (sp[:, 2] * sp[:, 1])
        cells = clo[tri_ids] + np.stack([ox, oy, oz], axis=1)
        cell_ids = (cells[:, 0] * self.res[1] + cells[:, 1]) * self.res[2] + cells[:, 2]
        order = np.argsort(cell_ids, kind="stable")
        self.cell_tris = tri_ids[order]
        sorted_ids = cell_ids[order]
        n_cells = int(self.res.prod())
        self.cell_start = np.searchsorted(sorted_ids, np.arange(n_cells + 1))

    def intersect(self, origin, dirs):
        """Nearest hit parameter per ray from a shared origin.

        Returns (t, hit); t is in units of each ray's direction vector.
        """
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        origin = np.asarray(origin, dtype=np.float64)
        n = len(dirs)
        best = np.full(n, np.inf)
        safe = np.where(np.abs(dirs) < 1e-300, 1e-300, dirs)
        t0 = (self.lo - origin) / safe
        t1 = (self.hi - origin) / safe
        t_near = np.minimum(t0, t1).max(axis=1)
        t_far = np.maximum(t0, t1).min(axis=1)
        t_cur = np.maximum(t_near, 0.0)
        active = (t_far >= t_cur) & (t_far > 0)
        idx = np.where(active)[0]
        if len(idx) == 0:
            return best, np.zeros(n, dtype=bool)
        pos = origin + dirs[idx] * (t_cur[idx, None] + 1e-12)
        cell = np.clip(((pos - self.lo) / self.cell).astype(np.int64), 0, self.res - 1)
        step = np.where(dirs[idx] >= 0, 1, -1).astype(np.int64)
        d = dirs[idx]
        t_delta = np.abs(np.where(np.abs(d) < 1e-300, np.inf, self.cell / safe[idx]))
        nxt = self.lo + (cell + (step > 0)) * self.cell
        t_max = np.where(np.abs(d) < 1e-300, np.inf, (nxt - origin) / safe[idx])
        enter = t_cur[idx]
        while len(idx):
            cid = (cell[:, 0] * self.res[1] + cell[:, 1]) * self.res[2] + cell[:, 2]
            s, e = self.cell_start[cid], self.cell_start[cid + 1]
            counts = e - s
            if counts.any():
                rsel = np.repeat(np.arange(len(idx)), counts)
                flat = np.concatenate([self.cell_tris[a:b] for a, b in zip(s, e) if b > a]) \
                    if counts.any() else np.empty(0, dtype=np.int64)
                tris = self.tri[flat]
                t, hit = _moller_trumbore(origin[None, :], dirs[idx][rsel],
                                          tris[:, 0], tris[:, 1], tris[:, 2])
                good = hit & (t < best[idx][rsel])
                if good.any():
                    np.minimum.at(best, idx[rsel[good]], t[good])
            axis = np.argmin(t_max, axis=1)
            ar = np.arange(len(idx))
            enter = t_max[ar, axis]
            cell[ar, axis] += step[ar, axis]
            t_max[ar, axis] += t_delta[ar, axis]
            keep = ((cell[ar, axis] >= 0) & (cell[ar, axis] < self.res[axis])
                    & (enter <= np.minimum(best[idx], t_far[idx])))
            idx, cell, step, t_delta, t_max = (idx[keep], cell[keep], step[keep],
                                               t_delta[keep], t_max[keep])
        hit = np.isfinite(best)
        return np.where(hit, best, 0.0), hit


# ---------------------------------------------------------------------------
# LiDAR


@dataclass
class LidarConfig:
    """Spinning scanner: full azimuth sweep, a band of elevation rows."""

    origin: np.ndarray = dc_field(default_factory=lambda: np.array([0.0, 0.0, 1.8]))
    azimuth_step_deg: float = 0.18
    elevation_start_deg: float = 2.0
    elevation_stop_deg: float = -24.0
    elevation_step_deg: float = 0.4
    drop_rate: float = 0.10
    range_noise: float = 0.01

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.azimuth_step_deg <= 0 or self.elevation_step_deg <= 0:
            raise ValueError("angular steps must be positive")
        if self.elevation_start_deg < self.elevation_stop_deg:
            raise ValueError("elevation band must go from high to low")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError("drop rate must be in [0, 1)")
        if self.range_noise < 0:
            raise ValueError("range noise must be non-negative")

    def ray_directions(self):
        """Unit directions in scan order (elevation row major, azimuth minor)."""
        n_az = int(round(360.0 / self.azimuth_step_deg))
        n_el = int(round((self.elevation_start_deg - self.elevation_stop_deg)
                         / self.elevation_step_deg)) + 1
        az = np.deg2rad(np.arange(n_az) * self.azimuth_step_deg)
        el = np.deg2rad(self.elevation_start_deg
                        - np.arange(n_el) * self.elevation_step_deg)
        ce, se = np.cos(el), np.sin(el)
        dirs = np.empty((n_el, n_az, 3))
        dirs[..., 0] = ce[:, None] * np.cos(az)[None, :]
        dirs[..., 1] = ce[:, None] * np.sin(az)[None, :]
        dirs[..., 2] = se[:, None]
        return dirs.reshape(-1, 3)


def simulate_lidar(mesh: TriangleMesh, config: LidarConfig, seed: int):
    """Scan a mesh; returns hit points (n, 3) in scan order.

    One uniform and one normal draw are consumed per ray slot whether or not
    the ray hits, so the randomness attached to a ray depends only on (seed,
    ray index).  Range noise perturbs the hit along its own ray.
    """
    dirs = config.ray_directions()
    n = len(dirs)
    rng = np.random.Generator(np.random.Philox(key=seed))
    drop_u = rng.random(n)
    noise = rng.standard_normal(n)
    index = TriangleGridIndex(mesh)
    t, hit = index.intersect(config.origin, dirs)
    keep = hit & (drop_u >= config.drop_rate)
    ranges = t[keep] + config.range_noise * noise[keep]
    return config.origin + dirs[keep] * ranges[:, None]


# ---------------------------------------------------------------------------
# Depth camera


def render_depth_silhouette(mesh: TriangleMesh, camera: Camera) -> FeatureMap2D:
    """Ray-cast depth and binary silhouette through every pixel centre.

    Channel 0 is camera-space depth (0 at background), channel 1 the mask.
    """
    w, h = camera.width, camera.height
    ix, iy = np.meshgrid(np.arange(w), np.arange(h))
    dirs_cam = np.stack([(ix.ravel() - camera.cx) / camera.fx,
                         (iy.ravel() - camera.cy) / camera.fy,
                         np.ones(w * h)], axis=1)
    inv = camera.extrinsics.inverse()
    dirs_world = dirs_cam @ inv.rotation.T
    index = TriangleGridIndex(mesh)
    # dirs have unit camera-space z, so the hit parameter IS the depth.
    t, hit = index.intersect(inv.translation, dirs_world)
    values = np.zeros((h, w, 2))
    values[..., 0] = np.where(hit, t, 0.0).reshape(h, w)
    values[..., 1] = hit.reshape(h, w).astype(np.float64)
    return FeatureMap2D(values)


# ---------------------------------------------------------------------------
# Canonical frame and voxelization


def normalize_transform(yaw: float, center) -> RigidTransform:
    """Rigid map into the canonical frame: subtract the horizontal centre,
    rotate by -yaw about the vertical axis (z)."""
    c = np.asarray(center, dtype=np.float64).copy()
    c[2] = 0.0  # vertical coordinate is untouched by the translation
    r = rotation_about_axis([0.0, 0.0, 1.0], -yaw)
    return RigidTransform(r, -r @ c)


def normalize_frame(points, yaw: float, center):
    """Canonicalize points: rotate by -yaw about z, recentre horizontally."""
    return normalize_transform(yaw, center).apply(points)


def voxelize(points, resolution: int, extent: float, center=(0.0, 0.0, 0.0)) -> VoxelGrid:
    """Count points into a cubical grid centred on `center`.

    Points outside the volume are ignored; the grid carries raw counts in a
    single channel.
    """
    if resolution < 1:
        raise ValueError("resolution must be positive")
    if extent <= 0:
        raise ValueError("extent must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    center = np.asarray(center, dtype=np.float64)
    cell = extent / resolution
    origin = center - 0.5 * extent
    idx = np.floor((pts - origin) / cell).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < resolution), axis=1)
    counts = np.zeros((resolution, resolution, resolution), dtype=np.float64)
    np.add.at(counts, tuple(idx[ok].T), 1.0)
    return VoxelGrid(origin, cell, counts[..., None])


@dataclass
class SensorSample:
    """One canonicalized observation of a character.

    view_ray is the unit ray from the viewpoint through canonical_origin; it
    feeds the viewpoint encoding.  voxels is the count grid of the LiDAR
    cloud (all zeros when no cloud was captured).
    """

    voxels: VoxelGrid
    canonical_origin: np.ndarray
    view_ray: np.ndarray
    points: np.ndarray = None
    image: FeatureMap2D = None
    camera: Camera = None

    def __post_init__(self):
        self.canonical_origin = np.asarray(self.canonical_origin, dtype=np.float64)
        self.view_ray = unit(self.view_ray)
        if self.image is not None and self.camera is None:
            raise ValueError("an image requires its camera")

    @property
    def has_lidar(self) -> bool:
        return self.points is not None and len(self.points) > 0


def make_sensor_sample(points, image, camera, voxel_resolution: int,
                       voxel_extent: float, canonical_origin=None,
                       viewpoint=None) -> SensorSample:
    """Assemble a SensorSample in the canonical frame.

    The feature origin c is the point-cloud centre when a cloud is present,
    else the supplied canonical_origin.  The viewpoint defaults to the
    camera centre and must be given explicitly for LiDAR-only samples.
    """
    if points is not None and len(points) == 0:
        points = None
    if points is not None:
        c = np.asarray(points, dtype=np.float64).mean(axis=0)
    elif canonical_origin is not None:
        c = np.asarray(canonical_origin, dtype=np.float64)
    else:
        raise ValueError("need a point cloud or an explicit canonical origin")
    if viewpoint is None:
        if camera is None:
            raise ValueError("need a camera or an explicit viewpoint")
        viewpoint = camera.position()
    ray = unit(c - np.asarray(viewpoint, dtype=np.float64))
    vox = voxelize(points if points is not None else np.zeros((0, 3)),
                   voxel_resolution, voxel_extent, center=c)
    return SensorSample(vox, c, ray, points=points, image=image, camera=camera)


# ---------------------------------------------------------------------------
# File formats


def write_point_cloud(points, path) -> None:
    """Binary cloud: magic 'S3PC', u32 LE count, count*3 f32 LE coordinates."""
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    with open(path, "wb") as fh:
        fh.write(POINT_CLOUD_MAGIC)
        fh.write(struct.pack("<I", len(pts)))
        fh.write(pts.astype("<f4").tobytes())


def read_point_cloud(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != POINT_CLOUD_MAGIC:
            raise PointCloudFormatError(f"bad magic {magic!r}")
        raw = fh.read(4)
        if len(raw) != 4:
            raise PointCloudFormatError("truncated header")
        (count,) = struct.unpack("<I", raw)
        data = fh.read()
    if len(data) != count * 12:
        raise PointCloudFormatError(
            f"count {count} disagrees with payload of {len(data)} bytes")
    return np.frombuffer(data, dtype="<f4").reshape(count, 3).astype(np.float64)


def write_pfm(values, path) -> None:
    """Grayscale PFM, little-endian, rows stored bottom-to-top."""
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError("PFM writer takes a single-channel image")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(arr[::-1].astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"Pf":
            raise PointCloudFormatError("not a grayscale PFM file")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise PointCloudFormatError("bad PFM dimensions line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline())
        data = fh.read(w * h * 4)
    if len(data) != w * h * 4:
        raise PointCloudFormatError("truncated PFM payload")
    dt = "<f4" if scale < 0 else ">f4"
    return np.frombuffer(data, dtype=dt).reshape(h, w)[::-1].astype(np.float64)


def write_pgm(mask, path) -> None:
    """Binary PGM silhouette; nonzero -> 255."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError("PGM writer takes a single-channel mask")
    h, w = arr.shape
    payload = np.where(arr > 0.5, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(payload.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P5":
            raise PointCloudFormatError("not a binary PGM file")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise PointCloudFormatError("bad PGM dimensions line")
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        if maxval != 255:
            raise PointCloudFormatError("PGM maxval must be 255")
        data = fh.read(w * h)
    if len(data) != w * h:
        raise PointCloudFormatError("truncated PGM payload")
    return (np.frombuffer(data, dtype=np.uint8).reshape(h, w) > 127).astype(np.float64)


def write_camera(camera: Camera, path) -> None:
    """Pinhole camera document: intrinsics plus world-to-camera extrinsics.

    The rotation is stored as explicit matrix rows, not a quaternion, so the
    document survives read-then-write without transcoding drift.
    """
    doc = {
        "fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
        "width": camera.width, "height": camera.height,
        "rotation": [[float(v) for v in row]
                     for row in camera.extrinsics.rotation],
        "translation": [float(v) for v in camera.extrinsics.translation],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_camera(path) -> Camera:
    with open(path) as fh:
        doc = json.load(fh)
    rot = np.asarray(doc["rotation"], dtype=np.float64)
    if rot.shape != (3, 3):
        raise PointCloudFormatError("camera rotation must be a 3x3 matrix")
    if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-6:
        raise PointCloudFormatError("camera rotation is not orthonormal")
    extr = RigidTransform(rot, np.asarray(doc["translation"], dtype=np.float64))
    return Camera(float(doc["fx"]), float(doc["fy"]), float(doc["cx"]),
                  float(doc["cy"]), int(doc["width"]), int(doc["height"]),
                  extr)
