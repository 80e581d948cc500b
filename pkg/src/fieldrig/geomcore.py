"""Geometry core: vectors, rotations, meshes, grids, cameras, interpolation.

Everything downstream (characters, sensors, fields, extraction, animation,
metrics) builds on the types here.  Units are metres throughout; reporting
layers convert to centimetres at the edge.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Orthonormality tolerance for rotation matrices (max |R^T R - I| entry).
ROTATION_ORTHO_TOL = 1e-9
# Compositions between re-orthonormalizations.
RENORM_EVERY = 64
# Faces with area below this are dropped at mesh construction.
DEGENERATE_FACE_AREA = 1e-12


class InvalidProjectionError(ValueError):
    """Raised when a point at or behind the camera plane is projected."""


class MeshFormatError(ValueError):
    """Raised on malformed mesh files; message carries the line number."""


def unit(v):
    """Normalize a vector, raising on (near-)zero input."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n < 1e-12:
        raise ValueError("cannot normalize zero-length vector")
    return v / n


def rotation_about_axis(axis, angle):
    """Rodrigues rotation matrix for a unit-normalized axis and angle (rad)."""
    a = unit(axis)
    x, y, z = a
    c, s = np.cos(angle), np.sin(angle)
    cc = 1.0 - c
    return np.array([
        [c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s],
        [y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s],
        [z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc],
    ])


def _nearest_orthonormal(m):
    # Orthogonal projection onto SO(3) via SVD; flips the last singular
    # direction if the raw projection would be a reflection.
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


@dataclass
class Rotation:
    """A 3x3 rotation with drift control.

    Composition counts are tracked so long chains are re-orthonormalized
    every RENORM_EVERY composes, keeping |R^T R - I| below 1e-9.
    """

    matrix: np.ndarray
    compositions: int = 0

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (3, 3):
            raise ValueError("rotation matrix must be 3x3")

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.eye(3))

    @staticmethod
    def from_axis_angle(axis, angle) -> "Rotation":
        return Rotation(rotation_about_axis(axis, angle))

    @staticmethod
    def from_quaternion(q) -> "Rotation":
        """Rotation from a (w, x, y, z) quaternion; normalized first."""
        q = np.asarray(q, dtype=np.float64)
        n = float(np.linalg.norm(q))
        if n < 1e-12:
            raise ValueError("zero-norm quaternion")
        w, x, y, z = q / n
        return Rotation(np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]))

    def to_quaternion(self):
        """Unit quaternion (w, x, y, z) with w >= 0."""
        m = self.matrix
        t = np.trace(m)
        if t > 0:
            s = np.sqrt(t + 1.0) * 2
            q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                          (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
        else:
            i = int(np.argmax(np.diagonal(m)))
            j, k = (i + 1) % 3, (i + 2) % 3
            s = np.sqrt(max(m[i, i] - m[j, j] - m[k, k] + 1.0, 0.0)) * 2
            q = np.empty(4)
            q[0] = (m[k, j] - m[j, k]) / s
            q[1 + i] = 0.25 * s
            q[1 + j] = (m[j, i] + m[i, j]) / s
            q[1 + k] = (m[k, i] + m[i, k]) / s
        if q[0] < 0:
            q = -q
        return q / np.linalg.norm(q)

    def compose(self, other: "Rotation") -> "Rotation":
        m = self.matrix @ other.matrix
        count = self.compositions + other.compositions + 1
        if count >= RENORM_EVERY:
            return Rotation(_nearest_orthonormal(m), 0)
        return Rotation(m, count)

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.matrix.T

    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T, self.compositions)

    def orthonormality_error(self) -> float:
        return float(np.abs(self.matrix.T @ self.matrix - np.eye(3)).max())

    def is_valid(self) -> bool:
        return (self.orthonormality_error() < ROTATION_ORTHO_TOL
                and np.linalg.det(self.matrix) > 0)


def quaternion_payload(matrix, cached=None):
    """Quaternion to serialize for `matrix`, preferring a cached source.

    Quaternion-matrix transcoding dithers in the last ulps, so rewriting a
    parsed document from freshly extracted quaternions need not reproduce
    the source bytes (the extract-rebuild map can wander for thousands of
    steps without hitting a fixed point).  Readers therefore keep the
    quaternions they parsed, and writers re-emit the cached value whenever
    it still rebuilds `matrix` bit for bit, falling back to extraction
    otherwise.  Stale caches are harmless: the guard rejects them.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if cached is not None:
        cached = np.asarray(cached, dtype=np.float64)
        if Rotation.from_quaternion(cached).matrix.tobytes() == matrix.tobytes():
            return cached
    return Rotation(matrix).to_quaternion()


@dataclass
class RigidTransform:
    """Rotation plus translation, applied as x -> R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("rigid transform needs a 3x3 rotation and 3-vector")

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self . other)(x) = self(other(x))."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


# ---------------------------------------------------------------------------
# Meshes


@dataclass
class TriangleMesh:
    """Indexed triangle mesh; degenerate faces are dropped at construction."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh vertices must be finite")
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ValueError("face index out of range")
            areas = self._raw_areas()
            keep = areas > DEGENERATE_FACE_AREA
            if not keep.all():
                self.faces = self.faces[keep]

    def _raw_areas(self):
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_areas(self):
        return self._raw_areas()

    def face_normals(self):
        """Unit normals following the face winding."""
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        n = np.cross(b - a, c - a)
        length = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(length, 1e-300)

    def bounds(self):
        if not len(self.vertices):
            raise ValueError("empty mesh has no bounds")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def _edges_directed(self):
        f = self.faces
        return np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)

    def is_watertight(self) -> bool:
        """True when every undirected edge is shared by exactly two faces."""
        if not len(self.faces):
            return False
        e = np.sort(self._edges_directed(), axis=1)
        _, counts = np.unique(e[:, 0] * (self.n_vertices + 1) + e[:, 1],
                              return_counts=True)
        return bool(np.all(counts == 2))

    def is_oriented(self) -> bool:
        """True when no directed edge repeats (consistent winding)."""
        if not len(self.faces):
            return True
        e = self._edges_directed()
        keys = e[:, 0] * (self.n_vertices + 1) + e[:, 1]
        return len(np.unique(keys)) == len(keys)


def write_obj(mesh: TriangleMesh, path) -> None:
    """Write an ASCII OBJ file (vertices and 1-based triangular faces)."""
    lines = []
    for x, y, z in mesh.vertices:
        lines.append(f"v {float(x)!r} {float(y)!r} {float(z)!r}")
    for a, b, c in mesh.faces + 1:
        lines.append(f"f {a} {b} {c}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_obj(path) -> TriangleMesh:
    """Read the OBJ subset written by write_obj (plus comments and normals)."""
    vertices, faces = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            key = parts[0]
            if key == "v":
                if len(parts) < 4:
                    raise MeshFormatError(f"line {lineno}: vertex needs 3 coordinates")
                try:
                    vertices.append([float(p) for p in parts[1:4]])
                except ValueError:
                    raise MeshFormatError(f"line {lineno}: non-numeric coordinate")
            elif key == "f":
                if len(parts) != 4:
                    raise MeshFormatError(f"line {lineno}: only triangular faces supported")
                idx = []
                for p in parts[1:]:
                    tok = p.split("/")[0]
                    try:
                        i = int(tok)
                    except ValueError:
                        raise MeshFormatError(f"line {lineno}: malformed face index {p!r}")
                    if i < 1:
                        raise MeshFormatError(f"line {lineno}: face indices are 1-based")
                    idx.append(i - 1)
                faces.append(idx)
            elif key in ("vn", "vt"):
                continue
            else:
                raise MeshFormatError(f"line {lineno}: unknown keyword {key!r}")
    mesh = TriangleMesh(np.array(vertices, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))
    if mesh.faces.size and mesh.faces.max() >= len(mesh.vertices):
        raise MeshFormatError("face index out of range")
    return mesh


def make_icosphere(subdivisions: int = 3, radius: float = 1.0,
                   center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Icosahedron subdivided and projected onto a sphere (test geometry)."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = list(map(tuple, verts))
    for _ in range(subdivisions):
        cache: dict = {}
        new_faces = []

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = np.array(verts[i]) + np.array(verts[j])
                m /= np.linalg.norm(m)
                verts.append(tuple(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts, dtype=np.float64) * radius + np.asarray(center, dtype=np.float64)
    return TriangleMesh(v, np.array(faces, dtype=np.int64))


# ---------------------------------------------------------------------------
# Grids and interpolation


@dataclass
class VoxelGrid:
    """Dense grid of C-channel values stored at cell centres.

    origin is the minimum corner of the volume; cell i holds its value at
    origin + (i + 0.5) * cell_size.
    """

    origin: np.ndarray
    cell_size: float
    values: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.origin.shape != (3,):
            raise ValueError("grid origin must be a 3-vector")
        self.cell_size = float(self.cell_size)
        if self.cell_size <= 0:
            raise ValueError("cell size must be positive")
        self.values = np.asarray(self.values)
        if self.values.ndim == 3:
            self.values = self.values[..., None]
        if self.values.ndim != 4:
            raise ValueError("grid values must be (nx, ny, nz) or (nx, ny, nz, c)")

    @property
    def resolution(self):
        return self.values.shape[:3]

    @property
    def channels(self) -> int:
        return self.values.shape[3]

    def cell_centers(self):
        """All cell centres, shape (nx*ny*nz, 3), C-order over (ix, iy, iz)."""
        nx, ny, nz = self.resolution
        ii = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                  indexing="ij"), axis=-1).reshape(-1, 3)
        return self.origin + (ii + 0.5) * self.cell_size


def trilinear_weights(grid: VoxelGrid, points):
    """Interpolation stencil for each query point.

    Returns (idx, w): flat cell indices (n, 8) and weights (n, 8).  Weights
    are zero for stencil corners outside the grid (zero padding) and all-zero
    for points outside the grid volume, so dot(w, values[idx]) is the sample.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    res = np.array(grid.resolution)
    rel = (points - grid.origin) / grid.cell_size
    inside = np.all((rel >= 0.0) & (rel <= res), axis=1)
    u = rel - 0.5
    i0 = np.floor(u).astype(np.int64)
    f = u - i0
    offs = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
    corners = i0[:, None, :] + offs[None, :, :]          # (n, 8, 3)
    in_range = np.all((corners >= 0) & (corners < res), axis=2)
    w1 = np.stack([1.0 - f, f], axis=2)                  # (n, 3, 2)
    w = (w1[:, 0, offs[:, 0]] * w1[:, 1, offs[:, 1]] * w1[:, 2, offs[:, 2]])
    w = w * in_range * inside[:, None]
    clipped = np.clip(corners, 0, res - 1)
    idx = (clipped[..., 0] * res[1] + clipped[..., 1]) * res[2] + clipped[..., 2]
    return idx, w


def trilinear_sample(grid: VoxelGrid, points):
    """Trilinear interpolation at cell centres; zero outside the volume."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    idx, w = trilinear_weights(grid, pts)
    flat = grid.values.reshape(-1, grid.channels).astype(np.float64)
    out = np.einsum("nk,nkc->nc", w, flat[idx])
    return out[0] if single else out


@dataclass
class FeatureMap2D:
    """2D feature image; values (height, width, channels), pixel centres at
    integer (u, v).  pixel_scale records how many source-image pixels one
    cell of this map covers (4 after the image encoder)."""

    values: np.ndarray
    pixel_scale: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim == 2:
            self.values = self.values[..., None]
        if self.values.ndim != 3:
            raise ValueError("feature map values must be (h, w) or (h, w, c)")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def bilinear_weights(fm: FeatureMap2D, uv):
    """Bilinear stencil (flat pixel indices (n, 4), weights (n, 4)).

    Mirrors trilinear_weights: zero weight beyond the image rectangle
    [-0.5, w-0.5] x [-0.5, h-0.5] and zero-padded border blending.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    w_, h_ = fm.width, fm.height
    inside = ((uv[:, 0] >= -0.5) & (uv[:, 0] <= w_ - 0.5)
              & (uv[:, 1] >= -0.5) & (uv[:, 1] <= h_ - 0.5))
    i0 = np.floor(uv).astype(np.int64)
    f = uv - i0
    offs = np.array([[i, j] for i in (0, 1) for j in (0, 1)])
    corners = i0[:, None, :] + offs[None, :, :]          # (n, 4, 2) as (u, v)
    in_range = ((corners[..., 0] >= 0) & (corners[..., 0] < w_)
                & (corners[..., 1] >= 0) & (corners[..., 1] < h_))
    w1 = np.stack([1.0 - f, f], axis=2)
    w = w1[:, 0, offs[:, 0]] * w1[:, 1, offs[:, 1]]
    w = w * in_range * inside[:, None]
    cu = np.clip(corners[..., 0], 0, w_ - 1)
    cv = np.clip(corners[..., 1], 0, h_ - 1)
    idx = cv * w_ + cu
    return idx, w


def bilinear_sample(fm: FeatureMap2D, uv):
    """Bilinear interpolation with pixel centres at integer uv; zero outside."""
    uvs = np.asarray(uv, dtype=np.float64)
    single = uvs.ndim == 1
    idx, w = bilinear_weights(fm, uvs)
    flat = fm.values.reshape(-1, fm.channels).astype(np.float64)
    out = np.einsum("nk,nkc->nc", w, flat[idx])
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Cameras


@dataclass
class Camera:
    """Pinhole camera; extrinsics map world points into the camera frame
    (+z forward, +x right, +y down)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsics: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    def position(self):
        """Camera centre in world coordinates."""
        return self.extrinsics.inverse().translation


def project_points(points, camera: Camera):
    """Batch pinhole projection.

    Returns (uv (n, 2), depth (n,), valid (n,)); rows with depth <= 0 are
    flagged invalid and carry zeros.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = camera.extrinsics.apply(pts)
    z = cam[:, 2]
    valid = z > 0.0
    safe = np.where(valid, z, 1.0)
    uv = np.empty((len(pts), 2))
    uv[:, 0] = camera.fx * cam[:, 0] / safe + camera.cx
    uv[:, 1] = camera.fy * cam[:, 1] / safe + camera.cy
    uv[~valid] = 0.0
    depth = np.where(valid, z, 0.0)
    return uv, depth, valid


def perspective_project(point, camera: Camera):
    """Project one world point; returns (uv, depth).

    Raises InvalidProjectionError for points at or behind the camera plane.
    """
    uv, depth, valid = project_points(np.asarray(point, dtype=np.float64), camera)
    if not valid[0]:
        raise InvalidProjectionError("point at or behind the camera plane")
    return uv[0], float(depth[0])
