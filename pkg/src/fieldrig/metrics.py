"""Surface and skeleton evaluation metrics.

Chamfer and P2S are sampling-based: area-uniform points drawn on one mesh,
exact nearest-surface distance to the other.  Chamfer is literally the mean
of the two directional P2S values with the same sample count and seed, so
the composition identity holds exactly.  Normal consistency compares sample
normals against the nearest face's normal in both directions.  Distances
are reported in centimetres (meshes live in metres).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .animation import retarget
from .character import analytic_joints, character_mesh
from .geomcore import TriangleMesh

DEFAULT_SAMPLES = 10000
M_TO_CM = 100.0


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0):
    """Area-uniform surface samples: (points (n, 3), normals, face indices)."""
    if not mesh.n_faces:
        raise ValueError("cannot sample an empty mesh")
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    faces = rng.choice(mesh.n_faces, size=n, p=areas / areas.sum())
    u = rng.random(n)
    v = rng.random(n)
    fold = u + v > 1.0
    u[fold], v[fold] = 1.0 - u[fold], 1.0 - v[fold]
    a = mesh.vertices[mesh.faces[faces, 0]]
    b = mesh.vertices[mesh.faces[faces, 1]]
    c = mesh.vertices[mesh.faces[faces, 2]]
    pts = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    return pts, mesh.face_normals()[faces], faces


def _closest_on_triangles(p, a, b, c):
    """Closest point on each triangle (a, b, c) to each query p, rowwise."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    denom = va + vb + vc
    safe = np.where(np.abs(denom) > 0, denom, 1.0)
    out = a + (vb / safe)[:, None] * ab + (vc / safe)[:, None] * ac

    def assign(mask, value):
        out[mask] = value[mask]

    w = np.clip((d4 - d3) / np.where(np.abs((d4 - d3) + (d5 - d6)) > 0,
                                     (d4 - d3) + (d5 - d6), 1.0), 0.0, 1.0)
    assign((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
           b + w[:, None] * (c - b))
    w = np.clip(d2 / np.where(np.abs(d2 - d6) > 0, d2 - d6, 1.0), 0.0, 1.0)
    assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
    w = np.clip(d1 / np.where(np.abs(d1 - d3) > 0, d1 - d3, 1.0), 0.0, 1.0)
    assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + w[:, None] * ab)
    assign((d6 >= 0) & (d5 <= d6), c)
    assign((d3 >= 0) & (d4 <= d3), b)
    assign((d1 <= 0) & (d2 <= 0), a)
    return out


class SurfaceIndex:
    """Exact nearest-surface queries against a triangle mesh.

    A centroid k-d tree prunes candidates; the candidate set keeps growing
    until the next centroid is provably farther than the best exact hit
    could allow (centroid distance minus that face's bounding radius), so
    results match a brute-force scan over every face.
    """

    def __init__(self, mesh: TriangleMesh):
        if not mesh.n_faces:
            raise ValueError("cannot index an empty mesh")
        self.mesh = mesh
        v = mesh.vertices
        self.tri = v[mesh.faces]
        self.centroids = self.tri.mean(axis=1)
        self.radius = np.linalg.norm(
            self.tri - self.centroids[:, None, :], axis=2).max()
        self.tree = cKDTree(self.centroids)

    def query(self, points):
        """(distances, closest points, face indices) for each query point;
        distance ties resolve to the lowest face index."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n, f = len(pts), self.mesh.n_faces
        best_d = np.full(n, np.inf)
        best_p = np.zeros((n, 3))
        best_f = np.full(n, f, dtype=np.int64)
        active = np.arange(n)
        k = min(8, f)
        while len(active):
            d_cent, cand = self.tree.query(pts[active], k=k)
            if k == 1:
                d_cent, cand = d_cent[:, None], cand[:, None]
            flat_p = np.repeat(pts[active], cand.shape[1], axis=0)
            flat_c = cand.ravel()
            closest = _closest_on_triangles(
                flat_p, self.tri[flat_c, 0], self.tri[flat_c, 1],
                self.tri[flat_c, 2]).reshape(len(active), -1, 3)
            dist = np.linalg.norm(closest - pts[active][:, None, :], axis=2)
            row_best = dist.min(axis=1)
            tie = np.where(dist <= row_best[:, None], cand, f)
            row_face = tie.min(axis=1)
            pick = np.argmax(tie == row_face[:, None], axis=1)
            rows = np.arange(len(active))
            # Candidate sets grow as supersets, so <= lets the widest set
            # settle equal-distance ties by face index.
            better = row_best <= best_d[active]
            upd = active[better]
            best_d[upd] = row_best[better]
            best_f[upd] = row_face[better]
            best_p[upd] = closest[rows[better], pick[better]]
            if k >= f:
                break
            # A face can only undercut the incumbent if its centroid lies
            # within best + radius; the k-th centroid bounds the unseen ones.
            unresolved = d_cent[:, -1] < best_d[active] + self.radius
            active = active[unresolved]
            k = min(k * 4, f)
        return best_d, best_p, best_f


def nearest_surface(points, mesh: TriangleMesh):
    """One-shot exact nearest-surface query (build index, query, discard)."""
    return SurfaceIndex(mesh).query(points)


def p2s(pred: TriangleMesh, gt: TriangleMesh, n: int = DEFAULT_SAMPLES,
        seed: int = 0) -> float:
    """Mean point-to-surface distance in cm, samples on pred against gt."""
    pts, _, _ = sample_surface(pred, n, seed)
    d, _, _ = SurfaceIndex(gt).query(pts)
    return float(d.mean() * M_TO_CM)


def chamfer(a: TriangleMesh, b: TriangleMesh, n: int = DEFAULT_SAMPLES,
            seed: int = 0) -> float:
    """Symmetric Chamfer distance in cm: mean of the two directional P2S
    values with identical sample count and seed."""
    return 0.5 * (p2s(a, b, n, seed) + p2s(b, a, n, seed))


def normal_consistency(pred: TriangleMesh, gt: TriangleMesh,
                       n: int = DEFAULT_SAMPLES, seed: int = 0) -> float:
    """Mean cosine between sample normals and nearest-face normals, averaged
    over the accuracy (pred against gt) and completeness directions."""
    for name, mesh in (("pred", pred), ("gt", gt)):
        if not mesh.is_oriented():
            raise ValueError(f"{name} mesh is not consistently oriented")

    def direction(src, dst):
        pts, nrm, _ = sample_surface(src, n, seed)
        _, _, faces = SurfaceIndex(dst).query(pts)
        return float(np.einsum("ij,ij->i", nrm,
                               dst.face_normals()[faces]).mean())

    return 0.5 * (direction(pred, gt) + direction(gt, pred))


def mpjpe(pred_joints, gt_joints) -> float:
    """Mean Euclidean per-joint position error in cm."""
    p = np.asarray(pred_joints, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gt_joints, dtype=np.float64).reshape(-1, 3)
    if p.shape != g.shape:
        raise ValueError("joint lists must have equal length")
    return float(np.linalg.norm(p - g, axis=1).mean() * M_TO_CM)


def retarget_error(model, gt_char, pose, resolution: int = 128,
                   n: int = DEFAULT_SAMPLES, seed: int = 0) -> float:
    """Chamfer (cm) between the model retargeted to the pose's joints and
    the analytically posed character surface."""
    posed = retarget(model, analytic_joints(gt_char, pose))
    gt_mesh = character_mesh(gt_char, pose, resolution=resolution)
    return chamfer(posed, gt_mesh, n, seed)


@dataclass
class MetricsReport:
    """Evaluation summary; fields left None were not requested."""

    chamfer_cm: Optional[float] = None
    p2s_cm: Optional[float] = None
    normal_consistency: Optional[float] = None
    mpjpe_cm: Optional[float] = None
    retarget_error_cm: Optional[dict] = None
    n_samples: int = DEFAULT_SAMPLES
    seed: int = 0

    def __post_init__(self):
        for name in ("chamfer_cm", "p2s_cm", "mpjpe_cm"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.normal_consistency is not None \
                and not -1.0 <= self.normal_consistency <= 1.0:
            raise ValueError("normal consistency must lie in [-1, 1]")
        if self.retarget_error_cm is not None:
            self.retarget_error_cm = {int(k): float(v)
                                      for k, v in
                                      dict(self.retarget_error_cm).items()}


def _sig6(v) -> str:
    return format(float(v), ".6g")


def report_rows(report: MetricsReport):
    rows = []
    for name in ("chamfer_cm", "p2s_cm", "normal_consistency", "mpjpe_cm"):
        v = getattr(report, name)
        if v is not None:
            rows.append((name, _sig6(v)))
    if report.retarget_error_cm is not None:
        for offset in sorted(report.retarget_error_cm):
            rows.append((f"retarget_error_cm[+{offset}]",
                         _sig6(report.retarget_error_cm[offset])))
    rows.append(("n_samples", str(report.n_samples)))
    rows.append(("seed", str(report.seed)))
    return rows


def write_metrics_csv(report: MetricsReport, path) -> None:
    with open(path, "w") as fh:
        fh.write("metric,value\n")
        for key, val in report_rows(report):
            fh.write(f"{key},{val}\n")


def format_metrics_text(report: MetricsReport) -> str:
    labels = {"chamfer_cm": "Chamfer distance (cm)",
              "p2s_cm": "Point-to-surface (cm)",
              "normal_consistency": "Normal consistency",
              "mpjpe_cm": "MPJPE (cm)",
              "n_samples": "Surface samples",
              "seed": "Sampling seed"}
    lines = []
    for key, val in report_rows(report):
        label = labels.get(key)
        if label is None and key.startswith("retarget_error_cm"):
            label = "Retarget error (cm) " + key[key.index("["):]
        lines.append(f"{label + ':':<30}{val}")
    return "\n".join(lines) + "\n"


def write_metrics_text(report: MetricsReport, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_metrics_text(report))
