"""Iso-surface extraction, surface sampling and the point-set metric suite."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

METRIC_NAMES = ("accuracy", "completeness", "chamfer_l1", "precision", "recall", "f_score",
                "normal_consistency")


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def empty(self) -> bool:
        return len(self.faces) == 0

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(ln > 0, ln, 1.0)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def is_watertight(self) -> bool:
        """Every undirected edge is shared by exactly two faces."""
        if self.empty:
            return False
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def cleaned(self, min_area: float = 1e-12) -> "TriangleMesh":
        """Drop degenerate faces and unreferenced vertices."""
        f = self.faces
        if len(f):
            keep = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
            keep &= self.face_areas() > min_area
            f = f[keep]
        used = np.unique(f)
        remap = np.full(len(self.vertices), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        normals = None if self.normals is None else self.normals[used]
        return TriangleMesh(self.vertices[used], remap[f] if len(f) else f, normals)


def _grid(box, resolution):
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    axes = [np.linspace(lo[i], hi[i], resolution + 1) for i in range(3)]
    return lo, hi, axes


def sample_grid(fn, box, resolution: int, chunk: int = 65536) -> np.ndarray:
    """Field values on a (res+1)^3 lattice spanning ``box``."""
    _, _, axes = _grid(box, resolution)
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        out[s:s + chunk] = np.asarray(fn(pts[s:s + chunk]), dtype=np.float64)
    return out.reshape(X.shape)


def marching_cubes(volume, box, level: float = 0.0) -> TriangleMesh:
    """Zero-level triangle mesh of a sampled volume; empty when no crossing exists.

    Triangles are oriented so their normals point towards increasing values.
    """
    vol = np.asarray(volume, dtype=np.float64)
    if min(vol.shape) < 2:
        raise ValueError("volume must have at least 2 samples per axis")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    if not (vol.min() < level < vol.max()):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64), np.zeros((0, 3)))
    spacing = (hi - lo) / (np.asarray(vol.shape) - 1)
    verts, faces, normals, _ = measure.marching_cubes(vol, level=level, spacing=tuple(spacing),
                                                      gradient_direction="ascent",
                                                      method="lorensen")
    mesh = TriangleMesh(verts + lo, faces, -normals)
    mesh = mesh.cleaned()
    # orient faces with the field gradient
    if not mesh.empty:
        fn = mesh.face_normals()
        vn = mesh.normals[mesh.faces].sum(axis=1)
        flip = np.sum(fn * vn, axis=1) < 0
        if flip.mean() > 0.5:
            mesh.faces = mesh.faces[:, ::-1].copy()
    return mesh


def extract_mesh(fn, box, resolution: int) -> TriangleMesh:
    """Sample ``fn`` on a grid over ``box`` and run marching cubes at level 0."""
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    vol = sample_grid(fn, box, resolution)
    if not np.all(np.isfinite(vol)):
        raise ValueError("field produced non-finite values")
    return marching_cubes(vol, box)


def sample_surface(mesh: TriangleMesh, n_points: int, seed: int = 0):
    """Area-weighted uniform samples and their face normals."""
    if mesh.empty:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    cdf = np.cumsum(areas)
    idx = np.searchsorted(cdf, rng.uniform(0.0, cdf[-1], size=n_points), side="right")
    idx = np.minimum(idx, len(areas) - 1)
    r1 = np.sqrt(rng.uniform(size=n_points))
    r2 = rng.uniform(size=n_points)
    v = mesh.vertices[mesh.faces[idx]]
    pts = (1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1] + (r1 * r2)[:, None] * v[:, 2]
    return pts, mesh.face_normals()[idx]


@dataclass
class MetricReport:
    accuracy: float
    completeness: float
    chamfer_l1: float
    precision: float
    recall: float
    f_score: float
    normal_consistency: float
    threshold: float
    n_pred: int
    n_gt: int
    valid: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @staticmethod
    def csv_header() -> str:
        return ",".join(METRIC_NAMES + ("threshold", "n_pred", "n_gt", "valid"))

    def csv_row(self) -> str:
        vals = [getattr(self, k) for k in METRIC_NAMES] + [self.threshold]
        return ",".join(f"{v:.9g}" for v in vals) + f",{self.n_pred},{self.n_gt},{int(self.valid)}"


def invalid_report(threshold, n_pred, n_gt) -> MetricReport:
    nan = float("nan")
    return MetricReport(nan, nan, nan, 0.0, 0.0, 0.0, nan, float(threshold), n_pred, n_gt, False)


def nearest(src, dst):
    """Distance and index of the nearest ``dst`` point for every ``src`` point."""
    d, i = cKDTree(dst).query(src, k=1)
    return d, i


def f_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def evaluate(pred_points, gt_points, threshold: float, pred_normals=None, gt_normals=None,
             return_distances: bool = False):
    """Accuracy/completeness/Chamfer-L1, precision/recall/F-score at ``threshold`` and
    normal consistency.  Distances strictly below the threshold count as matched.

    With ``return_distances`` the result is ``(report, d_pred_to_gt, d_gt_to_pred)``.
    """
    pred = np.asarray(pred_points, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        rep = invalid_report(threshold, len(pred), len(gt))
        return (rep, np.zeros(0), np.zeros(0)) if return_distances else rep
    d_pg, i_pg = nearest(pred, gt)
    d_gp, i_gp = nearest(gt, pred)
    acc = float(np.mean(d_pg))
    comp = float(np.mean(d_gp))
    prec = float(np.mean(d_pg < threshold))
    rec = float(np.mean(d_gp < threshold))
    nc = float("nan")
    if pred_normals is not None and gt_normals is not None:
        pn = np.asarray(pred_normals, dtype=np.float64).reshape(-1, 3)
        gn = np.asarray(gt_normals, dtype=np.float64).reshape(-1, 3)
        pn = pn / np.maximum(np.linalg.norm(pn, axis=1, keepdims=True), 1e-12)
        gn = gn / np.maximum(np.linalg.norm(gn, axis=1, keepdims=True), 1e-12)
        c1 = np.abs(np.sum(pn * gn[i_pg], axis=1)).mean()
        c2 = np.abs(np.sum(gn * pn[i_gp], axis=1)).mean()
        nc = float(0.5 * (c1 + c2))
    rep = MetricReport(acc, comp, 0.5 * (acc + comp), prec, rec, f_score(prec, rec), nc,
                       float(threshold), len(pred), len(gt))
    return (rep, d_pg, d_gp) if return_distances else rep


def crop(points, normals, box):
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    keep = np.all((points >= lo) & (points <= hi), axis=1)
    return points[keep], None if normals is None else normals[keep]


def evaluate_meshes(pred: TriangleMesh, gt: TriangleMesh, threshold: float, n_points: int = 100_000,
                    seed: int = 0, crop_box=None, return_distances: bool = False):
    if pred.empty or gt.empty:
        rep = invalid_report(threshold, 0 if pred.empty else n_points, 0 if gt.empty else n_points)
        return (rep, np.zeros(0), np.zeros(0)) if return_distances else rep
    pp, pn = sample_surface(pred, n_points, seed)
    gp, gn = sample_surface(gt, n_points, seed + 1)
    if crop_box is not None:
        pp, pn = crop(pp, pn, crop_box)
        gp, gn = crop(gp, gn, crop_box)
    return evaluate(pp, gp, threshold, pn, gn, return_distances)


def bbox_diagonal(points) -> float:
    p = np.asarray(points, dtype=np.float64)
    return float(math.dist(p.min(axis=0), p.max(axis=0)))
