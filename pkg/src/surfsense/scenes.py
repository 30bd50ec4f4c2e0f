"""Synthetic ground truth: analytic scenes rendered by sphere tracing into posed RGB-D-N views."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera, View, backproject, pixel_ray
from .dataio import save_dataset, write_ply
from .fields import AnalyticSdf, UnionSdf

PRESETS = ("sphere", "room", "plane-card")
AMBIENT = 0.2


@dataclass
class SceneSpec:
    """Primitives, bounds, lighting and a camera trajectory.

    ``trajectory`` is ``"orbit"`` (cameras on elevation rings looking at the
    origin) or ``"ring"`` (cameras inside the scene on a horizontal ring,
    looking across it).
    """

    name: str
    primitives: list
    bbox: tuple  # ((xmin, ymin, zmin), (xmax, ymax, zmax))
    light: tuple = (0.4, -0.5, 0.75)
    background: tuple = (0.0, 0.0, 0.0)
    trajectory: str = "orbit"
    views: int = 24
    width: int = 96
    height: int = 96
    fov_deg: float = 50.0
    distance: float = 3.0
    elevations: tuple = (-35.0, 0.0, 35.0)
    ring_height: float = 0.2
    target_height: float = -0.3
    init_radius: float = 0.8
    inside_out: bool = False
    scene_scale: float = 1.0  # metres per scene unit
    depth_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.trajectory not in ("orbit", "ring"):
            raise ValueError("trajectory must be 'orbit' or 'ring'")
        if self.views < 1 or self.width < 2 or self.height < 2:
            raise ValueError("need at least one view and 2x2 pixels")
        lo, hi = np.asarray(self.bbox, dtype=np.float64)
        if np.any(hi <= lo):
            raise ValueError("degenerate bounding box")

    @property
    def field(self):
        return self.primitives[0] if len(self.primitives) == 1 else UnionSdf(list(self.primitives))

    @property
    def bound_radius(self) -> float:
        lo, hi = np.asarray(self.bbox, dtype=np.float64)
        return float(np.linalg.norm(np.maximum(np.abs(lo), np.abs(hi))))

    @property
    def light_dir(self) -> np.ndarray:
        l = np.asarray(self.light, dtype=np.float64)
        return l / np.linalg.norm(l)

    def focal(self) -> float:
        return 0.5 * self.width / math.tan(math.radians(self.fov_deg) / 2)

    def cameras(self) -> list:
        f = self.focal()
        cx, cy = (self.width - 1) / 2, (self.height - 1) / 2
        cams = []
        if self.trajectory == "orbit":
            rings = len(self.elevations)
            for i in range(self.views):
                ring = i % rings
                k = i // rings
                per_ring = -(-self.views // rings)
                az = 2 * math.pi * (k + 0.5 * (ring % 2)) / per_ring
                el = math.radians(self.elevations[ring])
                eye = self.distance * np.array([math.cos(el) * math.cos(az),
                                                math.cos(el) * math.sin(az), math.sin(el)])
                cams.append(Camera.look_at(eye, (0, 0, 0), (0, 0, 1), f, f, cx, cy,
                                           self.width, self.height))
        else:
            for i in range(self.views):
                az = 2 * math.pi * i / self.views
                eye = np.array([self.distance * math.cos(az), self.distance * math.sin(az),
                                self.ring_height])
                # look across the room, past the centre
                target = np.array([-math.cos(az + 0.35), -math.sin(az + 0.35), 0.0]) * self.distance
                target[2] = self.target_height
                cams.append(Camera.look_at(eye, target, (0, 0, 1), f, f, cx, cy,
                                           self.width, self.height))
        return cams


def preset(name: str, views: int = 24, width: int = 96, height: int = 96, seed: int = 0) -> SceneSpec:
    if name == "sphere":
        sphere = AnalyticSdf("sphere", radius=1.0, albedo=(0.85, 0.6, 0.35), albedo2=(0.35, 0.45, 0.75),
                             texture="checker", checker_scale=0.4)
        return SceneSpec("sphere", [sphere], ((-1.25,) * 3, (1.25,) * 3), views=views, width=width,
                         height=height, fov_deg=50.0, distance=3.0, init_radius=0.8, seed=seed)
    if name == "room":
        walls = AnalyticSdf("box", half_extents=(2.0, 2.0, 1.25), inside_out=True,
                            albedo=(0.8, 0.78, 0.7), albedo2=(0.45, 0.4, 0.35),
                            texture="checker", checker_scale=0.5)
        ball = AnalyticSdf("sphere", center=(0.8, 0.6, -0.75), radius=0.5, albedo=(0.8, 0.3, 0.25),
                           albedo2=(0.9, 0.7, 0.3), texture="checker", checker_scale=0.25)
        block = AnalyticSdf("box", center=(-0.9, -0.7, -0.85), half_extents=(0.4, 0.5, 0.4),
                            albedo=(0.3, 0.55, 0.8), albedo2=(0.2, 0.3, 0.45), texture="checker",
                            checker_scale=0.25)
        return SceneSpec("room", [walls, ball, block], ((-2.1, -2.1, -1.35), (2.1, 2.1, 1.35)),
                         light=(0.3, 0.2, 1.0), trajectory="ring", views=views, width=width,
                         height=height, fov_deg=75.0, distance=1.2, ring_height=0.2,
                         target_height=-0.4, init_radius=1.8, inside_out=True, seed=seed)
    if name == "plane-card":
        card = AnalyticSdf("plane", normal=(0, 0, 1), offset=0.0, albedo=(0.9, 0.85, 0.8),
                           albedo2=(0.15, 0.2, 0.3), texture="checker", checker_scale=0.3)
        return SceneSpec("plane-card", [card], ((-1.5, -1.5, -0.5), (1.5, 1.5, 0.5)),
                         views=views, width=width, height=height, fov_deg=50.0, distance=2.5,
                         elevations=(45.0, 60.0, 75.0), init_radius=0.8, seed=seed)
    raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


def scene_from_dict(data: dict) -> SceneSpec:
    """SceneSpec from a JSON-style mapping whose ``primitives`` are AnalyticSdf field dicts."""
    if not isinstance(data, dict) or "primitives" not in data or "bbox" not in data:
        raise ValueError("scene spec needs 'primitives' and 'bbox'")
    data = dict(data)
    prims = data.pop("primitives")
    if not prims:
        raise ValueError("scene spec has no primitives")
    known = set(SceneSpec.__dataclass_fields__)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown scene spec keys {unknown}")
    try:
        primitives = [AnalyticSdf(**p) for p in prims]
    except TypeError as exc:
        raise ValueError(f"bad primitive: {exc}") from exc
    data.setdefault("name", "custom")
    for key in ("bbox", "light", "background", "elevations"):
        if key in data:
            data[key] = tuple(tuple(x) if isinstance(x, list) else x for x in data[key])
    return SceneSpec(primitives=primitives, **data)


# ----------------------------------------------------------------------------
# sphere tracing


def sphere_trace(field, origins, dirs, t_max: float = 100.0, max_steps: int = 256, tol: float = 1e-6):
    """March each ray by the field value until ``|f| < tol``.

    Returns ``(t_hit, normal, albedo, hit)``; normals are the normalised field
    gradient at the hit point.  Single rays give unbatched outputs.
    """
    o = np.asarray(origins, dtype=np.float64)
    v = np.asarray(dirs, dtype=np.float64)
    single = o.ndim == 1
    o, v = np.atleast_2d(o), np.atleast_2d(v)
    n = len(o)
    t = np.zeros(n)
    hit = np.zeros(n, bool)
    active = np.ones(n, bool)
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        d = field.distance(o[idx] + t[idx, None] * v[idx])
        done = np.abs(d) < tol
        hit[idx[done]] = True
        t[idx[~done]] += d[~done]
        gone = (~done) & ((t[idx] > t_max) | (t[idx] < 0))
        active[idx[done | gone]] = False
    normal = np.zeros((n, 3))
    albedo = np.zeros((n, 3))
    if hit.any():
        p = o[hit] + t[hit, None] * v[hit]
        _, g = field.distance_and_gradient(p)
        normal[hit] = g / np.linalg.norm(g, axis=-1, keepdims=True)
        albedo[hit] = field.albedo_at(p)
    t = np.where(hit, t, np.inf)
    if single:
        return float(t[0]), normal[0], albedo[0], bool(hit[0])
    return t, normal, albedo, hit


def shade(albedo, normal, light_dir):
    lam = np.maximum(0.0, np.asarray(normal) @ np.asarray(light_dir))
    return np.clip(np.asarray(albedo) * (lam[..., None] + AMBIENT), 0.0, 1.0)


def render_gt_view(spec: SceneSpec, camera: Camera, name: str = "", rng=None) -> View:
    W, H = camera.width, camera.height
    jj, ii = np.mgrid[0:H, 0:W]
    px = np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.float64)
    o, v = pixel_ray(camera, px)
    t, nrm, alb, hit = sphere_trace(spec.field, o, v, t_max=4 * spec.bound_radius + spec.distance)
    rgb = np.broadcast_to(np.asarray(spec.background, dtype=np.float64), (len(px), 3)).copy()
    rgb[hit] = shade(alb[hit], nrm[hit], spec.light_dir)
    z = np.where(hit, np.where(hit, t, 0.0) * (v @ camera.rotation[:, 2]), 0.0)
    if spec.depth_noise > 0 and rng is not None:
        z = np.where(hit, z + rng.normal(0.0, spec.depth_noise, size=z.shape), 0.0)
    return View(camera, rgb.reshape(H, W, 3), z.reshape(H, W), nrm.reshape(H, W, 3), name=name)


def coverage(spec: SceneSpec, views) -> dict:
    """Number of valid depth pixels whose surface point belongs to each primitive."""
    counts = {i: 0 for i in range(len(spec.primitives))}
    for view in views:
        mask = view.depth > 0
        if not mask.any():
            continue
        jj, ii = np.nonzero(mask)
        pts = backproject(view, np.stack([ii, jj], axis=1).astype(np.float64), view.depth[jj, ii])
        if len(spec.primitives) == 1:
            counts[0] += len(pts)
            continue
        k = spec.field.closest_member(pts)
        for i in counts:
            counts[i] += int(np.count_nonzero(k == i))
    return counts


def generate_dataset(spec: SceneSpec, out_dir, mesh_resolution: int = 128) -> dict:
    """Render every view, write the dataset layout plus ``gt_mesh.ply``; returns a report."""
    from .evaluation import extract_mesh

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    views = [render_gt_view(spec, cam, name=f"{i:04d}", rng=rng) for i, cam in enumerate(spec.cameras())]
    cov = coverage(spec, views)
    lo, hi = np.asarray(spec.bbox, dtype=np.float64)
    meta = {
        "preset": spec.name,
        "scene_scale": spec.scene_scale,
        "bbox": [lo.tolist(), hi.tolist()],
        "bound_radius": spec.bound_radius,
        "init_radius": spec.init_radius,
        "inside_out": spec.inside_out,
        "light": spec.light_dir.tolist(),
        "background": list(spec.background),
        "primitives": [p.to_dict() for p in spec.primitives],
        "coverage": {str(k): v for k, v in cov.items()},
    }
    save_dataset(out, views, meta)
    pad = 0.02 * (hi - lo)
    mesh = extract_mesh(spec.field.distance, (lo - pad, hi + pad), mesh_resolution)
    write_ply(out / "gt_mesh.ply", mesh.vertices, mesh.faces, mesh.normals)
    return {"views": len(views), "coverage": cov, "mesh_vertices": len(mesh.vertices),
            "mesh_faces": len(mesh.faces), "watertight": mesh.is_watertight()}
