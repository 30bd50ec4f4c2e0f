"""Pinhole cameras, rays, projection, bilinear sampling and depth alignment.

Conventions: right-handed world frame, camera looks down +z with image u to
the right and v downwards.  Pixel (i, j) is the continuous coordinate
(u=i, v=j).  Depth maps hold camera-space z, with 0 marking a missing value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

LUMA = np.array([0.299, 0.587, 0.114])


def luma(rgb):
    return np.asarray(rgb) @ LUMA


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # world-from-camera
    translation: np.ndarray  # camera centre in world
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        R = self.rotation
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("camera rotation is not a proper rotation")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def world_from_camera(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    @classmethod
    def from_matrix(cls, intrinsics: dict, matrix, width: int, height: int) -> "Camera":
        M = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        return cls(intrinsics["fx"], intrinsics["fy"], intrinsics["cx"], intrinsics["cy"],
                   M[:3, :3], M[:3, 3], width, height)

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, cx, cy, width, height) -> "Camera":
        eye = np.asarray(eye, float)
        fwd = np.asarray(target, float) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, float))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=1)
        return cls(fx, fy, cx, cy, R, eye, width, height)

    def pixel_spacing(self, depth):
        """World-space distance between adjacent pixel rays at camera depth ``depth``."""
        return np.asarray(depth) / (0.5 * (self.fx + self.fy))

    def directions_camera(self, u, v):
        u = np.asarray(u, float)
        v = np.asarray(v, float)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


def pixel_ray(cam: Camera, pixel):
    """Origin and unit world direction of the ray through subpixel ``pixel=(u, v)``.

    Accepts a single pixel or an (N, 2) array.
    """
    px = np.asarray(pixel, dtype=np.float64)
    single = px.ndim == 1
    px = np.atleast_2d(px)
    u, v = px[:, 0], px[:, 1]
    if np.any((u < 0) | (u >= cam.width) | (v < 0) | (v >= cam.height)):
        raise ValueError("pixel outside image bounds")
    d = cam.directions_camera(u, v) @ cam.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(cam.center, d.shape).copy()
    if single:
        return o[0], d[0]
    return o, d


def project(cam: Camera, p):
    """Pinhole projection of world points.

    Works on arrays or tape variables of shape (N, 3); returns ``(u, v, z, in_view)``
    where ``in_view`` is a plain boolean array.
    """
    rel = ad.sub(p, cam.center.astype(ad.value_of(p).dtype))
    pc = ad.matmul(rel, cam.rotation.astype(ad.value_of(p).dtype))
    x, y, z = pc[..., 0], pc[..., 1], pc[..., 2]
    zv = ad.value_of(z)
    safe = np.where(np.abs(zv) > 1e-12, 0.0, 1.0).astype(zv.dtype)
    zs = ad.add(z, safe)
    u = ad.add(ad.mul(ad.div(x, zs), cam.fx), cam.cx)
    v = ad.add(ad.mul(ad.div(y, zs), cam.fy), cam.cy)
    uv, vv = ad.value_of(u), ad.value_of(v)
    in_view = (zv > 0) & (uv >= 0) & (uv < cam.width) & (vv >= 0) & (vv < cam.height)
    return u, v, z, in_view


def project_point(cam: Camera, p):
    """Single-point convenience wrapper: ``((u, v), z, in_view)``."""
    u, v, z, ok = project(cam, np.asarray(p, float).reshape(1, 3))
    return (float(u[0]), float(v[0])), float(z[0]), bool(ok[0])


def bilinear(image, u, v):
    """Bilinear lookup of ``image`` (H, W[, C]) at continuous coordinates.

    Differentiable in ``u`` and ``v``.  Returns ``(values, valid)``; ``valid`` is
    False where the four-neighbour stencil leaves the image, and callers must
    mask those entries (their values are clamped, not meaningful).
    """
    img = np.asarray(image)
    H, W = img.shape[:2]
    uv, vv = np.asarray(ad.value_of(u)), np.asarray(ad.value_of(v))
    valid = (uv >= 0) & (uv <= W - 1) & (vv >= 0) & (vv <= H - 1) & np.isfinite(uv) & np.isfinite(vv)
    uc = np.clip(np.nan_to_num(uv), 0, W - 1)
    vc = np.clip(np.nan_to_num(vv), 0, H - 1)
    i0 = np.minimum(np.floor(uc), max(W - 2, 0)).astype(np.int64)
    j0 = np.minimum(np.floor(vc), max(H - 2, 0)).astype(np.int64)
    i1 = np.minimum(i0 + 1, W - 1)
    j1 = np.minimum(j0 + 1, H - 1)
    dtype = uv.dtype if np.issubdtype(uv.dtype, np.floating) else np.float64
    # out-of-domain entries use the clamped coordinate so values stay finite
    a = ad.sub(u, i0.astype(dtype)) if isinstance(u, ad.Var) else (uc - i0).astype(dtype)
    b = ad.sub(v, j0.astype(dtype)) if isinstance(v, ad.Var) else (vc - j0).astype(dtype)
    if isinstance(u, ad.Var):
        a = ad.where(valid, a, (uc - i0).astype(dtype))
    if isinstance(v, ad.Var):
        b = ad.where(valid, b, (vc - j0).astype(dtype))
    I00 = img[j0, i0].astype(dtype)
    I10 = img[j0, i1].astype(dtype)
    I01 = img[j1, i0].astype(dtype)
    I11 = img[j1, i1].astype(dtype)
    if img.ndim == 3:
        a = ad.reshape(a, np.shape(ad.value_of(a)) + (1,))
        b = ad.reshape(b, np.shape(ad.value_of(b)) + (1,))
    top = ad.add(I00, ad.mul(a, I10 - I00))
    bot = ad.add(I01, ad.mul(a, I11 - I01))
    return ad.add(top, ad.mul(b, ad.sub(bot, top))), valid


def bilinear_corners_valid(depth, u, v):
    """True where all four depth neighbours of the stencil are non-zero."""
    d = np.asarray(depth)
    H, W = d.shape
    uv, vv = np.asarray(ad.value_of(u)), np.asarray(ad.value_of(v))
    uc = np.clip(np.nan_to_num(uv), 0, W - 1)
    vc = np.clip(np.nan_to_num(vv), 0, H - 1)
    i0 = np.minimum(np.floor(uc), max(W - 2, 0)).astype(np.int64)
    j0 = np.minimum(np.floor(vc), max(H - 2, 0)).astype(np.int64)
    i1 = np.minimum(i0 + 1, W - 1)
    j1 = np.minimum(j0 + 1, H - 1)
    return (d[j0, i0] > 0) & (d[j0, i1] > 0) & (d[j1, i0] > 0) & (d[j1, i1] > 0)


@dataclass
class View:
    camera: Camera
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) camera-space z, 0 = missing
    normal: np.ndarray  # (H, W, 3) world frame
    name: str = ""
    gray: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.normal = np.asarray(self.normal, dtype=np.float64)
        self.gray = luma(self.rgb)


def backproject(view: View, pixel, depth=None):
    """World anchor for pixel(s) from the stored z-depth; None / NaN where depth is missing."""
    cam = view.camera
    px = np.asarray(pixel, dtype=np.float64)
    single = px.ndim == 1
    px = np.atleast_2d(px)
    if depth is None:
        depth = view.depth[np.round(px[:, 1]).astype(int), np.round(px[:, 0]).astype(int)]
    depth = np.broadcast_to(np.asarray(depth, float), (len(px),))
    dirs = cam.directions_camera(px[:, 0], px[:, 1])
    q = cam.center + (dirs * depth[:, None]) @ cam.rotation.T
    q[depth <= 0] = np.nan
    if single:
        return None if depth[0] <= 0 else q[0]
    return q


@dataclass
class DepthAlignment:
    scale: float = 1.0
    shift: float = 0.0
    degenerate: bool = False

    def apply(self, depth):
        return self.scale * np.asarray(depth) + self.shift

    def invert(self, depth):
        return (np.asarray(depth) - self.shift) / self.scale


def solve_scale_shift(pred, gt) -> DepthAlignment:
    """Closed-form least squares for ``scale * pred + shift ~ gt``."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if pred.shape != gt.shape or pred.size == 0:
        raise ValueError("pred and gt must be non-empty and equally sized")
    n = pred.size
    s1, s2 = pred.sum(), (pred * pred).sum()
    t1, t2 = gt.sum(), (pred * gt).sum()
    det = n * s2 - s1 * s1
    if n < 2 or det <= 1e-12 * max(1.0, n * s2):
        return DepthAlignment(1.0, float(np.mean(gt - pred)), True)
    scale = (n * t2 - s1 * t1) / det
    shift = (s2 * t1 - s1 * t2) / det
    return DepthAlignment(float(scale), float(shift), False)
