"""Surface sensing: ray/surface intersections, Gaussian neighbourhoods and level-set pulling.

A sensed patch is built from an anchor point (back-projected from a depth cue,
or found by a secant search along the ray), ``J`` Gaussian samples around it,
and one pulling step per sample that moves it onto the zero level set along
the normalised field gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .camera import View, backproject, pixel_ray
from .dataio import write_ply

GRAD_EPS = 1e-6
ANCHOR_SOURCES = ("depth", "intersection")


@dataclass
class PatchConfig:
    """Patch sampling knobs.

    ``tau`` fixes the Gaussian standard deviation in scene units; when None it
    is the spacing between adjacent pixel rays at the anchor depth.
    ``tau_mult`` scales the variance, so the standard deviation grows with
    its square root.
    """

    J: int = 9
    tau: float | None = None
    tau_mult: float = 1.0
    anchor_source: str = "depth"
    pull: bool = True

    def __post_init__(self):
        if int(self.J) < 1:
            raise ValueError("patch size J must be at least 1")
        if self.tau is not None and not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.tau_mult > 0:
            raise ValueError("tau_mult must be positive")
        if self.anchor_source not in ANCHOR_SOURCES:
            raise ValueError(f"anchor_source must be one of {ANCHOR_SOURCES}")
        self.J = int(self.J)

    def std(self, spacing):
        base = np.asarray(spacing, dtype=np.float64) if self.tau is None else self.tau
        return np.asarray(base, dtype=np.float64) * math.sqrt(self.tau_mult)


@dataclass
class SurfacePatch:
    anchor: np.ndarray
    points: np.ndarray  # raw Gaussian samples p_j, (J, 3)
    pulled: np.ndarray  # p'_j, (J, 3)
    distances: np.ndarray  # f(p_j)
    gradients: np.ndarray  # grad f(p_j)
    valid: np.ndarray  # False where the gradient vanished
    ray_id: int = 0
    pulled_distances: np.ndarray = field(default=None, repr=False)
    pulled_gradients: np.ndarray = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return len(self.points)


# ----------------------------------------------------------------------------
# intersections


def find_intersection(sdf, origins, dirs, near, far, n_steps: int = 128, secant_iters: int = 8):
    """First sign change of ``sdf`` along each ray, refined by secant steps.

    ``sdf`` maps (M, 3) points to M values.  Returns ``(t_hit, found)``; for a
    single ray the outputs are scalars.
    """
    o = np.asarray(origins, dtype=np.float64)
    v = np.asarray(dirs, dtype=np.float64)
    single = o.ndim == 1
    o, v = np.atleast_2d(o), np.atleast_2d(v)
    R = len(o)
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (R,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (R,))
    if np.any(near >= far):
        raise ValueError("near must be smaller than far")
    s = np.linspace(0.0, 1.0, n_steps + 1)
    t = near[:, None] + (far - near)[:, None] * s
    vals = np.asarray(sdf((o[:, None, :] + t[..., None] * v[:, None, :]).reshape(-1, 3)),
                      dtype=np.float64).reshape(R, -1)
    sgn = np.sign(vals)
    change = (sgn[:, :-1] * sgn[:, 1:] <= 0) & (sgn[:, :-1] != 0)
    exact0 = sgn[:, 0] == 0
    found = change.any(axis=1) | exact0
    k = np.argmax(change, axis=1)
    rows = np.arange(R)
    ta, tb = t[rows, k], t[rows, k + 1]
    fa, fb = vals[rows, k], vals[rows, k + 1]
    for _ in range(secant_iters):
        denom = fb - fa
        ok = found & (np.abs(denom) > 1e-300) & (fa != 0)
        if not ok.any():
            break
        tm = np.where(ok, tb - fb * (tb - ta) / np.where(ok, denom, 1.0), tb)
        tm = np.clip(tm, np.minimum(ta, tb), np.maximum(ta, tb))
        fm = np.asarray(sdf(o + tm[:, None] * v), dtype=np.float64)
        # keep the bracket around the root
        same = np.sign(fm) == np.sign(fa)
        ta = np.where(ok & same, tm, ta)
        fa = np.where(ok & same, fm, fa)
        tb = np.where(ok & ~same, tm, tb)
        fb = np.where(ok & ~same, fm, fb)
        if np.all(np.abs(fm[ok]) < 1e-12):
            break
    t_hit = np.where(np.abs(fa) < np.abs(fb), ta, tb)
    t_hit = np.where(exact0, near, t_hit)
    t_hit = np.where(found, t_hit, np.nan)
    if single:
        return float(t_hit[0]), bool(found[0])
    return t_hit, found


# ----------------------------------------------------------------------------
# neighbourhoods and pulling


def sample_anchor_neighborhood(q, cfg: PatchConfig, rng: np.random.Generator, spacing=None):
    """``J`` isotropic Gaussian draws around each anchor.

    ``q`` is a 3-vector or an (N, 3) array; the result is (J, 3) or (N, J, 3).
    ``spacing`` supplies the per-anchor pixel spacing when ``cfg.tau`` is None.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if cfg.tau is None and spacing is None:
        raise ValueError("pixel spacing is required when tau is not fixed")
    std = np.broadcast_to(cfg.std(spacing if cfg.tau is None else 1.0), (len(q),))
    noise = rng.standard_normal((len(q), cfg.J, 3))
    pts = q[:, None, :] + std[:, None, None] * noise
    return pts[0] if single else pts


def pull_step(q, d, g, eps: float = GRAD_EPS):
    """``q - d * g / |g|`` on arrays or tape variables.

    ``q`` and ``g`` have shape (N, 3) and ``d`` shape (N,).  Returns
    ``(pulled, valid)``; rows whose gradient norm is at most ``eps`` are left
    in place and flagged invalid.
    """
    gv = np.asarray(ad.value_of(g))
    gn = np.linalg.norm(gv, axis=-1)
    valid = gn > eps
    shape = np.shape(ad.value_of(d)) + (1,)
    dn = ad.reshape(d, shape)
    # invalid rows see a dummy unit gradient and a zero step, so they stay put
    # and no 0/0 reaches the backward sweep
    gs = ad.where(np.broadcast_to(valid[:, None], gv.shape), g, np.ones_like(gv))
    unit = ad.div(gs, ad.norm(gs, axis=-1, keepdims=True))
    step = ad.mul(ad.mul(dn, unit), valid[:, None].astype(gv.dtype))
    return ad.sub(q, step), valid


def pull(field, p, eps: float = GRAD_EPS):
    """Pull point(s) onto the zero level set of ``field`` with one step.

    Raises ValueError for a single point whose gradient vanishes; for
    batches the invalid rows are reported through the returned mask.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = np.atleast_2d(p)
    d, _, g = field.evaluate(pts)
    out, valid = pull_step(pts, np.asarray(d, dtype=np.float64), np.asarray(g, dtype=np.float64), eps)
    if single:
        if not valid[0]:
            raise ValueError("vanishing gradient: point cannot be pulled")
        return out[0]
    return out, valid


def pull_points(model, tape: ad.Tape, params: dict, pts, eps: float = GRAD_EPS):
    """Pull on the tape: the result depends on the weights through f and grad f."""
    q, d, _, _, g = model.geometry(tape, params, pts, create_graph=True)
    pulled, valid = pull_step(q, d, g, eps)
    return pulled, valid, d, g


# ----------------------------------------------------------------------------
# patches


def anchor_for_pixel(field, view: View, pixel, cfg: PatchConfig, near=1e-3, far=None):
    """Anchor point of the ray through ``pixel``, or None."""
    if cfg.anchor_source == "depth":
        return backproject(view, pixel)
    o, v = pixel_ray(view.camera, pixel)
    far = 10.0 if far is None else far
    t, ok = find_intersection(lambda x: np.asarray(field.distance(x)), o, v, near, far)
    return o + t * v if ok else None


def sense_patch(field, view: View, pixel, cfg: PatchConfig, rng: np.random.Generator,
                ray_id: int = 0, near=1e-3, far=None):
    """Anchor, Gaussian neighbourhood and pulled points for one pixel; None without an anchor."""
    anchor = anchor_for_pixel(field, view, pixel, cfg, near, far)
    if anchor is None:
        return None
    z = (anchor - view.camera.center) @ view.camera.rotation[:, 2]
    spacing = view.camera.pixel_spacing(z)
    pts = sample_anchor_neighborhood(anchor, cfg, rng, spacing)
    d, _, g = field.evaluate(pts)
    d = np.asarray(d, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if cfg.pull:
        pulled, valid = pull_step(pts, d, g)
    else:
        pulled, valid = pts.copy(), np.ones(len(pts), bool)
    pd, _, pg = field.evaluate(pulled)
    return SurfacePatch(anchor, pts, pulled, d, g, valid, ray_id,
                        np.asarray(pd, dtype=np.float64), np.asarray(pg, dtype=np.float64))


def dump_patches_ply(path, pulled_points) -> int:
    """Write pulled patch points as a vertex-only PLY; returns the number written."""
    pts = np.asarray(pulled_points, dtype=np.float64).reshape(-1, 3)
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    write_ply(path, pts)
    return len(pts)
