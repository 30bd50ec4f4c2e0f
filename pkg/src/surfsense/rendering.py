"""Laplace-CDF density, hierarchical ray sampling and alpha compositing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class DensityParams:
    beta: float = 0.1
    alpha_scale: float | None = None  # defaults to 1 / beta

    def __post_init__(self):
        if float(np.min(ad.value_of(self.beta))) <= 0:
            raise ValueError("beta must be positive")


def laplace_density(d, beta, alpha_scale=None):
    """``alpha * LaplaceCDF_beta(-d)``; works on arrays and tape variables."""
    sign = np.sign(ad.value_of(d))
    e = ad.exp(ad.neg(ad.div(ad.absolute(d), beta)))
    psi = ad.sub(0.5, ad.mul(ad.mul(sign, 0.5), ad.sub(1.0, e)))
    if alpha_scale is None:
        return ad.div(psi, beta)
    return ad.mul(psi, alpha_scale)


def density(d, params: DensityParams):
    return laplace_density(d, params.beta, params.alpha_scale)


def beta_from_raw(raw, beta_min=1e-4):
    return ad.add(ad.softplus(raw), beta_min)


def raw_from_beta(beta, beta_min=1e-4):
    x = beta - beta_min
    return float(np.log(np.expm1(x)))


@dataclass
class RaySamples:
    """Per-ray samples; every array has leading shape (R, S)."""

    t: np.ndarray
    delta: np.ndarray
    sigma: object = None
    color: object = None
    normal: object = None

    def __post_init__(self):
        t = np.asarray(self.t)
        dl = np.asarray(self.delta)
        if t.shape != dl.shape:
            raise ValueError("t and delta must share a shape")
        if t.shape[-1] > 1 and np.any(np.diff(t, axis=-1) <= 0):
            raise ValueError("sample distances must be strictly increasing")
        if np.any(dl <= 0):
            raise ValueError("sample intervals must be positive")


def intervals(t, far):
    """delta_i = t_{i+1} - t_i; the last interval runs to the far bound."""
    t = np.asarray(t)
    far = np.broadcast_to(np.asarray(far, dtype=t.dtype), t.shape[:-1])
    last = np.maximum(far - t[..., -1], 1e-6 * np.maximum(far, 1.0))
    return np.concatenate([np.diff(t, axis=-1), last[..., None]], axis=-1)


def stratified(near, far, n, rng=None, shape=()):
    near = np.asarray(near, float)
    far = np.asarray(far, float)
    base = np.arange(n, dtype=np.float64)
    lead = np.broadcast_shapes(near.shape, far.shape, tuple(shape))
    if rng is None:
        u = np.full(lead + (n,), 0.5)
    else:
        u = rng.uniform(0.0, 1.0, size=lead + (n,))
    step = (far - near)[..., None] / n
    return near[..., None] + (base + u) * step


def sample_pdf(edges, weights, n, rng=None):
    """Inverse-transform samples from a piecewise-constant density over ``edges``.

    Rays whose weights sum to (nearly) zero fall back to a uniform density.
    """
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum(axis=-1, keepdims=True)
    flat = total[..., 0] < 1e-8
    w = np.where(flat[..., None], 1.0, w)
    pdf = w / w.sum(axis=-1, keepdims=True)
    cdf = np.concatenate([np.zeros(pdf.shape[:-1] + (1,)), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[..., -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(n) + 0.5) / n, pdf.shape[:-1] + (n,))
    else:
        u = rng.uniform(0.0, 1.0, size=pdf.shape[:-1] + (n,))
    k = (cdf[..., None, :] <= u[..., None]).sum(axis=-1) - 1
    k = np.clip(k, 0, cdf.shape[-1] - 2)
    c0 = np.take_along_axis(cdf, k, axis=-1)
    c1 = np.take_along_axis(cdf, k + 1, axis=-1)
    e = np.broadcast_to(np.asarray(edges, dtype=np.float64), cdf.shape)
    e0 = np.take_along_axis(e, k, axis=-1)
    e1 = np.take_along_axis(e, k + 1, axis=-1)
    span = np.where(c1 - c0 > 0, c1 - c0, 1.0)
    frac = np.clip((u - c0) / span, 0.0, 1.0)
    out = e0 + frac * (e1 - e0)
    return out


def _unique_sorted(t, near, far):
    t = np.sort(t, axis=-1)
    # break exact ties so intervals stay positive
    eps = 1e-7 * np.maximum(np.abs(far - near), 1.0)[..., None]
    for _ in range(2):
        dup = np.diff(t, axis=-1) <= 0
        if not dup.any():
            break
        bump = np.concatenate([np.zeros(dup.shape[:-1] + (1,), bool), dup], axis=-1)
        t = np.sort(t + bump * eps, axis=-1)
    return t


def sample_ray(origins, dirs, near, far, n_coarse, n_fine, sdf, beta, rng=None,
               alpha_scale=None) -> RaySamples:
    """Stratified coarse samples plus fine samples drawn from the coarse weights.

    ``sdf`` maps an (M, 3) array of points to M signed distances.  With
    ``rng=None`` the sampler is deterministic (bin centres and quantiles).
    """
    origins = np.atleast_2d(np.asarray(origins, float))
    dirs = np.atleast_2d(np.asarray(dirs, float))
    R = len(origins)
    near = np.broadcast_to(np.asarray(near, float), (R,))
    far = np.broadcast_to(np.asarray(far, float), (R,))
    if np.any(near >= far):
        raise ValueError("near must be smaller than far")
    t = stratified(near, far, n_coarse, rng)
    if n_fine > 0:
        pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
        d = np.asarray(sdf(pts.reshape(-1, 3)), dtype=np.float64).reshape(R, n_coarse)
        sigma = laplace_density(d, beta, alpha_scale)
        out = composite_arrays(sigma, intervals(t, far), t)
        edges = near[:, None] + (far - near)[:, None] * np.linspace(0.0, 1.0, n_coarse + 1)
        fine = sample_pdf(edges, out["weights"], n_fine, rng)
        fine = np.clip(fine, near[:, None], np.nextafter(far, -np.inf)[:, None])
        t = _unique_sorted(np.concatenate([t, fine], axis=-1), near, far)
    return RaySamples(t, intervals(t, far))


def composite_arrays(sigma, delta, t=None, color=None, normal=None):
    """Alpha compositing; accepts arrays or tape variables of shape (R, S[, 3])."""
    sd = ad.mul(sigma, delta)
    excl = ad.sub(ad.cumsum(sd, axis=-1), sd)
    trans = ad.exp(ad.neg(excl))
    alpha = ad.sub(1.0, ad.exp(ad.neg(sd)))
    w = ad.mul(trans, alpha)
    out = {"weights": w, "alpha": alpha, "transmittance": trans,
           "opacity": ad.sum(w, axis=-1)}
    if t is not None:
        out["depth"] = ad.sum(ad.mul(w, t), axis=-1)
    w3 = None
    if color is not None or normal is not None:
        w3 = ad.reshape(w, np.shape(ad.value_of(w)) + (1,))
    if color is not None:
        out["rgb"] = ad.sum(ad.mul(w3, color), axis=-2)
    if normal is not None:
        out["normal"] = ad.sum(ad.mul(w3, normal), axis=-2)
    return out


def composite(samples: RaySamples):
    """Colour, depth, normal and opacity of each ray from filled-in samples."""
    out = composite_arrays(samples.sigma, samples.delta, samples.t, samples.color, samples.normal)
    res = {"opacity": out["opacity"], "depth": out["depth"], "weights": out["weights"]}
    res["rgb"] = out.get("rgb")
    res["normal"] = out.get("normal")
    return res


def sphere_bounds(origins, dirs, radius, min_near=1e-3):
    """Entry/exit distances of rays against the scene sphere centred at the origin.

    Returns ``(near, far, hit)``; rays from inside start at ``min_near``.
    """
    o = np.atleast_2d(origins)
    v = np.atleast_2d(dirs)
    b = np.sum(o * v, axis=-1)
    c = np.sum(o * o, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    root = np.sqrt(np.maximum(disc, 0.0))
    near = np.maximum(-b - root, min_near)
    far = -b + root
    hit &= far > near
    far = np.where(hit, far, near + 1.0)
    return near, far, hit
