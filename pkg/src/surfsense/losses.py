"""Loss terms and the weighted objective.

Every term accepts plain arrays or tape variables.  Batch-level terms take
per-ray quantities and return a mean over rays; patch terms sum over the
patch points and average over patches.  Functions named ``*_sum`` return the
un-normalised sums used by the chunked trainer, which divides by global counts
so that chunk contributions add up to the batch loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .camera import backproject

NCC_EPS = 1e-8
TOP_K = 3


class NumericalAbort(RuntimeError):
    """A loss term or parameter became non-finite."""

    def __init__(self, term: str, value=None):
        self.term = term
        self.value = value
        super().__init__(f"non-finite value in {term}: {value}")


def _count(mask, n):
    return int(np.count_nonzero(mask)) if mask is not None else int(n)


def _masked_mean(per_ray, valid, denom=None):
    n = np.shape(ad.value_of(per_ray))[0]
    if valid is not None:
        per_ray = ad.mul(per_ray, np.asarray(valid, dtype=ad.value_of(per_ray).dtype))
    denom = _count(valid, n) if denom is None else denom
    if denom == 0:
        return ad.mul(ad.sum(per_ray), 0.0)
    return ad.div(ad.sum(per_ray), float(denom))


# ----------------------------------------------------------------------------
# rendering losses


def rgb_per_ray(pred, gt):
    return ad.sum(ad.absolute(ad.sub(pred, gt)), axis=-1)


def l_rgb(pred, gt, denom=None):
    """Mean over rays of the L1 colour error summed over channels."""
    return _masked_mean(rgb_per_ray(pred, gt), None, denom)


def depth_per_ray(pred, gt, alignment=None):
    if alignment is not None:
        pred = ad.add(ad.mul(pred, alignment.scale), alignment.shift)
    return ad.absolute(ad.sub(pred, gt))


def l_depth_render(pred, gt, alignment=None, valid=None, denom=None):
    """L1 between (optionally aligned) rendered depth and GT over rays with valid GT."""
    gt = np.asarray(gt)
    if valid is None:
        valid = gt > 0
    return _masked_mean(depth_per_ray(pred, gt, alignment), valid, denom)


def normal_per_ray(pred, gt):
    diff = ad.sum(ad.absolute(ad.sub(pred, gt)), axis=-1)
    cos = ad.sum(ad.mul(pred, gt), axis=-1)
    return ad.add(diff, ad.absolute(ad.sub(1.0, cos)))


def l_normal_render(pred, gt, valid=None, denom=None):
    """Per-ray ``|N - N_gt|_1 + |1 - N . N_gt|`` averaged over rays with valid GT."""
    return _masked_mean(normal_per_ray(pred, gt), valid, denom)


def eikonal_per_point(g):
    return ad.square(ad.sub(ad.norm(g, axis=-1), 1.0))


def l_eikonal(g, denom=None):
    """Mean squared deviation of the gradient norm from one."""
    return _masked_mean(eikonal_per_point(g), None, denom)


# ----------------------------------------------------------------------------
# patch losses


def depth_consistency_per_patch(D, Z, w):
    """``sum_j w_j (D_j - Z_j)^2`` for (P, J) arrays; ``w`` is a constant mask."""
    sq = ad.square(ad.sub(D, Z))
    return ad.sum(ad.mul(sq, np.asarray(w, dtype=ad.value_of(sq).dtype)), axis=-1)


def l_depth_consistency(D, Z, w, denom=None):
    D = D if isinstance(D, ad.Var) else np.atleast_2d(D)
    Z = Z if isinstance(Z, ad.Var) else np.atleast_2d(Z)
    w = np.atleast_2d(w)
    return _masked_mean(depth_consistency_per_patch(D, Z, w), None, denom)


def visibility_mask(D, Z, in_domain, threshold):
    """``w_j``: inside the depth-map domain and within ``threshold`` of the GT depth."""
    Dv, Zv = np.asarray(ad.value_of(D)), np.asarray(ad.value_of(Z))
    with np.errstate(invalid="ignore"):
        close = np.abs(Dv - Zv) < threshold
    return np.asarray(in_domain, bool) & close & np.isfinite(Dv) & np.isfinite(Zv)


def ncc(a, b, mask=None, eps=NCC_EPS):
    """Normalised cross-correlation over the last axis.

    Returns ``(score, ok)``; ``ok`` is False where fewer than two joint samples
    exist or either variance is below ``eps``.  ``score`` is 0 there.
    """
    av, bv = np.asarray(ad.value_of(a)), np.asarray(ad.value_of(b))
    if mask is None:
        mask = np.ones(np.broadcast_shapes(av.shape, bv.shape), bool)
    mask = np.asarray(mask, bool)
    dtype = np.result_type(av.dtype, bv.dtype, np.float32)
    m = mask.astype(dtype)
    n = m.sum(axis=-1)
    nz = np.maximum(n, 1.0).astype(dtype)[..., None]
    mean_a = ad.div(ad.sum(ad.mul(a, m), axis=-1, keepdims=True), nz)
    mean_b = ad.div(ad.sum(ad.mul(b, m), axis=-1, keepdims=True), nz)
    ca = ad.mul(ad.sub(a, mean_a), m)
    cb = ad.mul(ad.sub(b, mean_b), m)
    nz1 = nz[..., 0]
    cov = ad.div(ad.sum(ad.mul(ca, cb), axis=-1), nz1)
    va = ad.div(ad.sum(ad.mul(ca, ca), axis=-1), nz1)
    vb = ad.div(ad.sum(ad.mul(cb, cb), axis=-1), nz1)
    ok = (n >= 2) & (np.asarray(ad.value_of(va)) >= eps) & (np.asarray(ad.value_of(vb)) >= eps)
    okf = ok.astype(dtype)
    safe = (1.0 - okf)
    # excluded entries divide by one and are zeroed
    den = ad.sqrt(ad.add(ad.mul(ad.mul(va, vb), okf), safe))
    score = ad.mul(ad.div(cov, den), okf)
    if np.ndim(ok) == 0:
        return score, bool(ok)
    return score, ok


def select_top(scores, ok, k=TOP_K, largest=True):
    """Boolean (P, S) selection of up to ``k`` valid entries per row, ranked by value.

    Ties are broken by source index so the selection is deterministic.
    """
    s = np.asarray(ad.value_of(scores), dtype=np.float64)
    ok = np.asarray(ok, bool)
    key = np.where(ok, -s if largest else s, np.inf)
    order = np.argsort(key, axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(s.shape[-1])[None, :].repeat(s.shape[0], 0), axis=-1)
    return ok & (rank < k)


def ncc_loss_per_patch(scores, ok, k=TOP_K):
    """Mean of ``1 - NCC`` over the top-``k`` valid sources; 0 for patches with none.

    Returns ``(loss, n_used)``.
    """
    sel = select_top(scores, ok, k)
    used = sel.sum(axis=-1)
    dtype = np.asarray(ad.value_of(scores)).dtype
    weight = sel.astype(dtype) / np.maximum(used, 1)[:, None].astype(dtype)
    return ad.sum(ad.mul(ad.sub(1.0, scores), weight), axis=-1), used


def l_ncc(ref, srcs, mask=None, k=TOP_K, denom=None):
    """Patch photometric loss.

    ``ref`` has shape (P, J) and ``srcs`` (P, S, J); ``mask`` (P, S, J) marks
    joint valid samples.  Sources with degenerate NCC are skipped; patches with
    no valid source contribute 0.
    """
    ref_v = ref if isinstance(ref, ad.Var) else np.atleast_2d(ref)
    P = np.shape(ad.value_of(ref_v))[0]
    r = ad.reshape(ref_v, (P, 1, np.shape(ad.value_of(ref_v))[-1]))
    scores, ok = ncc(r, srcs, mask)
    per_patch, _ = ncc_loss_per_patch(scores, ok, k)
    return _masked_mean(per_patch, None, denom)


def pixel_photo_per_patch(ref, srcs, mask, k=TOP_K):
    """Pixel-level photometric loss: per point, mean absolute gray difference over the
    ``k`` sources with the smallest difference; averaged over the patch points."""
    diff = ad.absolute(ad.sub(srcs, ref))  # (P, S, J)
    dv = np.asarray(ad.value_of(diff))
    mask = np.asarray(mask, bool)
    P, S, J = dv.shape
    sel = select_top(np.moveaxis(dv, 1, 2).reshape(P * J, S), np.moveaxis(mask, 1, 2).reshape(P * J, S),
                     k, largest=False)
    sel = np.moveaxis(sel.reshape(P, J, S), 2, 1)
    per_point_used = sel.sum(axis=1)  # (P, J)
    dtype = dv.dtype
    w = sel.astype(dtype) / np.maximum(per_point_used, 1)[:, None, :].astype(dtype)
    pts_ok = per_point_used > 0
    n_pts = pts_ok.sum(axis=-1)
    w = w * (pts_ok / np.maximum(n_pts, 1)[:, None]).astype(dtype)[:, None, :]
    return ad.sum(ad.mul(diff, w), axis=(1, 2)), n_pts


@dataclass
class PlaneParams:
    alpha: float
    beta: float
    gamma: float
    mu: float

    def as_array(self):
        return np.array([self.alpha, self.beta, self.gamma, self.mu])

    def residual(self, p):
        p = np.asarray(p, dtype=np.float64)
        return p @ self.as_array()[:3] + self.mu


def plane_from_cue(point, normal):
    """Plane through ``point`` with unit ``normal``; works row-wise on (N, 3) input."""
    point = np.asarray(point, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    mu = -np.sum(n * point, axis=-1)
    return np.concatenate([n, np.asarray(mu)[..., None]], axis=-1)


def fit_plane(view, pixel):
    """Plane from the GT depth and normal at ``pixel``; None when the cue is invalid."""
    px = np.asarray(pixel, dtype=np.float64)
    i, j = int(round(px[0])), int(round(px[1]))
    if view.depth[j, i] <= 0:
        return None
    n = view.normal[j, i]
    if not np.all(np.isfinite(n)) or np.linalg.norm(n) < 0.5:
        return None
    point = backproject(view, px)
    a, b, c, mu = plane_from_cue(point, n)
    return PlaneParams(float(a), float(b), float(c), float(mu))


def fit_per_patch(pts, planes, w, eta):
    """``sum_j w_j eta_j (n . p_j + mu)^2`` for (P, J, 3) points and (P, 4) planes."""
    planes = np.asarray(planes)
    dtype = ad.value_of(pts).dtype
    n = planes[:, None, :3].astype(dtype)
    mu = planes[:, None, 3].astype(dtype)
    r = ad.add(ad.sum(ad.mul(pts, n), axis=-1), mu)
    weight = (np.asarray(w, dtype=np.float64) * np.asarray(eta, dtype=np.float64)).astype(dtype)
    return ad.sum(ad.mul(ad.square(r), weight), axis=-1)


def confidence(grad_at_pulled, normal_gt):
    """``eta_j``: cosine between the field gradient and the GT normal, clamped to [0, 1]."""
    g = np.asarray(grad_at_pulled, dtype=np.float64)
    n = np.asarray(normal_gt, dtype=np.float64)
    gn = np.linalg.norm(g, axis=-1)
    nn = np.linalg.norm(n, axis=-1)
    cos = np.sum(g * n, axis=-1) / np.maximum(gn * nn, 1e-12)
    return np.clip(cos, 0.0, 1.0)


def l_fit(pts, plane, w=None, eta=None, denom=None):
    pv = ad.value_of(pts)
    if np.ndim(pv) == 2:
        pts = ad.reshape(pts, (1,) + np.shape(pv))
        pv = ad.value_of(pts)
    P, J = np.shape(pv)[:2]
    plane = np.atleast_2d(plane.as_array() if isinstance(plane, PlaneParams) else plane)
    w = np.ones((P, J)) if w is None else np.reshape(w, (P, J))
    eta = np.ones((P, J)) if eta is None else np.reshape(eta, (P, J))
    return _masked_mean(fit_per_patch(pts, plane, w, eta), None, denom)


# ----------------------------------------------------------------------------
# objective


@dataclass
class LossWeights:
    """Term weights; ``lambda5`` is annealed from 0 after ``ncc_delay_epochs``.

    ``surface_mult`` scales the three surface terms together (L_DC, L_NCC, L_Fit).
    """

    lambda1: float = 0.1
    lambda2: float = 0.05
    lambda3: float = 0.05
    lambda4: float = 0.5
    lambda5: float = 0.1
    lambda6: float = 0.5
    ncc_delay_epochs: float = 100.0
    ncc_ramp_epochs: float = 100.0
    surface_mult: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "lambda5", "lambda6",
                     "surface_mult", "ncc_delay_epochs", "ncc_ramp_epochs"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be finite and non-negative")

    def ncc_weight(self, epoch: float) -> float:
        if epoch < self.ncc_delay_epochs:
            return 0.0
        if self.ncc_ramp_epochs <= 0:
            return self.lambda5
        frac = min(1.0, (epoch - self.ncc_delay_epochs) / self.ncc_ramp_epochs)
        return self.lambda5 * frac

    def coefficients(self, epoch: float) -> dict:
        s = self.surface_mult
        return {"rgb": 1.0, "depth": self.lambda1, "normal": self.lambda2, "eikonal": self.lambda3,
                "dc": self.lambda4 * s, "ncc": self.ncc_weight(epoch) * s, "fit": self.lambda6 * s}

    @property
    def uses_surface(self) -> bool:
        return self.surface_mult > 0 and (self.lambda4 > 0 or self.lambda5 > 0 or self.lambda6 > 0)


TERMS = ("rgb", "depth", "normal", "eikonal", "dc", "ncc", "fit")


def total_loss(terms: dict, weights: LossWeights, epoch: float = 0.0):
    """Weighted sum of the available terms; absent terms count as 0.

    Returns ``(total, breakdown)`` where ``breakdown`` holds the unweighted
    float value of each term.  Raises :class:`NumericalAbort` naming the first
    non-finite term.
    """
    coef = weights.coefficients(epoch)
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    total = 0.0
    breakdown = {}
    for name in TERMS:
        if name not in terms or terms[name] is None:
            breakdown[name] = 0.0
            continue
        val = float(np.asarray(ad.value_of(terms[name]), dtype=np.float64))
        if not math.isfinite(val):
            raise NumericalAbort(name, val)
        breakdown[name] = val
        if coef[name] != 0.0:
            total = ad.add(total, ad.mul(terms[name], coef[name]))
    return total, breakdown
