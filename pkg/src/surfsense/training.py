"""Optimisation loop: batched rays, sensed patches, the weighted objective and Adam.

Each step draws a ray batch from one view and splits it into fixed-size
chunks.  Every chunk builds its own tape, differentiates its share of the
loss (normalised by batch-wide counts, so chunk shares add up to the batch
loss) and hands the gradient to the parameter store keyed by chunk index.
The store sums contributions in key order, which makes results independent
of how many worker threads processed the chunks.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .camera import DepthAlignment, backproject, bilinear, bilinear_corners_valid, pixel_ray, project, solve_scale_shift
from .config import TrainConfig, from_dict, to_dict
from .dataio import Dataset
from .fields import CheckpointError, load_checkpoint, save_checkpoint
from .losses import (NumericalAbort, TERMS, confidence, depth_consistency_per_patch, depth_per_ray,
                     eikonal_per_point, fit_per_patch, ncc, ncc_loss_per_patch, normal_per_ray,
                     pixel_photo_per_patch, plane_from_cue, rgb_per_ray, visibility_mask)
from .model import BETA_KEY, ModelConfig, SurfaceModel
from .rendering import sphere_bounds
from .sensing import dump_patches_ply, find_intersection, pull_step

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "lr", "loss") + TERMS + (
    "lambda5", "beta", "rays", "patches", "masked_points", "dropped_points", "ncc_degraded")

_PIXELS, _CHUNK, _UNIFORM, _VIEWS = 0, 1, 2, 3


def default_threads() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # pragma: no cover - non-Linux
        return max(1, os.cpu_count() or 1)


def _rng(seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


class Adam:
    def __init__(self, size: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr) -> np.ndarray:
        """One update; ``lr`` may be a scalar or a per-parameter array."""
        g = np.asarray(grad, dtype=np.float64)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return params.astype(np.float64) - lr * mhat / (np.sqrt(vhat) + self.eps)


def cosine_lr(step: int, total: int, lr: float, final_ratio: float) -> float:
    if total <= 1:
        return lr
    frac = min(1.0, step / (total - 1))
    lo = lr * final_ratio
    return lo + 0.5 * (lr - lo) * (1 + math.cos(math.pi * frac))


@dataclass
class RayChunk:
    index: int
    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    far: np.ndarray
    pixels: np.ndarray
    rgb: np.ndarray
    depth: np.ndarray  # GT z-depth in model units (aligned when alignment is on)
    gt_depth: np.ndarray  # GT z-depth as stored
    cos: np.ndarray  # ray direction . optical axis, converts ray distance to z-depth
    normal: np.ndarray
    depth_valid: np.ndarray
    anchors: np.ndarray  # (R, 3), NaN where no anchor
    has_anchor: np.ndarray


@dataclass
class StepCounts:
    rays: int
    depth_rays: int
    eik_points: int
    patches: int


@dataclass
class TrainResult:
    steps: int
    final_loss: float
    log_path: Path | None
    checkpoint: Path | None
    aborted: bool = False
    message: str = ""


class Trainer:
    def __init__(self, dataset: Dataset, cfg: TrainConfig, out_dir=None):
        self.ds = dataset
        self.cfg = cfg
        self.out = Path(out_dir) if out_dir is not None else None
        meta = dataset.meta
        radius = cfg.init_radius
        if radius is None:
            radius = float(meta.get("init_radius", 0.5 * dataset.bound_radius))
        sdf_cfg = dataclasses.replace(cfg.model.sdf, init_radius=radius,
                                      inside_out=bool(meta.get("inside_out", cfg.model.sdf.inside_out)))
        self.model_cfg = dataclasses.replace(cfg.model, sdf=sdf_cfg)
        self.model = SurfaceModel(self.model_cfg)
        self.store = self.model.init_store(cfg.seed, np.float32)
        self.adam = Adam(self.store.data.size, cfg.lr, cfg.adam_betas, cfg.adam_eps)
        self.lr_scale = np.ones(self.store.data.size)
        self.lr_scale[self.store.slice_of(BETA_KEY)] = cfg.beta_lr_mult
        self.n_views = len(dataset.views)
        self.iters_per_epoch = cfg.iters_per_epoch or self.n_views
        self.total_steps = cfg.epochs * self.iters_per_epoch
        self.threads = cfg.threads or default_threads()
        self.neighbors = [dataset.neighbors(i, cfg.n_neighbors) for i in range(self.n_views)]
        self.vis_threshold = cfg.visibility_mm / 1000.0 / dataset.scene_scale
        self.box = dataset.bbox
        self.bound_radius = dataset.bound_radius
        self.step_index = 0
        self.history: list[dict] = []

    # ------------------------------------------------------------------
    # batch preparation

    def view_for(self, it: int) -> int:
        cycle, pos = divmod(it, self.n_views)
        return int(_rng(self.cfg.seed, cycle, _VIEWS).permutation(self.n_views)[pos])

    def _params(self, tape=None):
        vals = {name: self.store[name].copy() for name in self.store.names()}
        if tape is None:
            return vals
        return {name: tape.var(v) for name, v in vals.items()}

    def prepare(self, it: int, alignment: DepthAlignment | None = None):
        cfg = self.cfg
        vi = self.view_for(it)
        view = self.ds.views[vi]
        cam = view.camera
        H, W = view.depth.shape
        rng = _rng(cfg.seed, it, _PIXELS)
        flat = rng.choice(H * W, size=min(cfg.batch_rays, H * W), replace=False)
        px = np.stack([flat % W, flat // W], axis=1).astype(np.float64)
        o, d = pixel_ray(cam, px)
        near, far, hit = sphere_bounds(o, d, self.bound_radius)
        px, o, d, near, far = px[hit], o[hit], d[hit], near[hit], far[hit]
        ii, jj = px[:, 0].astype(int), px[:, 1].astype(int)
        cos = d @ cam.rotation[:, 2]
        gt_depth = view.depth[jj, ii]
        valid = gt_depth > 0
        depth = gt_depth.copy()
        if alignment is not None:
            depth[valid] = alignment.invert(gt_depth[valid])
        anchors = np.full((len(px), 3), np.nan)
        if cfg.patch.anchor_source == "depth":
            if valid.any():
                anchors[valid] = backproject(view, px[valid], depth[valid])
        else:
            params = self._params()
            t, found = find_intersection(lambda p: self.model.sdf_values(params, p), o, d, near, far)
            anchors[found] = o[found] + t[found, None] * d[found]
        has_anchor = np.all(np.isfinite(anchors), axis=1) & valid
        chunks = []
        C = cfg.chunk_rays
        for k, s in enumerate(range(0, len(px), C)):
            sl = slice(s, s + C)
            chunks.append(RayChunk(k, o[sl], d[sl], near[sl], far[sl], px[sl], view.rgb[jj[sl], ii[sl]],
                                   depth[sl], gt_depth[sl], cos[sl], view.normal[jj[sl], ii[sl]],
                                   valid[sl], anchors[sl], has_anchor[sl]))
        S = cfg.n_coarse + cfg.n_fine
        counts = StepCounts(len(px), int(valid.sum()), len(px) * S + cfg.eikonal_uniform,
                            int(has_anchor.sum()))
        return vi, chunks, counts

    # ------------------------------------------------------------------
    # per-chunk objective

    def _patch_terms(self, tape, params, vi, ch: RayChunk, rng, counts, need_ncc: bool,
                     alignment: DepthAlignment | None):
        cfg = self.cfg
        view = self.ds.views[vi]
        cam = view.camera
        sel = np.flatnonzero(ch.has_anchor)
        P, J = len(sel), cfg.patch.J
        anchors = ch.anchors[sel]
        zc = (anchors - cam.center) @ cam.rotation[:, 2]
        std = cfg.patch.std(cam.pixel_spacing(zc))
        noise = rng.standard_normal((P, J, 3))
        raw = (anchors[:, None, :] + std[:, None, None] * noise).reshape(-1, 3)
        dtype = self.store.dtype
        if cfg.patch.pull:
            q, d, _, _, g = self.model.geometry(tape, params, raw.astype(dtype), create_graph=True)
            pts, gvalid = pull_step(q, d, g)
        else:
            pts, gvalid = raw.astype(dtype), np.ones(P * J, bool)
        pts_val = np.asarray(ad.value_of(pts), dtype=np.float64)
        # projections into the reference view
        u, v, Z, in_view = project(cam, pts)
        depth_img = view.depth if alignment is None else _aligned_depth(view, alignment)
        D, dom = bilinear(depth_img, u, v)
        corners = bilinear_corners_valid(depth_img, u, v)
        in_domain = in_view & dom & corners & gvalid
        w = visibility_mask(D, Z, in_domain, self.vis_threshold) if cfg.use_wj else in_domain
        wPJ = w.reshape(P, J)
        stats = {"masked_points": int(np.count_nonzero(~w)), "dropped_points": int(np.count_nonzero(~gvalid)),
                 "ncc_degraded": 0}
        terms = {}
        denom = float(max(counts.patches, 1))
        dc = depth_consistency_per_patch(ad.reshape(D, (P, J)), ad.reshape(Z, (P, J)), wPJ)
        terms["dc"] = ad.div(ad.sum(dc), denom)
        # surface fitting against the plane of the GT cue
        planes = plane_from_cue(ch.anchors[sel], ch.normal[sel])
        if cfg.use_eta:
            gp = self._gradients({k: ad.value_of(val) for k, val in params.items()}, pts_val)
            eta = confidence(gp.reshape(P, J, 3), ch.normal[sel][:, None, :])
        else:
            eta = np.ones((P, J))
        fit = fit_per_patch(ad.reshape(pts, (P, J, 3)), planes, wPJ, eta)
        terms["fit"] = ad.div(ad.sum(fit), denom)
        if need_ncc:
            ref, ref_ok = bilinear(view.gray, u, v)
            srcs, masks = [], []
            for si in self.neighbors[vi]:
                sv = self.ds.views[si]
                us, vs, _, inv = project(sv.camera, pts)
                val, ok = bilinear(sv.gray, us, vs)
                srcs.append(ad.reshape(val, (P, 1, J)))
                masks.append((w & ref_ok & inv & ok).reshape(P, 1, J))
            if srcs:
                src = ad.concat(srcs, axis=1)
                mask = np.concatenate(masks, axis=1)
                refPJ = ad.reshape(ref, (P, J))
                if cfg.pixel_ncc:
                    per, n_ok = pixel_photo_per_patch(ad.reshape(refPJ, (P, 1, J)), src, mask)
                    stats["ncc_degraded"] = int(np.count_nonzero(n_ok == 0))
                else:
                    scores, ok = ncc(ad.reshape(refPJ, (P, 1, J)), src, mask)
                    per, used = ncc_loss_per_patch(scores, ok)
                    stats["ncc_degraded"] = int(np.count_nonzero(used < 3))
                terms["ncc"] = ad.div(ad.sum(per), denom)
        return terms, stats, pts_val[w]

    def _gradients(self, params_values: dict, pts) -> np.ndarray:
        tape = ad.Tape()
        params = {k: tape.var(v) for k, v in params_values.items()}
        _, _, _, _, g = self.model.geometry(tape, params, pts.astype(self.store.dtype), create_graph=False)
        return np.asarray(g, dtype=np.float64)

    def chunk_job(self, it: int, vi: int, ch: RayChunk, counts: StepCounts, epoch: float,
                  alignment: DepthAlignment | None):
        """Gradient and term values of one chunk's share of the batch loss."""
        cfg = self.cfg
        coef = cfg.weights.coefficients(epoch)
        rng = _rng(cfg.seed, it, _CHUNK, ch.index)
        tape = ad.Tape()
        params = self._params(tape)
        out = self.model.render(tape, params, ch.origins, ch.dirs, ch.near, ch.far,
                                cfg.n_coarse, cfg.n_fine, rng)
        dtype = self.store.dtype
        terms = {}
        terms["rgb"] = ad.div(ad.sum(rgb_per_ray(out["rgb"], ch.rgb.astype(dtype))), float(counts.rays))
        dv = ch.depth_valid.astype(dtype)
        gt_depth = np.where(ch.depth_valid, ch.gt_depth, 0.0).astype(dtype)
        if counts.depth_rays:
            zdepth = ad.mul(out["depth"], ch.cos.astype(dtype))
            dr = ad.mul(depth_per_ray(zdepth, gt_depth, alignment), dv)
            terms["depth"] = ad.div(ad.sum(dr), float(counts.depth_rays))
            nr = ad.mul(normal_per_ray(out["normal"], ch.normal.astype(dtype)), dv)
            terms["normal"] = ad.div(ad.sum(nr), float(counts.depth_rays))
        terms["eikonal"] = ad.div(ad.sum(eikonal_per_point(out["grad"])), float(counts.eik_points))
        stats = {"masked_points": 0, "dropped_points": 0, "ncc_degraded": 0}
        patch_pts = np.zeros((0, 3))
        if cfg.weights.uses_surface and ch.has_anchor.any():
            pterms, stats, patch_pts = self._patch_terms(tape, params, vi, ch, rng, counts,
                                                         coef["ncc"] > 0, alignment)
            terms.update(pterms)
        return self._finish(tape, params, terms, coef, stats, patch_pts)

    def uniform_job(self, it: int, counts: StepCounts, epoch: float):
        cfg = self.cfg
        coef = cfg.weights.coefficients(epoch)
        rng = _rng(cfg.seed, it, _UNIFORM)
        lo, hi = self.box
        pts = rng.uniform(lo, hi, size=(cfg.eikonal_uniform, 3)).astype(self.store.dtype)
        tape = ad.Tape()
        params = self._params(tape)
        _, _, _, _, g = self.model.geometry(tape, params, pts, create_graph=True)
        terms = {"eikonal": ad.div(ad.sum(eikonal_per_point(g)), float(counts.eik_points))}
        return self._finish(tape, params, terms, coef, {}, np.zeros((0, 3)))

    def _finish(self, tape, params, terms, coef, stats, patch_pts):
        total = None
        values = {}
        for name in TERMS:
            if name not in terms:
                continue
            val = float(np.asarray(ad.value_of(terms[name]), dtype=np.float64))
            if not math.isfinite(val):
                raise NumericalAbort(name, val)
            values[name] = val
            if coef[name] != 0.0:
                part = ad.mul(terms[name], coef[name])
                total = part if total is None else ad.add(total, part)
        if total is None or not isinstance(total, ad.Var):
            grads = {}
        else:
            names = list(params)
            gmap = ad.grad(tape, total, [params[n] for n in names])
            grads = {n: np.asarray(gmap[params[n]]) for n in names}
        return grads, values, stats, patch_pts

    # ------------------------------------------------------------------
    # optimisation

    def _solve_alignment(self, it, chunks):
        preds, gts = [], []
        params = self._params()
        for ch in chunks:
            tape = ad.Tape()
            p = {k: tape.var(v) for k, v in params.items()}
            out = self.model.render(tape, p, ch.origins, ch.dirs, ch.near, ch.far, self.cfg.n_coarse,
                                    self.cfg.n_fine, _rng(self.cfg.seed, it, _CHUNK, ch.index),
                                    create_graph=False)
            z = np.asarray(ad.value_of(out["depth"]), dtype=np.float64) * ch.cos
            preds.append(z[ch.depth_valid])
            gts.append(ch.gt_depth[ch.depth_valid])
        pred, gt = np.concatenate(preds), np.concatenate(gts)
        if pred.size < 2:
            return DepthAlignment()
        return solve_scale_shift(pred, gt)

    def step(self, executor=None) -> dict:
        cfg = self.cfg
        it = self.step_index
        epoch = it / self.iters_per_epoch
        alignment = None
        if cfg.depth_alignment:
            # solve on the raw GT first, then re-derive anchors in model units
            _, raw_chunks, _ = self.prepare(it)
            alignment = self._solve_alignment(it, raw_chunks)
        vi, chunks, counts = self.prepare(it, alignment)
        jobs = [(lambda ch=ch: self.chunk_job(it, vi, ch, counts, epoch, alignment)) for ch in chunks]
        if cfg.eikonal_uniform > 0:
            jobs.append(lambda: self.uniform_job(it, counts, epoch))
        if executor is not None and len(jobs) > 1:
            results = list(executor.map(lambda f: f(), jobs))
        else:
            results = [f() for f in jobs]
        self.store.zero_grad()
        values = {name: 0.0 for name in TERMS}
        stats = {"masked_points": 0, "dropped_points": 0, "ncc_degraded": 0}
        patch_pts = []
        for key, (grads, vals, st, pp) in enumerate(results):
            self.store.accumulate(grads, key=key)
            for name, v in vals.items():
                values[name] += v
            for name, v in st.items():
                stats[name] += v
            patch_pts.append(pp)
        grad = self.store.reduce()
        if not np.all(np.isfinite(grad)):
            raise NumericalAbort("gradient")
        coef = cfg.weights.coefficients(epoch)
        loss = 0.0
        for name in TERMS:
            loss += coef[name] * values[name]
        lr = cosine_lr(it, self.total_steps, cfg.lr, cfg.lr_final_ratio)
        new = self.adam.step(self.store.data, grad, lr * self.lr_scale)
        if not np.all(np.isfinite(new)):
            raise NumericalAbort("parameters")
        self.store.data[:] = new.astype(self.store.dtype)
        beta = float(np.asarray(ad.value_of(self.model.beta({BETA_KEY: self.store[BETA_KEY]}))))
        row = {"step": it, "epoch": epoch, "lr": lr, "loss": loss, **values,
               "lambda5": coef["ncc"], "beta": beta, "rays": counts.rays, "patches": counts.patches,
               **stats}
        self.step_index += 1
        self._last_patch_points = np.concatenate(patch_pts) if patch_pts else np.zeros((0, 3))
        return row

    # ------------------------------------------------------------------
    # checkpoints and the run loop

    def checkpoint_meta(self) -> dict:
        return {"model": to_dict(self.model_cfg), "step": self.step_index,
                "epoch": self.step_index / self.iters_per_epoch, "seed": self.cfg.seed,
                "bbox": np.asarray(self.box).tolist(), "bound_radius": self.bound_radius,
                "scene_scale": self.ds.scene_scale}

    def save(self, path) -> Path:
        path = Path(path)
        save_checkpoint(path, self.store, self.checkpoint_meta())
        return path

    def run(self, progress=None) -> TrainResult:
        cfg = self.cfg
        log_path = None
        writer = None
        fh = None
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
            (self.out / "config.json").write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True))
            log_path = self.out / "train_log.csv"
            fh = open(log_path, "w", newline="")
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
        executor = ThreadPoolExecutor(self.threads) if self.threads > 1 else None
        final_loss = float("nan")
        ckpt = None
        try:
            with threadpool_limits(limits=1):
                if self.out is not None and cfg.epochs == 0:
                    ckpt = self.save(self.out / "model.ssdf")
                while self.step_index < self.total_steps:
                    backup = self.store.data.copy()
                    try:
                        row = self.step(executor)
                    except NumericalAbort as exc:
                        self.store.data[:] = backup
                        if self.out is not None:
                            ckpt = self.save(self.out / "last_good.ssdf")
                        return TrainResult(self.step_index, final_loss, log_path, ckpt, True, str(exc))
                    final_loss = row["loss"]
                    self.history.append(row)
                    if writer is not None:
                        writer.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
                    if progress is not None:
                        progress(row)
                    done_epoch = self.step_index % self.iters_per_epoch == 0
                    epoch = self.step_index // self.iters_per_epoch
                    if self.out is not None and done_epoch:
                        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                            self.save(self.out / f"ckpt_e{epoch:04d}.ssdf")
                            if cfg.dump_patches:
                                dump_patches_ply(self.out / f"patches_e{epoch:04d}.ply",
                                                 self._last_patch_points)
                if self.out is not None:
                    ckpt = self.save(self.out / "model.ssdf")
        finally:
            if executor is not None:
                executor.shutdown()
            if fh is not None:
                fh.close()
        return TrainResult(self.step_index, final_loss, log_path, ckpt)


def _aligned_depth(view, alignment: DepthAlignment) -> np.ndarray:
    out = view.depth.copy()
    m = out > 0
    out[m] = alignment.invert(out[m])
    return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (int(v) if k in ("step", "rays", "patches", "masked_points", "dropped_points",
                                         "ncc_degraded") else float(v)) for k, v in r.items()})
    return out


def load_model(path):
    """``(SurfaceModel, ParamStore, meta)`` from a checkpoint written by :class:`Trainer`."""
    store, meta = load_checkpoint(path)
    if "model" not in meta:
        raise CheckpointError(f"{path}: checkpoint lacks model metadata")
    model = SurfaceModel(from_dict(ModelConfig, meta["model"]))
    return model, store, meta


def train(dataset: Dataset, cfg: TrainConfig, out_dir=None, progress=None) -> TrainResult:
    return Trainer(dataset, cfg, out_dir).run(progress)


def render_view(model: SurfaceModel, store, camera, bound_radius: float, n_coarse: int = 64,
                n_fine: int = 64, chunk: int = 512, seed: int = 0, pixels=None) -> dict:
    """Render colour, z-depth, world normal and opacity for every pixel of ``camera``.

    ``pixels`` restricts rendering to an (N, 2) integer pixel list; the result
    arrays are then (N, ...) instead of (H, W, ...).  Rays missing the bound
    sphere get zero colour, depth and opacity.
    """
    W, H = camera.width, camera.height
    if pixels is None:
        jj, ii = np.mgrid[0:H, 0:W]
        px = np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.float64)
    else:
        px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n = len(px)
    rgb = np.zeros((n, 3))
    depth = np.zeros(n)
    normal = np.zeros((n, 3))
    opacity = np.zeros(n)
    if n:
        o, d = pixel_ray(camera, px)
        near, far, hit = sphere_bounds(o, d, bound_radius)
        cos = d @ camera.rotation[:, 2]
        idx = np.flatnonzero(hit)
        with threadpool_limits(limits=1):
            for k, s in enumerate(range(0, len(idx), chunk)):
                sl = idx[s:s + chunk]
                tape = ad.Tape()
                out = model.render(tape, store.bind(tape), o[sl], d[sl], near[sl], far[sl], n_coarse, n_fine,
                                   _rng(seed, k, _CHUNK), create_graph=False)
                rgb[sl] = ad.value_of(out["rgb"])
                depth[sl] = np.asarray(ad.value_of(out["depth"])) * cos[sl]
                normal[sl] = ad.value_of(out["normal"])
                opacity[sl] = ad.value_of(out["opacity"])
    if pixels is None:
        return {"rgb": rgb.reshape(H, W, 3), "depth": depth.reshape(H, W),
                "normal": normal.reshape(H, W, 3), "opacity": opacity.reshape(H, W)}
    return {"rgb": rgb, "depth": depth, "normal": normal, "opacity": opacity}
