"""Geometry + colour networks with a trainable density scale, and ray rendering."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .fields import ColorNetwork, ColorNetworkConfig, NeuralSdf, SdfNetwork, SdfNetworkConfig
from .rendering import beta_from_raw, composite_arrays, laplace_density, raw_from_beta, sample_ray

BETA_KEY = "density.beta_raw"


@dataclass
class ModelConfig:
    sdf: SdfNetworkConfig = field(default_factory=SdfNetworkConfig)
    color: ColorNetworkConfig = field(default_factory=ColorNetworkConfig)
    beta_init: float = 0.1
    beta_min: float = 1e-4


class SurfaceModel:
    def __init__(self, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        self.sdf_net = SdfNetwork(self.config.sdf)
        self.color_net = ColorNetwork(self.config.color, self.sdf_net.encoding.dim,
                                      self.sdf_net.feature_dim)

    def init_store(self, seed: int, dtype=np.float32) -> ad.ParamStore:
        rng = np.random.default_rng(seed)
        store = ad.ParamStore(np.float64)
        self.sdf_net.init_params(store, rng)
        self.color_net.init_params(store, rng)
        store.add(BETA_KEY, np.array([raw_from_beta(self.config.beta_init, self.config.beta_min)]))
        return store.astype(dtype)

    def beta(self, params):
        return ad.reshape(beta_from_raw(params[BETA_KEY], self.config.beta_min), ())

    def field(self, store: ad.ParamStore) -> NeuralSdf:
        return NeuralSdf(self.sdf_net, store)

    def sdf_values(self, params, pts):
        with ad.no_grad():
            vals = {k: ad.value_of(v) for k, v in params.items()}
            dtype = vals[BETA_KEY].dtype
            return self.sdf_net.forward(vals, np.asarray(pts, dtype=dtype))[0]

    def geometry(self, tape: ad.Tape, params: dict, pts, create_graph: bool = True):
        """SDF value, feature, encoding and spatial gradient at ``pts``.

        The points become a fresh leaf on ``tape``.  With ``create_graph`` the
        gradient is itself a tape variable, so losses built on it reach the
        network weights through second derivatives.
        """
        dtype = ad.value_of(params[BETA_KEY]).dtype
        q = tape.var(np.asarray(pts, dtype=dtype))
        enc = self.sdf_net.encoding(q)
        d, z = self.sdf_net.forward(params, q, enc)
        g = ad.grad(tape, ad.sum(d), [q], create_graph=create_graph)[q]
        return q, d, z, enc, g

    def render(self, tape: ad.Tape, params: dict, origins, dirs, near, far,
               n_coarse: int, n_fine: int, rng=None, create_graph: bool = True):
        """Volume-render rays.  Returns a dict of tape variables plus the samples.

        ``create_graph=False`` skips the second-order path; use it for passes
        that are not differentiated.
        """
        dtype = ad.value_of(params[BETA_KEY]).dtype
        beta_val = float(ad.value_of(self.beta(params)))
        samples = sample_ray(origins, dirs, near, far, n_coarse, n_fine,
                             lambda p: self.sdf_values(params, p), beta_val, rng)
        R, S = samples.t.shape
        t = samples.t.astype(dtype)
        delta = samples.delta.astype(dtype)
        pts = (origins[:, None, :] + samples.t[..., None] * dirs[:, None, :]).reshape(-1, 3)
        q, d, z, enc, g = self.geometry(tape, params, pts, create_graph)
        sigma = laplace_density(ad.reshape(d, (R, S)), self.beta(params))
        vdir = np.repeat(np.asarray(dirs, dtype=dtype), S, axis=0)
        rgb = self.color_net.forward(params, q.value, enc, vdir, g, z)
        n = ad.div(g, ad.norm(g, axis=-1, keepdims=True, eps=1e-18))
        out = composite_arrays(sigma, delta, t, ad.reshape(rgb, (R, S, 3)), ad.reshape(n, (R, S, 3)))
        out["grad"] = g
        out["points"] = q
        out["samples"] = samples
        return out
