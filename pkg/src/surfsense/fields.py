"""Signed distance fields: the neural geometry/color networks and analytic primitives."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad

SOFTPLUS_BETA = 100.0


def _as_points(q):
    q = np.asarray(q, dtype=np.float64) if not isinstance(q, np.ndarray) else q
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if q.shape[-1] != 3:
        raise ValueError(f"expected 3-vectors, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ValueError("query point is not finite")
    return q, single


# ----------------------------------------------------------------------------
# positional encoding


@dataclass(frozen=True)
class PositionalEncoding:
    num_frequencies: int = 6
    include_input: bool = True

    @property
    def dim(self) -> int:
        return (3 if self.include_input else 0) + 6 * self.num_frequencies

    def __call__(self, q):
        parts = [q] if self.include_input else []
        for k in range(self.num_frequencies):
            scaled = ad.mul(q, (2.0 ** k) * math.pi)
            parts.append(ad.sin(scaled))
            parts.append(ad.cos(scaled))
        if not parts:
            return ad.mul(q, 0.0)[..., :0]
        return ad.concat(parts, axis=-1)


def encode(q, num_frequencies: int = 6, include_input: bool = True):
    """Frequency encoding [q, sin(2^0 pi q), cos(2^0 pi q), ...] of one or many points."""
    pts, single = _as_points(q)
    out = PositionalEncoding(num_frequencies, include_input)(pts)
    return out[0] if single else out


# ----------------------------------------------------------------------------
# networks


@dataclass
class SdfNetworkConfig:
    hidden: int = 128
    layers: int = 4
    skip: tuple = (2,)
    frequencies: int = 6
    init_radius: float = 1.0
    inside_out: bool = False

    def __post_init__(self):
        self.skip = tuple(self.skip)


@dataclass
class ColorNetworkConfig:
    hidden: int = 128
    layers: int = 2


def _linear(x, W, b):
    return ad.add(ad.matmul(x, W), b)


class SdfNetwork:
    """Geometry MLP: point -> (signed distance, feature of the last hidden layer)."""

    prefix = "sdf"

    def __init__(self, config: SdfNetworkConfig | None = None):
        self.config = config or SdfNetworkConfig()
        self.encoding = PositionalEncoding(self.config.frequencies)

    @property
    def feature_dim(self) -> int:
        return self.config.hidden

    def _dims(self):
        c = self.config
        enc = self.encoding.dim
        dims = []
        d_in = enc
        for i in range(c.layers):
            if i in c.skip and i > 0:
                d_in = d_in + enc
            dims.append((d_in, c.hidden))
            d_in = c.hidden
        dims.append((d_in, 1))
        return dims

    def init_params(self, store: ad.ParamStore, rng: np.random.Generator) -> None:
        """Sphere-like geometric initialization of an SDF MLP."""
        c = self.config
        enc = self.encoding.dim
        dims = self._dims()
        last = len(dims) - 1
        for i, (d_in, d_out) in enumerate(dims):
            if i == last:
                mean = math.sqrt(math.pi) / math.sqrt(d_in)
                W = rng.normal(mean, 1e-4, size=(d_in, d_out))
                b = np.full(d_out, -c.init_radius)
                if c.inside_out:
                    W, b = -W, -b
            else:
                W = rng.normal(0.0, math.sqrt(2.0) / math.sqrt(d_out), size=(d_in, d_out))
                b = np.zeros(d_out)
                if i == 0:
                    W[3:, :] = 0.0
                elif i in c.skip:
                    W[-(enc - 3):, :] = 0.0
            store.add(f"{self.prefix}.l{i}.W", W)
            store.add(f"{self.prefix}.l{i}.b", b)
        self._calibrate(store, rng)

    def _calibrate(self, store: ad.ParamStore, rng: np.random.Generator, n: int = 4096,
                   ridge: float = 1e-3) -> None:
        # random features alone give a lopsided sphere; refit the output head to
        # the target sphere distance by ridge regression on the last hidden layer
        c = self.config
        last = len(self._dims()) - 1
        Wn, bn = f"{self.prefix}.l{last}.W", f"{self.prefix}.l{last}.b"
        pts = rng.uniform(-2.0 * c.init_radius, 2.0 * c.init_radius, size=(n, 3))
        params = {k: store[k] for k in store.names() if k.startswith(self.prefix + ".")}
        with ad.no_grad():
            _, z = self.forward(params, pts.astype(store.dtype))
        target = np.linalg.norm(pts, axis=-1) - c.init_radius
        if c.inside_out:
            target = -target
        A = np.concatenate([z.astype(np.float64), np.ones((n, 1))], axis=1)
        reg = ridge * n * np.eye(A.shape[1])
        reg[-1, -1] = 0.0
        sol = np.linalg.solve(A.T @ A + reg, A.T @ target)
        store[Wn] = sol[:-1, None]
        store[bn] = sol[-1:]

    def forward(self, params: dict, q, enc=None):
        """Returns ``(d, z)`` with ``d`` of shape (N,) and ``z`` of shape (N, hidden)."""
        c = self.config
        if enc is None:
            enc = self.encoding(q)
        x = enc
        n = len(self._dims())
        z = None
        for i in range(n):
            if i in c.skip and 0 < i < n - 1:
                x = ad.mul(ad.concat([x, enc], axis=-1), 1.0 / math.sqrt(2.0))
            x = _linear(x, params[f"{self.prefix}.l{i}.W"], params[f"{self.prefix}.l{i}.b"])
            if i < n - 1:
                x = ad.softplus(x, SOFTPLUS_BETA)
                z = x
        return ad.reshape(x, ad.value_of(x).shape[:-1]), z


class ColorNetwork:
    """Radiance MLP: (q, e(q), v, g, z) -> rgb in [0, 1]^3."""

    prefix = "rgb"

    def __init__(self, config: ColorNetworkConfig | None = None, enc_dim: int = 39,
                 feature_dim: int = 128):
        self.config = config or ColorNetworkConfig()
        self.in_dim = 3 + enc_dim + 3 + 3 + feature_dim

    def init_params(self, store: ad.ParamStore, rng: np.random.Generator) -> None:
        c = self.config
        d_in = self.in_dim
        for i in range(c.layers + 1):
            d_out = 3 if i == c.layers else c.hidden
            W = rng.normal(0.0, math.sqrt(2.0 / (d_in + d_out)), size=(d_in, d_out))
            store.add(f"{self.prefix}.l{i}.W", W)
            store.add(f"{self.prefix}.l{i}.b", np.zeros(d_out))
            d_in = d_out

    def forward(self, params: dict, q, enc, v, g, z):
        x = ad.concat([q, enc, v, g, z], axis=-1)
        n = self.config.layers + 1
        for i in range(n):
            x = _linear(x, params[f"{self.prefix}.l{i}.W"], params[f"{self.prefix}.l{i}.b"])
            if i < n - 1:
                x = ad.softplus(x, SOFTPLUS_BETA)
        return ad.sigmoid(x)


def color_eval(net: ColorNetwork, params: dict, q, enc, v, g, z):
    v_val = np.asarray(ad.value_of(v))
    if np.any(np.abs(np.linalg.norm(v_val, axis=-1) - 1.0) > 1e-6):
        raise ValueError("view direction is not unit length")
    return net.forward(params, q, enc, v, g, z)


# ----------------------------------------------------------------------------
# scalar fields


class NeuralSdf:
    """Binds an :class:`SdfNetwork` to a parameter store for value-level queries."""

    def __init__(self, net: SdfNetwork, store: ad.ParamStore):
        self.net = net
        self.store = store

    def _params(self):
        return {name: self.store[name] for name in self.store.names()
                if name.startswith(self.net.prefix + ".")}

    def distance(self, q, chunk: int = 65536) -> np.ndarray:
        pts = np.asarray(q, dtype=self.store.dtype).reshape(-1, 3)
        params = self._params()
        out = np.empty(len(pts), dtype=self.store.dtype)
        with ad.no_grad():
            for s in range(0, len(pts), chunk):
                out[s:s + chunk] = self.net.forward(params, pts[s:s + chunk])[0]
        return out.reshape(np.shape(q)[:-1])

    def evaluate(self, q, chunk: int = 16384):
        pts, single = _as_points(q)
        pts = pts.astype(self.store.dtype)
        ds, zs, gs = [], [], []
        for s in range(0, len(pts), chunk):
            tape = ad.Tape()
            params = {k: tape.var(v) for k, v in self._params().items()}
            qv = tape.var(pts[s:s + chunk])
            d, z = self.net.forward(params, qv)
            g = ad.grad(tape, ad.sum(d), [qv])[qv]
            ds.append(d.value)
            zs.append(z.value)
            gs.append(g)
        d, z, g = np.concatenate(ds), np.concatenate(zs), np.concatenate(gs)
        if single:
            return d[0], z[0], g[0]
        return d, z, g

    def gradient(self, q):
        return self.evaluate(q)[2]


def _checker(q, scale, colors, phase=0.1234):
    idx = np.floor(q / scale + phase).astype(np.int64).sum(axis=-1)
    a, b = np.asarray(colors[0], float), np.asarray(colors[1], float)
    return np.where((idx % 2 == 0)[:, None], a, b)


@dataclass
class AnalyticSdf:
    """Analytic primitive: sphere, box (optionally inside-out), or plane.

    ``albedo`` is an RGB triple; with ``texture="checker"`` the surface alternates
    between ``albedo`` and ``albedo2`` on a 3-D grid of pitch ``checker_scale``.
    """

    kind: str
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0
    half_extents: tuple = (1.0, 1.0, 1.0)
    normal: tuple = (0.0, 0.0, 1.0)
    offset: float = 0.0
    inside_out: bool = False
    albedo: tuple = (0.7, 0.7, 0.7)
    albedo2: tuple = (0.2, 0.2, 0.2)
    texture: str = "none"
    checker_scale: float = 0.25

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "plane"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.kind == "plane":
            n = np.asarray(self.normal, float)
            self.normal = tuple(n / np.linalg.norm(n))

    def _raw(self, q):
        c = np.asarray(self.center, float)
        if self.kind == "sphere":
            r = q - c
            dist = np.linalg.norm(r, axis=-1)
            safe = np.where(dist > 0, dist, 1.0)
            g = r / safe[:, None]
            g[dist == 0] = (1.0, 0.0, 0.0)
            return dist - self.radius, g
        if self.kind == "plane":
            n = np.asarray(self.normal, float)
            return q @ n + self.offset, np.broadcast_to(n, q.shape).copy()
        h = np.asarray(self.half_extents, float)
        rel = q - c
        s = np.where(rel >= 0, 1.0, -1.0)
        k = np.abs(rel) - h
        pos = np.maximum(k, 0.0)
        out_len = np.linalg.norm(pos, axis=-1)
        kmax = k.max(axis=-1)
        d = out_len + np.minimum(kmax, 0.0)
        outside = kmax > 0
        g = np.zeros_like(q)
        safe = np.where(out_len > 0, out_len, 1.0)
        g[outside] = (s * pos / safe[:, None])[outside]
        axis = np.argmax(k, axis=-1)
        inner = np.zeros_like(q)
        inner[np.arange(len(q)), axis] = s[np.arange(len(q)), axis]
        g[~outside] = inner[~outside]
        return d, g

    def distance_and_gradient(self, q):
        d, g = self._raw(q)
        if self.inside_out:
            return -d, -g
        return d, g

    def distance(self, q):
        pts = np.asarray(q, float)
        return self.distance_and_gradient(pts.reshape(-1, 3))[0].reshape(pts.shape[:-1])

    def albedo_at(self, q):
        q = np.asarray(q, float).reshape(-1, 3)
        if self.texture == "checker":
            return _checker(q, self.checker_scale, (self.albedo, self.albedo2))
        return np.broadcast_to(np.asarray(self.albedo, float), q.shape).copy()

    def evaluate(self, q):
        pts, single = _as_points(q)
        d, g = self.distance_and_gradient(pts)
        z = np.zeros((len(pts), 0))
        if single:
            return d[0], z[0], g[0]
        return d, z, g

    def to_dict(self):
        return asdict(self)


@dataclass
class UnionSdf:
    """Minimum over member SDFs; gradient and albedo come from the closest member."""

    members: list = field(default_factory=list)

    def _all(self, q):
        ds, gs = zip(*(m.distance_and_gradient(q) for m in self.members))
        return np.stack(ds), np.stack(gs)

    def distance_and_gradient(self, q):
        ds, gs = self._all(q)
        k = np.argmin(ds, axis=0)
        idx = np.arange(ds.shape[1])
        return ds[k, idx], gs[k, idx]

    def distance(self, q):
        pts = np.asarray(q, float)
        flat = pts.reshape(-1, 3)
        return np.min(np.stack([m.distance(flat) for m in self.members]), axis=0).reshape(pts.shape[:-1])

    def closest_member(self, q):
        return np.argmin(self._all(np.asarray(q, float).reshape(-1, 3))[0], axis=0)

    def albedo_at(self, q):
        q = np.asarray(q, float).reshape(-1, 3)
        k = self.closest_member(q)
        out = np.zeros_like(q)
        for i, m in enumerate(self.members):
            sel = k == i
            if sel.any():
                out[sel] = m.albedo_at(q[sel])
        return out

    def evaluate(self, q):
        pts, single = _as_points(q)
        d, g = self.distance_and_gradient(pts)
        z = np.zeros((len(pts), 0))
        if single:
            return d[0], z[0], g[0]
        return d, z, g


def sdf_eval(field, q):
    """Signed distance, feature and spatial gradient of any scalar field at ``q``."""
    return field.evaluate(q)


# ----------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"SSDFCKPT"
CKPT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, store: ad.ParamStore, meta: dict | None = None) -> None:
    """Binary header (magic, version, metadata, segment shapes) + little-endian float32 payload."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(store.segments))]
    for name, (_, shape) in store.segments.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
    parts.append(np.ascontiguousarray(store.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> tuple[ad.ParamStore, dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    pos = 16
    meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    layout = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        layout.append((name, shape))
    payload = np.frombuffer(buf, dtype="<f4", offset=pos)
    store = ad.ParamStore(np.float32)
    off = 0
    for name, shape in layout:
        size = int(np.prod(shape, dtype=np.int64))
        if off + size > payload.size:
            raise CheckpointError(f"{path}: truncated payload")
        store.add(name, payload[off:off + size].reshape(shape))
        off += size
    if off != payload.size:
        raise CheckpointError(f"{path}: trailing payload bytes")
    return store, meta
