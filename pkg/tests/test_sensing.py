import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surfsense import autodiff as ad
from surfsense.camera import Camera, View
from surfsense.fields import AnalyticSdf, SdfNetworkConfig
from surfsense.losses import l_fit, plane_from_cue
from surfsense.model import ModelConfig, SurfaceModel
from surfsense.scenes import preset, render_gt_view
from surfsense.sensing import (PatchConfig, dump_patches_ply, find_intersection, pull, pull_points,
                               pull_step, sample_anchor_neighborhood, sense_patch)
from surfsense.training import Adam
from surfsense.dataio import read_ply
from conftest import rel_err

# median |f(p')| / median |f(p)| for 1000 band points around a freshly
# initialised network measured 0.016-0.032 over seeds; frozen with headroom
PULL_RATIO_BOUND = 0.1

SPHERE = AnalyticSdf("sphere")
PLANE = AnalyticSdf("plane", normal=(0, 0, 1))


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@pytest.fixture(scope="module")
def fitted_sphere():
    """Small MLP regressed onto the unit-sphere distance in a band around the surface."""
    m = SurfaceModel(ModelConfig(sdf=SdfNetworkConfig(hidden=64, layers=3, frequencies=2)))
    store = m.init_store(0, np.float64)
    names = [n for n in store.names() if n.startswith("sdf.")]
    rng = np.random.default_rng(0)
    adam = Adam(store.data.size, 1e-3)
    iters = 1500
    for it in range(iters):
        q = unit(rng.normal(size=(512, 3))) * rng.uniform(0.85, 1.15, (512, 1))
        tape = ad.Tape()
        p = store.bind(tape)
        d, _ = m.sdf_net.forward(p, q)
        loss = ad.mean(ad.square(ad.sub(d, np.linalg.norm(q, axis=1) - 1)))
        g = ad.grad(tape, loss, [p[n] for n in names])
        store.zero_grad()
        store.accumulate({n: g[p[n]] for n in names})
        lr = 1e-3 * 0.5 * (1 + np.cos(np.pi * it / iters)) + 1e-5
        store.data[:] = adam.step(store.data, store.reduce(), lr)
    return m.field(store)


# ----------------------------------------------------------------------------
# intersections


def test_intersection_unit_sphere():
    t, ok = find_intersection(SPHERE.distance, np.array([0, 0, -2.0]), np.array([0, 0, 1.0]), 0.0, 4.0)
    assert ok and abs(t - 1.0) < 1e-5


def test_intersection_miss():
    t, ok = find_intersection(SPHERE.distance, np.array([2.0, 0, -2.0]), np.array([0, 0, 1.0]), 0.0, 4.0)
    assert not ok and np.isnan(t)


def test_intersection_rejects_bad_bounds():
    with pytest.raises(ValueError):
        find_intersection(SPHERE.distance, np.zeros(3), np.array([0, 0, 1.0]), 1.0, 1.0)


def test_intersection_batch_matches_analytic():
    rng = np.random.default_rng(0)
    d = unit(rng.normal(size=(300, 3)))
    o = -3 * d + 0.5 * unit(np.cross(d, rng.normal(size=3)))
    t, ok = find_intersection(SPHERE.distance, o, d, 0.0, 6.0)
    b = np.sum(o * d, 1)
    ta = -b - np.sqrt(b * b - (np.sum(o * o, 1) - 1))
    assert ok.all() and np.max(np.abs(t - ta)) < 1e-8


def test_intersection_trained_mlp(fitted_sphere):
    rng = np.random.default_rng(1)
    d = unit(rng.normal(size=(200, 3)))
    o = -2.5 * d + 0.3 * unit(np.cross(d, [0, 0, 1]))
    t, ok = find_intersection(fitted_sphere.distance, o, d, 0.01, 5.0)
    b = np.sum(o * d, 1)
    ta = -b - np.sqrt(b * b - (np.sum(o * o, 1) - 1))
    assert ok.all() and np.max(np.abs(t - ta)) <= 5e-3


# ----------------------------------------------------------------------------
# neighbourhoods


def test_neighbourhood_tiny_tau():
    q = np.array([0.3, -0.2, 1.0])
    pts = sample_anchor_neighborhood(q, PatchConfig(J=9, tau=1e-12), np.random.default_rng(0))
    assert pts.shape == (9, 3) and np.allclose(pts, q, atol=1e-10)


def test_neighbourhood_statistics():
    q = np.array([1.0, 2.0, -0.5])
    tau = 0.03
    pts = sample_anchor_neighborhood(q, PatchConfig(J=100_000, tau=tau), np.random.default_rng(1))
    se = tau / np.sqrt(len(pts))
    assert np.all(np.abs(pts.mean(0) - q) < 5 * se)
    assert np.all(np.abs(pts.var(0, ddof=1) / tau ** 2 - 1) < 0.05)


def test_neighbourhood_deterministic_per_seed():
    cfg = PatchConfig(J=5, tau=0.1)
    a = sample_anchor_neighborhood(np.zeros(3), cfg, np.random.default_rng(3))
    b = sample_anchor_neighborhood(np.zeros(3), cfg, np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_tau_mult_scales_variance():
    cfg = PatchConfig(J=50_000, tau=0.1, tau_mult=4.0)
    pts = sample_anchor_neighborhood(np.zeros(3), cfg, np.random.default_rng(4))
    assert pts.std() == pytest.approx(0.2, rel=0.02)


def test_spacing_required_without_tau():
    with pytest.raises(ValueError):
        sample_anchor_neighborhood(np.zeros(3), PatchConfig(), np.random.default_rng(0))


@pytest.mark.parametrize("kw", [{"J": 0}, {"tau": -1.0}, {"tau_mult": 0.0}, {"anchor_source": "x"}])
def test_patch_config_validation(kw):
    with pytest.raises(ValueError):
        PatchConfig(**kw)


# ----------------------------------------------------------------------------
# pulling


def test_pull_sphere():
    assert np.allclose(pull(SPHERE, np.array([2.0, 0, 0])), [1, 0, 0])


def test_pull_plane():
    assert np.allclose(pull(PLANE, np.array([7.0, -3.0, 0.4])), [7, -3, 0])


def test_pull_vanishing_gradient():
    q, ok = pull_step(np.zeros((2, 3)), np.array([1.0, 1.0]), np.array([[0, 0, 0.0], [0, 0, 1.0]]))
    assert list(ok) == [False, True]
    assert np.allclose(q[0], 0) and np.allclose(q[1], [0, 0, -1])

    class Flat:
        def evaluate(self, q):
            return np.ones(len(q)), None, np.zeros((len(q), 3))

    with pytest.raises(ValueError):
        pull(Flat(), np.zeros(3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pull_properties_exact_sdfs(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(-2, 2, size=(200, 3))
    for f in (AnalyticSdf("sphere", center=(0.1, 0.2, -0.1), radius=0.7),
              AnalyticSdf("plane", normal=(1, -1, 2), offset=0.2)):
        p1, ok = pull(f, p)
        assert ok.all()
        assert np.max(np.abs(f.distance(p1))) < 1e-6
        p2, _ = pull(f, p1)
        assert np.max(np.linalg.norm(p2 - p1, axis=1)) < 1e-6
        d, g = f.distance_and_gradient(p)
        assert np.allclose(np.linalg.norm(p1 - p, axis=1), np.abs(d), atol=1e-12)
        step = p1 - p
        big = np.linalg.norm(step, axis=1) > 1e-9
        cross = np.linalg.norm(np.cross(unit(step[big]), g[big]), axis=1)
        assert np.max(np.arcsin(np.minimum(cross, 1.0))) <= 1e-6


def test_pull_improves_mlp_distances():
    m = SurfaceModel(ModelConfig())
    f = m.field(m.init_store(0, np.float64))
    rng = np.random.default_rng(2)
    q = unit(rng.normal(size=(1000, 3))) * rng.uniform(0.8, 1.2, (1000, 1))
    p1, ok = pull(f, q)
    ratio = np.median(np.abs(f.distance(p1[ok]))) / np.median(np.abs(f.distance(q)))
    assert ratio <= 0.5
    assert ratio <= PULL_RATIO_BOUND


def test_fit_gradient_through_pull_matches_fd():
    """dL_fit/dtheta via the pulled points, including the second-order path."""
    m = SurfaceModel(ModelConfig(sdf=SdfNetworkConfig(hidden=8, layers=2, frequencies=1)))
    store = m.init_store(3, np.float64)
    rng = np.random.default_rng(5)
    pts = unit(rng.normal(size=(6, 3))) * rng.uniform(0.8, 1.2, (6, 1))
    plane = plane_from_cue(np.array([0, 0, 1.0]), unit([0.2, 0.1, 1.0]))

    def loss(tape, params):
        pulled, _, _, _ = pull_points(m, tape, params, pts)
        return l_fit(pulled, plane)

    tape = ad.Tape()
    params = store.bind(tape)
    names = [n for n in store.names() if n.startswith("sdf.")]
    g = ad.grad(tape, loss(tape, params), [params[n] for n in names])
    picks = [(n, i) for n in names for i in range(0, store[n].size, max(1, store[n].size // 3))]
    for name, i in picks:
        sl = store.slice_of(name)
        k = sl.start + i
        vals = []
        for h in (1e-5, -1e-5):
            store.data[k] += h
            t = ad.Tape()
            vals.append(float(ad.value_of(loss(t, store.bind(t)))))
            store.data[k] -= h
        fd = (vals[0] - vals[1]) / 2e-5
        an = g[params[name]].ravel()[i]
        assert rel_err(np.array([an]), np.array([fd]), 1e-7) <= 1e-3, (name, i, an, fd)


# ----------------------------------------------------------------------------
# patches


def _plane_view(z=2.0, n=24):
    cam = Camera(20.0, 20.0, n / 2, n / 2, np.eye(3), np.zeros(3), n, n)
    normal = np.zeros((n, n, 3))
    normal[..., 2] = -1.0
    return View(cam, np.zeros((n, n, 3)), np.full((n, n), z), normal)


def test_patch_on_exact_plane():
    view = _plane_view()
    wall = AnalyticSdf("plane", normal=(0, 0, -1), offset=2.0)
    patch = sense_patch(wall, view, (5.0, 7.0), PatchConfig(J=16), np.random.default_rng(0))
    assert patch.size == 16 and patch.valid.all()
    assert np.max(np.abs(patch.pulled[:, 2] - 2.0)) < 1e-6
    assert np.max(np.abs(patch.pulled_distances)) < 1e-6


def test_patch_degenerates_to_anchor():
    view = _plane_view()
    wall = AnalyticSdf("plane", normal=(0, 0, -1), offset=2.0)
    patch = sense_patch(wall, view, (12.0, 12.0), PatchConfig(J=1, tau=1e-12), np.random.default_rng(0))
    assert np.allclose(patch.pulled[0], patch.anchor, atol=1e-9)
    assert np.allclose(patch.anchor, [0, 0, 2])


def test_patch_without_anchor():
    view = _plane_view()
    view.depth[3, 4] = 0
    assert sense_patch(SPHERE, view, (4.0, 3.0), PatchConfig(), np.random.default_rng(0)) is None


def test_patch_intersection_anchor():
    spec = preset("sphere", views=4, width=32, height=32)
    view = render_gt_view(spec, spec.cameras()[0])
    cfg = PatchConfig(J=4, anchor_source="intersection")
    patch = sense_patch(spec.field, view, (16.0, 16.0), cfg, np.random.default_rng(0))
    assert abs(spec.field.distance(patch.anchor)) < 1e-6


def test_patch_diameter_scales_with_tau():
    spec = preset("sphere", views=4, width=32, height=32)
    view = render_gt_view(spec, spec.cameras()[0])
    spreads = []
    for tau in (0.02, 0.04):
        patch = sense_patch(spec.field, view, (16.0, 16.0), PatchConfig(J=4000, tau=tau),
                            np.random.default_rng(1))
        spreads.append(np.mean(np.linalg.norm(patch.pulled - patch.pulled.mean(0), axis=1)))
    assert spreads[1] / spreads[0] == pytest.approx(2.0, rel=0.2)


def test_dump_patches(tmp_path):
    pts = np.array([[0, 0, 0], [1, 2, 3], [np.nan, 0, 0]], float)
    assert dump_patches_ply(tmp_path / "p.ply", pts) == 2
    v, _ = read_ply(tmp_path / "p.ply")[:2]
    assert np.allclose(v, pts[:2])
