import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surfsense import autodiff as ad
from surfsense.camera import Camera, View, solve_scale_shift
from surfsense.fields import AnalyticSdf
from surfsense.losses import (TERMS, LossWeights, NumericalAbort, confidence, depth_per_ray, fit_plane,
                              l_depth_consistency, l_depth_render, l_eikonal, l_fit, l_ncc,
                              l_normal_render, l_rgb, ncc, ncc_loss_per_patch, pixel_photo_per_patch,
                              plane_from_cue, select_top, total_loss, visibility_mask)


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# ----------------------------------------------------------------------------
# rendering terms


def test_rgb_exact_and_offset():
    rng = np.random.default_rng(0)
    gt = rng.uniform(size=(10, 3))
    assert l_rgb(gt, gt) == 0
    assert l_rgb(gt + 0.1, gt) == pytest.approx(0.3)


def test_rgb_direct_sum():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(2, 50, 3))
    assert l_rgb(a, b) == pytest.approx(sum(abs(a[i] - b[i]).sum() for i in range(50)) / 50)


def test_depth_exact_offset_and_mask():
    gt = np.array([1.0, 2.0, 0.0, 3.0])
    assert l_depth_render(gt, gt) == 0
    assert l_depth_render(gt + 0.05, gt) == pytest.approx(0.05)
    # the zero entry is missing depth and ignored
    assert l_depth_render(np.array([1.0, 2.0, 99.0, 3.0]), gt) == 0


def test_depth_alignment_never_worse():
    rng = np.random.default_rng(2)
    pred = rng.uniform(1, 3, 100)
    gt = 2 * pred + 0.3 + rng.normal(scale=0.05, size=100)
    a = solve_scale_shift(pred, gt)
    aligned = np.mean(depth_per_ray(pred, gt, a) ** 2)
    assert aligned <= np.mean((pred - gt) ** 2)


def test_normal_terms():
    n = unit(np.random.default_rng(3).normal(size=(20, 3)))
    assert l_normal_render(n, n) == pytest.approx(0, abs=1e-15)
    assert l_normal_render(np.array([[0, 0, 1.0]]), np.array([[0, 0, -1.0]])) == pytest.approx(4.0)


def test_normal_direct_formula():
    rng = np.random.default_rng(4)
    a, b = unit(rng.normal(size=(2, 30, 3)))
    ref = np.mean(np.abs(a - b).sum(1) + np.abs(1 - (a * b).sum(1)))
    assert l_normal_render(a, b) == pytest.approx(ref)


def test_eikonal():
    q = np.random.default_rng(5).normal(size=(100, 3))
    _, g = AnalyticSdf("plane", normal=(1, 2, 3)).distance_and_gradient(q)
    assert l_eikonal(g) == pytest.approx(0, abs=1e-15)
    assert l_eikonal(2 * g) == pytest.approx(1.0)


# ----------------------------------------------------------------------------
# depth consistency


def test_dc_on_surface_and_5mm():
    Z = np.array([[1.0, 2.0, 3.0]])
    assert l_depth_consistency(Z, Z, np.ones((1, 3))) == 0
    D = Z.copy()
    D[0, 1] += 0.005
    w = visibility_mask(D, Z, np.ones((1, 3), bool), 0.015)
    assert w.all()
    assert l_depth_consistency(D, Z, w) == pytest.approx(0.005 ** 2)


def test_dc_masks_20mm():
    Z = np.array([[1.0, 2.0]])
    D = Z + np.array([[0.0, 0.020]])
    w = visibility_mask(D, Z, np.ones((1, 2), bool), 0.015)
    assert list(w[0]) == [True, False]
    assert l_depth_consistency(D, Z, w) == 0


def test_dc_all_masked_patch_contributes_zero():
    assert l_depth_consistency(np.ones((1, 4)), np.zeros((1, 4)), np.zeros((1, 4))) == 0


# ----------------------------------------------------------------------------
# NCC


def test_ncc_identity_affine_negation():
    rng = np.random.default_rng(6)
    a = rng.uniform(size=9)
    assert ncc(a, a)[0] == pytest.approx(1)
    assert ncc(a, 3.5 * a - 0.7)[0] == pytest.approx(1)
    assert ncc(a, -a)[0] == pytest.approx(-1)


def test_ncc_degenerate():
    score, ok = ncc(np.ones(5), np.arange(5.0))
    assert not ok and score == 0
    _, ok = ncc(np.arange(5.0), np.arange(5.0), mask=np.array([1, 0, 0, 0, 0], bool))
    assert not ok


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ncc_bounds_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 12))
    s, ok = ncc(a, b)
    assert ok and -1 - 1e-12 <= s <= 1 + 1e-12
    assert ncc(b, a)[0] == pytest.approx(s)
    assert s == pytest.approx(np.corrcoef(a, b)[0, 1])


def test_ncc_loss_identical_sources():
    ref = np.random.default_rng(7).uniform(size=(1, 9))
    assert l_ncc(ref, np.repeat(ref[:, None], 8, 1)) == pytest.approx(0, abs=1e-12)


def test_ncc_top3_ignores_occluded():
    ref = np.random.default_rng(8).uniform(size=(1, 9))
    srcs = np.concatenate([np.repeat(ref[:, None], 3, 1), np.repeat(-ref[:, None], 5, 1)], 1)
    assert l_ncc(ref, srcs) == pytest.approx(0, abs=1e-12)


def test_ncc_loss_brute_force():
    rng = np.random.default_rng(9)
    ref = rng.uniform(size=(20, 9))
    srcs = rng.uniform(size=(20, 8, 9))
    scores = np.array([[np.corrcoef(ref[p], srcs[p, s])[0, 1] for s in range(8)] for p in range(20)])
    ref_loss = np.mean([np.mean(1 - np.sort(scores[p])[::-1][:3]) for p in range(20)])
    assert l_ncc(ref, srcs) == pytest.approx(ref_loss, rel=1e-10)


def test_ncc_graceful_degradation():
    scores = np.array([[0.9, 0.5, 0.1], [0.2, 0.3, 0.4]])
    ok = np.array([[True, False, False], [False, False, False]])
    loss, used = ncc_loss_per_patch(scores, ok)
    assert list(used) == [1, 0]
    assert loss[0] == pytest.approx(0.1) and loss[1] == 0


def test_select_top_ties_by_index():
    sel = select_top(np.array([[0.5, 0.5, 0.5, 0.5]]), np.ones((1, 4), bool), 3)
    assert list(sel[0]) == [True, True, True, False]


def test_ncc_gradient_matches_fd():
    rng = np.random.default_rng(10)
    a0, b0 = rng.normal(size=(2, 7))
    tape = ad.Tape()
    a = tape.var(a0)
    g = ad.grad(tape, ncc(a, b0)[0], [a])[a]
    h = 1e-6
    fd = np.array([(ncc(a0 + h * e, b0)[0] - ncc(a0 - h * e, b0)[0]) / (2 * h) for e in np.eye(7)])
    assert np.allclose(g, fd, atol=1e-8)


def test_pixel_photo_picks_closest_sources():
    ref = np.zeros((1, 2))
    srcs = np.array([[[0.1, 0.1], [0.2, 0.2], [0.3, 0.3], [0.9, 0.9]]])
    loss, n = pixel_photo_per_patch(ref, srcs, np.ones((1, 4, 2), bool))
    assert loss[0] == pytest.approx(0.2) and n[0] == 2


# ----------------------------------------------------------------------------
# plane fitting


def test_plane_from_cue_z2():
    assert np.allclose(plane_from_cue(np.array([0.3, -1, 2.0]), np.array([0, 0, 1.0])), [0, 0, 1, -2])


def test_plane_residual_at_generating_point():
    rng = np.random.default_rng(11)
    pts = rng.normal(size=(100, 3)) * 5
    planes = plane_from_cue(pts, rng.normal(size=(100, 3)))
    assert np.max(np.abs(np.sum(planes[:, :3] * pts, 1) + planes[:, 3])) <= 1e-10
    assert np.allclose(np.linalg.norm(planes[:, :3], axis=1), 1)


def test_fit_plane_from_view():
    n = 8
    cam = Camera(10.0, 10.0, 4.0, 4.0, np.eye(3), np.zeros(3), n, n)
    normal = np.zeros((n, n, 3))
    normal[..., 2] = 1.0
    view = View(cam, np.zeros((n, n, 3)), np.full((n, n), 2.0), normal)
    p = fit_plane(view, (4.0, 4.0))
    assert np.allclose(p.as_array(), [0, 0, 1, -2])
    assert p.residual(np.array([5.0, 5.0, 2.0])) == 0
    view.depth[1, 1] = 0
    assert fit_plane(view, (1.0, 1.0)) is None


def test_fit_values():
    plane = np.array([0, 0, 1.0, -2.0])
    on = np.array([[1.0, 2.0, 2.0], [-1.0, 0.5, 2.0]])
    assert l_fit(on, plane) == 0
    assert l_fit(np.array([[0, 0, 2.1]]), plane, w=[1.0], eta=[1.0]) == pytest.approx(0.01)


def test_confidence():
    assert confidence(np.array([1.0, 0, 0]), np.array([0, 0, 1.0])) == 0
    assert confidence(np.array([0, 0, 3.0]), np.array([0, 0, 1.0])) == pytest.approx(1)
    assert confidence(np.array([0, 0, -1.0]), np.array([0, 0, 1.0])) == 0
    eta = confidence(np.array([1.0, 0, 0]), np.array([0, 0, 1.0]))
    assert l_fit(np.array([[0, 0, 5.0]]), np.array([0, 0, 1.0, 0]), eta=[eta]) == 0


# ----------------------------------------------------------------------------
# objective


def test_total_loss_values():
    w = LossWeights()
    zeros = {k: 0.0 for k in TERMS}
    assert float(total_loss(zeros, w, 500)[0]) == 0
    assert float(total_loss({"rgb": 1.0}, w)[0]) == 1
    total, breakdown = total_loss({"dc": 0.2}, w)
    assert float(total) == pytest.approx(0.1)
    assert breakdown["dc"] == 0.2 and breakdown["rgb"] == 0


def test_default_weights():
    w = LossWeights()
    assert (w.lambda1, w.lambda2, w.lambda3, w.lambda4, w.lambda5, w.lambda6) == (0.1, 0.05, 0.05, 0.5, 0.1, 0.5)


def test_ncc_anneal_monotone():
    w = LossWeights()
    e = np.linspace(0, 400, 401)
    lam = np.array([w.ncc_weight(x) for x in e])
    assert np.all(lam[e < 100] == 0) and np.all(np.diff(lam) >= 0) and lam[-1] == pytest.approx(0.1)


def test_total_loss_aborts_on_nan():
    with pytest.raises(NumericalAbort, match="fit"):
        total_loss({"rgb": 0.1, "fit": float("nan")}, LossWeights())


def test_total_loss_unknown_term():
    with pytest.raises(KeyError):
        total_loss({"bogus": 1.0}, LossWeights())


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda4=-1)


def test_surface_mult_scales_surface_terms_only():
    c = LossWeights(surface_mult=10).coefficients(300)
    assert c["dc"] == 5 and c["fit"] == 5 and c["ncc"] == pytest.approx(1.0) and c["depth"] == 0.1
