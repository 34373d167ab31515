import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bdk import rng as rngmod
from bdk.errors import DimensionError, ValidationError
from bdk.geometry import (
    RadiusScan,
    distance_effect_experiment,
    estimate_radius,
    gaussian_radius_draws,
    hemisphere_slab_fraction,
    nearest_neighbor_rmse,
    radius_scan,
    random_projection_check,
    slerp,
    uniform_in_ball,
    unit_sphere_volume_area,
)
from bdk.mixing import inverted_starts
from bdk.schedule import make_step_plan
from bdk.synth_data import SpriteConfig, generate_sprite_dataset
from bdk.trajectory import DETERMINISTIC, MIXED, STOCHASTIC, LatentState, sample_latents


@pytest.mark.parametrize("d", [16, 1024, 12288])
def test_radius_of_scaled_gaussian(d, gen):
    sigma = 1.7
    est = estimate_radius(sigma * gen.standard_normal((400, d)))
    assert abs(est.r - sigma * np.sqrt(d)) <= 3 * est.std_error
    assert est.n_samples == 400 and est.d == d


def test_chunked_estimate_equals_array(gen):
    x = gen.standard_normal((50, 30))
    a = estimate_radius(x)
    b = estimate_radius(iter([x[:20], x[20:45], x[45:]]))
    assert a.r == pytest.approx(b.r, rel=1e-12)
    assert a.std_error == pytest.approx(b.std_error, rel=1e-9)


def test_radius_edge_cases(gen):
    assert estimate_radius(gen.standard_normal((1, 10))).std_error == float("inf")
    with pytest.raises(ValidationError):
        estimate_radius(np.zeros((0, 4)))
    with pytest.raises(DimensionError):
        estimate_radius(iter([np.zeros((2, 3)), np.zeros((2, 4))]))


def test_annulus_concentration(gen):
    d = 12288
    x = gen.standard_normal((500, d))
    norms = np.linalg.norm(x, axis=1)
    assert np.mean(np.abs(norms - np.sqrt(d)) <= 5) >= 0.99
    # relative width shrinks with d
    small = np.linalg.norm(gen.standard_normal((500, 64)), axis=1)
    assert norms.std() / norms.mean() < small.std() / small.mean()


def test_streamed_gaussian_draws():
    est = gaussian_radius_draws(4096, 300, rngmod.stream(1, "probe"), chunk=37)
    assert abs(est.r - 64.0) <= 3 * est.std_error
    same = gaussian_radius_draws(4096, 300, rngmod.stream(1, "probe"), chunk=300)
    assert same.r == pytest.approx(est.r, rel=1e-12)


def test_radius_standard_error_is_calibrated():
    z = []
    for seed in range(300):
        est = gaussian_radius_draws(64, 50, rngmod.stream(seed, "probe"))
        z.append((est.r - 8.0) / est.std_error)
    z = np.array(z)
    assert abs(z.mean()) < 0.25
    assert 0.85 < z.std() < 1.15


def test_scan_delta_convention():
    scan = RadiusScan([30, 20, 10, 0], [10.0, 9.5, 7.0, 3.0], [0.1] * 4, 5)
    np.testing.assert_array_equal(scan.delta[:-1], [0.5, 2.5, 4.0])
    assert np.isnan(scan.delta[-1])
    rebuilt = RadiusScan.from_deltas([30, 20, 10], [0.5, 2.5, 4.0])
    np.testing.assert_allclose(rebuilt.delta[:-1], scan.delta[:-1])
    assert list(rebuilt.steps) == [30, 20, 10, 0]
    with pytest.raises(ValidationError):
        RadiusScan([0, 10], [1.0, 2.0], [0, 0], 1)
    with pytest.raises(DimensionError):
        RadiusScan([10, 0], [1.0], [0, 0], 1)


def test_scan_csv(tmp_path):
    scan = RadiusScan([20, 10, 0], [3.0, 2.0, 0.5], [0.1, 0.1, 0.1], 4)
    scan.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "step,r,delta_r,std_error"
    assert lines[1].startswith("20,3.0,1.0,")
    assert lines[-1].split(",")[2] == ""


def test_unit_ball_closed_forms():
    v2, a2 = unit_sphere_volume_area(2)
    v3, a3 = unit_sphere_volume_area(3)
    assert abs(v2 - np.pi) < 1e-12 and abs(a2 - 2 * np.pi) < 1e-12
    assert abs(v3 - 4 * np.pi / 3) < 1e-12 and abs(a3 - 4 * np.pi) < 1e-12
    assert unit_sphere_volume_area(1) == pytest.approx((2.0, 2.0))
    with pytest.raises(ValidationError):
        unit_sphere_volume_area(0)


def test_unit_ball_volume_peaks_then_vanishes():
    v = np.array([unit_sphere_volume_area(d)[0] for d in range(1, 301)])
    assert int(np.argmax(v)) + 1 == 5
    assert np.all(np.diff(v[19:]) < 0)
    assert v[-1] < 1e-100


def test_uniform_in_ball(gen):
    d = 10
    x = uniform_in_ball(d, 20000, gen)
    r = np.linalg.norm(x, axis=1)
    assert r.max() <= 1.0
    # E|x| = d / (d + 1) for the uniform ball
    assert r.mean() == pytest.approx(d / (d + 1), abs=3 * r.std() / np.sqrt(len(r)) * 2)


@pytest.mark.parametrize("c", [1.0, 2.0, 4.0])
def test_hemisphere_slab_respects_bound(c):
    res = hemisphere_slab_fraction(50, c, 100_000, rngmod.stream(1, "probe", int(c)))
    assert res.within_bound
    assert 0 <= res.fraction <= 1 and res.n == 100_000


def test_hemisphere_errors(gen):
    for args in ((1, 2.0, 10), (10, 0.0, 10), (10, 1.0, 0)):
        with pytest.raises(ValidationError):
            hemisphere_slab_fraction(*args, gen)


@pytest.mark.parametrize("method", ["coordinates", "qr"])
def test_random_projection(method):
    res = random_projection_check(200, 100, 300, rngmod.stream(0, "probe"), epsilon=0.9, method=method)
    assert res.failure_rate <= res.bound
    assert res.mean_abs_dev < 0.1 * 100 / 200


def test_projection_methods_agree_in_law():
    a = random_projection_check(60, 6, 3000, rngmod.stream(2, "probe"), method="coordinates")
    b = random_projection_check(60, 6, 3000, rngmod.stream(3, "probe"), method="qr")
    assert a.mean_abs_dev == pytest.approx(b.mean_abs_dev, rel=0.1)


def test_projection_errors(gen):
    with pytest.raises(ValidationError):
        random_projection_check(5, 6, 10, gen)
    with pytest.raises(ValidationError):
        random_projection_check(5, 2, 10, gen, method="svd")


def test_slerp_endpoints_and_errors(gen):
    a, b = gen.standard_normal((4, 8)), gen.standard_normal((4, 8))
    np.testing.assert_array_equal(slerp(a, b, 0.0), a)
    np.testing.assert_array_equal(slerp(a, b, 1.0), b)
    with pytest.raises(ValidationError):
        slerp(a, -a, 0.5)
    with pytest.raises(ValidationError):
        slerp(np.zeros(8), b[0], 0.5)
    with pytest.raises(ValidationError):
        slerp(a, b, 1.5)
    with pytest.raises(DimensionError):
        slerp(a, b[:, :4], 0.5)


def test_slerp_stays_on_the_great_circle(gen):
    a, b = gen.standard_normal(16), gen.standard_normal(16)
    a /= np.linalg.norm(a)
    b /= np.linalg.norm(b)
    theta = np.arccos(a @ b)
    mid = slerp(a, b, 0.5)
    assert np.linalg.norm(mid) == pytest.approx(1.0)
    assert np.arccos(np.clip(mid @ a, -1, 1)) == pytest.approx(theta / 2)


vectors = arrays(np.float64, 6, elements=st.floats(-10, 10, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(vectors, vectors, st.floats(0, 1))
def test_slerp_norm_between_endpoint_norms(a, b, lam):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if min(na, nb) < 1e-3 or a @ b / (na * nb) < -1 + 1e-6:
        return
    n = np.linalg.norm(slerp(a, b, lam))
    assert min(na, nb) - 1e-9 <= n <= max(na, nb) + 1e-9


def test_nearest_neighbor_rmse(gen):
    ref = gen.standard_normal((20, 10))
    np.testing.assert_allclose(nearest_neighbor_rmse(ref[:5], ref), 0.0, atol=1e-7)
    shifted = ref[:3] + 0.5
    assert np.all(nearest_neighbor_rmse(shifted, ref) <= 0.5 + 1e-12)


def test_radius_scan_validation(tiny, gen):
    model, s = tiny
    start = LatentState(gen.standard_normal((4, 16)), s.T)
    with pytest.raises(ValidationError):
        radius_scan(model, s, LatentState(start.x, 20), DETERMINISTIC, 10)
    with pytest.raises(ValidationError):
        radius_scan(model, s, start, MIXED, 10)
    with pytest.raises(ValidationError):
        radius_scan(model, s, start, DETERMINISTIC, 7, plan=make_step_plan(s, 8))


def test_radius_scan_on_fine_plan_records_every_stride(tiny, gen):
    model, s = tiny
    start = LatentState(gen.standard_normal((6, 16)), s.T)
    coarse = radius_scan(model, s, start, DETERMINISTIC, 10, clip_denoised=True)
    fine = radius_scan(model, s, start, DETERMINISTIC, 10, plan=make_step_plan(s, s.T), clip_denoised=True)
    assert list(coarse.steps) == list(fine.steps) == [40, 30, 20, 10, 0]
    assert coarse.r[0] == fine.r[0]


def test_sampled_scan_starts_on_the_gaussian_shell(toy):
    model, s = toy
    n = 200
    start = sample_latents(model.d, s.T, rngmod.sample_streams(0, n, "start"), n)
    scan = radius_scan(model, s, start, STOCHASTIC, 10, rng=rngmod.sample_streams(0, n, "tail"), clip_denoised=True)
    assert abs(scan.r[0] - 16.0) <= 3 * scan.std_error[0]
    assert scan.r[-1] < scan.r[0]


def test_distance_effect_on_the_toy_model(toy, sprites):
    model, s = toy
    ref = generate_sprite_dataset(SpriteConfig(seed=0), 2000).images
    inv = inverted_starts(model, s, sprites.images[:40]).x
    samp = rngmod.stream(0, "pairs").standard_normal((40, model.d))
    pairs = {"sampled": (samp[:20], samp[20:]), "inverted": (inv[:20], inv[20:])}
    plan = make_step_plan(s, s.T)
    rep = distance_effect_experiment(model, s, pairs, ref, plan, lambdas=(0.0, 0.5, 1.0))
    inv_curve = rep.curves["inverted"]
    # inverted endpoints reconstruct; their interpolation leaves the data
    assert max(inv_curve[0], inv_curve[2]) < 0.06
    assert rep.mid_score("inverted") > 5 * max(inv_curve[0], inv_curve[2])
    clipped = distance_effect_experiment(model, s, pairs, ref, plan, lambdas=(0.0, 0.5, 1.0), clip_denoised=True)
    samp_curve = clipped.curves["sampled"]
    assert samp_curve.max() / samp_curve.min() < 1.2


def test_distance_effect_needs_training(tiny, gen):
    model, s = tiny
    x = gen.standard_normal((2, 16))
    with pytest.raises(ValidationError):
        distance_effect_experiment(model, s, {"a": (x, x)}, x, make_step_plan(s, 4))
