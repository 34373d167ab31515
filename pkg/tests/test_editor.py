import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bdk.boundary import EPSILON, H, Boundary, assemble_latent_dataset, fit_boundary, signed_distance, stack_boundaries
from bdk.editor import (
    ADDITIVE,
    EDIT_TAIL_ETA,
    SET_DISTANCE,
    EditSpec,
    boundary_diffusion_conditional,
    boundary_diffusion_unconditional,
    deterministic_prefix,
    edit_latent,
    invert_to,
    multi_attribute_edit,
    strength_sweep,
)
from bdk import rng as rngmod
from bdk.errors import DimensionError, ValidationError
from bdk.schedule import make_step_plan
from bdk.synth_data import attribute_oracle
from bdk.trajectory import sample_latents

T_M = 50


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


coords = st.lists(st.floats(-100, 100, allow_nan=False), min_size=4, max_size=4)


@settings(max_examples=100, deadline=None)
@given(coords.filter(lambda v: np.linalg.norm(v) > 1e-3), coords, st.floats(-50, 50), st.floats(-50, 50))
def test_set_distance_lands_exactly(normal, x, bias, zeta):
    b = Boundary(unit(normal), bias, "a", EPSILON, 1)
    y = edit_latent(np.array(x), b, zeta)
    assert signed_distance(b, y) == pytest.approx(zeta, abs=1e-9)
    # the move is along the normal only
    step = y - np.array(x)
    np.testing.assert_allclose(step - (step @ b.normal) * b.normal, 0.0, atol=1e-9)


def test_additive_and_per_row_zeta(gen):
    b = Boundary(unit([1.0, 2.0, 2.0]), 0.3, "a", EPSILON, 1)
    x = gen.standard_normal((3, 3))
    before = signed_distance(b, x)
    np.testing.assert_allclose(signed_distance(b, edit_latent(x, b, 2.0, ADDITIVE)), before + 2.0)
    z = np.array([-1.0, 0.0, 4.0])
    np.testing.assert_allclose(signed_distance(b, edit_latent(x, b, z)), z)
    np.testing.assert_allclose(signed_distance(b, edit_latent(x, b, z, ADDITIVE)), before + z)


def test_edit_latent_errors(gen):
    b = Boundary(unit([1.0, 0.0]), 0.0, "a", EPSILON, 1)
    with pytest.raises(DimensionError):
        edit_latent(np.zeros(3), b, 1.0)
    with pytest.raises(ValidationError):
        edit_latent(np.zeros(2), b, np.nan)
    with pytest.raises(ValidationError):
        edit_latent(np.zeros(2), b, 1.0, "push")


def test_edit_spec_validation():
    b = Boundary(unit([1.0, 0.0]), 0.0, "a", EPSILON, 1)
    with pytest.raises(ValidationError):
        EditSpec([], [])
    with pytest.raises(ValidationError):
        EditSpec([b], [1.0, 2.0])
    with pytest.raises(ValidationError):
        EditSpec([b], [np.inf])
    with pytest.raises(ValidationError):
        EditSpec([b], [1.0], mode="push")
    with pytest.raises(ValidationError):
        EditSpec([b], [1.0], h_steps=0)
    spec = EditSpec([b], [1.0])
    assert spec.h_edit() is None and spec.epsilon_edit() is not None


@pytest.fixture(scope="module")
def boundaries(toy, sprites):
    model, s = toy
    labels = {k: v[:100] for k, v in sprites.labels.items()}
    out = {}
    for space in (EPSILON, H):
        ds = assemble_latent_dataset(model, s, sprites.images[:100], labels, T_M, space)
        out[space] = {a: fit_boundary(ds, a) for a in ("marker", "stripes")}
    return out


def test_spec_check_catches_step_and_dimension(toy, boundaries):
    model, _ = toy
    b = boundaries[EPSILON]["marker"]
    EditSpec([b], [1.0]).check(T_M, model)
    with pytest.raises(ValidationError):
        EditSpec([b], [1.0]).check(40, model)
    small = Boundary(unit(np.ones(model.h_dim)), 0.0, "x", EPSILON, T_M)
    with pytest.raises(ValidationError):
        EditSpec([small], [1.0]).check(T_M, model)


def test_conditional_edit_fires_once_at_t_m(toy, sprites, boundaries):
    model, s = toy
    x0 = sprites.images[100:104]
    b = boundaries[EPSILON]["marker"]
    res = boundary_diffusion_conditional(model, s, x0, EditSpec([b], [2.5]), T_M, seed=1)
    traj = res.trajectory
    assert [e.t for e in traj.edits] == [T_M]
    np.testing.assert_array_equal(traj.edits[0].before, res.latent)
    np.testing.assert_allclose(signed_distance(b, traj.edits[0].after), 2.5, atol=1e-10)
    np.testing.assert_array_equal(res.latent, invert_to(model, s, x0, T_M).x)
    np.testing.assert_allclose(res.distances["marker"], signed_distance(b, res.latent))
    assert traj.steps[0] == T_M and traj.steps[-1] == 0


def test_unconditional_prefix_is_deterministic_bitwise(toy, boundaries):
    model, s = toy
    b = boundaries[EPSILON]["marker"]
    res = boundary_diffusion_unconditional(model, s, EditSpec([b], [-2.0]), T_M, n=3, seed=4)
    plan = make_step_plan(s, s.T)
    start = sample_latents(model.d, s.T, rngmod.sample_streams(4, 3, "start"), 3)
    prefix = deterministic_prefix(model, s, start, plan, T_M)
    assert prefix.steps == [t for t in res.trajectory.steps if t >= T_M]
    for p in prefix.states:
        np.testing.assert_array_equal(p.x, res.trajectory.state_at(p.t).x)
    assert len(res.trajectory.edits) == 1


def test_unconditional_rejects_off_plan_t_m(toy, boundaries):
    model, s = toy
    spec = EditSpec([Boundary(boundaries[EPSILON]["marker"].normal, 0.0, "m", EPSILON, 55)], [0.0])
    with pytest.raises(ValidationError):
        boundary_diffusion_unconditional(model, s, spec, 55, steps_gen=10)


def test_editing_needs_a_trained_model(tiny, gen):
    model, s = tiny
    with pytest.raises(ValidationError):
        boundary_diffusion_conditional(model, s, gen.uniform(-1, 1, 16), None, 10)


def test_edit_is_reproducible_per_row(toy, sprites, boundaries):
    model, s = toy
    x0 = sprites.images[100:103]
    spec = EditSpec([boundaries[EPSILON]["marker"]], [np.array([1.0, -1.0, 2.0])])
    batch = boundary_diffusion_conditional(model, s, x0, spec, T_M, seed=7).image
    again = boundary_diffusion_conditional(model, s, x0, spec, T_M, seed=7).image
    np.testing.assert_array_equal(batch, again)
    other = boundary_diffusion_conditional(model, s, x0, spec, T_M, seed=8).image
    assert not np.array_equal(batch, other)


def test_tail_eta_controls_the_tail(toy, sprites):
    model, s = toy
    x0 = sprites.images[100:104]
    light = boundary_diffusion_conditional(model, s, x0, None, T_M, seed=2)
    frozen = boundary_diffusion_conditional(model, s, x0, None, T_M, seed=2, tail_eta=0.0)
    full = boundary_diffusion_conditional(model, s, x0, None, T_M, seed=2, tail_eta=1.0)
    keep = boundary_diffusion_conditional(model, s.with_eta(1.0), x0, None, T_M, seed=2, tail_eta=None)
    np.testing.assert_array_equal(full.image, keep.image)
    assert EDIT_TAIL_ETA == 0.1
    gap = lambda r: np.abs(r.image - frozen.image).mean()
    assert 0 < gap(light) < gap(full)


def test_marker_edit_flips_the_attribute(toy, sprites, boundaries):
    model, s = toy
    x0 = sprites.images[100:140]
    y = sprites.labels["marker"][100:140]
    b = boundaries[EPSILON]["marker"]
    sd = signed_distance(b, invert_to(model, s, x0, T_M).x)
    spread = abs(sd[y == 1].mean() - sd[y == 0].mean())
    z = -np.sign(sd) * 3 * spread / 2
    out = boundary_diffusion_conditional(model, s, x0, EditSpec([b], [z]), T_M, seed=1).image
    before, after = attribute_oracle(x0, "marker"), attribute_oracle(out, "marker")
    flipped = (after != before) & (after != -1)
    assert flipped.mean() >= 0.7


def test_h_space_edit_rewrites_bottleneck(toy, sprites, boundaries):
    model, s = toy
    x0 = sprites.images[100:102]
    b = boundaries[H]["marker"]
    base = boundary_diffusion_conditional(model, s, x0, None, T_M, seed=3)
    res = boundary_diffusion_conditional(model, s, x0, EditSpec([b], [3.0], h_steps=3), T_M, seed=3)
    traj = res.trajectory
    assert traj.edits == []
    assert traj.h_injections == [T_M, T_M - 1, T_M - 2]
    np.testing.assert_array_equal(traj.state_at(T_M).x, base.trajectory.state_at(T_M).x)
    assert not np.array_equal(res.image, base.image)
    np.testing.assert_allclose(res.distances["marker"], signed_distance(b, model.forward(res.latent, T_M)[1]))


def test_multi_attribute_residuals(toy, sprites, boundaries):
    model, s = toy
    multi = stack_boundaries([boundaries[EPSILON]["marker"], boundaries[EPSILON]["stripes"]])
    x0 = sprites.images[100:103]
    res = multi_attribute_edit(model, s, x0, multi, [1.5, -1.0], T_M, seed=0)
    assert res.final_distances.shape == (3, 2)
    np.testing.assert_allclose(res.residuals[:, 1], 0.0, atol=1e-9)
    cos = float(multi.cosine_similarities()[0, 1])
    # the second move shifts the first distance by cos times its length
    b0, b1 = multi.boundary(0), multi.boundary(1)
    first = edit_latent(res.trajectory.edits[0].before, b0, 1.5)
    second_move = -1.0 - signed_distance(b1, first)
    np.testing.assert_allclose(res.residuals[:, 0], cos * second_move, atol=1e-9)
    with pytest.raises(ValidationError):
        multi_attribute_edit(model, s, x0, multi, [1.0], T_M)


def test_strength_sweep_is_monotone_on_average(toy, sprites, boundaries):
    model, s = toy
    x0 = sprites.images[100:116]
    b = boundaries[EPSILON]["marker"]
    grid = np.linspace(-3, 3, 5)
    res = strength_sweep(model, s, x0, b, grid, T_M, seed=1, reference=sprites.images[200:400], degradation_threshold=0.5)
    assert res.images.shape == (5, 16, model.d)
    assert res.scores.shape == (5, 16) and res.nn_scores.shape == (5, 16)
    mean = res.scores.mean(axis=1)
    assert np.all(np.diff(mean) > 0)
    assert res.degraded.dtype == bool
    with pytest.raises(ValidationError):
        strength_sweep(model, s, x0, b, [], T_M)
    with pytest.raises(ValidationError):
        strength_sweep(model, s, x0, b, grid, 40)
