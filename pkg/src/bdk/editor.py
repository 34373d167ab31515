"""Boundary-guided editing along a mixing trajectory.

An edit moves the latent at the mixing step ``t_m`` once, along the unit
normal of a fitted boundary, and then lets the stochastic sampler finish the
image. In ``set_distance`` mode the moved latent sits exactly at signed
distance ``zeta``; in ``additive`` mode it is pushed by ``zeta`` along the normal.
Bottleneck (h) boundaries act by rewriting the network's bottleneck activation
for the first ``h_steps`` denoising steps below ``t_m`` instead.

Conditional edits start from a real image (deterministic inversion to ``t_m``),
unconditional ones from a standard-normal draw at ``T`` (deterministic
denoising down to ``t_m``). Stochastic tails use per-sample streams derived
from ``seed`` so every row of a batch is reproducible on its own.

The tail's stochasticity is ``tail_eta`` (DDIM ``eta``), 0.1 by default. On
the 16x16 sprites the mixing step sits where a single noisy latent no longer
pins down small attributes, so a full ``eta = 1`` tail redraws them about a
third of the time even without an edit; a light tail keeps the image and
still leaves some noise in the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bdk import rng as rngmod
from bdk.boundary import EPSILON, H, Boundary, MultiBoundary, signed_distance
from bdk.errors import DimensionError, ValidationError
from bdk.geometry import nearest_neighbor_rmse
from bdk.noise_model import NoisePredictor
from bdk.schedule import INVERT, NoiseSchedule, StepPlan, make_step_plan
from bdk.synth_data import attribute_oracle, attribute_score
from bdk.trajectory import (
    DETERMINISTIC,
    MIXED,
    LatentState,
    Trajectory,
    ddim_invert,
    run_trajectory,
    sample_latents,
)

SET_DISTANCE, ADDITIVE = "set_distance", "additive"
EDIT_TAIL_ETA = 0.1
EDIT_MODES = (SET_DISTANCE, ADDITIVE)


def edit_latent(x, boundary: Boundary, zeta, mode: str = SET_DISTANCE) -> np.ndarray:
    """Move ``x`` along ``boundary.normal``; ``zeta`` may be a scalar or one value per row."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != boundary.dim:
        raise DimensionError(f"latent dimension {x.shape[-1]} != boundary dimension {boundary.dim}")
    zeta = np.asarray(zeta, dtype=np.float64)
    if not np.all(np.isfinite(zeta)):
        raise ValidationError("zeta must be finite")
    if mode == SET_DISTANCE:
        step = zeta - signed_distance(boundary, x)
    elif mode == ADDITIVE:
        step = np.broadcast_to(zeta, x.shape[:-1])
    else:
        raise ValidationError(f"unknown edit mode {mode!r}")
    return x + np.asarray(step)[..., None] * boundary.normal


@dataclass
class EditSpec:
    """Boundaries to apply at ``t_m`` with their strengths, in application order.

    ``h_steps`` is 1 for a single injected step or ``K`` for injection over the
    first ``K`` denoising steps below ``t_m``.
    """

    boundaries: list[Boundary]
    zetas: list
    mode: str = SET_DISTANCE
    h_steps: int = 1

    def __post_init__(self):
        if not self.boundaries:
            raise ValidationError("an edit needs at least one boundary")
        if len(self.zetas) != len(self.boundaries):
            raise ValidationError(f"{len(self.zetas)} strengths for {len(self.boundaries)} boundaries")
        for z in self.zetas:
            if not np.all(np.isfinite(np.asarray(z, dtype=np.float64))):
                raise ValidationError("zeta must be finite")
        if self.mode not in EDIT_MODES:
            raise ValidationError(f"unknown edit mode {self.mode!r}")
        if self.h_steps < 1:
            raise ValidationError("h_steps must be at least 1")

    def check(self, t_m: int, predictor: NoisePredictor) -> None:
        for b in self.boundaries:
            if b.t_m != t_m:
                raise ValidationError(f"boundary for {b.attribute!r} was fitted at t_m={b.t_m}, edit runs at {t_m}")
            want = predictor.d if b.space == EPSILON else predictor.h_dim
            if b.dim != want:
                raise ValidationError(f"{b.space}-space boundary has dimension {b.dim}, expected {want}")

    def _apply(self, space: str):
        pairs = [(b, z) for b, z in zip(self.boundaries, self.zetas) if b.space == space]
        if not pairs:
            return None

        def fn(v):
            for b, z in pairs:
                v = edit_latent(v, b, z, self.mode)
            return v

        return fn

    def epsilon_edit(self):
        return self._apply(EPSILON)

    def h_edit(self):
        return self._apply(H)


@dataclass
class EditResult:
    image: np.ndarray
    trajectory: Trajectory
    latent: np.ndarray  # x_{t_m} before the edit
    distances: dict = field(default_factory=dict)  # attribute -> signed distance before the edit


def _tail_streams(seed: int, x) -> list:
    return rngmod.sample_streams(seed, len(np.atleast_2d(x)), "tail")


def invert_to(predictor, schedule, x0, t_m: int, n_steps: int | None = None):
    plan = make_step_plan(schedule, n_steps or t_m, t_m, INVERT)
    return ddim_invert(predictor, schedule, x0, plan)


def _tail_schedule(schedule: NoiseSchedule, tail_eta: float | None) -> NoiseSchedule:
    return schedule if tail_eta is None else schedule.with_eta(tail_eta)


def _mixed_from(predictor, schedule, start: LatentState, plan: StepPlan, spec: EditSpec | None, t_m, seed, clip):
    return run_trajectory(
        predictor,
        schedule,
        start,
        plan,
        MIXED,
        rng=_tail_streams(seed, start.x),
        t_m=t_m,
        edit=spec.epsilon_edit() if spec else None,
        h_edit=spec.h_edit() if spec else None,
        h_steps=spec.h_steps if spec else 1,
        clip_denoised=clip,
    )


def _distances(spec: EditSpec | None, x, predictor, t_m):
    if spec is None:
        return {}
    out = {}
    h = None
    for b in spec.boundaries:
        if b.space == H:
            if h is None:
                _, h, _ = predictor.forward(x, t_m)
            out[b.attribute] = signed_distance(b, h)
        else:
            out[b.attribute] = signed_distance(b, x)
    return out


def boundary_diffusion_conditional(
    predictor: NoisePredictor,
    schedule: NoiseSchedule,
    x0,
    spec: EditSpec | None,
    t_m: int,
    steps_inv: int | None = None,
    steps_gen: int | None = None,
    seed: int = 0,
    clip_denoised: bool = True,
    tail_eta: float | None = EDIT_TAIL_ETA,
) -> EditResult:
    """Invert ``x0`` to ``t_m``, apply ``spec`` once there, then denoise stochastically.

    ``spec=None`` runs the same pipeline without an edit. Step counts default
    to unit stride; ``tail_eta=None`` keeps ``schedule.eta`` for the tail.
    """
    if not predictor.trained:
        raise ValidationError("editing needs a trained model")
    if spec is not None:
        spec.check(t_m, predictor)
    latent = invert_to(predictor, schedule, x0, t_m, steps_inv)
    plan = make_step_plan(schedule, steps_gen or t_m, t_m)
    traj = _mixed_from(predictor, _tail_schedule(schedule, tail_eta), latent, plan, spec, t_m, seed, clip_denoised)
    return EditResult(traj.final.x, traj, latent.x, _distances(spec, latent.x, predictor, t_m))


def boundary_diffusion_unconditional(
    predictor: NoisePredictor,
    schedule: NoiseSchedule,
    spec: EditSpec | None,
    t_m: int,
    n: int | None = None,
    steps_gen: int | None = None,
    seed: int = 0,
    clip_denoised: bool = True,
    tail_eta: float | None = EDIT_TAIL_ETA,
) -> EditResult:
    """Sample ``x_T`` from ``N(0, I)``, denoise deterministically to ``t_m``, edit, then stochastically to 0.

    ``n=None`` yields a single image; otherwise a batch of ``n`` with per-sample streams.
    """
    if not predictor.trained:
        raise ValidationError("editing needs a trained model")
    if spec is not None:
        spec.check(t_m, predictor)
    plan = make_step_plan(schedule, steps_gen or schedule.T)
    if t_m not in plan.taus:
        raise ValidationError(f"t_m={t_m} is not a step of the {plan.n_steps}-step plan")
    streams = rngmod.sample_streams(seed, 1 if n is None else n, "start")
    start = sample_latents(predictor.d, schedule.T, streams if n is not None else streams[0], n)
    traj = _mixed_from(predictor, _tail_schedule(schedule, tail_eta), start, plan, spec, t_m, seed, clip_denoised)
    latent = traj.state_at(t_m).x
    return EditResult(traj.final.x, traj, latent, _distances(spec, latent, predictor, t_m))


def deterministic_prefix(
    predictor: NoisePredictor, schedule: NoiseSchedule, start: LatentState, plan: StepPlan, t_m: int, clip_denoised=True
) -> Trajectory:
    """The pure deterministic run over ``plan`` truncated at ``t_m`` (for prefix checks)."""
    full = run_trajectory(predictor, schedule, start, plan, DETERMINISTIC, clip_denoised=clip_denoised)
    return Trajectory([s for s in full.states if s.t >= t_m], DETERMINISTIC)


@dataclass
class SweepResult:
    zetas: np.ndarray
    images: np.ndarray  # (K, d) or (K, n, d)
    scores: np.ndarray  # oracle statistic per grid point
    oracle: np.ndarray
    nn_scores: np.ndarray
    degraded: np.ndarray  # bool per grid point

    def monotone(self, tol: float = 0.0) -> bool:
        """Attribute statistic nondecreasing along the grid (per image when batched)."""
        s = self.scores if self.scores.ndim > 1 else self.scores[:, None]
        return bool(np.all(np.diff(s, axis=0) >= -tol))


def strength_sweep(
    predictor: NoisePredictor,
    schedule: NoiseSchedule,
    x0,
    boundary: Boundary,
    zetas,
    t_m: int,
    seed: int = 0,
    reference=None,
    degradation_threshold: float | None = None,
    side: int = 16,
    mode: str = SET_DISTANCE,
    clip_denoised: bool = True,
    tail_eta: float | None = EDIT_TAIL_ETA,
) -> SweepResult:
    """One conditional edit per strength in ``zetas``, all sharing the same tail streams.

    The oracle statistic of ``boundary.attribute`` is recorded for every output.
    With ``reference`` images, each output also gets a nearest-neighbour RMSE
    and is flagged as degraded when that exceeds ``degradation_threshold``.
    """
    zetas = np.asarray(zetas, dtype=np.float64)
    if zetas.ndim != 1 or zetas.size == 0:
        raise ValidationError("the strength grid must be a non-empty 1-d sequence")
    if not predictor.trained:
        raise ValidationError("editing needs a trained model")
    if boundary.t_m != t_m:
        raise ValidationError(f"boundary was fitted at t_m={boundary.t_m}, sweep runs at {t_m}")
    latent = invert_to(predictor, schedule, x0, t_m)
    plan = make_step_plan(schedule, t_m, t_m)
    tail = _tail_schedule(schedule, tail_eta)
    images = []
    for z in zetas:
        spec = EditSpec([boundary], [z], mode)
        traj = _mixed_from(predictor, tail, latent, plan, spec, t_m, seed, clip_denoised)
        images.append(traj.final.x)
    images = np.stack(images)
    scores = attribute_score(images, boundary.attribute, side)
    oracle = attribute_oracle(images, boundary.attribute, side)
    if reference is not None:
        nn = np.stack([nearest_neighbor_rmse(im, reference) for im in images])
        if nn.shape[-1] == 1:
            nn = nn[..., 0]
    else:
        nn = np.full(scores.shape, np.nan)
    degraded = nn > degradation_threshold if degradation_threshold is not None else np.zeros(nn.shape, bool)
    return SweepResult(zetas, images, scores, oracle, nn, degraded)


@dataclass
class MultiEditResult:
    image: np.ndarray
    trajectory: Trajectory
    final_distances: np.ndarray  # signed distances of the edited latent, one column per boundary
    residuals: np.ndarray  # final_distances - zetas


def multi_attribute_edit(
    predictor: NoisePredictor,
    schedule: NoiseSchedule,
    x0,
    multi: MultiBoundary,
    zetas,
    t_m: int,
    seed: int = 0,
    clip_denoised: bool = True,
    tail_eta: float | None = EDIT_TAIL_ETA,
) -> MultiEditResult:
    """Sequential ``set_distance`` edits, in the stack's order, at the single step ``t_m``.

    With non-orthogonal normals a later edit moves the earlier distances again;
    only the last one is guaranteed to hit its target, and the residuals say by
    how much the others miss.
    """
    zetas = list(zetas)
    if len(zetas) != len(multi):
        raise ValidationError(f"{len(zetas)} strengths for {len(multi)} boundaries")
    if multi.space != EPSILON:
        raise ValidationError("multi-attribute edits act on epsilon-space latents")
    spec = EditSpec([multi.boundary(i) for i in range(len(multi))], zetas, SET_DISTANCE)
    res = boundary_diffusion_conditional(
        predictor, schedule, x0, spec, t_m, seed=seed, clip_denoised=clip_denoised, tail_eta=tail_eta
    )
    edited = res.trajectory.edits[0].after
    final = multi.signed_distances(edited)
    return MultiEditResult(res.image, res.trajectory, final, final - np.asarray(zetas, dtype=np.float64).T)
