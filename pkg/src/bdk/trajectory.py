"""Running the chain: DDPM and DDIM denoising, DDIM inversion, mixed runs.

Latents may be a single vector ``(d,)`` or a batch ``(n, d)``. Stochastic
steps draw their noise from ``rng``: either one ``Generator`` for the whole
batch or one generator per row (see :mod:`bdk.rng`), in which case a row's
result never depends on the other rows.

Modes of :func:`run_trajectory`:

``stochastic``     every step is the DDIM update with ``sigma`` from ``schedule.eta``
``deterministic``  every step is the ``eta = 0`` DDIM update
``mixed``          deterministic while ``t > t_m``; at ``t_m`` an optional one-off
                   edit is applied to the latent, then stochastic down to 0

``sampler="ddpm"`` swaps the stochastic update for the ancestral DDPM step
(unit-stride plans only).

``clip_denoised`` clamps the implied clean-data estimate to the data range
[-1, 1] before a denoising update and recomputes the noise estimate from it.
At large ``t`` the estimate divides by ``sqrt(alpha_bar)``, so a small error in
the predicted noise becomes a huge one in the implied image; clamping keeps
deterministic runs from drifting off the data range. Inversion never clamps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from bdk.errors import DimensionError, ValidationError
from bdk.noise_model import NoisePredictor
from bdk.rng import RngLike, standard_normal
from bdk.schedule import DENOISE, INVERT, NoiseSchedule, StepPlan

SAMPLED, INVERTED, INTERMEDIATE = "sampled", "inverted", "intermediate"
STOCHASTIC, DETERMINISTIC, MIXED = "stochastic", "deterministic", "mixed"
MODES = (STOCHASTIC, DETERMINISTIC, MIXED)


@dataclass
class LatentState:
    x: np.ndarray
    t: int
    source: str = INTERMEDIATE

    def __post_init__(self):
        if self.t < 0:
            raise ValidationError("step index must be non-negative")


@dataclass
class EditEvent:
    t: int
    before: np.ndarray
    after: np.ndarray


@dataclass
class Trajectory:
    states: list[LatentState]
    mode: str
    t_m: Optional[int] = None
    edits: list[EditEvent] = field(default_factory=list)
    h_injections: list[int] = field(default_factory=list)

    @property
    def steps(self) -> list[int]:
        return [s.t for s in self.states]

    def state_at(self, t: int) -> LatentState:
        for s in self.states:
            if s.t == t:
                return s
        raise KeyError(t)

    @property
    def final(self) -> LatentState:
        return self.states[-1]


DATA_RANGE = 1.0


def _eps(predictor, x, t, h_override=None):
    # the network is trained on steps 1..T; a step from clean data uses t = 1
    t = max(int(t), 1)
    eps, _, _ = predictor.forward(x, t, h_override=h_override)
    return eps


def clip_noise_estimate(schedule: NoiseSchedule, x, eps, t: int, bound: float = DATA_RANGE):
    """Noise estimate consistent with the implied clean image clamped to ``[-bound, bound]``."""
    a = schedule.ab(t)
    x0 = np.clip((x - np.sqrt(1.0 - a) * eps) / np.sqrt(a), -bound, bound)
    return (x - np.sqrt(a) * x0) / np.sqrt(1.0 - a)


def _noise(rng, noise, shape):
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != shape:
            raise DimensionError(f"noise shape {noise.shape} != latent shape {shape}")
        return noise
    if rng is None:
        raise ValidationError("a stochastic step needs rng or explicit noise")
    if len(shape) == 1:
        if not isinstance(rng, np.random.Generator):
            rng = rng[0]
        return rng.standard_normal(shape)
    return standard_normal(rng, shape)


def ddpm_step(
    predictor: NoisePredictor,
    schedule: NoiseSchedule,
    state: LatentState,
    rng: RngLike | None = None,
    noise=None,
    h_override=None,
    clip_denoised: bool = False,
) -> LatentState:
    """Ancestral step ``t -> t-1`` with reverse variance ``beta_t``."""
    t = state.t
    if t < 1:
        raise ValidationError("cannot take a denoising step from t = 0")
    x = np.asarray(state.x, dtype=np.float64)
    beta = schedule.beta_at(t)
    eps = _eps(predictor, x, t, h_override)
    if clip_denoised:
        eps = clip_noise_estimate(schedule, x, eps, t)
    z = _noise(rng, noise, x.shape)
    x_prev = (x - beta / np.sqrt(1.0 - schedule.ab(t)) * eps) / np.sqrt(1.0 - beta) + np.sqrt(beta) * z
    return LatentState(x_prev, t - 1, INTERMEDIATE)


def ddim_update(schedule: NoiseSchedule, x, eps, t: int, t_prev: int, sigma: float = 0.0, z=None):
    """DDIM jump from ``t`` to ``t_prev`` given a noise estimate.

    ``x_prev = sqrt(a_prev) * x0_pred + sqrt(1 - a_prev - sigma^2) * eps + sigma * z``
    """
    a_t, a_prev = schedule.ab(t), schedule.ab(t_prev)
    x0_pred = (x - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
    out = np.sqrt(a_prev) * x0_pred + np.sqrt(max(1.0 - a_prev - sigma**2, 0.0)) * eps
    if sigma > 0.0:
        out = out + sigma * z
    return out


def ddim_step(
    predictor: NoisePredictor,
    schedule: NoiseSchedule,
    state: LatentState,
    t_prev: int,
    rng: RngLike | None = None,
    eta: float | None = None,
    noise=None,
    h_override=None,
    clip_denoised: bool = False,
) -> LatentState:
    """One DDIM step; ``eta`` defaults to ``schedule.eta`` and ``eta = 0`` is deterministic."""
    t = state.t
    if t_prev >= t:
        raise ValidationError(f"t_prev={t_prev} must be below t={t}")
    if t_prev < 0:
        raise ValidationError("t_prev must be non-negative")
    x = np.asarray(state.x, dtype=np.float64)
    eps = _eps(predictor, x, t, h_override)
    if clip_denoised:
        eps = clip_noise_estimate(schedule, x, eps, t)
    sigma = schedule.ddim_sigma(t, t_prev, eta)
    z = _noise(rng, noise, x.shape) if sigma > 0 else None
    return LatentState(ddim_update(schedule, x, eps, t, t_prev, sigma, z), t_prev, INTERMEDIATE)


def ddim_invert_step(predictor: NoisePredictor, schedule: NoiseSchedule, x, t: int, t_next: int):
    """Deterministic step toward noise, ``t -> t_next``, using the estimate at ``t``."""
    eps = _eps(predictor, x, t)
    a_t, a_next = schedule.ab(t), schedule.ab(t_next)
    x0_pred = (x - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
    return np.sqrt(a_next) * x0_pred + np.sqrt(1.0 - a_next) * eps


def ddim_invert(
    predictor: NoisePredictor,
    schedule: NoiseSchedule,
    x0,
    plan: StepPlan,
    record_every: int | None = None,
):
    """Map data to its deterministic latent at ``plan.t_end``.

    Returns the final :class:`LatentState`, or ``(state, Trajectory)`` when
    ``record_every`` is given.
    """
    if plan.direction != INVERT:
        raise ValidationError("inversion needs a plan with direction='invert'")
    x = np.asarray(x0, dtype=np.float64)
    if x.shape[-1] != predictor.d:
        raise DimensionError(f"data dimension {x.shape[-1]} != model dimension {predictor.d}")
    states = [LatentState(x, 0, INTERMEDIATE)]
    for k, (t, t_next) in enumerate(plan.transitions(), start=1):
        x = ddim_invert_step(predictor, schedule, x, t, t_next)
        if record_every and (k % record_every == 0 or k == plan.n_steps):
            states.append(LatentState(x, t_next, INTERMEDIATE))
    end = LatentState(x, plan.t_end, INVERTED)
    if record_every:
        states[-1] = end
        return end, Trajectory(states, DETERMINISTIC)
    return end


def run_trajectory(
    predictor: NoisePredictor,
    schedule: NoiseSchedule,
    start: LatentState,
    plan: StepPlan,
    mode: str = DETERMINISTIC,
    rng: RngLike | None = None,
    record_every: int = 1,
    t_m: int | None = None,
    edit: Callable[[np.ndarray], np.ndarray] | None = None,
    h_edit: Callable[[np.ndarray], np.ndarray] | None = None,
    h_steps: int = 1,
    sampler: str = "ddim",
    clip_denoised: bool = False,
) -> Trajectory:
    """Denoise ``start`` along ``plan`` and record every ``record_every``-th state.

    In mixed mode ``edit`` (if given) replaces the latent at ``t_m`` once, and
    ``h_edit`` rewrites the bottleneck activation for the first ``h_steps``
    denoising steps taken from ``t_m`` downward. Both endpoints are always
    recorded; the pre-edit latent at ``t_m`` is what the state list holds, and
    the edit itself is logged in ``Trajectory.edits``.
    """
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}")
    if plan.direction != DENOISE:
        raise ValidationError("run_trajectory needs a denoising plan")
    if start.t != plan.t_end:
        raise ValidationError(f"start step {start.t} != plan entry step {plan.t_end}")
    if mode == MIXED:
        if t_m is None:
            raise ValidationError("mixed mode needs t_m")
        if t_m not in plan.taus:
            raise ValidationError(f"t_m={t_m} is not a step of the plan")
    elif edit is not None or h_edit is not None:
        raise ValidationError("edits are only defined for mixed trajectories")
    if sampler not in ("ddim", "ddpm"):
        raise ValidationError(f"unknown sampler {sampler!r}")
    if record_every < 1:
        raise ValidationError("record_every must be at least 1")

    x = np.asarray(start.x, dtype=np.float64)
    traj = Trajectory([LatentState(x, start.t, start.source)], mode, t_m if mode == MIXED else None)
    h_left = 0
    for k, (t, t_prev) in enumerate(plan.transitions(), start=1):
        stochastic = mode == STOCHASTIC or (mode == MIXED and t <= t_m)
        if mode == MIXED and t == t_m:
            if edit is not None:
                x_new = np.asarray(edit(x), dtype=np.float64)
                traj.edits.append(EditEvent(t, x, x_new))
                x = x_new
            if h_edit is not None:
                h_left = h_steps
        h_override = None
        if h_left > 0:
            _, h_own, _ = predictor.forward(x, max(t, 1))
            h_override = h_edit(h_own)
            traj.h_injections.append(t)
            h_left -= 1
        state = LatentState(x, t)
        if stochastic and sampler == "ddpm":
            if t_prev != t - 1:
                raise ValidationError("the DDPM sampler needs a unit-stride plan")
            state = ddpm_step(predictor, schedule, state, rng, h_override=h_override, clip_denoised=clip_denoised)
        elif stochastic:
            state = ddim_step(
                predictor, schedule, state, t_prev, rng, h_override=h_override, clip_denoised=clip_denoised
            )
        else:
            state = ddim_step(
                predictor, schedule, state, t_prev, eta=0.0, h_override=h_override, clip_denoised=clip_denoised
            )
        x = state.x
        if k % record_every == 0 or k == plan.n_steps:
            traj.states.append(LatentState(x, t_prev, INTERMEDIATE))
    return traj


def sample_latents(d: int, t: int, rng: RngLike, n: int | None = None) -> LatentState:
    """Standard-normal latents at step ``t`` (normally ``T``)."""
    shape = (d,) if n is None else (n, d)
    return LatentState(_noise(rng, None, shape), t, SAMPLED)


def reconstruct(
    predictor: NoisePredictor, schedule: NoiseSchedule, x0, plan: StepPlan, clip_denoised: bool = False
) -> np.ndarray:
    """Invert along ``plan`` then denoise deterministically along the same steps."""
    inv = plan if plan.direction == INVERT else plan.reversed()
    latent = ddim_invert(predictor, schedule, x0, inv)
    traj = run_trajectory(
        predictor, schedule, latent, inv.reversed(), DETERMINISTIC, record_every=inv.n_steps, clip_denoised=clip_denoised
    )
    return traj.final.x


def dump_trajectory_csv(traj: Trajectory, path) -> None:
    """Long-format CSV ``sample_id,step,coordinate_index,value``."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "step", "coordinate_index", "value"])
        for s in traj.states:
            X = np.atleast_2d(s.x)
            for i, row in enumerate(X):
                for j, v in enumerate(row):
                    w.writerow([i, s.t, j, repr(float(v))])


def dump_trajectory_npz(traj: Trajectory, path) -> None:
    """Compact binary block: ``steps (k,)`` and ``states (k, n, d)``."""
    np.savez(path, steps=np.array(traj.steps), states=np.stack([np.atleast_2d(s.x) for s in traj.states]))
