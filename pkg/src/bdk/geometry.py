"""High-dimensional Gaussian probes.

Radius estimation for sample sets, radius scans along a denoising run,
closed-form unit-ball volume and sphere area, the hemisphere slab fraction,
the random projection concentration check, spherical interpolation and the
interpolation quality experiment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import lgamma, log, pi
from typing import Iterable

import numpy as np

from bdk import rng as rngmod
from bdk.errors import DimensionError, ValidationError
from bdk.noise_model import NoisePredictor
from bdk.schedule import NoiseSchedule, StepPlan, strided_plan
from bdk.trajectory import DETERMINISTIC, MIXED, LatentState, run_trajectory


@dataclass(frozen=True)
class RadiusEstimate:
    r: float
    n_samples: int
    d: int
    std_error: float


def _radius_from_moments(sq_sum: float, sq_sq_sum: float, n: int, d: int) -> RadiusEstimate:
    m = sq_sum / n
    if n > 1:
        var = max(sq_sq_sum / n - m * m, 0.0) * n / (n - 1)
    else:
        var = float("inf")
    r = float(np.sqrt(m))
    # delta method: d sqrt(m) = dm / (2 sqrt(m))
    se = float(np.sqrt(var / n) / (2.0 * r)) if r > 0 else float("inf")
    return RadiusEstimate(r, n, d, se)


def estimate_radius(samples) -> RadiusEstimate:
    """``r = sqrt(mean over samples of ||x||^2)`` with a delta-method standard error.

    ``samples`` is an ``(N, d)`` array or an iterable of such chunks, so very
    large dimensions can be streamed without holding all draws at once.
    A single sample has an infinite standard error.
    """
    if isinstance(samples, np.ndarray):
        chunks: Iterable = [np.atleast_2d(samples)]
    else:
        chunks = (np.atleast_2d(np.asarray(c, dtype=np.float64)) for c in samples)
    n, d = 0, None
    s1 = s2 = 0.0
    for c in chunks:
        if c.size == 0:
            continue
        if d is None:
            d = c.shape[1]
        elif c.shape[1] != d:
            raise DimensionError(f"sample dimension {c.shape[1]} != {d}")
        sq = np.einsum("ij,ij->i", c, c)
        s1 += float(sq.sum())
        s2 += float((sq * sq).sum())
        n += c.shape[0]
    if n == 0:
        raise ValidationError("need at least one sample")
    return _radius_from_moments(s1, s2, n, d)


def gaussian_radius_draws(d: int, n: int, rng: np.random.Generator, chunk: int = 64) -> RadiusEstimate:
    """Radius of ``n`` standard-normal draws in dimension ``d``, generated in chunks."""
    if n < 1:
        raise ValidationError("n must be at least 1")

    def gen():
        left = n
        while left:
            k = min(chunk, left)
            yield rng.standard_normal((k, d))
            left -= k

    return estimate_radius(gen())


# --- radius scans -----------------------------------------------------------


@dataclass
class RadiusScan:
    """Radius at recorded steps, listed from ``T`` downward.

    ``delta[i] = r[i] - r[i + 1]``: the change from step ``steps[i]`` to the next
    recorded (lower) step. The last entry has no successor and is ``nan``.
    """

    steps: np.ndarray
    r: np.ndarray
    std_error: np.ndarray
    n_samples: int
    label: str = ""
    delta: np.ndarray = field(init=False)

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=int)
        self.r = np.asarray(self.r, dtype=np.float64)
        self.std_error = np.asarray(self.std_error, dtype=np.float64)
        if len(self.steps) < 2:
            raise ValidationError("a radius scan needs at least two recorded steps")
        if not (len(self.r) == len(self.steps) == len(self.std_error)):
            raise DimensionError("steps, r and std_error must have equal length")
        if np.any(np.diff(self.steps) >= 0):
            raise ValidationError("scan steps must be strictly decreasing")
        self.delta = np.append(self.r[:-1] - self.r[1:], np.nan)

    @classmethod
    def from_deltas(cls, steps, delta, label: str = "") -> "RadiusScan":
        """Build a scan whose ``delta`` column equals ``delta`` at ``steps``.

        Useful for feeding published tables; radii are reconstructed by
        cumulative subtraction from an arbitrary origin.
        """
        steps = list(steps)
        delta = np.asarray(delta, dtype=np.float64)
        if len(delta) != len(steps):
            raise DimensionError("need one delta per step")
        stride = steps[-2] - steps[-1] if len(steps) > 1 else 1
        all_steps = steps + [steps[-1] - stride]
        r = np.concatenate([[0.0], -np.cumsum(delta)])
        return cls(np.array(all_steps), r, np.zeros(len(r)), 0, label)

    def rows(self):
        for s, r, dr, se in zip(self.steps, self.r, self.delta, self.std_error):
            yield int(s), float(r), float(dr), float(se)

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "r", "delta_r", "std_error"])
            for s, r, dr, se in self.rows():
                w.writerow([s, repr(r), "" if np.isnan(dr) else repr(dr), repr(se)])


def radius_scan(
    predictor: NoisePredictor,
    schedule: NoiseSchedule,
    starts: LatentState,
    mode: str,
    stride: int,
    rng=None,
    label: str = "",
    plan: StepPlan | None = None,
    sampler: str = "ddim",
    clip_denoised: bool = False,
) -> RadiusScan:
    """Run ``starts`` (a batch at ``T``) down to 0 and estimate the radius every ``stride`` steps.

    By default the run itself takes one jump per ``stride``; pass a finer
    ``plan`` (whose steps include every multiple of ``stride``) to record a
    subsampled run instead.
    """
    if starts.t != schedule.T:
        raise ValidationError(f"scan starts must sit at T={schedule.T}, got {starts.t}")
    if mode == MIXED:
        raise ValidationError("radius scans use a pure stochastic or deterministic run")
    if plan is None:
        plan = strided_plan(schedule, stride)
        every = 1
    else:
        gaps = np.diff(plan.taus)
        if np.any(gaps != gaps[0]) or stride % gaps[0]:
            raise ValidationError("the plan must be uniform with a spacing dividing the stride")
        every = stride // int(gaps[0])
    traj = run_trajectory(
        predictor, schedule, starts, plan, mode, rng=rng, record_every=every, sampler=sampler, clip_denoised=clip_denoised
    )
    ests = [estimate_radius(np.atleast_2d(s.x)) for s in traj.states]
    return RadiusScan(
        np.array([s.t for s in traj.states]),
        np.array([e.r for e in ests]),
        np.array([e.std_error for e in ests]),
        ests[0].n_samples,
        label,
    )


# --- unit ball and sphere ---------------------------------------------------


def unit_sphere_volume_area(d: int) -> tuple[float, float]:
    """Volume of the unit ball and area of the unit sphere in ``R^d``.

    ``A(d) = 2 pi^(d/2) / Gamma(d/2)`` and ``V(d) = A(d) / d``, evaluated in log space.
    """
    if int(d) != d or d < 1:
        raise ValidationError(f"dimension must be a positive integer, got {d}")
    log_a = log(2.0) + 0.5 * d * log(pi) - lgamma(0.5 * d)
    a = float(np.exp(log_a))
    return a / d, a


def uniform_in_ball(d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniform in the unit ball: Gaussian direction times ``U^(1/d)`` radius."""
    g = rng.standard_normal((n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * rng.random(n)[:, None] ** (1.0 / d)


@dataclass(frozen=True)
class SlabResult:
    fraction: float
    std_error: float
    bound: float
    n: int

    @property
    def within_bound(self) -> bool:
        return self.fraction <= self.bound + 3.0 * self.std_error


def hemisphere_slab_fraction(d: int, c: float, n: int, rng: np.random.Generator, chunk: int = 20_000) -> SlabResult:
    """Share of the upper half ball lying above ``x_1 = c / sqrt(d - 1)``.

    Points are folded into the upper hemisphere with ``|x_1|``. The bound
    reported alongside is ``(2 / c) exp(-c^2 / 2)``.
    """
    if d < 2:
        raise ValidationError("need d >= 2")
    if c <= 0:
        raise ValidationError("c must be positive")
    if n < 1:
        raise ValidationError("need at least one Monte Carlo point")
    cut = c / np.sqrt(d - 1)
    hits, left = 0, n
    while left:
        k = min(chunk, left)
        x1 = np.abs(uniform_in_ball(d, k, rng)[:, 0])
        hits += int((x1 > cut).sum())
        left -= k
    p = hits / n
    se = float(np.sqrt(p * (1 - p) / n))
    return SlabResult(p, se, float(2.0 / c * np.exp(-c * c / 2.0)), n)


@dataclass(frozen=True)
class ProjectionResult:
    failure_rate: float
    bound: float
    mean_abs_dev: float
    max_abs_dev: float
    n: int


def random_projection_check(
    d: int, k: int, n: int, rng: np.random.Generator, epsilon: float = 0.5, method: str = "coordinates"
) -> ProjectionResult:
    """Project random unit vectors onto random ``k``-dimensional subspaces.

    ``w`` is the projection of a fixed unit vector onto a random subspace; a
    failure is ``| ||w||^2 - k/d | >= epsilon k / d``. The distribution is
    rotation invariant, so by default a uniformly random unit vector is
    projected onto the first ``k`` coordinates. ``method="qr"`` draws an
    explicit orthonormal basis for each trial instead (slower, same law).
    """
    if not 1 <= k <= d:
        raise ValidationError(f"need 1 <= k <= d, got k={k}, d={d}")
    if n < 1:
        raise ValidationError("need at least one trial")
    if method == "coordinates":
        v = rng.standard_normal((n, d))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        w2 = (v[:, :k] ** 2).sum(axis=1)
    elif method == "qr":
        v = np.zeros(d)
        v[0] = 1.0
        w2 = np.empty(n)
        for i in range(n):
            q, _ = np.linalg.qr(rng.standard_normal((d, k)))
            w2[i] = float(((q.T @ v) ** 2).sum())
    else:
        raise ValidationError(f"unknown method {method!r}")
    dev = np.abs(w2 - k / d)
    fail = float((dev >= epsilon * k / d * (1 - 1e-12)).mean()) if k < d else 0.0
    return ProjectionResult(fail, float(4.0 * np.exp(-k * epsilon**2 / 64.0)), float(dev.mean()), float(dev.max()), n)


def slerp(x_a, x_b, lam: float, tol: float = 1e-12) -> np.ndarray:
    """Spherical interpolation; at ``lam=0`` returns ``x_a`` and at ``lam=1`` returns ``x_b``.

    Works row-wise on batches. The norm is interpolated linearly so the
    result stays between the two endpoint norms.
    """
    a = np.asarray(x_a, dtype=np.float64)
    b = np.asarray(x_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"endpoint shapes differ: {a.shape} vs {b.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValidationError("lam must lie in [0, 1]")
    if lam == 0.0:
        return a.copy()
    if lam == 1.0:
        return b.copy()
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    if np.any(na < tol) or np.any(nb < tol):
        raise ValidationError("slerp is undefined for zero vectors")
    ua, ub = a / na, b / nb
    cos = np.clip(np.sum(ua * ub, axis=-1, keepdims=True), -1.0, 1.0)
    if np.any(cos < -1.0 + 1e-12):
        raise ValidationError("slerp is undefined for antipodal vectors")
    theta = np.arccos(cos)
    sin = np.sin(theta)
    small = sin < 1e-12
    safe = np.where(small, 1.0, sin)
    wa = np.where(small, 1.0 - lam, np.sin((1.0 - lam) * theta) / safe)
    wb = np.where(small, lam, np.sin(lam * theta) / safe)
    u = wa * ua + wb * ub
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    return u * ((1.0 - lam) * na + lam * nb)


# --- interpolation quality ----------------------------------------------------


def nearest_neighbor_rmse(images, reference) -> np.ndarray:
    """Per-image pixel RMSE to the closest reference image."""
    x = np.atleast_2d(np.asarray(images, dtype=np.float64))
    ref = np.asarray(reference, dtype=np.float64)
    d2 = (x * x).sum(1)[:, None] - 2.0 * x @ ref.T + (ref * ref).sum(1)[None, :]
    return np.sqrt(np.maximum(d2.min(axis=1), 0.0) / x.shape[1])


@dataclass
class DistanceEffectReport:
    lambdas: np.ndarray
    curves: dict[str, np.ndarray]  # label -> mean NN score per lambda

    def mid_score(self, label: str) -> float:
        lam = self.lambdas
        inner = (lam > 0) & (lam < 1)
        return float(self.curves[label][inner].mean())


def distance_effect_experiment(
    predictor: NoisePredictor,
    schedule: NoiseSchedule,
    pairs: dict[str, tuple[np.ndarray, np.ndarray]],
    reference,
    plan: StepPlan,
    lambdas=(0.0, 0.25, 0.5, 0.75, 1.0),
    tail: dict[str, tuple[int, int]] | None = None,
    clip_denoised: bool = False,
) -> DistanceEffectReport:
    """Denoise interpolated latents and score each output by its distance to ``reference``.

    ``pairs`` maps a label (for example ``"sampled"`` or ``"inverted"``) to
    two ``(n, d)`` arrays of endpoints at ``T``. Each grid point is denoised
    deterministically unless ``tail[label] = (t_m, seed)`` requests a mixed
    run with a stochastic tail below ``t_m``.
    """
    if not predictor.trained:
        raise ValidationError("the distance effect needs a trained model")
    lambdas = np.asarray(lambdas, dtype=np.float64)
    curves = {}
    for label, (xa, xb) in pairs.items():
        scores = []
        for lam in lambdas:
            start = LatentState(slerp(xa, xb, float(lam)), schedule.T)
            if tail and label in tail:
                t_m, seed = tail[label]
                rngs = rngmod.sample_streams(seed, len(np.atleast_2d(xa)), "tail")
                traj = run_trajectory(
                    predictor, schedule, start, plan, MIXED, rng=rngs, t_m=t_m, record_every=plan.n_steps,
                    clip_denoised=clip_denoised,
                )
            else:
                traj = run_trajectory(
                    predictor, schedule, start, plan, DETERMINISTIC, record_every=plan.n_steps,
                    clip_denoised=clip_denoised,
                )
            scores.append(nearest_neighbor_rmse(traj.final.x, reference).mean())
        curves[label] = np.array(scores)
    return DistanceEffectReport(lambdas, curves)
