"""Mixing-step search on radius scans.

Scanning a :class:`~bdk.geometry.RadiusScan` from ``T`` downward, the mixing
step ``t_m`` is the first recorded step whose radius shift reaches the
threshold. The shift attached to step ``s`` is ``r(s) - r(s - stride)``, the
drop over the following stride. Only that first firing is used: once the
latents have started moving toward the data, their radius no longer measures
a Gaussian and later rows are reported but never examined.

The default threshold of 4 belongs to ``d = 12288``; shifts grow roughly with
``sqrt(d)``, so :func:`relative_threshold` rescales it for other dimensions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from bdk import rng as rngmod
from bdk.errors import ValidationError
from bdk.geometry import RadiusScan, radius_scan
from bdk.noise_model import NoisePredictor
from bdk.schedule import NoiseSchedule, make_step_plan
from bdk.trajectory import DETERMINISTIC, STOCHASTIC, ddim_invert, sample_latents

DEFAULT_THRESHOLD = 4.0
REFERENCE_DIM = 12288

SAMPLED, INVERTED = "sampled", "inverted"
COMBOS = ((SAMPLED, STOCHASTIC), (SAMPLED, DETERMINISTIC), (INVERTED, STOCHASTIC), (INVERTED, DETERMINISTIC))


def relative_threshold(d: int, base: float = DEFAULT_THRESHOLD, reference_d: int = REFERENCE_DIM) -> float:
    """``base`` scaled by ``sqrt(d / reference_d)``."""
    if d < 1:
        raise ValidationError("dimension must be positive")
    return float(base * np.sqrt(d / reference_d))


def per_hundred(delta, stride: int, T: int) -> np.ndarray:
    """Express shifts per 100 steps of a 1000-step chain.

    A stride of ``stride`` steps in a ``T``-step chain spans ``stride * 1000 / T``
    steps of the reference chain.
    """
    span = stride * 1000.0 / T
    return np.asarray(delta, dtype=np.float64) * (100.0 / span)


@dataclass
class MixingReport:
    t_m: int | None
    scan: RadiusScan | None
    threshold: float
    stride: int
    combos: dict = field(default_factory=dict)  # (source, mode) -> t_m or None
    scans: dict = field(default_factory=dict)  # (source, mode) -> RadiusScan
    signed: bool = True
    notes: list = field(default_factory=list)

    @property
    def found(self) -> bool:
        return self.t_m is not None

    def agreement(self) -> int | None:
        """Spread of detected steps across combos, or ``None`` if any combo found nothing."""
        vals = list(self.combos.values())
        if not vals or any(v is None for v in vals):
            return None
        return max(vals) - min(vals)

    def to_dict(self) -> dict:
        def scan_rows(s):
            return [
                {"step": st, "r": r, "delta_r": None if np.isnan(dr) else dr, "std_error": se}
                for st, r, dr, se in s.rows()
            ]

        return {
            "t_m": self.t_m,
            "threshold": self.threshold,
            "stride": self.stride,
            "signed": self.signed,
            "combos": {f"{a}+{b}": v for (a, b), v in self.combos.items()},
            "scan": scan_rows(self.scan) if self.scan is not None else None,
            "scans": {f"{a}+{b}": scan_rows(s) for (a, b), s in self.scans.items()},
            "notes": list(self.notes),
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def find_mixing_step(scan: RadiusScan, threshold: float = DEFAULT_THRESHOLD, signed: bool = True) -> MixingReport:
    """First step, from ``T`` down, whose shift reaches ``threshold``.

    By default only contractions count, so a radius that grows back toward
    the Gaussian shell (as inverted latents do on their first stochastic
    jump) never fires. ``signed=False`` tests the magnitude ``|delta r|``.
    ``t_m`` is ``None`` when nothing fires; that is a normal outcome, not an
    error.
    """
    if threshold <= 0:
        raise ValidationError("threshold must be positive")
    delta = scan.delta[:-1]
    stat = delta if signed else np.abs(delta)
    hits = np.nonzero(stat >= threshold)[0]
    t_m = int(scan.steps[hits[0]]) if hits.size else None
    stride = int(scan.steps[0] - scan.steps[1])
    report = MixingReport(t_m, scan, float(threshold), stride, signed=signed)
    if scan.n_samples == 1:
        report.notes.append("single-sample scan: radius standard errors are unbounded")
    return report


def inverted_starts(predictor: NoisePredictor, schedule: NoiseSchedule, images, n_steps: int | None = None):
    """Deterministically invert ``images`` all the way to ``T``."""
    plan = make_step_plan(schedule, n_steps or schedule.T, direction="invert")
    return ddim_invert(predictor, schedule, images, plan)


def cross_validate_mixing(
    predictor: NoisePredictor,
    schedule: NoiseSchedule,
    n_samples: int,
    stride: int,
    threshold: float,
    seed: int,
    dataset,
    signed: bool = True,
    run_steps: int | None = None,
    inversion_steps: int | None = None,
    clip_denoised: bool = True,
) -> MixingReport:
    """Detect ``t_m`` for every (start source, sampler) combination.

    Sampled starts are standard normal at ``T``; inverted starts are the first
    ``n_samples`` rows of ``dataset`` inverted to ``T``. Each start set is run
    once stochastically (per-sample tail streams) and once deterministically.
    ``run_steps`` sets how many jumps the runs take (default: one per stride).
    The headline ``t_m`` is the sampled stochastic one.
    """
    if not predictor.trained:
        raise ValidationError("cross-validation needs a trained model")
    data = np.asarray(dataset, dtype=np.float64)
    if len(data) < n_samples:
        raise ValidationError(f"dataset has {len(data)} images, need {n_samples}")
    if n_samples < 1:
        raise ValidationError("need at least one sample")
    plan = None if run_steps is None else make_step_plan(schedule, run_steps)
    starts = {
        SAMPLED: sample_latents(predictor.d, schedule.T, rngmod.sample_streams(seed, n_samples, "start"), n_samples),
        INVERTED: inverted_starts(predictor, schedule, data[:n_samples], inversion_steps),
    }
    combos, scans = {}, {}
    for source, mode in COMBOS:
        rng = rngmod.sample_streams(seed, n_samples, "tail") if mode == STOCHASTIC else None
        scan = radius_scan(
            predictor, schedule, starts[source], mode, stride, rng=rng, label=f"{source}+{mode}", plan=plan,
            clip_denoised=clip_denoised,
        )
        scans[(source, mode)] = scan
        combos[(source, mode)] = find_mixing_step(scan, threshold, signed).t_m
    head = scans[(SAMPLED, STOCHASTIC)]
    report = MixingReport(combos[(SAMPLED, STOCHASTIC)], head, float(threshold), stride, combos, scans, signed)
    for key, t in combos.items():
        if t is None:
            report.notes.append(f"{key[0]}+{key[1]}: no step reached the threshold")
    if n_samples == 1:
        report.notes.append("single-sample scans: radius standard errors are unbounded")
    return report
