"""Command-line entry point: ``bdk <command> [flags]``.

Every command writes its artifacts plus one JSON run manifest into the output
directory (``--out``, else ``$BDK_OUT``, else the working directory). The
manifest records the argv, the seed, input checksums, the build's
``git describe``, wall time and a SHA-256 per output file, so re-running the
recorded argv reproduces the outputs bit for bit.

Exit codes: 0 success, 1 a verification check failed, 2 I/O, 3 validation
(including bad flags), 4 numeric, 5 not found.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from bdk import __version__
from bdk import rng as rngmod
from bdk.boundary import (
    EPSILON,
    H,
    SVMConfig,
    assemble_latent_dataset,
    evaluate_boundary,
    fit_boundary,
    load_boundary,
    save_boundary,
)
from bdk.editor import (
    EDIT_MODES,
    EDIT_TAIL_ETA,
    SET_DISTANCE,
    EditSpec,
    boundary_diffusion_conditional,
    boundary_diffusion_unconditional,
    strength_sweep,
)
from bdk.errors import BdkError, IOFailure, NotFoundError, NumericError, ValidationError
from bdk.geometry import (
    RadiusScan,
    estimate_radius,
    gaussian_radius_draws,
    hemisphere_slab_fraction,
    radius_scan,
    random_projection_check,
    slerp,
    unit_sphere_volume_area,
)
from bdk.markov_tv import (
    DiscreteChain,
    chain_mixing_time,
    cyclic_walk,
    submultiplicative_check,
    time_reversal_check,
    tv_distance,
    tv_distance_bruteforce,
    two_state_mixing_time,
)
from bdk.mixing import (
    INVERTED,
    SAMPLED,
    cross_validate_mixing,
    find_mixing_step,
    inverted_starts,
    relative_threshold,
)
from bdk.noise_model import (
    TrainConfig,
    default_architecture,
    init_predictor,
    load_checkpoint,
    save_checkpoint,
    train_predictor,
)
from bdk.schedule import INVERT, make_desk_schedule, make_step_plan
from bdk.synth_data import (
    ATTRIBUTES,
    SpriteConfig,
    attribute_oracle,
    generate_sprite_dataset,
    load_dataset,
    save_dataset,
)
from bdk.trajectory import (
    DETERMINISTIC,
    STOCHASTIC,
    ddim_invert,
    dump_trajectory_csv,
    dump_trajectory_npz,
    reconstruct,
    sample_latents,
)

log = logging.getLogger("bdk")

EXIT_FAIL, EXIT_IO, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_NOT_FOUND = 1, 2, 3, 4, 5
OUT_ENV = "BDK_OUT"
TOY_CHECKPOINT = "toy_checkpoint.bdkt"

# Per-stride radius shifts of a 1000-step 64x64x3 model, stride 100, steps
# 1000..400: sampled starts with stochastic / deterministic runs, then
# inverted starts with the same two runs. Detection should give 500 for all.
REFERENCE_STEPS = (1000, 900, 800, 700, 600, 500, 400, 300)
REFERENCE_SHIFTS = {
    "sampled+stochastic": ((0.02, 0.01, 0.25, 0.75, 1.98, 4.63, 8.58), 4.0),
    "sampled+deterministic": ((0.02, 0.02, 0.21, 0.74, 2.03, 4.76, 8.65), 4.0),
    "inverted+stochastic": ((1.76, 1.74, 1.42, 1.45, 2.08, 3.81, 6.36), 3.5),
    "inverted+deterministic": ((1.72, 1.73, 1.45, 1.41, 2.18, 3.70, 6.34), 3.5),
}


# --- run bookkeeping -------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def git_describe() -> str:
    try:
        res = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() if res.returncode == 0 and res.stdout.strip() else "unknown"


class Run:
    """Collects inputs, outputs and results of one command for its manifest."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.out = Path(args.out or os.environ.get(OUT_ENV) or ".")
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.results: dict = {}
        self.t0 = time.perf_counter()
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IOFailure(f"cannot create output directory {self.out}: {exc}") from exc

    def path(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(p)
        return p

    def note_input(self, role: str, path) -> None:
        self.inputs[role] = sha256_file(path)

    def manifest(self) -> dict:
        flags = {k: v for k, v in vars(self.args).items() if k != "func"}
        return {
            "command": self.args.command,
            "argv": self.argv,
            "flags": flags,
            "seeds": {"seed": self.args.seed},
            "inputs": self.inputs,
            "version": __version__,
            "git_describe": git_describe(),
            "wall_time_s": round(time.perf_counter() - self.t0, 3),
            "outputs": [{"path": str(p), "sha256": sha256_file(p)} for p in self.outputs if p.exists()],
            "results": self.results,
        }

    def finish(self) -> Path:
        path = self.out / f"{self.args.command}.manifest.json"
        try:
            path.write_text(json.dumps(_jsonable(self.manifest()), indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            raise IOFailure(f"cannot write manifest {path}: {exc}") from exc
        return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


# --- images ------------------------------------------------------------------


def image_grid(images, side: int, channels: int = 1, cols: int | None = None, pad: int = 1) -> np.ndarray:
    """Tile flattened images in [-1, 1] into one uint8 array ``(H, W)`` or ``(H, W, 3)``."""
    X = np.atleast_2d(np.asarray(images, dtype=np.float64))
    n = len(X)
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    tiles = np.clip(np.round((X + 1.0) * 127.5), 0, 255).astype(np.uint8)
    tiles = tiles.reshape(n, side, side, channels)
    step = side + pad
    grid = np.zeros((rows * step - pad, cols * step - pad, channels), np.uint8)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, cols)
        grid[r * step : r * step + side, c * step : c * step + side] = tile
    return grid[..., 0] if channels == 1 else grid


def write_pnm(path, grid: np.ndarray) -> None:
    """Binary PGM (P5) for 2-d arrays, PPM (P6) for ``(H, W, 3)``."""
    grid = np.ascontiguousarray(grid, dtype=np.uint8)
    magic = b"P5" if grid.ndim == 2 else b"P6"
    h, w = grid.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode() + grid.tobytes())


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] not in (b"P5", b"P6"):
        raise ValidationError(f"{path} is not a binary PGM/PPM file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValidationError("only 8-bit images are supported")
    ch = 1 if parts[0] == b"P5" else 3
    data = np.frombuffer(raw[len(raw) - w * h * ch :], np.uint8)
    return data.reshape(h, w) if ch == 1 else data.reshape(h, w, 3)


def _image_ext(channels: int) -> str:
    return "pgm" if channels == 1 else "ppm"


# --- shared loaders ------------------------------------------------------------


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise NotFoundError(f"{what} {p} does not exist")
    return p


def default_checkpoint() -> Path:
    return Path(str(resources.files("bdk") / "data" / TOY_CHECKPOINT))


def _model(run: Run):
    path = _existing(run.args.checkpoint or default_checkpoint(), "checkpoint")
    run.note_input("checkpoint", path)
    return load_checkpoint(path)


def _dataset(run: Run, n: int | None = None, d: int | None = None):
    """``--data`` file, or a freshly generated sprite set keyed by ``--seed``."""
    args = run.args
    if getattr(args, "data", None):
        path = _existing(args.data, "dataset")
        run.note_input("data", path)
        ds = load_dataset(path)
    else:
        ds = generate_sprite_dataset(SpriteConfig(seed=args.seed), n or args.n)
    if n is not None and len(ds) < n:
        raise ValidationError(f"dataset has {len(ds)} images, need {n}")
    if d is not None and ds.images.shape[1] != d:
        raise ValidationError(f"dataset dimension {ds.images.shape[1]} does not match the model ({d})")
    return ds if n is None else ds.subset(np.arange(n))


def _boundaries(run: Run):
    out = []
    for i, p in enumerate(run.args.boundary or []):
        path = _existing(p, "boundary")
        run.note_input(f"boundary{i}", path)
        out.append(load_boundary(path))
    return out


def _dump(run: Run, traj, stem: str) -> None:
    fmt = getattr(run.args, "dump", None)
    if fmt == "csv":
        dump_trajectory_csv(traj, run.path(f"{stem}.csv"))
    elif fmt == "npz":
        dump_trajectory_npz(traj, run.path(f"{stem}.npz"))


def _table(rows, header) -> str:
    cells = [[str(c) for c in header]] + [[f"{c:.4g}" if isinstance(c, float) else str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# --- commands --------------------------------------------------------------------


def cmd_gen_data(run: Run) -> int:
    a = run.args
    cfg = SpriteConfig(side=a.side, channels=a.channels, seed=a.seed)
    ds = generate_sprite_dataset(cfg, a.n)
    save_dataset(ds, run.path(a.name))
    write_pnm(run.path(f"preview.{_image_ext(a.channels)}"), image_grid(ds.images[:64], a.side, a.channels))
    run.results = {"n": len(ds), "d": cfg.dim, "positive_rate": {k: float(v.mean()) for k, v in ds.labels.items()}}
    print(f"wrote {len(ds)} sprites (d={cfg.dim}) to {run.out / a.name}")
    return 0


def cmd_train(run: Run) -> int:
    a = run.args
    ds = _dataset(run)
    d = ds.images.shape[1]
    schedule = make_desk_schedule(a.T)
    model = init_predictor(default_architecture(d, a.hidden), a.time_embed, seed=a.seed, time_horizon=a.T)
    cfg = TrainConfig(epochs=a.epochs, batch_size=a.batch_size, learning_rate=a.lr, seed=a.seed)

    def progress(epoch, loss):
        if epoch % 25 == 0 or epoch == cfg.epochs - 1:
            log.info("epoch %d loss %.5f", epoch, loss)

    trained, curve = train_predictor(model, ds.images, schedule, cfg, log=progress)
    ckpt = run.path(a.name)
    save_checkpoint(trained, schedule, ckpt)
    with open(run.path("loss.csv"), "w") as fh:
        fh.write("epoch,loss\n")
        fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(curve))
    run.results = {"final_loss": float(curve[-1]) if len(curve) else None, "n_params": trained.n_params}
    print(f"trained {trained.n_params} parameters, final loss {run.results['final_loss']}; checkpoint {ckpt}")
    return 0


def _starts(run: Run, model, schedule, source: str, n: int):
    if source == SAMPLED:
        return sample_latents(model.d, schedule.T, rngmod.sample_streams(run.args.seed, n, "start"), n)
    ds = _dataset(run, n, model.d)
    return inverted_starts(model, schedule, ds.images, run.args.steps_inv)


def cmd_radius_scan(run: Run) -> int:
    a = run.args
    model, schedule = _model(run)
    starts = _starts(run, model, schedule, a.source, a.samples)
    rng = rngmod.sample_streams(a.seed, a.samples, "tail") if a.mode == STOCHASTIC else None
    scan = radius_scan(
        model, schedule, starts, a.mode, a.stride, rng=rng, label=f"{a.source}+{a.mode}", clip_denoised=not a.no_clip
    )
    scan.to_csv(run.path("radius_scan.csv"))
    rows = [(s, r, dr, se) for s, r, dr, se in scan.rows()]
    run.results = {"sqrt_d": float(np.sqrt(model.d)), "rows": rows}
    print(_table(rows, ("step", "r", "delta_r", "std_error")))
    return 0


def cmd_find_mixing(run: Run) -> int:
    a = run.args
    model, schedule = _model(run)
    threshold = a.threshold if a.threshold is not None else relative_threshold(model.d)
    ds = _dataset(run, a.samples, model.d)
    report = cross_validate_mixing(
        model, schedule, a.samples, a.stride, threshold, a.seed, ds.images,
        signed=not a.absolute, clip_denoised=not a.no_clip,
    )
    report.to_json(run.path("mixing.json"))
    for (src, mode), scan in report.scans.items():
        scan.to_csv(run.path(f"scan_{src}_{mode}.csv"))
    run.results = {
        "t_m": report.t_m,
        "threshold": threshold,
        "combos": {f"{s}+{m}": t for (s, m), t in report.combos.items()},
        "agreement": report.agreement(),
        "notes": report.notes,
    }
    head = report.scan
    print(_table(list(head.rows()), ("step", "r", "delta_r", "std_error")))
    print()
    print(_table([(f"{s}+{m}", t) for (s, m), t in report.combos.items()], ("combo", "t_m")))
    print(f"\nt_m = {report.t_m} (threshold {threshold:.4g}, stride {a.stride})")
    for note in report.notes:
        print("note:", note)
    return 0


def cmd_invert(run: Run) -> int:
    a = run.args
    model, schedule = _model(run)
    ds = _dataset(run, a.n, model.d)
    t_end = a.tm or schedule.T
    plan = make_step_plan(schedule, a.steps_inv or t_end, t_end, INVERT)
    if a.dump:
        latent, traj = ddim_invert(model, schedule, ds.images, plan, record_every=1)
        _dump(run, traj, "inversion")
    else:
        latent = ddim_invert(model, schedule, ds.images, plan)
    np.savez(run.path("latents.npz"), latents=latent.x, t=latent.t)
    est = estimate_radius(latent.x)
    run.results = {"t": latent.t, "radius": est.r, "std_error": est.std_error, "sqrt_d": float(np.sqrt(model.d))}
    print(f"inverted {len(ds)} images to t={latent.t}: radius {est.r:.4f} +- {est.std_error:.4f} (sqrt d = {np.sqrt(model.d):.4f})")
    return 0


def cmd_reconstruct(run: Run) -> int:
    a = run.args
    model, schedule = _model(run)
    ds = _dataset(run, a.n, model.d)
    plan = make_step_plan(schedule, a.steps_inv or schedule.T, direction=INVERT)
    rec = reconstruct(model, schedule, ds.images, plan)
    err = np.sqrt(np.mean((rec - ds.images) ** 2, axis=1))
    side, ch = ds.config.side, ds.config.channels
    write_pnm(run.path(f"reconstruction.{_image_ext(ch)}"), image_grid(np.concatenate([ds.images[:32], rec[:32]]), side, ch, 8))
    run.results = {"rmse": float(np.sqrt(np.mean((rec - ds.images) ** 2))), "max_image_rmse": float(err.max())}
    print(f"round-trip RMSE {run.results['rmse']:.5f} over {len(ds)} images ({plan.n_steps} steps)")
    return 0


def cmd_fit_boundary(run: Run) -> int:
    a = run.args
    model, schedule = _model(run)
    ds = _dataset(run, a.n, model.d)
    spaces = (EPSILON, H) if a.space == "both" else (a.space,)
    attrs = a.attribute or list(ds.labels)
    cfg = SVMConfig(epochs=a.svm_epochs, lam=a.lam, seed=a.seed, test_fraction=a.test_fraction)
    rows, fitted = [], {}
    for space in spaces:
        latents = assemble_latent_dataset(model, schedule, ds.images, ds.labels, a.tm, space, a.steps_inv)
        for attr in attrs:
            if attr not in ds.labels:
                raise NotFoundError(f"dataset has no attribute {attr!r}")
            b = fit_boundary(latents, attr, cfg)
            name = f"{attr}_{space}_t{a.tm}.bdkb"
            save_boundary(b, run.path(name))
            rows.append((attr, space, b.train_accuracy, b.test_accuracy, name))
            fitted[name] = {"train_accuracy": b.train_accuracy, "test_accuracy": b.test_accuracy}
    run.results = {"boundaries": fitted}
    print(_table(rows, ("attribute", "space", "train_acc", "test_acc", "file")))
    return 0


def cmd_eval_boundary(run: Run) -> int:
    a = run.args
    model, schedule = _model(run)
    ds = _dataset(run, a.n, model.d)
    rows, res = [], {}
    for b in _boundaries(run):
        if b.attribute not in ds.labels:
            raise NotFoundError(f"dataset has no attribute {b.attribute!r}")
        latents = assemble_latent_dataset(model, schedule, ds.images, {b.attribute: ds.labels[b.attribute]}, b.t_m, b.space)
        acc = evaluate_boundary(b, latents)
        rows.append((b.attribute, b.space, b.t_m, acc))
        res[f"{b.attribute}/{b.space}/{b.t_m}"] = acc
    if not rows:
        raise ValidationError("pass at least one --boundary")
    run.results = {"accuracy": res}
    print(_table(rows, ("attribute", "space", "t_m", "accuracy")))
    return 0


def _spec(run: Run, boundaries):
    a = run.args
    if not boundaries:
        return None
    zetas = a.zeta or [0.0]
    if len(zetas) == 1:
        zetas = zetas * len(boundaries)
    return EditSpec(boundaries, zetas, a.mode, a.h_steps)


def _oracle_rows(images, attrs, side):
    return {attr: attribute_oracle(images, attr, side) for attr in attrs}


def cmd_edit(run: Run) -> int:
    a = run.args
    model, schedule = _model(run)
    boundaries = _boundaries(run)
    if not boundaries:
        raise ValidationError("pass at least one --boundary")
    t_m = a.tm if a.tm is not None else boundaries[0].t_m
    ds = _dataset(run, max(a.index) + 1 if a.index else a.n, model.d)
    images = ds.images[np.asarray(a.index)] if a.index else ds.images
    spec = _spec(run, boundaries)
    tail_eta = a.tail_eta
    base = boundary_diffusion_conditional(model, schedule, images, None, t_m, a.steps_inv, a.steps_gen, a.seed, tail_eta=tail_eta)
    res = boundary_diffusion_conditional(model, schedule, images, spec, t_m, a.steps_inv, a.steps_gen, a.seed, tail_eta=tail_eta)
    side, ch = ds.config.side, ds.config.channels
    grid = np.concatenate([images[:16], base.image[:16], res.image[:16]])
    write_pnm(run.path(f"edit.{_image_ext(ch)}"), image_grid(grid, side, ch, min(16, len(images))))
    np.save(run.path("edited.npy"), res.image)
    _dump(run, res.trajectory, "edit_trajectory")
    attrs = sorted({b.attribute for b in boundaries})
    before = _oracle_rows(base.image, attrs, side)
    after = _oracle_rows(res.image, attrs, side)
    run.results = {
        "t_m": t_m,
        "zetas": spec.zetas,
        "tail_eta": tail_eta,
        "distances_before": {k: np.atleast_1d(v).tolist() for k, v in res.distances.items()},
        "oracle_unedited": before,
        "oracle_edited": after,
        "changed_fraction": {k: float(np.mean(before[k] != after[k])) for k in attrs},
        "edit_steps": [e.t for e in res.trajectory.edits],
    }
    rows = [(k, float(np.mean(before[k] == 1)), float(np.mean(after[k] == 1)), run.results["changed_fraction"][k]) for k in attrs]
    print(_table(rows, ("attribute", "positive_before", "positive_after", "changed")))
    return 0


def cmd_sample(run: Run) -> int:
    a = run.args
    model, schedule = _model(run)
    boundaries = _boundaries(run)
    t_m = a.tm if a.tm is not None else (boundaries[0].t_m if boundaries else None)
    if t_m is None:
        raise ValidationError("pass --tm or a --boundary")
    res = boundary_diffusion_unconditional(
        model, schedule, _spec(run, boundaries), t_m, a.n, a.steps_gen, a.seed, tail_eta=a.tail_eta
    )
    side = int(round(np.sqrt(model.d)))
    ch = 1
    if side * side != model.d:
        side, ch = int(round(np.sqrt(model.d / 3))), 3
    write_pnm(run.path(f"samples.{_image_ext(ch)}"), image_grid(res.image, side, ch))
    np.save(run.path("samples.npy"), res.image)
    _dump(run, res.trajectory, "sample_trajectory")
    rates = {attr: float(np.mean(attribute_oracle(res.image, attr, side) == 1)) for attr in ATTRIBUTES}
    run.results = {"t_m": t_m, "positive_rate": rates, "edit_steps": [e.t for e in res.trajectory.edits]}
    print(_table(sorted(rates.items()), ("attribute", "positive_rate")))
    return 0


def cmd_sweep(run: Run) -> int:
    a = run.args
    model, schedule = _model(run)
    boundaries = _boundaries(run)
    if len(boundaries) != 1:
        raise ValidationError("a sweep takes exactly one --boundary")
    b = boundaries[0]
    t_m = a.tm if a.tm is not None else b.t_m
    ds = _dataset(run, max(a.n, a.reference), model.d)
    zetas = a.zeta or list(np.linspace(-a.span, a.span, a.points))
    res = strength_sweep(
        model, schedule, ds.images[: a.n], b, zetas, t_m, a.seed, reference=ds.images[: a.reference],
        degradation_threshold=a.degradation, side=ds.config.side, mode=a.mode, tail_eta=a.tail_eta,
    )
    mean_score = res.scores.mean(axis=-1) if res.scores.ndim > 1 else res.scores
    pos = (res.oracle == 1).mean(axis=-1) if res.oracle.ndim > 1 else (res.oracle == 1).astype(float)
    nn = res.nn_scores.mean(axis=-1) if res.nn_scores.ndim > 1 else res.nn_scores
    rows = [(float(z), float(s), float(p), float(q)) for z, s, p, q in zip(res.zetas, mean_score, pos, nn)]
    with open(run.path("sweep.csv"), "w") as fh:
        fh.write("zeta,mean_score,positive_rate,nn_rmse\n")
        fh.writelines(",".join(repr(v) for v in r) + "\n" for r in rows)
    side, ch = ds.config.side, ds.config.channels
    first = res.images[:, 0] if res.images.ndim == 3 else res.images
    write_pnm(run.path(f"sweep.{_image_ext(ch)}"), image_grid(first, side, ch, len(res.zetas)))
    run.results = {"rows": rows, "monotone_mean": bool(np.all(np.diff(mean_score) >= 0))}
    print(_table(rows, ("zeta", "mean_score", "positive_rate", "nn_rmse")))
    return 0


# --- verification tables ------------------------------------------------------


def _check(rows, name, ok, detail):
    rows.append((name, "PASS" if ok else "FAIL", detail))
    return ok


def geometry_checks(seed: int = 0, quick: bool = False) -> list:
    rows = []
    n = 200 if quick else 1000
    for d in (12288, 196608):
        est = gaussian_radius_draws(d, n, rngmod.stream(seed, "probe", d))
        rel = abs(est.r - np.sqrt(d)) / np.sqrt(d)
        _check(rows, f"radius law d={d}", rel < 0.01, f"r={est.r:.3f} sqrt(d)={np.sqrt(d):.3f}")
    for d in (16, 1024, 12288):
        g = rngmod.stream(seed, "probe", 1, d)
        est = estimate_radius(2.0 * g.standard_normal((n, d)))
        z = abs(est.r - 2.0 * np.sqrt(d)) / est.std_error
        _check(rows, f"radius consistency sigma=2 d={d}", z <= 3.0, f"{z:.2f} std errors")
    d = 12288
    x = rngmod.stream(seed, "probe", 2).standard_normal((n, d))
    frac = float(np.mean(np.abs(np.linalg.norm(x, axis=1) - np.sqrt(d)) <= 5.0))
    _check(rows, "annulus d=12288 +-5", frac >= 0.99, f"fraction {frac:.4f}")
    for c in (2.0, 4.0):
        s = hemisphere_slab_fraction(50, c, 20_000 if quick else 200_000, rngmod.stream(seed, "probe", 3, int(c)))
        _check(rows, f"hemisphere d=50 c={c:g}", s.within_bound, f"{s.fraction:.3g} vs bound {s.bound:.3g}")
    v2, a2 = unit_sphere_volume_area(2)
    v3, a3 = unit_sphere_volume_area(3)
    exact = abs(v2 - np.pi) < 1e-12 and abs(a2 - 2 * np.pi) < 1e-12 and abs(v3 - 4 * np.pi / 3) < 1e-12 and abs(a3 - 4 * np.pi) < 1e-12
    _check(rows, "unit ball d=2,3 closed forms", exact, f"V2={v2:.15g} V3={v3:.15g}")
    vols = np.array([unit_sphere_volume_area(d)[0] for d in range(20, 201)])
    _check(rows, "unit ball volume -> 0 for d>=20", bool(np.all(np.diff(vols) < 0) and vols[-1] < 1e-50), f"V200={vols[-1]:.3g}")
    p = random_projection_check(4000, 1000, 2000, rngmod.stream(seed, "probe", 4), epsilon=0.8)
    _check(rows, "random projection d=4000 k=1000", p.failure_rate <= p.bound, f"fail {p.failure_rate:.4f} <= {p.bound:.3g}")
    g = rngmod.stream(seed, "probe", 5)
    xa, xb = g.standard_normal((64, 32)), 3.0 * g.standard_normal((64, 32))
    na, nb = np.linalg.norm(xa, axis=1), np.linalg.norm(xb, axis=1)
    ok = True
    for lam in np.linspace(0, 1, 11):
        nm = np.linalg.norm(slerp(xa, xb, float(lam)), axis=1)
        ok &= bool(np.all(nm >= np.minimum(na, nb) - 1e-9) and np.all(nm <= np.maximum(na, nb) + 1e-9))
    _check(rows, "slerp norm between endpoint norms", ok, "11 grid points, 64 pairs")
    return rows


def _random_chain(g, n):
    P = g.random((n, n)) + 0.05
    return DiscreteChain(P / P.sum(axis=1, keepdims=True))


def mixing_checks(seed: int = 0, quick: bool = False) -> list:
    rows = []
    g = rngmod.stream(seed, "probe", 10)
    worst = 0.0
    for _ in range(200 if quick else 1000):
        k = int(g.integers(1, 13))
        p, q = g.random(k), g.random(k)
        worst = max(worst, abs(tv_distance(p / p.sum(), q / q.sum()) - tv_distance_bruteforce(p / p.sum(), q / q.sum())))
    _check(rows, "TV = max over events", worst <= 1e-12, f"max gap {worst:.2e}")
    ok = True
    for p, q in ((0.1, 0.2), (0.3, 0.3), (0.05, 0.6), (0.9, 0.7), (0.45, 0.5)):
        closed = two_state_mixing_time(p, q)
        ok &= closed == chain_mixing_time(DiscreteChain([[1 - p, p], [q, 1 - q]])).t_mix
    _check(rows, "two-state t_mix closed form", ok, f"t_mix(0.1, 0.2) = {two_state_mixing_time(0.1, 0.2)}")
    walk = cyclic_walk(5, {1: 0.6, 2: 0.4})
    rev = time_reversal_check(walk)
    _check(rows, "time reversal on Z_5", rev.equal, f"t_mix {rev.forward.t_mix} vs {rev.reversed.t_mix}")
    ok, details = True, []
    slow = cyclic_walk(10, {0: 0.5, 1: 0.25, -1: 0.25})
    for chain in [slow] + [_random_chain(g, 4 + i) for i in range(4)]:
        for lvl, dist, bound in submultiplicative_check(chain):
            ok &= dist <= bound + 1e-15
        details.append(chain_mixing_time(chain).t_mix)
    _check(rows, "d(l t_mix) <= 2^-l", ok, f"t_mix {details}")
    ok = True
    for i in range(5):
        res = chain_mixing_time(_random_chain(g, 6), epsilon=1e-6)
        ok &= res.mixed and bool(np.all(np.diff(res.curve[1:]) <= 1e-15))
    _check(rows, "worst-start TV nonincreasing", ok, "5 random chains")
    got = {}
    for name, (deltas, thr) in REFERENCE_SHIFTS.items():
        scan = RadiusScan.from_deltas(REFERENCE_STEPS, list(deltas) + [float("nan")], name)
        got[name] = find_mixing_step(scan, thr).t_m
    _check(rows, "reference shift rows -> t_m=500", all(v == 500 for v in got.values()), str(sorted(set(got.values()))))
    return rows


def _verify(run: Run, checks) -> int:
    rows = checks(run.args.seed, run.args.quick)
    print(_table(rows, ("check", "result", "detail")))
    write_json(run.path("checks.json"), [{"check": r[0], "result": r[1], "detail": r[2]} for r in rows])
    run.results = {"passed": sum(r[1] == "PASS" for r in rows), "total": len(rows)}
    return 0 if all(r[1] == "PASS" for r in rows) else EXIT_FAIL


def cmd_verify_geometry(run: Run) -> int:
    return _verify(run, geometry_checks)


def cmd_verify_mixing(run: Run) -> int:
    return _verify(run, mixing_checks)


def cmd_report(run: Run) -> int:
    src = _existing(run.args.dir or run.out, "directory")
    rows = []
    for path in sorted(src.glob("*.manifest.json")):
        if path.name == "report.manifest.json":
            continue
        m = json.loads(path.read_text())
        res = m.get("results", {})
        key = {k: res[k] for k in ("t_m", "rmse", "final_loss", "passed", "agreement") if k in res}
        rows.append((m["command"], m["seeds"]["seed"], m["wall_time_s"], len(m["outputs"]), json.dumps(key)))
    if not rows:
        raise NotFoundError(f"no manifests in {src}")
    print(_table(rows, ("command", "seed", "wall_s", "outputs", "key results")))
    write_json(run.path("report.json"), [dict(zip(("command", "seed", "wall_time_s", "outputs", "results"), r)) for r in rows])
    run.results = {"runs": len(rows)}
    return 0


# --- parser -----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed for every random stream")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--checkpoint", help="model checkpoint (default: packaged toy checkpoint)")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset file from gen-data (default: sprites generated from --seed)")

    steps = argparse.ArgumentParser(add_help=False)
    steps.add_argument("--steps-inv", type=int, help="inversion steps (default: unit stride)")
    steps.add_argument("--steps-gen", type=int, help="generation steps (default: unit stride)")

    edit = argparse.ArgumentParser(add_help=False)
    edit.add_argument("--boundary", action="append", help="boundary file; repeat for several")
    edit.add_argument("--zeta", type=float, action="append", help="edit strength; one per boundary or one for all")
    edit.add_argument("--mode", choices=EDIT_MODES, default=SET_DISTANCE)
    edit.add_argument("--tm", type=int, help="mixing step (default: the boundary's)")
    edit.add_argument("--tail-eta", type=float, default=EDIT_TAIL_ETA, help="eta of the stochastic tail")
    edit.add_argument("--h-steps", type=int, default=1, help="h-space injection steps below t_m")
    edit.add_argument("--dump", choices=("csv", "npz"), help="also write the trajectory")

    p = _Parser(prog="bdk", description="Desk-scale diffusion latent geometry and boundary editing.")
    p.add_argument("--version", action="version", version=f"bdk {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, parents, help_):
        sp = sub.add_parser(name, parents=[common, *parents], help=help_)
        sp.set_defaults(func=func)
        return sp

    sp = add("gen-data", cmd_gen_data, [], "generate a labelled sprite dataset")
    sp.add_argument("--n", type=int, default=2000)
    sp.add_argument("--side", type=int, default=16)
    sp.add_argument("--channels", type=int, choices=(1, 3), default=1)
    sp.add_argument("--name", default="sprites.bdds")

    sp = add("train", cmd_train, [data], "train a noise predictor")
    sp.add_argument("--n", type=int, default=2000, help="generated training images when --data is absent")
    sp.add_argument("--epochs", type=int, default=300)
    sp.add_argument("--lr", type=float, default=0.2)
    sp.add_argument("--batch-size", type=int, default=128)
    sp.add_argument("--hidden", type=int, default=512)
    sp.add_argument("--time-embed", type=int, default=32)
    sp.add_argument("--T", type=int, default=100)
    sp.add_argument("--name", default="model.bdkt")

    sp = add("radius-scan", cmd_radius_scan, [model, data, steps], "radius of a batch along a run")
    sp.add_argument("--samples", type=int, default=200)
    sp.add_argument("--stride", type=int, default=10)
    sp.add_argument("--source", choices=(SAMPLED, INVERTED), default=SAMPLED)
    sp.add_argument("--mode", choices=(STOCHASTIC, DETERMINISTIC), default=STOCHASTIC)
    sp.add_argument("--no-clip", action="store_true", help="do not clamp the clean-data estimate")

    sp = add("find-mixing", cmd_find_mixing, [model, data, steps], "detect t_m across start/sampler combos")
    sp.add_argument("--samples", type=int, default=200)
    sp.add_argument("--stride", type=int, default=10)
    sp.add_argument("--threshold", type=float, help="radius shift per stride (default: 4 scaled to the data dimension)")
    sp.add_argument("--absolute", action="store_true", help="fire on |delta r| instead of contractions only")
    sp.add_argument("--no-clip", action="store_true", help="do not clamp the clean-data estimate")

    sp = add("invert", cmd_invert, [model, data, steps], "DDIM-invert images")
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--tm", type=int, help="target step (default T)")
    sp.add_argument("--dump", choices=("csv", "npz"))

    sp = add("reconstruct", cmd_reconstruct, [model, data, steps], "invert then deterministically denoise")
    sp.add_argument("--n", type=int, default=100)

    sp = add("fit-boundary", cmd_fit_boundary, [model, data, steps], "fit attribute boundaries at t_m")
    sp.add_argument("--tm", type=int, required=True)
    sp.add_argument("--space", choices=(EPSILON, H, "both"), default=EPSILON)
    sp.add_argument("--attribute", action="append", help="attribute to fit (default: all)")
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--svm-epochs", type=int, default=200)
    sp.add_argument("--lam", type=float, default=1e-4)
    sp.add_argument("--test-fraction", type=float, default=0.2)

    sp = add("eval-boundary", cmd_eval_boundary, [model, data], "accuracy of boundaries on labelled data")
    sp.add_argument("--boundary", action="append", required=True)
    sp.add_argument("--n", type=int, default=200)

    sp = add("edit", cmd_edit, [model, data, steps, edit], "boundary-guided edit of real images")
    sp.add_argument("--index", type=int, action="append", help="image index in the dataset; repeat for several")
    sp.add_argument("--n", type=int, default=16, help="edit the first n images when --index is absent")

    sp = add("sample", cmd_sample, [model, steps, edit], "sample new images with an optional edit at t_m")
    sp.add_argument("--n", type=int, default=16)

    sp = add("sweep", cmd_sweep, [model, data, edit], "edit one batch over a grid of strengths")
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--span", type=float, default=6.0)
    sp.add_argument("--points", type=int, default=7)
    sp.add_argument("--reference", type=int, default=500, help="reference images for the nearest-neighbour score")
    sp.add_argument("--degradation", type=float, help="flag outputs whose nearest-neighbour RMSE exceeds this")

    sp = add("verify-geometry", cmd_verify_geometry, [], "Monte Carlo checks of high-dimensional geometry")
    sp.add_argument("--quick", action="store_true")

    sp = add("verify-mixing", cmd_verify_mixing, [], "exact checks of TV distance and mixing times")
    sp.add_argument("--quick", action="store_true")

    sp = add("report", cmd_report, [], "summarize the run manifests in a directory")
    sp.add_argument("--dir", help="directory to scan (default: the output directory)")
    return p


_EXIT = ((NotFoundError, EXIT_NOT_FOUND), (IOFailure, EXIT_IO), (ValidationError, EXIT_VALIDATION), (NumericError, EXIT_NUMERIC))


def exit_code_for(exc: BaseException) -> int:
    for cls, code in _EXIT:
        if isinstance(exc, cls):
            return code
    if isinstance(exc, FileNotFoundError):
        return EXIT_NOT_FOUND
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, FloatingPointError):
        return EXIT_NUMERIC
    return EXIT_VALIDATION


def run_command(argv=None) -> int:
    """Parse ``argv``, run the command, write its manifest; returns the exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run = Run(args, argv)
        code = args.func(run)
        run.finish()
    except (BdkError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    return code


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
