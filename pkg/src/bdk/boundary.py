"""Linear semantic boundaries in latent space.

Latents at the mixing step (either the state ``x_{t_m}`` itself or the
network's bottleneck activation there) are labelled with their source
image's attributes, and a linear SVM separates the two classes. The fitted
weight vector is normalized to a unit normal ``n`` with the bias rescaled to
match, so ``signed_distance(x) = n . x + b`` is a Euclidean distance to the
hyperplane.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from bdk import rng as rngmod
from bdk.errors import ChecksumError, DimensionError, IOFailure, NotFoundError, ValidationError
from bdk.noise_model import NoisePredictor
from bdk.schedule import INVERT, NoiseSchedule, make_step_plan
from bdk.trajectory import ddim_invert

EPSILON, H = "epsilon", "h"
SPACES = (EPSILON, H)


@dataclass
class LatentDataset:
    latents: np.ndarray  # (n, k)
    labels: dict[str, np.ndarray]  # attribute -> (n,) in {0, 1}
    space: str
    t_m: int

    def __post_init__(self):
        self.latents = np.atleast_2d(np.asarray(self.latents, dtype=np.float64))
        if self.space not in SPACES:
            raise ValidationError(f"unknown latent space {self.space!r}")
        for a, y in self.labels.items():
            if len(y) != len(self.latents):
                raise DimensionError(f"{len(y)} labels for {a!r} but {len(self.latents)} latents")

    def __len__(self):
        return len(self.latents)

    def subset(self, idx) -> "LatentDataset":
        idx = np.asarray(idx)
        return LatentDataset(self.latents[idx], {a: y[idx] for a, y in self.labels.items()}, self.space, self.t_m)


def latents_at(predictor: NoisePredictor, schedule: NoiseSchedule, images, t_m: int, n_steps: int | None = None):
    """Deterministic inversion of ``images`` to ``t_m`` (unit stride by default)."""
    if not 1 <= t_m <= schedule.T:
        raise ValidationError(f"t_m={t_m} outside [1, {schedule.T}]")
    plan = make_step_plan(schedule, n_steps or t_m, t_m, INVERT)
    return ddim_invert(predictor, schedule, images, plan).x


def assemble_latent_dataset(
    predictor: NoisePredictor,
    schedule: NoiseSchedule,
    images,
    labels: dict[str, np.ndarray],
    t_m: int,
    space: str = EPSILON,
    n_steps: int | None = None,
) -> LatentDataset:
    """Invert labelled images to ``t_m`` and keep either ``x_{t_m}`` or its bottleneck activation."""
    if not predictor.trained:
        raise ValidationError("boundary latents need a trained model")
    if not labels:
        raise ValidationError("no attribute labels given")
    if space not in SPACES:
        raise ValidationError(f"unknown latent space {space!r}")
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    x = latents_at(predictor, schedule, images, t_m, n_steps)
    if space == H:
        _, x, _ = predictor.forward(x, t_m)
    return LatentDataset(x, {a: np.asarray(y).astype(np.int8) for a, y in labels.items()}, space, t_m)


@dataclass
class SVMConfig:
    epochs: int = 200
    lam: float = 1e-4
    seed: int = 0
    use_bias: bool = True
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be at least 1")
        if self.lam <= 0:
            raise ValidationError("regularization must be positive")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValidationError("test_fraction must lie in [0, 1)")


@dataclass
class Boundary:
    normal: np.ndarray
    bias: float
    attribute: str
    space: str
    t_m: int
    train_accuracy: float = float("nan")
    test_accuracy: float = float("nan")
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64)
        if self.space not in SPACES:
            raise ValidationError(f"unknown latent space {self.space!r}")
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise ValidationError("boundary normal must have unit length")

    @property
    def dim(self) -> int:
        return self.normal.size

    def flipped(self) -> "Boundary":
        """Same hyperplane with the positive side swapped."""
        return Boundary(
            -self.normal, -self.bias, self.attribute, self.space, self.t_m,
            1.0 - self.train_accuracy, 1.0 - self.test_accuracy, dict(self.config),
        )


def split_indices(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed seeded shuffle; the first ``round(test_fraction * n)`` indices are held out."""
    perm = rngmod.stream(seed, "split").permutation(n)
    k = int(round(test_fraction * n))
    return np.sort(perm[k:]), np.sort(perm[:k])


def pegasos(X, y, lam: float, epochs: int, rng: np.random.Generator, use_bias: bool = True):
    """Primal hinge-loss SVM by stochastic subgradient steps with projection.

    ``y`` in {-1, +1}. Step ``k`` uses rate ``1 / (lam k)``; the bias is learned
    as the weight of a constant feature. Returns ``(w, b)``.
    """
    X = np.asarray(X, dtype=np.float64)
    if use_bias:
        X = np.hstack([X, np.ones((len(X), 1))])
    n, p = X.shape
    w = np.zeros(p)
    radius = 1.0 / np.sqrt(lam)
    k = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            k += 1
            eta = 1.0 / (lam * k)
            margin = y[i] * (X[i] @ w)
            w *= 1.0 - eta * lam
            if margin < 1.0:
                w += eta * y[i] * X[i]
            norm = np.linalg.norm(w)
            if norm > radius:
                w *= radius / norm
    if use_bias:
        return w[:-1], float(w[-1])
    return w, 0.0


def signed_distance(boundary: Boundary, x) -> np.ndarray | float:
    """``n . x + b`` for one latent or a batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != boundary.dim:
        raise DimensionError(f"latent dimension {x.shape[-1]} != boundary dimension {boundary.dim}")
    d = x @ boundary.normal + boundary.bias
    return float(d) if np.ndim(d) == 0 else d


def _accuracy(boundary: Boundary, X, y) -> float:
    pred = (signed_distance(boundary, X) > 0).astype(int)
    return float((pred == y).mean())


def fit_boundary(dataset: LatentDataset, attribute: str, config: SVMConfig | None = None) -> Boundary:
    """Fit a linear SVM for ``attribute`` on the training part of a fixed split."""
    config = config or SVMConfig()
    if attribute not in dataset.labels:
        raise NotFoundError(f"dataset has no labels for {attribute!r}")
    y = np.asarray(dataset.labels[attribute]).astype(int)
    if len(np.unique(y)) < 2:
        raise ValidationError(f"attribute {attribute!r} has a single class")
    train, test = split_indices(len(dataset), config.test_fraction, config.seed)
    if len(np.unique(y[train])) < 2:
        raise ValidationError("the training split holds a single class")
    X = dataset.latents
    w, b = pegasos(X[train], 2 * y[train] - 1, config.lam, config.epochs, rngmod.stream(config.seed, "svm"), config.use_bias)
    norm = np.linalg.norm(w)
    if norm == 0.0:
        raise ValidationError("the SVM weight vector vanished; the classes are not separable at all")
    bd = Boundary(w / norm, b / norm, attribute, dataset.space, dataset.t_m, config=asdict(config))
    bd.train_accuracy = _accuracy(bd, X[train], y[train])
    bd.test_accuracy = _accuracy(bd, X[test], y[test]) if len(test) else float("nan")
    return bd


def evaluate_boundary(boundary: Boundary, dataset: LatentDataset) -> float:
    """Share of latents on the side of the hyperplane that matches their label."""
    if len(dataset) == 0:
        raise ValidationError("empty dataset")
    if dataset.space != boundary.space:
        raise ValidationError(f"boundary lives in {boundary.space!r}, dataset in {dataset.space!r}")
    if boundary.attribute not in dataset.labels:
        raise NotFoundError(f"dataset has no labels for {boundary.attribute!r}")
    return _accuracy(boundary, dataset.latents, np.asarray(dataset.labels[boundary.attribute]).astype(int))


def sample_size_sweep(dataset: LatentDataset, attribute: str, sizes, config: SVMConfig | None = None, holdout=None):
    """Held-out accuracy when fitting on the first ``m`` latents, for each ``m`` in ``sizes``.

    ``holdout`` is a separate :class:`LatentDataset` used for scoring; by default
    every latent beyond the largest size is held out.
    """
    config = config or SVMConfig()
    sizes = sorted(int(m) for m in sizes)
    if holdout is None:
        holdout = dataset.subset(np.arange(sizes[-1], len(dataset)))
    out = []
    for m in sizes:
        cfg = SVMConfig(config.epochs, config.lam, config.seed, config.use_bias, test_fraction=0.0)
        bd = fit_boundary(dataset.subset(np.arange(m)), attribute, cfg)
        out.append((m, evaluate_boundary(bd, holdout)))
    return out


# --- multiple boundaries -------------------------------------------------------


@dataclass
class MultiBoundary:
    normals: np.ndarray  # (m, k)
    biases: np.ndarray  # (m,)
    attributes: list[str]
    space: str
    t_m: int

    def __post_init__(self):
        self.normals = np.atleast_2d(np.asarray(self.normals, dtype=np.float64))
        self.biases = np.asarray(self.biases, dtype=np.float64).reshape(-1)
        if np.any(np.abs(np.linalg.norm(self.normals, axis=1) - 1.0) > 1e-9):
            raise ValidationError("every normal must have unit length")
        if not (len(self.normals) == len(self.biases) == len(self.attributes)):
            raise DimensionError("normals, biases and attributes must have equal length")

    def __len__(self):
        return len(self.attributes)

    def boundary(self, i: int) -> Boundary:
        return Boundary(self.normals[i], float(self.biases[i]), self.attributes[i], self.space, self.t_m)

    def signed_distances(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.normals.shape[1]:
            raise DimensionError("latent dimension does not match the boundaries")
        return x @ self.normals.T + self.biases

    def cosine_similarities(self) -> np.ndarray:
        return self.normals @ self.normals.T


def stack_boundaries(boundaries: list[Boundary]) -> MultiBoundary:
    """Row-stack boundaries that share a space and a mixing step, keeping their order."""
    if not boundaries:
        raise ValidationError("need at least one boundary")
    first = boundaries[0]
    for b in boundaries[1:]:
        if b.space != first.space:
            raise ValidationError("cannot stack boundaries from different latent spaces")
        if b.t_m != first.t_m:
            raise ValidationError("cannot stack boundaries fitted at different steps")
        if b.dim != first.dim:
            raise DimensionError("boundary dimensions differ")
    return MultiBoundary(
        np.stack([b.normal for b in boundaries]),
        np.array([b.bias for b in boundaries]),
        [b.attribute for b in boundaries],
        first.space,
        first.t_m,
    )


# --- boundary file -----------------------------------------------------------
#
# Plain text, one "key = value" per line; the normal is written as
# space-separated floats (repr, so it round-trips exactly). The last line is
# "checksum = <sha256 of every preceding byte>".

_HEADER = "# bdk boundary v1"


def boundary_text(boundary: Boundary) -> str:
    lines = [
        _HEADER,
        f"attribute = {boundary.attribute}",
        f"space = {boundary.space}",
        f"t_m = {boundary.t_m}",
        f"dim = {boundary.dim}",
        f"bias = {float(boundary.bias)!r}",
        f"train_accuracy = {float(boundary.train_accuracy)!r}",
        f"test_accuracy = {float(boundary.test_accuracy)!r}",
        f"config = {json.dumps(boundary.config, sort_keys=True)}",
        "normal = " + " ".join(repr(float(v)) for v in boundary.normal),
    ]
    body = "\n".join(lines) + "\n"
    return body + f"checksum = {hashlib.sha256(body.encode()).hexdigest()}\n"


def save_boundary(boundary: Boundary, path) -> None:
    try:
        Path(path).write_text(boundary_text(boundary))
    except OSError as exc:
        raise IOFailure(f"cannot write boundary {path}: {exc}") from exc


def parse_boundary(text: str) -> Boundary:
    if not text.startswith(_HEADER):
        raise ValidationError("not a boundary file")
    body, sep, tail = text.rpartition("checksum = ")
    if not sep:
        raise ChecksumError("boundary file has no checksum line")
    if hashlib.sha256(body.encode()).hexdigest() != tail.strip():
        raise ChecksumError("boundary checksum mismatch")
    fields = {}
    for line in body.splitlines()[1:]:
        key, _, value = line.partition(" = ")
        fields[key] = value
    try:
        normal = np.array([float(v) for v in fields["normal"].split()])
        if normal.size != int(fields["dim"]):
            raise ValidationError("normal length does not match dim")
        return Boundary(
            normal,
            float(fields["bias"]),
            fields["attribute"],
            fields["space"],
            int(fields["t_m"]),
            float(fields["train_accuracy"]),
            float(fields["test_accuracy"]),
            json.loads(fields["config"]),
        )
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"malformed boundary file: {exc}") from exc


def load_boundary(path) -> Boundary:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IOFailure(f"cannot read boundary {path}: {exc}") from exc
    return parse_boundary(text)
