"""Procedural labelled sprites and the matching attribute oracle.

Every sprite is a ``side x side`` canvas (optionally tinted into 3 channels)
built from three binary attributes:

``marker``     a bright square patch near the top-left corner (present/absent)
``stripes``    horizontal (positive) vs vertical (negative) sinusoidal stripes
``intensity``  bright (positive) vs dark (negative) global offset

Pixels are clamped to [-1, 1] and flattened row-major as ``(row, col, channel)``.
The oracle reads each attribute back with a thresholded statistic; values in
the dead band between the two thresholds are reported as undecided.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from bdk import rng as rngmod
from bdk.errors import IOFailure, MagicError, NotFoundError, ValidationError

ATTRIBUTES = ("marker", "stripes", "intensity")

POSITIVE, NEGATIVE, UNDECIDED = 1, 0, -1

MARKER_SIZE = 5
MARKER_OFFSET = 2
MARKER_VALUE = 0.95
STRIPE_PERIOD = 4.0
# a canvas flatter than this carries no readable attribute
MIN_CONTRAST = 0.05

_THRESHOLDS = {
    # attribute: (negative if stat <= lo, positive if stat >= hi)
    "marker": (0.25, 0.45),
    "stripes": (-0.3, 0.3),
    "intensity": (-0.1, 0.1),
}

_TINT = np.array([1.0, 0.8, 0.6])


@dataclass
class SpriteConfig:
    side: int = 16
    channels: int = 1
    attributes: tuple[str, ...] = ATTRIBUTES
    jitter: dict = field(
        default_factory=lambda: {"marker_shift": 1, "marker_amp": 0.05, "stripe_amp": 0.05, "offset_amp": 0.05}
    )
    seed: int = 0
    stripe_amplitude: float = 0.3
    offset: float = 0.25

    def __post_init__(self):
        self.attributes = tuple(self.attributes)
        if self.side < 8:
            raise ValidationError("side must be at least 8")
        if self.channels not in (1, 3):
            raise ValidationError("channels must be 1 or 3")
        if not self.attributes:
            raise ValidationError("need at least one attribute")
        for a in self.attributes:
            if a not in ATTRIBUTES:
                raise ValidationError(f"unknown attribute {a!r}")

    @property
    def dim(self) -> int:
        return self.side * self.side * self.channels


@dataclass
class SpriteDataset:
    config: SpriteConfig
    images: np.ndarray  # (n, d) float64 in [-1, 1]
    labels: dict[str, np.ndarray]  # attribute -> (n,) int8 in {0, 1}

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "SpriteDataset":
        idx = np.asarray(idx)
        return SpriteDataset(self.config, self.images[idx], {k: v[idx] for k, v in self.labels.items()})


def _balanced(gen: np.random.Generator, n: int) -> np.ndarray:
    return gen.permutation(np.arange(n) % 2).astype(np.int8)


def _render(cfg: SpriteConfig, flags: dict[str, int], gen: np.random.Generator) -> np.ndarray:
    s = cfg.side
    jit = cfg.jitter
    offset = cfg.offset * (1 if flags.get("intensity", 0) else -1)
    offset += gen.uniform(-jit["offset_amp"], jit["offset_amp"])
    amp = cfg.stripe_amplitude + gen.uniform(-jit["stripe_amp"], jit["stripe_amp"])
    phase = gen.uniform(0, 2 * np.pi)
    wave = amp * np.sin(2 * np.pi * np.arange(s) / STRIPE_PERIOD + phase)
    if flags.get("stripes", 0):
        canvas = offset + np.repeat(wave[:, None], s, axis=1)
    else:
        canvas = offset + np.repeat(wave[None, :], s, axis=0)
    if flags.get("marker", 0):
        k = jit["marker_shift"]
        r0 = MARKER_OFFSET + gen.integers(-k, k + 1)
        c0 = MARKER_OFFSET + gen.integers(-k, k + 1)
        val = MARKER_VALUE + gen.uniform(-jit["marker_amp"], jit["marker_amp"])
        canvas[r0 : r0 + MARKER_SIZE, c0 : c0 + MARKER_SIZE] = val
    canvas = np.clip(canvas, -1.0, 1.0)
    if cfg.channels == 3:
        canvas = canvas[:, :, None] * _TINT
    return canvas.reshape(-1)


def generate_sprite_dataset(config: SpriteConfig, n: int) -> SpriteDataset:
    """Render ``n`` sprites with exactly balanced labels, deterministic in ``config.seed``."""
    if n < 1:
        raise ValidationError("n must be at least 1")
    label_gen = rngmod.stream(config.seed, "data", 0)
    labels = {a: _balanced(label_gen, n) for a in config.attributes}
    images = np.empty((n, config.dim))
    for i in range(n):
        gen = rngmod.stream(config.seed, "data", 1, i)
        images[i] = _render(config, {a: int(labels[a][i]) for a in config.attributes}, gen)
    # float32-exact so the dataset file round-trips bitwise
    images = images.astype(np.float32).astype(np.float64)
    return SpriteDataset(config, images, labels)


def _grey(image: np.ndarray, side: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    d = image.shape[-1]
    channels = d // (side * side)
    if channels * side * side != d:
        raise ValidationError(f"image of size {d} does not fit side {side}")
    img = image.reshape(image.shape[:-1] + (side, side, channels))
    if channels == 3:
        return img @ (_TINT / (_TINT @ _TINT))
    return img[..., 0]


def attribute_score(image, attribute: str, side: int = 16) -> np.ndarray:
    """Continuous statistic the oracle thresholds; larger means more positive.

    Accepts one flattened image or a batch ``(n, d)``.
    """
    if attribute not in _THRESHOLDS:
        raise NotFoundError(f"unknown attribute {attribute!r}")
    g = _grey(image, side)
    zone = MARKER_OFFSET + 1 + MARKER_SIZE  # marker never reaches past this row/col
    if attribute == "marker":
        lo, hi = MARKER_OFFSET + 1, MARKER_OFFSET + MARKER_SIZE - 1
        core = g[..., lo:hi, lo:hi].mean(axis=(-1, -2))
        mask = np.ones((side, side), bool)
        mask[:zone, :zone] = False
        return core - g[..., mask].mean(axis=-1)
    if attribute == "intensity":
        return np.median(g[..., zone:, :].reshape(g.shape[:-2] + (-1,)), axis=-1)
    bottom = g[..., zone:, :]
    rows = bottom.mean(axis=-1).var(axis=-1)
    cols = bottom.mean(axis=-2).var(axis=-1)
    return (rows - cols) / (rows + cols + 1e-3)


def attribute_oracle(image, attribute: str, side: int = 16):
    """``POSITIVE`` (1), ``NEGATIVE`` (0) or ``UNDECIDED`` (-1), per image."""
    stat = attribute_score(image, attribute, side)
    lo, hi = _THRESHOLDS[attribute]
    out = np.where(stat >= hi, POSITIVE, np.where(stat <= lo, NEGATIVE, UNDECIDED))
    flat = np.asarray(image, dtype=np.float64).std(axis=-1) < MIN_CONTRAST
    out = np.where(flat, UNDECIDED, out)
    return int(out) if out.ndim == 0 else out.astype(int)


# --- dataset file: "BDDS" | u32 version | u32 header length | JSON header | f32 images | u8 labels

_MAGIC = b"BDDS"
_VERSION = 1


def save_dataset(ds: SpriteDataset, path) -> None:
    n, d = ds.images.shape
    header = {"config": asdict(ds.config), "n": n, "d": d, "attributes": list(ds.labels)}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", _VERSION, len(blob)) + blob)
        fh.write(ds.images.astype("<f4").tobytes())
        for a in header["attributes"]:
            fh.write(ds.labels[a].astype(np.uint8).tobytes())


def load_dataset(path) -> SpriteDataset:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read dataset {path}: {exc}") from exc
    if raw[:4] != _MAGIC:
        raise MagicError(f"{path} is not a sprite dataset file")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise MagicError(f"unsupported dataset version {version}")
    header = json.loads(raw[12 : 12 + hlen])
    n, d = header["n"], header["d"]
    pos = 12 + hlen
    need = pos + 4 * n * d + n * len(header["attributes"])
    if len(raw) < need:
        raise IOFailure(f"dataset {path} is truncated")
    images = np.frombuffer(raw, "<f4", n * d, pos).reshape(n, d).astype(np.float64)
    pos += 4 * n * d
    labels = {}
    for a in header["attributes"]:
        labels[a] = np.frombuffer(raw, np.uint8, n, pos).astype(np.int8)
        pos += n
    cfg = header["config"]
    cfg["attributes"] = tuple(cfg["attributes"])
    return SpriteDataset(SpriteConfig(**cfg), images, labels)
