"""Fully connected noise predictor with an addressable bottleneck.

The network maps ``[x_t, emb(t)] -> eps_hat`` through SiLU hidden layers. One
hidden layer is designated the bottleneck; its post-activation output is the
``h`` vector that can be read out or overridden during a forward pass.

With ``gated_skip`` enabled the output also receives ``g(t) * x_t`` where the
scalar gate ``g`` is linear in the time embedding. The gate plays the role of a
U-Net's long skip connections: it lets the near-identity part of the noise
estimate bypass the bottleneck, so ``h`` only has to carry data structure.

Parameters live in one flat float32 vector (the checkpoint payload). Layout:
per layer ``W (fan_in x fan_out)`` row-major then ``b (fan_out)``; then the
gate weights ``(E,)`` and gate bias ``(1,)`` when the gate is enabled. The
first layer's fan-in is ``d + E``. With ``E = 0`` and no gate the parameter
count is exactly ``sum((fan_in + 1) * fan_out)`` over ``layer_sizes``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from bdk import rng as rngmod
from bdk.errors import (
    ChecksumError,
    DimensionError,
    IOFailure,
    MagicError,
    NumericError,
    TruncatedFileError,
    ValidationError,
    VersionError,
)
from bdk.schedule import NoiseSchedule, make_linear_schedule


# exp(-z) overflows to inf for z << 0, which gives the correct limit (0), so
# the warning is silenced rather than the formula changed.


def silu(z):
    with np.errstate(over="ignore"):
        return z / (1.0 + np.exp(-z))


def silu_grad(z):
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def time_embedding(t, dim: int, horizon: int) -> np.ndarray:
    """Sinusoidal features of step ``t``; frequencies span 1/4 to horizon/8 cycles per chain."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if dim == 0:
        return np.zeros((len(t), 0))
    half = dim // 2
    freqs = np.geomspace(0.25, max(horizon / 8.0, 0.5), half)
    ang = 2.0 * np.pi * t[:, None] * freqs[None, :] / horizon
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, t[:, None] / horizon], axis=1)
    return emb


@dataclass(eq=False)
class NoisePredictor:
    layer_sizes: tuple[int, ...]
    params: np.ndarray
    time_embed_dim: int = 32
    bottleneck_index: int = 2
    time_horizon: int = 100
    gated_skip: bool = True
    trained: bool = False
    _shapes: list = field(init=False, repr=False)

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        self._shapes = _layer_shapes(self.layer_sizes, self.time_embed_dim)
        self.params = np.asarray(self.params, dtype=np.float32)
        if self.params.shape != (self.n_params,):
            raise DimensionError(f"expected {self.n_params} parameters, got {self.params.shape}")

    @property
    def d(self) -> int:
        return self.layer_sizes[0]

    @property
    def h_dim(self) -> int:
        return self.layer_sizes[self.bottleneck_index]

    @property
    def n_params(self) -> int:
        n = sum((fi + 1) * fo for fi, fo in self._shapes)
        if self.gated_skip:
            n += self.time_embed_dim + 1
        return n

    def copy(self) -> "NoisePredictor":
        return NoisePredictor(
            self.layer_sizes,
            self.params.copy(),
            self.time_embed_dim,
            self.bottleneck_index,
            self.time_horizon,
            self.gated_skip,
            self.trained,
        )

    def unpack(self, params=None):
        """Split a flat vector into ``[(W, b), ...]`` and the gate ``(w, b)`` (views)."""
        p = self.params if params is None else params
        layers, pos = [], 0
        for fi, fo in self._shapes:
            W = p[pos : pos + fi * fo].reshape(fi, fo)
            pos += fi * fo
            layers.append((W, p[pos : pos + fo]))
            pos += fo
        gate = None
        if self.gated_skip:
            E = self.time_embed_dim
            gate = (p[pos : pos + E], p[pos + E : pos + E + 1])
        return layers, gate

    # -- forward / backward ------------------------------------------------

    def forward(self, x, t, h_override=None, params=None):
        """Run the network; returns ``(eps_hat, h, cache)`` with batch-shaped outputs."""
        p = (self.params if params is None else params).astype(np.float64, copy=False)
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        if X.shape[1] != self.d:
            raise DimensionError(f"input dimension {X.shape[1]} != model dimension {self.d}")
        n = len(X)
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        if np.any(tt < 1) or np.any(tt > self.time_horizon):
            raise ValidationError(f"step outside [1, {self.time_horizon}]")
        emb = time_embedding(tt, self.time_embed_dim, self.time_horizon)
        if h_override is not None:
            h_override = np.atleast_2d(np.asarray(h_override, dtype=np.float64))
            if h_override.shape[1] != self.h_dim:
                raise DimensionError(f"h override has dimension {h_override.shape[1]}, bottleneck is {self.h_dim}")
            h_override = np.broadcast_to(h_override, (n, self.h_dim))
        layers, gate = self.unpack(p)
        a = np.concatenate([X, emb], axis=1)
        acts, pre = [a], []
        h = None
        last = len(layers) - 1
        for i, (W, b) in enumerate(layers):
            z = acts[-1] @ W + b
            pre.append(z)
            a = z if i == last else silu(z)
            if i + 1 == self.bottleneck_index:
                h = a
                if h_override is not None:
                    a = np.array(h_override)
            acts.append(a)
        out = acts[-1]
        g = None
        if gate is not None:
            g = emb @ gate[0] + gate[1][0]
            out = out + g[:, None] * X
        cache = {"acts": acts, "pre": pre, "emb": emb, "x": X, "gate": g, "overridden": h_override is not None}
        if single:
            return out[0], h[0], cache
        return out, h, cache

    def backward(self, cache, grad_out, params=None):
        """Gradients w.r.t. the flat parameters and the input ``x`` for upstream ``grad_out``."""
        p = (self.params if params is None else params).astype(np.float64, copy=False)
        layers, gate = self.unpack(p)
        G = np.atleast_2d(grad_out)
        acts, pre, X, emb = cache["acts"], cache["pre"], cache["x"], cache["emb"]
        grads = []
        gx = np.zeros_like(X)
        if gate is not None:
            gx += cache["gate"][:, None] * G
            dg = np.einsum("nd,nd->n", G, X)
            g_gate = (emb.T @ dg, np.array([dg.sum()]))
        delta = G
        last = len(layers) - 1
        for i in range(last, -1, -1):
            W, _ = layers[i]
            if i + 1 == self.bottleneck_index and cache["overridden"]:
                # the override severs everything up to and including the bottleneck layer
                for j in range(i, -1, -1):
                    grads.append((np.zeros_like(layers[j][0]), np.zeros_like(layers[j][1])))
                delta = None
                break
            if i != last:
                delta = delta * silu_grad(pre[i])
            grads.append((acts[i].T @ delta, delta.sum(axis=0)))
            delta = delta @ W.T
        grads.reverse()
        flat = [np.concatenate([gW.ravel(), gb]) for gW, gb in grads]
        if gate is not None:
            flat.append(np.concatenate(g_gate))
        if delta is not None:
            gx += delta[:, : self.d]
        return np.concatenate(flat), gx


def _layer_shapes(layer_sizes, time_embed_dim):
    sizes = list(layer_sizes)
    sizes[0] = sizes[0] + time_embed_dim
    return list(zip(sizes[:-1], sizes[1:]))


def init_predictor(
    layer_sizes,
    time_embed_dim: int = 32,
    seed: int = 0,
    bottleneck_index: int | None = None,
    time_horizon: int = 100,
    gated_skip: bool = True,
) -> NoisePredictor:
    """Fresh predictor with LeCun-scaled uniform weights.

    Weights are ``U(-sqrt(3 / fan_in), sqrt(3 / fan_in))`` (unit-variance
    preserving), biases and gate start at zero. The bottleneck defaults to the
    narrowest hidden layer and must be narrower than the data dimension.
    """
    sizes = tuple(int(n) for n in layer_sizes)
    if len(sizes) < 3:
        raise ValidationError("need input, at least one hidden layer, and output")
    if sizes[0] != sizes[-1]:
        raise ValidationError("input and output dimension must both equal the data dimension")
    if min(sizes) < 1 or time_embed_dim < 0:
        raise ValidationError("layer sizes must be positive")
    if bottleneck_index is None:
        hidden = sizes[1:-1]
        bottleneck_index = 1 + int(np.argmin(hidden))
    if not 1 <= bottleneck_index <= len(sizes) - 2:
        raise ValidationError("bottleneck must be a hidden layer")
    if sizes[bottleneck_index] >= sizes[0]:
        raise ValidationError(f"bottleneck width {sizes[bottleneck_index]} must be below data dimension {sizes[0]}")
    gen = rngmod.stream(seed, "init")
    chunks = []
    for fi, fo in _layer_shapes(sizes, time_embed_dim):
        bound = np.sqrt(3.0 / fi)
        chunks.append(gen.uniform(-bound, bound, fi * fo))
        chunks.append(np.zeros(fo))
    if gated_skip:
        chunks.append(np.zeros(time_embed_dim + 1))
    params = np.concatenate(chunks).astype(np.float32)
    return NoisePredictor(sizes, params, time_embed_dim, bottleneck_index, time_horizon, gated_skip)


def predict_noise(predictor: NoisePredictor, x_t, t):
    """``(eps_hat, h)`` for one latent or a batch."""
    eps, h, _ = predictor.forward(x_t, t)
    return eps, h


def predict_noise_with_injection(predictor: NoisePredictor, x_t, t, h_override):
    """Noise estimate with the bottleneck activation replaced by ``h_override``."""
    eps, _, _ = predictor.forward(x_t, t, h_override=h_override)
    return eps


def default_architecture(d: int, hidden: int | None = None, bottleneck: int | None = None) -> tuple[int, ...]:
    """``(d, hidden, d/8, hidden, d)``; the d/8 bottleneck mirrors a ~1:6 h-to-data ratio."""
    hidden = hidden or 2 * d
    bottleneck = bottleneck or max(1, d // 8)
    return (d, hidden, bottleneck, hidden, d)


# --- training -------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 0.05
    seed: int = 0
    loss: str = "mse"

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be at least 1")
        if self.loss != "mse":
            raise ValidationError("only the mean-squared noise loss is supported")


def noise_loss_and_grad(predictor: NoisePredictor, params, x_t, t, noise):
    """Mean over batch and coordinates of ``(eps_hat - noise)^2`` and its parameter gradient."""
    out, _, cache = predictor.forward(x_t, t, params=params)
    diff = out - noise
    m = diff.size
    loss = float(np.sum(diff * diff) / m)
    g, _ = predictor.backward(cache, 2.0 * diff / m, params=params)
    return loss, g


def train_predictor(predictor: NoisePredictor, dataset, schedule: NoiseSchedule, config: TrainConfig, log=None):
    """Plain minibatch SGD on the simplified noise-matching objective.

    Each minibatch draws ``t ~ U{1..T}`` and ``noise ~ N(0, I)`` per example from
    the epoch's stream. Returns ``(trained copy, per-epoch mean loss)``.
    Parameters are kept float32 after every step so checkpoints are exact.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or len(data) == 0:
        raise ValidationError("dataset must be a non-empty (n, d) array")
    if data.shape[1] != predictor.d:
        raise DimensionError(f"data dimension {data.shape[1]} != model dimension {predictor.d}")
    if schedule.T != predictor.time_horizon:
        raise ValidationError(f"schedule T={schedule.T} != model horizon {predictor.time_horizon}")
    model = predictor.copy()
    params = model.params.astype(np.float64)
    n = len(data)
    bs = min(config.batch_size, n)
    sqrt_ab = np.sqrt(schedule.alpha_bar)
    sqrt_1m = np.sqrt(1.0 - schedule.alpha_bar)
    curve = []
    for epoch in range(config.epochs):
        gen = rngmod.stream(config.seed, "train", epoch)
        order = gen.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            x0 = data[idx]
            t = gen.integers(1, schedule.T + 1, len(idx))
            noise = gen.standard_normal(x0.shape)
            x_t = sqrt_ab[t - 1, None] * x0 + sqrt_1m[t - 1, None] * noise
            loss, g = noise_loss_and_grad(model, params, x_t, t, noise)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {batches}")
            params = (params - config.learning_rate * g).astype(np.float32).astype(np.float64)
            total += loss
            batches += 1
        curve.append(total / batches)
        if log is not None:
            log(epoch, curve[-1])
    model.params = params.astype(np.float32)
    model.trained = model.trained or config.epochs > 0
    return model, np.array(curve)


# --- checkpoint file ---------------------------------------------------------
#
# "BDKT" | u32 version
# schedule:     u32 T | f64 beta_start | f64 beta_end | f64 eta
# architecture: u32 n_layers | u32 sizes[n] | u32 time_embed_dim | u32 bottleneck_index
#               | u32 time_horizon | u32 gated_skip | u32 trained
# payload:      u64 n_params | f32 params[n_params]   (all little-endian)
# trailer:      u64 checksum (first 8 bytes of BLAKE2b over everything above)

MAGIC = b"BDKT"
VERSION = 1


def _checksum(blob: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


def checkpoint_bytes(predictor: NoisePredictor, schedule: NoiseSchedule) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    parts.append(struct.pack("<Iddd", schedule.T, schedule.beta_start, schedule.beta_end, schedule.eta))
    sizes = predictor.layer_sizes
    parts.append(struct.pack(f"<I{len(sizes)}I", len(sizes), *sizes))
    parts.append(
        struct.pack(
            "<IIIII",
            predictor.time_embed_dim,
            predictor.bottleneck_index,
            predictor.time_horizon,
            int(predictor.gated_skip),
            int(predictor.trained),
        )
    )
    parts.append(struct.pack("<Q", predictor.n_params))
    parts.append(predictor.params.astype("<f4").tobytes())
    blob = b"".join(parts)
    return blob + struct.pack("<Q", _checksum(blob))


def save_checkpoint(predictor: NoisePredictor, schedule: NoiseSchedule, path) -> None:
    try:
        Path(path).write_bytes(checkpoint_bytes(predictor, schedule))
    except OSError as exc:
        raise IOFailure(f"cannot write checkpoint {path}: {exc}") from exc


def parse_checkpoint(raw: bytes):
    if raw[:4] != MAGIC:
        raise MagicError("bad magic bytes; not a checkpoint file")
    if len(raw) < 8:
        raise TruncatedFileError("checkpoint ends inside the header")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    try:
        pos = 8
        T, b0, b1, eta = struct.unpack_from("<Iddd", raw, pos)
        pos += struct.calcsize("<Iddd")
        (n_layers,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if not 3 <= n_layers <= 64:
            raise ChecksumError(f"implausible layer count {n_layers}")
        sizes = struct.unpack_from(f"<{n_layers}I", raw, pos)
        pos += 4 * n_layers
        E, bidx, horizon, gated, trained = struct.unpack_from("<IIIII", raw, pos)
        pos += 20
        (n_params,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
    except struct.error as exc:
        raise TruncatedFileError("checkpoint ends inside the header") from exc
    end = pos + 4 * n_params
    if len(raw) != end + 8:
        raise TruncatedFileError(f"checkpoint payload has {len(raw) - pos} bytes, expected {4 * n_params + 8}")
    (stored,) = struct.unpack_from("<Q", raw, end)
    if stored != _checksum(raw[:end]):
        raise ChecksumError("checkpoint checksum mismatch")
    params = np.frombuffer(raw, "<f4", n_params, pos).astype(np.float32)
    try:
        schedule = make_linear_schedule(T, b0, b1, eta)
        model = NoisePredictor(sizes, params, E, bidx, horizon, bool(gated), bool(trained))
    except (ValidationError, DimensionError) as exc:
        raise ChecksumError(f"checkpoint content is inconsistent: {exc}") from exc
    return model, schedule


def load_checkpoint(path):
    """Read ``(NoisePredictor, NoiseSchedule)`` back from :func:`save_checkpoint` output."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(raw)


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
