"""Trainable projection head over frozen backbone embeddings.

Nonlinear mode: linear(D -> D) -> GELU -> dropout -> linear(D -> out) ->
L2 normalize. Linear mode: a single linear(D -> out) followed by the same
L2 normalization. GELU uses the exact erf form. Dropout is inverted
(activations scaled by 1/(1-p) at train time) so evaluation applies no
rescaling.

All arithmetic is float64; the forward pass caches everything the analytic
backward pass needs, including the dropout mask and the normalization
Jacobian inputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .errors import ValidationError

NORM_EPS = 1e-12

_CKPT_MAGIC = b"HEAD"
_CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sBIIIdB")  # magic, version, D, hidden, out, dropout, mode


@dataclass(frozen=True)
class HeadConfig:
    input_dim: int
    hidden_dim: int | None = None  # nonlinear mode only; must equal input_dim
    output_dim: int = 256
    dropout_rate: float = 0.1
    mode: str = "nonlinear"

    def __post_init__(self):
        if self.mode not in ("nonlinear", "linear"):
            raise ValidationError(f"mode must be 'nonlinear' or 'linear', got {self.mode!r}")
        if self.mode == "nonlinear" and self.hidden_dim is None:
            object.__setattr__(self, "hidden_dim", self.input_dim)
        if min(self.input_dim, self.output_dim) < 1:
            raise ValidationError("dimensions must be >= 1")
        if self.mode == "nonlinear" and self.hidden_dim != self.input_dim:
            raise ValidationError(
                f"nonlinear head requires hidden_dim == input_dim "
                f"({self.hidden_dim} != {self.input_dim})"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class HeadParams:
    """Weights; linear mode leaves w1/b1 as None and uses w2/b2 only."""

    w1: np.ndarray | None  # (hidden, D)
    b1: np.ndarray | None  # (hidden,)
    w2: np.ndarray  # (out, hidden) or (out, D) in linear mode
    b2: np.ndarray  # (out,)

    def copy(self) -> "HeadParams":
        return HeadParams(
            w1=None if self.w1 is None else self.w1.copy(),
            b1=None if self.b1 is None else self.b1.copy(),
            w2=self.w2.copy(),
            b2=self.b2.copy(),
        )

    def arrays(self) -> list[np.ndarray]:
        out = []
        if self.w1 is not None:
            out.extend([self.w1, self.b1])
        out.extend([self.w2, self.b2])
        return out


@dataclass
class HeadGrads:
    w1: np.ndarray | None
    b1: np.ndarray | None
    w2: np.ndarray
    b2: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        out = []
        if self.w1 is not None:
            out.extend([self.w1, self.b1])
        out.extend([self.w2, self.b2])
        return out


@dataclass
class ForwardTrace:
    """Cached intermediates for one forward call (a batch of rows)."""

    x: np.ndarray
    h: np.ndarray | None  # pre-GELU activations, nonlinear only
    mask: np.ndarray | None  # dropout keep-mask scaled by 1/(1-p), train only
    u: np.ndarray | None  # post-dropout hidden activations
    z: np.ndarray  # pre-normalization output
    norms: np.ndarray  # row norms of z
    guarded: np.ndarray  # rows where the norm epsilon guard fired


def init_params(config: HeadConfig, seed: int) -> HeadParams:
    """Kaiming-uniform fan-in weights (limit sqrt(6/fan_in)), zero biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    if config.mode == "nonlinear":
        lim1 = np.sqrt(6.0 / config.input_dim)
        w1 = rng.uniform(-lim1, lim1, size=(config.hidden_dim, config.input_dim))
        b1 = np.zeros(config.hidden_dim)
        lim2 = np.sqrt(6.0 / config.hidden_dim)
        w2 = rng.uniform(-lim2, lim2, size=(config.output_dim, config.hidden_dim))
    else:
        w1, b1 = None, None
        lim2 = np.sqrt(6.0 / config.input_dim)
        w2 = rng.uniform(-lim2, lim2, size=(config.output_dim, config.input_dim))
    return HeadParams(w1=w1, b1=b1, w2=w2, b2=np.zeros(config.output_dim))


def gelu(x):
    """Exact GELU: x * Phi(x), Gaussian CDF via erf."""
    x = np.asarray(x, dtype=np.float64)
    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return cdf + x * pdf


def make_dropout_mask(config: HeadConfig, n_rows: int, rng: np.random.Generator) -> np.ndarray | None:
    """Inverted-dropout keep mask for a batch, already scaled by 1/(1-p)."""
    if config.mode != "nonlinear" or config.dropout_rate == 0.0:
        return None
    keep = rng.random((n_rows, config.hidden_dim)) >= config.dropout_rate
    return keep.astype(np.float64) / (1.0 - config.dropout_rate)


def forward_batch(
    params: HeadParams,
    config: HeadConfig,
    x: np.ndarray,
    train_mode: bool = False,
    dropout_mask: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Map a batch of embeddings to unit-norm outputs, caching the trace."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise ValidationError(f"input shape {x.shape} does not match input_dim {config.input_dim}")
    if not np.isfinite(x).all():
        raise ValidationError("non-finite input to head forward")

    if config.mode == "nonlinear":
        h = x @ params.w1.T + params.b1
        g = gelu(h)
        mask = None
        if train_mode and config.dropout_rate > 0.0:
            if dropout_mask is None:
                if rng is None:
                    raise ValidationError("train-mode forward with dropout needs a mask or rng")
                dropout_mask = make_dropout_mask(config, x.shape[0], rng)
            mask = dropout_mask
            u = g * mask
        else:
            u = g
        z = u @ params.w2.T + params.b2
    else:
        h, mask, u = None, None, None
        z = x @ params.w2.T + params.b2

    norms = np.linalg.norm(z, axis=1)
    guarded = norms < NORM_EPS
    denom = np.where(guarded, NORM_EPS, norms)
    y = z / denom[:, None]
    trace = ForwardTrace(x=x, h=h, mask=mask, u=u, z=z, norms=norms, guarded=guarded)
    return y, trace


def forward(
    params: HeadParams,
    config: HeadConfig,
    x: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Single-vector convenience wrapper around forward_batch."""
    y, trace = forward_batch(params, config, np.asarray(x)[None, :], train_mode=train_mode, rng=rng)
    return y[0], trace


def backward_batch(
    trace: ForwardTrace, params: HeadParams, config: HeadConfig, grad_y: np.ndarray
) -> HeadGrads:
    """Analytic parameter gradients given dLoss/dOutput for every batch row."""
    grad_y = np.asarray(grad_y, dtype=np.float64)
    if grad_y.shape != trace.z.shape:
        raise ValidationError(f"grad shape {grad_y.shape} does not match trace {trace.z.shape}")

    denom = np.where(trace.guarded, NORM_EPS, trace.norms)
    y = trace.z / denom[:, None]
    # Jacobian of z -> z/||z||: (I - y y^T) / ||z||; guarded rows fall back to I/eps.
    inner = (y * grad_y).sum(axis=1, keepdims=True)
    grad_z = (grad_y - y * inner) / denom[:, None]
    grad_z[trace.guarded] = grad_y[trace.guarded] / NORM_EPS

    if config.mode == "nonlinear":
        u = trace.u
        grad_w2 = grad_z.T @ u
        grad_b2 = grad_z.sum(axis=0)
        grad_u = grad_z @ params.w2
        grad_g = grad_u if trace.mask is None else grad_u * trace.mask
        grad_h = grad_g * gelu_grad(trace.h)
        grad_w1 = grad_h.T @ trace.x
        grad_b1 = grad_h.sum(axis=0)
        return HeadGrads(w1=grad_w1, b1=grad_b1, w2=grad_w2, b2=grad_b2)

    grad_w2 = grad_z.T @ trace.x
    grad_b2 = grad_z.sum(axis=0)
    return HeadGrads(w1=None, b1=None, w2=grad_w2, b2=grad_b2)


def write_checkpoint(path: str | Path, config: HeadConfig, params: HeadParams) -> None:
    """Binary checkpoint: HEAD header, config block, float64 LE payload."""
    mode_byte = 1 if config.mode == "nonlinear" else 0
    hidden = config.hidden_dim if config.hidden_dim is not None else 0
    with Path(path).open("wb") as fh:
        fh.write(
            _CKPT_HEADER.pack(
                _CKPT_MAGIC,
                _CKPT_VERSION,
                config.input_dim,
                hidden,
                config.output_dim,
                config.dropout_rate,
                mode_byte,
            )
        )
        for arr in params.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path: str | Path) -> tuple[HeadConfig, HeadParams]:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise ValidationError(f"{path}: truncated checkpoint header")
    magic, version, d, hidden, out, dropout, mode_byte = _CKPT_HEADER.unpack_from(raw)
    if magic != _CKPT_MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    if version != _CKPT_VERSION:
        raise ValidationError(f"{path}: unsupported version {version}")
    mode = "nonlinear" if mode_byte == 1 else "linear"
    config = HeadConfig(
        input_dim=d,
        hidden_dim=hidden if mode == "nonlinear" else None,
        output_dim=out,
        dropout_rate=dropout,
        mode=mode,
    )
    shapes = (
        [(hidden, d), (hidden,), (out, hidden), (out,)]
        if mode == "nonlinear"
        else [(out, d), (out,)]
    )
    expected = _CKPT_HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(raw) != expected:
        raise ValidationError(f"{path}: payload size mismatch")
    offset = _CKPT_HEADER.size
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(raw, dtype="<f8", offset=offset, count=count).reshape(shape).copy())
        offset += 8 * count
    if mode == "nonlinear":
        params = HeadParams(w1=arrays[0], b1=arrays[1], w2=arrays[2], b2=arrays[3])
    else:
        params = HeadParams(w1=None, b1=None, w2=arrays[0], b2=arrays[1])
    return config, params
