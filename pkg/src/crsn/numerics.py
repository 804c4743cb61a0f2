"""Dense float64 math with explicit forward/backward pairs.

Arrays are plain ``numpy.ndarray`` in row-major float64. Every layer used by
the models has a ``*_fwd`` returning ``(out, cache)`` and a matching ``*_bwd``
taking the upstream gradient and the cache.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import erf, expit

from .errors import DegenerateInputError, NumericError, RangeError, ShapeError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# -----------------------------------------------------------------------------
# Random numbers
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class Rng:
    """Counter-based random stream: (seed, stream, counter) fully determines output.

    Streams are split by deriving a fresh stream id instead of drawing from a
    shared generator, so the order in which consumers run never changes what
    any one of them sees.
    """

    seed: int = 42
    stream: int = 0
    counter: int = 0

    def generator(self) -> np.random.Generator:
        key = np.random.SeedSequence(self.seed, spawn_key=(self.stream,)).generate_state(2, np.uint64)
        ctr = np.array([self.counter, 0, 0, 0], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=ctr))

    def child(self, *ids: int) -> "Rng":
        """Derive an independent stream labelled by ``ids``."""
        word = np.random.SeedSequence((self.seed, self.stream, *ids)).generate_state(1, np.uint64)[0]
        return Rng(self.seed, int(word), 0)

    def at(self, counter: int) -> "Rng":
        return Rng(self.seed, self.stream, counter)

    def normal(self, shape) -> np.ndarray:
        return self.generator().standard_normal(shape)

    def uniform(self, shape) -> np.ndarray:
        return self.generator().random(shape)


# -----------------------------------------------------------------------------
# Linear algebra
# -----------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matrix product with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def linear_fwd(x, w, b=None):
    """y = x @ w.T + b for x [..., k], w [j, k]."""
    y = x @ w.T
    if b is not None:
        y = y + b
    return y, x


def linear_bwd(dy, x, w, has_bias=True):
    lead = dy.reshape(-1, dy.shape[-1])
    dw = lead.T @ x.reshape(-1, x.shape[-1])
    dx = dy @ w
    db = lead.sum(axis=0) if has_bias else None
    return dx, dw, db


# -----------------------------------------------------------------------------
# Normalisation
# -----------------------------------------------------------------------------


def layer_norm_fwd(x, gain, bias, eps=1e-5):
    if x.shape[-1] < 2:
        raise DegenerateInputError("layer_norm needs at least 2 features per row")
    if eps <= 0:
        raise DegenerateInputError("layer_norm eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_bwd(dy, cache):
    xhat, inv, gain = cache
    d = xhat.shape[-1]
    lead = (-1, d)
    dgain = (dy * xhat).reshape(lead).sum(axis=0)
    dbias = dy.reshape(lead).sum(axis=0)
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def layer_norm(x, gain, bias, eps=1e-5):
    return layer_norm_fwd(np.asarray(x, dtype=np.float64), gain, bias, eps)[0]


# -----------------------------------------------------------------------------
# Activations
# -----------------------------------------------------------------------------


def sigmoid(x):
    return expit(x)


def softplus(x):
    return np.logaddexp(0.0, x)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_bwd(y, dy, axis=-1):
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


ACTIVATIONS = {
    "relu": lambda x: np.maximum(x, 0.0),
    "gelu": gelu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "softmax": softmax,
}


def activation(kind: str, x) -> np.ndarray:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(np.asarray(x, dtype=np.float64))


def activation_bwd(kind: str, x, y, dy):
    """Gradient w.r.t. the activation input given input ``x`` and output ``y``."""
    if kind == "relu":
        return dy * (x > 0)
    if kind == "gelu":
        cdf = 0.5 * (1.0 + erf(x / _SQRT2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return dy * (cdf + x * pdf)
    if kind == "sigmoid":
        return dy * y * (1.0 - y)
    if kind == "softplus":
        return dy * expit(x)
    if kind == "softmax":
        return softmax_bwd(y, dy)
    raise ValueError(f"unknown activation {kind!r}")


def dropout_mask(rng: Rng | None, shape, rate: float, training: bool):
    """Inverted-dropout mask (already divided by keep probability), or None."""
    if not training or rate <= 0.0 or rng is None:
        return None
    keep = rng.uniform(shape) >= rate
    return keep / (1.0 - rate)


# -----------------------------------------------------------------------------
# Optimisation
# -----------------------------------------------------------------------------


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: Mapping, state: AdamWState, lr: float, skip=()):
    """One AdamW update in place. Returns ``(params, state)``.

    Weight decay is applied to the parameter directly, outside the adaptive
    rescaling. Names in ``skip`` are left untouched (frozen buffers).
    """
    for name, g in grads.items():
        if name in skip:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient {name!r} has shape {g.shape}, parameter {params[name].shape}")
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in sorted(grads):
        if name in skip:
            continue
        g = grads[name]
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p -= lr * (mhat / (np.sqrt(vhat) + state.eps) + state.weight_decay * p)
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    """Linear warm-up to ``base_rate`` then cosine decay to zero."""

    base_rate: float = 3e-4
    warmup_steps: int = 1000
    total_steps: int = 10_000

    def rate(self, t: int) -> float:
        return lr_at(self, t)


def lr_at(schedule: LrSchedule, t: int) -> float:
    if t < 0 or t > schedule.total_steps:
        raise RangeError(f"step {t} outside [0, {schedule.total_steps}]")
    base = schedule.base_rate
    wu = schedule.warmup_steps
    if t < wu:
        return base * t / wu
    decay = schedule.total_steps - wu
    if decay <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * (t - wu) / decay))


# -----------------------------------------------------------------------------
# Finite-difference oracle
# -----------------------------------------------------------------------------


def grad_check(loss_fn: Callable, params, h: float = 1e-5, floor: float = 1e-6,
               names=None, return_worst: bool = False):
    """Compare analytic gradients against central differences.

    ``loss_fn(params)`` returns ``(loss, grads)`` where ``grads`` mirrors
    ``params``; a bare array is accepted for either. Each coordinate is
    perturbed by ``h * max(1, |theta|)``. The error of one coordinate is
    ``|a - f| / max(|a|, |f|, floor * max(1, |loss|))``; the floor tracks the
    cancellation noise of the difference quotient, which grows with |loss|.
    The worst coordinate error is returned.
    """
    bare = isinstance(params, np.ndarray)
    pdict = {"theta": params} if bare else params
    loss, grads = loss_fn(params)
    gdict = {"theta": grads} if bare else grads
    if not np.isfinite(loss):
        raise NumericError("loss is not finite at the base point")
    floor = floor * max(1.0, abs(float(loss)))

    worst, where = 0.0, None
    for name in sorted(names if names is not None else pdict):
        p = pdict[name]
        a_all = np.asarray(gdict[name], dtype=np.float64)
        flat = p.reshape(-1)
        if not np.shares_memory(flat, p):
            raise ValueError(f"parameter {name!r} must be a contiguous array")
        for i in range(flat.size):
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            lp = loss_fn(params)[0]
            flat[i] = orig - step
            lm = loss_fn(params)[0]
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
            fd = (lp - lm) / (2.0 * step)
            a = a_all.reshape(-1)[i]
            err = abs(a - fd) / max(abs(a), abs(fd), floor)
            if err > worst:
                worst, where = err, (name, i, a, fd)
    if return_worst:
        return worst, where
    return worst
