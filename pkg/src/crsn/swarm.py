"""Swarm Interaction Layer: agent population coupled to a token stream.

Shapes carry a leading batch axis: tokens ``[B, n, d]``, positions and
velocities ``[B, m, d]``. One call to :func:`sil_forward` is one swarm
iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError, RangeError, ShapeError
from .numerics import Rng, layer_norm_bwd, layer_norm_fwd, sigmoid, softmax, softmax_bwd

GATE_LOW = 0.3
GATE_HIGH = 0.9
# sigmoid(+-30) stays strictly inside (0, 1) in float64, so the gate never
# touches its bounds.
_GATE_CLIP = 30.0


def inertia_gate(w_raw):
    """Map an unconstrained scalar to an inertia weight in (0.3, 0.9)."""
    s = sigmoid(np.clip(w_raw, -_GATE_CLIP, _GATE_CLIP))
    return GATE_LOW + (GATE_HIGH - GATE_LOW) * s


def inertia_gate_grad(w_raw):
    if abs(float(w_raw)) >= _GATE_CLIP:
        return 0.0
    s = sigmoid(w_raw)
    return (GATE_HIGH - GATE_LOW) * s * (1.0 - s)


@dataclass
class AgentPopulation:
    positions: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        if self.positions.shape != self.velocities.shape:
            raise ShapeError(
                f"positions {self.positions.shape} and velocities {self.velocities.shape} differ")

    @classmethod
    def at_rest(cls, positions):
        return cls(positions, np.zeros_like(positions))

    @property
    def m(self):
        return self.positions.shape[-2]


# -----------------------------------------------------------------------------
# Fractional Gaussian noise
# -----------------------------------------------------------------------------


def fgn_autocovariance(hurst, lags):
    k = np.abs(np.asarray(lags, dtype=np.float64))
    h2 = 2.0 * hurst
    return 0.5 * (np.abs(k + 1) ** h2 - 2.0 * k ** h2 + np.abs(k - 1) ** h2)


class FgnSampler:
    """Exact fGn paths from the Cholesky factor of the autocovariance matrix."""

    def __init__(self, hurst=0.7, horizon=64):
        if not 0.0 < hurst < 1.0:
            raise RangeError(f"Hurst exponent must be in (0, 1), got {hurst}")
        if horizon < 1:
            raise RangeError("fGn horizon must be at least 1")
        self.hurst = float(hurst)
        self.horizon = int(horizon)
        idx = np.arange(horizon)
        self.covariance = fgn_autocovariance(hurst, idx[:, None] - idx[None, :])
        self.factor = np.linalg.cholesky(self.covariance)

    def sample(self, rng: Rng, count: int, paths=()):
        """Draw ``count`` consecutive fGn steps for each of ``paths`` independent series.

        Returns shape ``(count, *paths)``.
        """
        if count > self.horizon:
            raise RangeError(f"requested {count} steps, sampler horizon is {self.horizon}")
        paths = (paths,) if isinstance(paths, int) else tuple(paths)
        width = math.prod(paths)
        z = rng.normal((count, width))
        out = self.factor[:count, :count] @ z
        return out.reshape((count, *paths))


def fgn_sample(sampler: FgnSampler, rng: Rng, count: int) -> np.ndarray:
    return sampler.sample(rng, count)


# -----------------------------------------------------------------------------
# Velocity update
# -----------------------------------------------------------------------------


def velocity_update(pop: AgentPopulation, local_attractor, global_attractor, w, c1, c2,
                    r1, r2, drive, noise, sigma=1.0) -> AgentPopulation:
    """v' = w v + c1 r1 (p - x) + c2 r2 (g - x) + drive + sigma noise;  x' = x + v'."""
    x, v = pop.positions, pop.velocities
    g = np.asarray(global_attractor)
    for name, arr in (("local_attractor", local_attractor), ("r1", r1), ("r2", r2),
                      ("drive", drive), ("noise", noise)):
        if np.shape(arr) != x.shape:
            raise ShapeError(f"{name} has shape {np.shape(arr)}, expected {x.shape}")
    if g.shape != x.shape[:-2] + x.shape[-1:]:
        raise ShapeError(f"global_attractor has shape {g.shape}, expected {x.shape[:-2] + x.shape[-1:]}")
    v_new = (w * v + c1 * r1 * (local_attractor - x)
             + c2 * r2 * (g[..., None, :] - x) + drive + sigma * noise)
    return AgentPopulation(x + v_new, v_new)


# -----------------------------------------------------------------------------
# Swarm Interaction Layer
# -----------------------------------------------------------------------------


@dataclass
class SILParams:
    W_k: np.ndarray
    W_o: np.ndarray
    W_p: np.ndarray
    u: np.ndarray
    w_raw: np.ndarray
    W_g: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    sigma: np.ndarray
    c1: float = 1.6
    c2: float = 1.6
    dropout: float = 0.25
    frozen_gate: float | None = None

    TRAINABLE = ("W_k", "W_o", "W_p", "u", "w_raw", "W_g", "ln_gain", "ln_bias", "sigma")

    def __post_init__(self):
        if self.c1 < 0 or self.c2 < 0:
            raise RangeError("acceleration coefficients must be non-negative")
        if self.frozen_gate is not None and not GATE_LOW < self.frozen_gate < GATE_HIGH:
            raise RangeError(f"frozen gate {self.frozen_gate} outside (0.3, 0.9)")

    @classmethod
    def init(cls, d, rng: Rng, sigma=0.05, **kw):
        g = rng.generator()
        s = 1.0 / math.sqrt(d)
        return cls(
            W_k=g.normal(0, s, (d, d)),
            W_o=g.normal(0, 0.5 * s, (d, d)),
            W_p=g.normal(0, 0.5 * s, (d, d)),
            u=g.normal(0, s, d),
            w_raw=np.array(0.0),
            W_g=g.normal(0, 0.5 * s, (d, d)),
            ln_gain=np.ones(d),
            ln_bias=np.zeros(d),
            sigma=np.array(float(sigma)),
            **kw,
        )

    @property
    def d(self):
        return self.W_k.shape[0]

    @property
    def gate(self):
        if self.frozen_gate is not None:
            return float(self.frozen_gate)
        return float(inertia_gate(self.w_raw))

    def arrays(self):
        return {name: getattr(self, name) for name in self.TRAINABLE}

    @classmethod
    def from_arrays(cls, arrays, **kw):
        return cls(**{name: arrays[name] for name in cls.TRAINABLE}, **kw)


def _check_finite(stage, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"sil_forward: non-finite value at stage {stage}")


def sil_forward(tokens, pop: AgentPopulation, params: SILParams, rng: Rng | None,
                training: bool, noise=None):
    """One swarm iteration coupled to the token stream.

    Stages: (1) agents attend over tokens, (2) local attractor from the
    observation, (3) soft global best over agents, (4) velocity update,
    (5) token feedback from the mean updated position.

    ``noise`` overrides the per-coordinate noise draw (the model passes a
    slice of a fractional-Gaussian path here). Outside training the stochastic
    factors are fixed: r1 = r2 = 0.5, no noise, no dropout.
    """
    E = tokens
    X, V = pop.positions, pop.velocities
    if E.ndim != 3 or X.ndim != 3:
        raise ShapeError("sil_forward expects batched tokens [B, n, d] and agents [B, m, d]")
    B, n, d = E.shape
    m = X.shape[1]
    if n < 1 or m < 1:
        raise ShapeError("sil_forward needs n >= 1 and m >= 1")
    if X.shape != (B, m, d) or params.d != d:
        raise ShapeError(f"token shape {E.shape} incompatible with agents {X.shape} / d={params.d}")
    scale = 1.0 / math.sqrt(d)

    # (1) observation
    KX = X @ params.W_k
    S = (KX @ E.transpose(0, 2, 1)) * scale
    A = softmax(S, axis=-1)
    O = A @ E
    _check_finite("(1) observation", O)

    # (2) local attractor offset, p - x
    Pd = O @ params.W_p.T
    _check_finite("(2) local attractor", Pd)

    # (3) soft global best
    s = X @ params.u
    beta = softmax(s, axis=-1)
    g = np.einsum("bm,bmd->bd", beta, X)
    _check_finite("(3) global attractor", g)

    # (4) velocity update
    if training:
        if rng is None:
            raise ContractError("training-mode sil_forward needs an Rng")
        r1 = rng.child(1).uniform(X.shape)
        r2 = rng.child(2).uniform(X.shape)
        mask = None
        if params.dropout > 0:
            mask = (rng.child(3).uniform(X.shape) >= params.dropout) / (1.0 - params.dropout)
        if noise is None:
            noise = rng.child(4).normal(X.shape)
        sigma = float(params.sigma)
    else:
        r1 = r2 = np.full(X.shape, 0.5)
        mask = None
        noise = np.zeros(X.shape)
        sigma = 0.0
    Dpre = O @ params.W_o.T
    drive = Dpre if mask is None else Dpre * mask
    w = params.gate
    new = velocity_update(pop, X + Pd, g, w, params.c1, params.c2, r1, r2, drive, noise, sigma)
    _check_finite("(4) velocity update", new.velocities, new.positions)

    # (5) token feedback
    gbar = new.positions.mean(axis=1)
    fb = gbar @ params.W_g.T
    H = E + fb[:, None, :]
    E_out, ln_cache = layer_norm_fwd(H, params.ln_gain, params.ln_bias)
    _check_finite("(5) token feedback", E_out)

    cache = {
        "kind": "sil", "shape": (B, n, m, d), "E": E, "X": X, "V": V, "KX": KX, "A": A,
        "O": O, "beta": beta, "r1": r1, "r2": r2, "mask": mask, "noise": noise,
        "training": training, "gbar": gbar, "ln": ln_cache, "w": w, "params": params,
    }
    return E_out, new, cache


def sil_backward(cache, grad_tokens, grad_pop: AgentPopulation | None):
    """Exact gradients of :func:`sil_forward` with its sampled randomness held fixed.

    Returns ``(grad_tokens_in, grad_pop_in, grad_params)`` where
    ``grad_params`` is keyed like :attr:`SILParams.TRAINABLE`.
    """
    if not isinstance(cache, dict) or cache.get("kind") != "sil":
        raise ContractError("sil_backward needs a cache produced by sil_forward")
    B, n, m, d = cache["shape"]
    p: SILParams = cache["params"]
    E, X, V, KX, A, O = (cache[k] for k in ("E", "X", "V", "KX", "A", "O"))
    beta, r1, r2, mask, noise = (cache[k] for k in ("beta", "r1", "r2", "mask", "noise"))
    scale = 1.0 / math.sqrt(d)

    dE_out = np.zeros((B, n, d)) if grad_tokens is None else grad_tokens
    if dE_out.shape != (B, n, d):
        raise ContractError(f"grad_tokens shape {dE_out.shape} does not match cache {(B, n, d)}")
    if grad_pop is None:
        dXn = np.zeros((B, m, d))
        dVn = np.zeros((B, m, d))
    else:
        if grad_pop.positions.shape != (B, m, d):
            raise ContractError(f"grad_pop shape {grad_pop.positions.shape} does not match cache {(B, m, d)}")
        dXn = grad_pop.positions.copy()
        dVn = grad_pop.velocities.copy()

    # (5) token feedback
    dH, dgain, dbias = layer_norm_bwd(dE_out, cache["ln"])
    dE = dH.copy()
    dfb = dH.sum(axis=1)
    dW_g = dfb.T @ cache["gbar"]
    dXn += (dfb @ p.W_g)[:, None, :] / m

    # x' = x + v'
    dVn += dXn
    dX = dXn.copy()

    # (4) velocity update
    dw = float(np.sum(dVn * V))
    dV = cache["w"] * dVn
    dPd = p.c1 * r1 * dVn
    dO = dPd @ p.W_p
    dW_p = np.einsum("bmi,bmj->ij", dPd, O)
    dG2 = p.c2 * r2 * dVn
    dg = dG2.sum(axis=1)
    dX -= dG2
    dDpre = dVn if mask is None else dVn * mask
    dO += dDpre @ p.W_o
    dW_o = np.einsum("bmi,bmj->ij", dDpre, O)
    dsigma = float(np.sum(dVn * noise)) if cache["training"] else 0.0

    # (3) soft global best
    dX += beta[..., None] * dg[:, None, :]
    dbeta = np.einsum("bmd,bd->bm", X, dg)
    ds = softmax_bwd(beta, dbeta)
    du = np.einsum("bmd,bm->d", X, ds)
    dX += ds[..., None] * p.u

    # (1) observation
    dA = dO @ E.transpose(0, 2, 1)
    dE += A.transpose(0, 2, 1) @ dO
    dS = softmax_bwd(A, dA) * scale
    dKX = dS @ E
    dE += dS.transpose(0, 2, 1) @ KX
    dX += dKX @ p.W_k.T
    dW_k = np.einsum("bmi,bmj->ij", X, dKX)

    dw_raw = 0.0 if p.frozen_gate is not None else dw * inertia_gate_grad(p.w_raw)
    grads = {
        "W_k": dW_k, "W_o": dW_o, "W_p": dW_p, "u": du, "w_raw": np.array(dw_raw),
        "W_g": dW_g, "ln_gain": dgain, "ln_bias": dbias, "sigma": np.array(dsigma),
    }
    return dE, AgentPopulation(dX, dV), grads
