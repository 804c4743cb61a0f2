"""CRSN assembly, the MLP baseline and a single-head attention comparator.

All three models share the same interface:

    pred, cache = model.forward(inputs, rng, training)
    grads = model.backward(cache, grad_pred, grad_positions)

``inputs`` is a batch of normalised windows ``[B, n, 43]``. Parameters live in
a flat ``dict`` so the optimiser and the checkpoint writer can treat every
model alike.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError, ContractError, SchemaError, ShapeError
from .numerics import (
    Rng,
    activation_bwd,
    gelu,
    layer_norm_bwd,
    layer_norm_fwd,
    sigmoid,
    softmax,
    softmax_bwd,
    softplus,
)
from .swarm import AgentPopulation, FgnSampler, SILParams, sil_backward, sil_forward

N_INPUTS = 43
N_POLLUTANTS = 8
POLLUTANTS = ("nh4", "no3", "po4", "cod", "tss", "tetracycline", "ibuprofen", "mp")
CHECKPOINT_FORMAT = "CRSN1"
# softplus(x) == 1 at this x; output heads start at their scale.
_SOFTPLUS_ONE = math.log(math.e - 1.0)


# -----------------------------------------------------------------------------
# Configs and outputs
# -----------------------------------------------------------------------------


PROFILES = {
    "paper": dict(d_model=256, layers=6, agents=32, groups=4),
    "desk": dict(d_model=64, layers=3, agents=8, groups=2),
}


@dataclass
class CrsnConfig:
    d_model: int = 256
    layers: int = 6
    agents: int = 32
    window: int = 24
    groups: int = 4
    dropout: float = 0.25
    profile: str = "paper"
    decoder_hidden: int = 128
    hurst: float = 0.7
    sigma_init: float = 0.05
    c1: float = 1.6
    c2: float = 1.6
    frozen_gate: float | None = None

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_profile(cls, profile="desk", **overrides):
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        return cls(**{**PROFILES[profile], "profile": profile, **overrides})

    def validate(self):
        for name in ("d_model", "layers", "agents", "window", "groups", "decoder_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model < 2:
            raise ConfigError("d_model must be >= 2")
        if self.agents % self.groups:
            raise ConfigError(f"groups={self.groups} does not divide agents={self.agents}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class MlpConfig:
    widths: tuple = (512, 256, 128, 64)
    dropout: float = 0.3
    decoder_hidden: int = 128

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 4:
            raise ConfigError("the MLP baseline has exactly four hidden layers")

    def to_dict(self):
        return {**asdict(self), "widths": list(self.widths)}


@dataclass
class AttnConfig:
    d_model: int = 64
    window: int = 24
    ff_width: int = 256
    dropout: float = 0.25
    decoder_hidden: int = 128

    def to_dict(self):
        return asdict(self)


@dataclass
class Prediction:
    """Batched model outputs; leading axis is the sample."""

    removals: np.ndarray  # [B, 8], fraction removed
    ec: np.ndarray  # [B], kWh m^-3
    ce: np.ndarray  # [B], g m^-3
    shares: np.ndarray  # [B, 8], simplex

    def __len__(self):
        return self.removals.shape[0]

    def select(self, idx):
        return Prediction(self.removals[idx], self.ec[idx], self.ce[idx], self.shares[idx])

    @classmethod
    def concat(cls, preds):
        return cls(*(np.concatenate([getattr(p, f.name) for p in preds]) for f in fields(cls)))

    def zeros_like(self):
        return Prediction(*(np.zeros_like(getattr(self, f.name)) for f in fields(self)))


# -----------------------------------------------------------------------------
# Shared stages
# -----------------------------------------------------------------------------


def embed_tokens(inputs, W, b, pos):
    """Affine map of each 43-channel record to d, plus a per-position offset."""
    if inputs.shape[-1] != N_INPUTS:
        raise SchemaError(f"records carry {inputs.shape[-1]} channels, expected {N_INPUTS} "
                          "(42 descriptors + aeration load)")
    n = inputs.shape[-2]
    if n > pos.shape[0]:
        raise ShapeError(f"window of {n} records exceeds positional table of {pos.shape[0]}")
    return inputs @ W.T + b + pos[:n]


def embed_tokens_bwd(dE, inputs):
    n = inputs.shape[-2]
    dW = np.einsum("bnj,bnk->jk", dE, inputs)
    db = dE.sum(axis=(0, 1))
    dpos = dE.sum(axis=0)
    return dW, db, dpos, n


def agent_window_matrix(n, m):
    """[m, n] averaging matrix: agent i averages its contiguous share of tokens.

    With fewer tokens than agents the assignment wraps: agent i takes token i mod n.
    """
    M = np.zeros((m, n))
    if n >= m:
        for i in range(m):
            lo, hi = (i * n) // m, ((i + 1) * n) // m
            M[i, lo:hi] = 1.0 / (hi - lo)
    else:
        M[np.arange(m), np.arange(m) % n] = 1.0
    return M


def init_agents(tokens, W_in, agent_emb):
    """Positions from projected window means plus per-agent embeddings; zero velocity."""
    m = agent_emb.shape[0]
    M = agent_window_matrix(tokens.shape[1], m)
    means = M @ tokens
    return AgentPopulation.at_rest(means @ W_in.T + agent_emb), (M, means)


def init_agents_bwd(dX, cache, W_in):
    M, means = cache
    dW_in = np.einsum("bmi,bmj->ij", dX, means)
    dagent = dX.sum(axis=0)
    dmeans = dX @ W_in
    dE = M.T @ dmeans
    return dE, dW_in, dagent


def hierarchical_attention(positions, q1, q2, groups):
    """Two-level softmax pooling: within each agent group, then across groups."""
    B, m, d = positions.shape
    if m % groups:
        raise ConfigError(f"groups={groups} does not divide m={m}")
    k = m // groups
    scale = 1.0 / math.sqrt(d)
    Xg = positions.reshape(B, groups, k, d)
    alpha = softmax((Xg @ q1) * scale, axis=-1)
    H = np.einsum("bgk,bgkd->bgd", alpha, Xg)
    gamma = softmax((H @ q2) * scale, axis=-1)
    z = np.einsum("bg,bgd->bd", gamma, H)
    return z, (Xg, alpha, H, gamma)


def hierarchical_attention_bwd(dz, cache, q1, q2):
    Xg, alpha, H, gamma = cache
    B, G, k, d = Xg.shape
    scale = 1.0 / math.sqrt(d)
    dH = gamma[..., None] * dz[:, None, :]
    ds2 = softmax_bwd(gamma, np.einsum("bgd,bd->bg", H, dz)) * scale
    dq2 = np.einsum("bg,bgd->d", ds2, H)
    dH += ds2[..., None] * q2
    dXg = alpha[..., None] * dH[:, :, None, :]
    ds1 = softmax_bwd(alpha, np.einsum("bgkd,bgd->bgk", Xg, dH)) * scale
    dq1 = np.einsum("bgk,bgkd->d", ds1, Xg)
    dXg += ds1[..., None] * q1
    return dXg.reshape(B, G * k, d), dq1, dq2


def decoder_init(params, prefix, dz, hidden, rng: Rng):
    g = rng.generator()
    params[f"{prefix}.W1"] = g.normal(0, 1 / math.sqrt(dz), (hidden, dz))
    params[f"{prefix}.b1"] = np.zeros(hidden)
    params[f"{prefix}.W2"] = g.normal(0, 1 / math.sqrt(hidden), (N_POLLUTANTS, hidden))
    params[f"{prefix}.b2"] = np.full(N_POLLUTANTS, 2.0)
    params[f"{prefix}.W3"] = g.normal(0, 1 / math.sqrt(dz + N_POLLUTANTS), (hidden, dz + N_POLLUTANTS))
    params[f"{prefix}.b3"] = np.zeros(hidden)
    params[f"{prefix}.W4"] = g.normal(0, 0.1 / math.sqrt(hidden), (2 + N_POLLUTANTS, hidden))
    b4 = np.zeros(2 + N_POLLUTANTS)
    b4[:2] = _SOFTPLUS_ONE
    params[f"{prefix}.b4"] = b4
    params[f"{prefix}.ec_scale"] = np.array(1.0)
    params[f"{prefix}.ce_scale"] = np.array(1.0)


DECODER_BUFFERS = ("ec_scale", "ce_scale")


def decode(z, params, prefix="dec", mask=None):
    """Two-stage head: removals first, then energy/carbon/shares conditioned on them.

    ``mask`` is an inverted-dropout mask on the stage-1 hidden layer.
    """
    P = lambda k: params[f"{prefix}.{k}"]  # noqa: E731
    h1 = z @ P("W1").T + P("b1")
    a1 = gelu(h1)
    a1d = a1 if mask is None else a1 * mask
    removals = sigmoid(a1d @ P("W2").T + P("b2"))
    c = np.concatenate([z, removals], axis=-1)
    h2 = c @ P("W3").T + P("b3")
    a2 = gelu(h2)
    out = a2 @ P("W4").T + P("b4")
    ec_sp = softplus(out[:, 0])
    ce_sp = softplus(out[:, 1])
    shares = softmax(out[:, 2:], axis=-1)
    pred = Prediction(removals, P("ec_scale") * ec_sp, P("ce_scale") * ce_sp, shares)
    return pred, (z, h1, a1, a1d, mask, removals, c, h2, a2, out)


def decode_bwd(gp: Prediction, cache, params, prefix="dec"):
    P = lambda k: params[f"{prefix}.{k}"]  # noqa: E731
    z, h1, a1, a1d, mask, removals, c, h2, a2, out = cache
    dz_dim = z.shape[-1]
    dout = np.empty_like(out)
    dout[:, 0] = gp.ec * P("ec_scale") * sigmoid(out[:, 0])
    dout[:, 1] = gp.ce * P("ce_scale") * sigmoid(out[:, 1])
    dout[:, 2:] = softmax_bwd(softmax(out[:, 2:], axis=-1), gp.shares)
    g = {}
    g["W4"] = dout.T @ a2
    g["b4"] = dout.sum(axis=0)
    dh2 = activation_bwd("gelu", h2, a2, dout @ P("W4"))
    g["W3"] = dh2.T @ c
    g["b3"] = dh2.sum(axis=0)
    dc = dh2 @ P("W3")
    dz = dc[:, :dz_dim].copy()
    drem = gp.removals + dc[:, dz_dim:]
    dlogit = drem * removals * (1.0 - removals)
    g["W2"] = dlogit.T @ a1d
    g["b2"] = dlogit.sum(axis=0)
    da1 = dlogit @ P("W2")
    if mask is not None:
        da1 = da1 * mask
    dh1 = activation_bwd("gelu", h1, a1, da1)
    g["W1"] = dh1.T @ z
    g["b1"] = dh1.sum(axis=0)
    dz += dh1 @ P("W1")
    for k in DECODER_BUFFERS:
        g[k] = np.zeros(())
    return dz, {f"{prefix}.{k}": v for k, v in g.items()}


def _dropout(rng: Rng | None, shape, rate, training):
    if not training or rate <= 0.0:
        return None
    if rng is None:
        raise ContractError("training-mode forward needs an Rng")
    return (rng.uniform(shape) >= rate) / (1.0 - rate)


# -----------------------------------------------------------------------------
# Base class
# -----------------------------------------------------------------------------


class Model:
    kind = "base"

    def __init__(self, config, params):
        self.config = config
        self.params = params
        self.meta = {}

    @property
    def buffers(self):
        return {f"dec.{k}" for k in DECODER_BUFFERS}

    def trainable(self):
        return sorted(k for k in self.params if k not in self.buffers)

    def num_parameters(self):
        return int(sum(self.params[k].size for k in self.trainable()))

    def set_output_scales(self, ec_scale, ce_scale):
        self.params["dec.ec_scale"] = np.array(float(ec_scale))
        self.params["dec.ce_scale"] = np.array(float(ce_scale))

    def predict(self, inputs, batch_size=256):
        """Evaluation-mode forward over any number of windows."""
        outs = []
        for s in range(0, len(inputs), batch_size):
            outs.append(self.forward(inputs[s:s + batch_size], None, False)[0])
        return Prediction.concat(outs)

    def post_step(self):
        """Projection applied after each optimiser step."""

    def check_inputs(self, inputs):
        if inputs.ndim != 3 or inputs.shape[-1] != N_INPUTS:
            raise SchemaError(f"expected windows shaped [B, n, {N_INPUTS}], got {inputs.shape}")


# -----------------------------------------------------------------------------
# CRSN
# -----------------------------------------------------------------------------


class CrsnModel(Model):
    kind = "crsn"

    def __init__(self, config: CrsnConfig, params=None, rng: Rng | None = None):
        if params is None:
            params = self.init_params(config, rng or Rng(42))
        super().__init__(config, params)
        self.sampler = FgnSampler(config.hurst, max(config.layers, 1))

    @staticmethod
    def init_params(cfg: CrsnConfig, rng: Rng):
        d, m = cfg.d_model, cfg.agents
        g = rng.child(0).generator()
        p = {
            "embed.W": g.normal(0, 1 / math.sqrt(N_INPUTS), (d, N_INPUTS)),
            "embed.b": np.zeros(d),
            "embed.pos": g.normal(0, 0.1, (cfg.window, d)),
            "init.W": np.eye(d) + g.normal(0, 0.1 / math.sqrt(d), (d, d)),
            "init.agent": g.normal(0, 0.1, (m, d)),
            "hier.q1": g.normal(0, 1 / math.sqrt(d), d),
            "hier.q2": g.normal(0, 1 / math.sqrt(d), d),
        }
        for layer in range(cfg.layers):
            sil = SILParams.init(d, rng.child(1, layer), sigma=cfg.sigma_init)
            for k, v in sil.arrays().items():
                p[f"sil{layer}.{k}"] = v
        decoder_init(p, "dec", d, cfg.decoder_hidden, rng.child(2))
        return p

    @staticmethod
    def parameter_count(cfg: CrsnConfig):
        """Closed-form trainable parameter count for ``cfg``."""
        d, m, n, L, h = cfg.d_model, cfg.agents, cfg.window, cfg.layers, cfg.decoder_hidden
        k = N_POLLUTANTS
        embed = N_INPUTS * d + d + n * d
        init = d * d + m * d
        sil = 4 * d * d + 3 * d + 2
        hier = 2 * d
        dec = (h * d + h) + (k * h + k) + (h * (d + k) + h) + ((2 + k) * h + 2 + k)
        return embed + init + L * sil + hier + dec

    def sil_params(self, layer):
        cfg = self.config
        arrays = {k: self.params[f"sil{layer}.{k}"] for k in SILParams.TRAINABLE}
        return SILParams.from_arrays(arrays, c1=cfg.c1, c2=cfg.c2, dropout=cfg.dropout,
                                     frozen_gate=cfg.frozen_gate)

    def forward(self, inputs, rng: Rng | None, training: bool):
        self.check_inputs(inputs)
        cfg = self.config
        p = self.params
        B = inputs.shape[0]
        E = embed_tokens(inputs, p["embed.W"], p["embed.b"], p["embed.pos"])
        pop, init_cache = init_agents(E, p["init.W"], p["init.agent"])
        path = None
        if training:
            if rng is None:
                raise ContractError("training-mode forward needs an Rng")
            path = self.sampler.sample(rng.child(7), cfg.layers, (B, cfg.agents, cfg.d_model))
        sil_caches = []
        displacement = []
        for layer in range(cfg.layers):
            sub = rng.child(100 + layer) if training else None
            noise = path[layer] if training else None
            E, new_pop, c = sil_forward(E, pop, self.sil_params(layer), sub, training, noise=noise)
            displacement.append(np.linalg.norm(new_pop.positions - pop.positions, axis=-1).mean())
            pop = new_pop
            sil_caches.append(c)
        z, hier_cache = hierarchical_attention(pop.positions, p["hier.q1"], p["hier.q2"], cfg.groups)
        mask = _dropout(rng.child(8) if training else None, (B, cfg.decoder_hidden),
                        cfg.dropout, training)
        pred, dec_cache = decode(z, p, mask=mask)
        cache = {
            "model": self, "inputs": inputs, "init": init_cache, "sil": sil_caches,
            "hier": hier_cache, "dec": dec_cache, "positions": pop.positions,
            "displacement": float(np.mean(displacement)),
        }
        return pred, cache

    def backward(self, cache, grad_pred: Prediction, grad_positions=None):
        if cache.get("model") is not self:
            raise ContractError("cache was produced by a different model")
        p = self.params
        grads = {}
        dz, gdec = decode_bwd(grad_pred, cache["dec"], p)
        grads.update(gdec)
        dX, dq1, dq2 = hierarchical_attention_bwd(dz, cache["hier"], p["hier.q1"], p["hier.q2"])
        grads["hier.q1"], grads["hier.q2"] = dq1, dq2
        if grad_positions is not None:
            dX = dX + grad_positions
        dpop = AgentPopulation(dX, np.zeros_like(dX))
        dE = None
        for layer in reversed(range(self.config.layers)):
            dE, dpop, gs = sil_backward(cache["sil"][layer], dE, dpop)
            for k, v in gs.items():
                grads[f"sil{layer}.{k}"] = v
        dE0, dW_in, dagent = init_agents_bwd(dpop.positions, cache["init"], p["init.W"])
        dE = dE + dE0
        grads["init.W"], grads["init.agent"] = dW_in, dagent
        dW, db, dpos_n, n = embed_tokens_bwd(dE, cache["inputs"])
        dpos = np.zeros_like(p["embed.pos"])
        dpos[:n] = dpos_n
        grads["embed.W"], grads["embed.b"], grads["embed.pos"] = dW, db, dpos
        return grads

    def post_step(self):
        for layer in range(self.config.layers):
            s = self.params[f"sil{layer}.sigma"]
            np.maximum(s, 0.0, out=s)


# -----------------------------------------------------------------------------
# MLP baseline
# -----------------------------------------------------------------------------


class MlpModel(Model):
    kind = "mlp"

    def __init__(self, config: MlpConfig | None = None, params=None, rng: Rng | None = None):
        config = config or MlpConfig()
        if params is None:
            params = self.init_params(config, rng or Rng(42))
        super().__init__(config, params)

    @staticmethod
    def init_params(cfg: MlpConfig, rng: Rng):
        g = rng.child(0).generator()
        p = {}
        prev = N_INPUTS
        for i, w in enumerate(cfg.widths):
            p[f"mlp{i}.W"] = g.normal(0, 1 / math.sqrt(prev), (w, prev))
            p[f"mlp{i}.b"] = np.zeros(w)
            prev = w
        decoder_init(p, "dec", prev, cfg.decoder_hidden, rng.child(2))
        return p

    def forward(self, inputs, rng: Rng | None, training: bool):
        self.check_inputs(inputs)
        cfg = self.config
        h = inputs.mean(axis=1)
        layers = []
        for i in range(len(cfg.widths)):
            pre = h @ self.params[f"mlp{i}.W"].T + self.params[f"mlp{i}.b"]
            act = gelu(pre)
            mask = _dropout(rng.child(10 + i) if training else None, act.shape, cfg.dropout, training)
            out = act if mask is None else act * mask
            layers.append((h, pre, act, mask))
            h = out
        dmask = _dropout(rng.child(8) if training else None, (len(inputs), cfg.decoder_hidden),
                         cfg.dropout, training)
        pred, dec_cache = decode(h, self.params, mask=dmask)
        return pred, {"model": self, "inputs": inputs, "layers": layers, "dec": dec_cache,
                      "positions": None}

    def backward(self, cache, grad_pred: Prediction, grad_positions=None):
        if cache.get("model") is not self:
            raise ContractError("cache was produced by a different model")
        dh, grads = decode_bwd(grad_pred, cache["dec"], self.params)
        for i in reversed(range(len(self.config.widths))):
            h, pre, act, mask = cache["layers"][i]
            if mask is not None:
                dh = dh * mask
            dpre = activation_bwd("gelu", pre, act, dh)
            grads[f"mlp{i}.W"] = dpre.T @ h
            grads[f"mlp{i}.b"] = dpre.sum(axis=0)
            dh = dpre @ self.params[f"mlp{i}.W"]
        return grads


# -----------------------------------------------------------------------------
# Single-head self-attention comparator
# -----------------------------------------------------------------------------


def attention_core(E, Wq, Wk, Wv):
    """Scaled dot-product self-attention over all token pairs; returns (Y, A, Q, K, V)."""
    d = E.shape[-1]
    Q = E @ Wq.T
    K = E @ Wk.T
    V = E @ Wv.T
    A = softmax((Q @ K.transpose(0, 2, 1)) / math.sqrt(d), axis=-1)
    return A @ V, A, Q, K, V


class MiniAttnModel(Model):
    kind = "mini_attn"

    def __init__(self, config: AttnConfig | None = None, params=None, rng: Rng | None = None):
        config = config or AttnConfig()
        if params is None:
            params = self.init_params(config, rng or Rng(42))
        super().__init__(config, params)

    @staticmethod
    def init_params(cfg: AttnConfig, rng: Rng):
        d, f = cfg.d_model, cfg.ff_width
        g = rng.child(0).generator()
        s = 1 / math.sqrt(d)
        p = {
            "embed.W": g.normal(0, 1 / math.sqrt(N_INPUTS), (d, N_INPUTS)),
            "embed.b": np.zeros(d),
            "embed.pos": g.normal(0, 0.1, (cfg.window, d)),
            "attn.Wq": g.normal(0, s, (d, d)),
            "attn.Wk": g.normal(0, s, (d, d)),
            "attn.Wv": g.normal(0, s, (d, d)),
            "attn.Wout": g.normal(0, s, (d, d)),
            "ln1.gain": np.ones(d), "ln1.bias": np.zeros(d),
            "ff.W1": g.normal(0, s, (f, d)), "ff.b1": np.zeros(f),
            "ff.W2": g.normal(0, 1 / math.sqrt(f), (d, f)), "ff.b2": np.zeros(d),
            "ln2.gain": np.ones(d), "ln2.bias": np.zeros(d),
        }
        decoder_init(p, "dec", d, cfg.decoder_hidden, rng.child(2))
        return p

    def forward(self, inputs, rng: Rng | None, training: bool):
        self.check_inputs(inputs)
        p, cfg = self.params, self.config
        E = embed_tokens(inputs, p["embed.W"], p["embed.b"], p["embed.pos"])
        Y, A, Q, K, V = attention_core(E, p["attn.Wq"], p["attn.Wk"], p["attn.Wv"])
        Yo = Y @ p["attn.Wout"].T
        H1, ln1 = layer_norm_fwd(E + Yo, p["ln1.gain"], p["ln1.bias"])
        f_pre = H1 @ p["ff.W1"].T + p["ff.b1"]
        f_act = gelu(f_pre)
        fmask = _dropout(rng.child(9) if training else None, f_act.shape, cfg.dropout, training)
        f_drop = f_act if fmask is None else f_act * fmask
        F = f_drop @ p["ff.W2"].T + p["ff.b2"]
        H2, ln2 = layer_norm_fwd(H1 + F, p["ln2.gain"], p["ln2.bias"])
        z = H2.mean(axis=1)
        dmask = _dropout(rng.child(8) if training else None, (len(inputs), cfg.decoder_hidden),
                         cfg.dropout, training)
        pred, dec_cache = decode(z, p, mask=dmask)
        cache = {"model": self, "inputs": inputs, "E": E, "A": A, "Q": Q, "K": K, "V": V, "Y": Y,
                 "ln1": ln1, "H1": H1, "f_pre": f_pre, "f_act": f_act, "fmask": fmask,
                 "f_drop": f_drop, "ln2": ln2, "dec": dec_cache, "positions": None}
        return pred, cache

    def backward(self, cache, grad_pred: Prediction, grad_positions=None):
        if cache.get("model") is not self:
            raise ContractError("cache was produced by a different model")
        p = self.params
        d = p["attn.Wq"].shape[0]
        dz, grads = decode_bwd(grad_pred, cache["dec"], p)
        n = cache["E"].shape[1]
        dH2 = np.broadcast_to(dz[:, None, :] / n, cache["E"].shape)
        dS2, grads["ln2.gain"], grads["ln2.bias"] = layer_norm_bwd(dH2, cache["ln2"])
        dH1 = dS2.copy()
        grads["ff.W2"] = np.einsum("bni,bnj->ij", dS2, cache["f_drop"])
        grads["ff.b2"] = dS2.sum(axis=(0, 1))
        dfd = dS2 @ p["ff.W2"]
        if cache["fmask"] is not None:
            dfd = dfd * cache["fmask"]
        dfp = activation_bwd("gelu", cache["f_pre"], cache["f_act"], dfd)
        grads["ff.W1"] = np.einsum("bni,bnj->ij", dfp, cache["H1"])
        grads["ff.b1"] = dfp.sum(axis=(0, 1))
        dH1 += dfp @ p["ff.W1"]
        dS1, grads["ln1.gain"], grads["ln1.bias"] = layer_norm_bwd(dH1, cache["ln1"])
        dE = dS1.copy()
        grads["attn.Wout"] = np.einsum("bni,bnj->ij", dS1, cache["Y"])
        dY = dS1 @ p["attn.Wout"]
        A, Q, K, V, E = cache["A"], cache["Q"], cache["K"], cache["V"], cache["E"]
        dV = A.transpose(0, 2, 1) @ dY
        dS = softmax_bwd(A, dY @ V.transpose(0, 2, 1)) / math.sqrt(d)
        dQ = dS @ K
        dK = dS.transpose(0, 2, 1) @ Q
        for name, dP in (("attn.Wq", dQ), ("attn.Wk", dK), ("attn.Wv", dV)):
            grads[name] = np.einsum("bni,bnj->ij", dP, E)
            dE = dE + dP @ p[name]
        dW, db, dpos_n, n = embed_tokens_bwd(dE, cache["inputs"])
        dpos = np.zeros_like(p["embed.pos"])
        dpos[:n] = dpos_n
        grads["embed.W"], grads["embed.b"], grads["embed.pos"] = dW, db, dpos
        return grads


MODEL_KINDS = {"crsn": CrsnModel, "mlp": MlpModel, "mini_attn": MiniAttnModel}
CONFIG_TYPES = {"crsn": CrsnConfig, "mlp": MlpConfig, "mini_attn": AttnConfig}


def build_model(kind, config, rng: Rng | None = None) -> Model:
    try:
        cls = MODEL_KINDS[kind]
    except KeyError:
        raise ConfigError(f"unknown model kind {kind!r}") from None
    return cls(config, rng=rng)


# -----------------------------------------------------------------------------
# Checkpoints
# -----------------------------------------------------------------------------


def save_checkpoint(path, model: Model, meta=None):
    """Write a one-line JSON manifest followed by a little-endian float64 blob."""
    names = sorted(model.params)
    tensors, offset = [], 0
    for name in names:
        arr = model.params[name]
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "kind": model.kind,
        "config": model.config.to_dict(),
        "tensors": tensors,
        "meta": model.meta if meta is None else meta,
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        for name in names:
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`. Returns ``(model, meta)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    head, sep, blob = raw.partition(b"\n")
    if not sep:
        raise SchemaError(f"{path}: missing checkpoint manifest")
    try:
        manifest = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"{path}: unreadable checkpoint manifest ({exc})") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise SchemaError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    kind = manifest["kind"]
    if kind not in MODEL_KINDS:
        raise SchemaError(f"{path}: unknown model kind {kind!r}")
    config = CONFIG_TYPES[kind](**manifest["config"])
    reference = MODEL_KINDS[kind](config, rng=Rng(0)).params
    params = {}
    for t in manifest["tensors"]:
        name, shape, off = t["name"], tuple(t["shape"]), t["offset"]
        if name not in reference:
            raise SchemaError(f"{path}: unexpected tensor {name!r}")
        if reference[name].shape != shape:
            raise SchemaError(f"{path}: tensor {name!r} has shape {shape}, config expects "
                              f"{reference[name].shape}")
        size = int(np.prod(shape, dtype=np.int64))
        if off + 8 * size > len(blob):
            raise SchemaError(f"{path}: blob truncated at tensor {name!r}")
        params[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).astype(np.float64).reshape(shape)
    missing = set(reference) - set(params)
    if missing:
        raise SchemaError(f"{path}: missing tensors {sorted(missing)}")
    model = MODEL_KINDS[kind](config, params=params)
    model.meta = manifest.get("meta", {})
    return model, model.meta


def model_displacement(cache):
    """Mean per-iteration agent displacement recorded during a CRSN forward."""
    return cache.get("displacement")
