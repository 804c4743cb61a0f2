"""Wall-time scaling of the swarm layer versus pairwise self-attention."""

from __future__ import annotations

import io
import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import DegenerateInputError, MeasurementError, RangeError
from .model import CrsnConfig, N_POLLUTANTS, attention_core
from .numerics import Rng
from .swarm import AgentPopulation, SILParams, sil_forward

KINDS = ("sil", "mini_attn")
MIN_LENGTH, MAX_LENGTH = 64, 4096


@dataclass
class TimingSeries:
    kind: str
    lengths: list
    medians: list
    reps: int
    warmup: int
    batch: int = 1
    profile: str = "desk"
    samples: list = field(default_factory=list)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.lengths, self.lengths[1:])):
            raise RangeError("lengths must be strictly increasing")
        if self.reps < 5:
            raise RangeError("at least 5 repetitions per length")


def _stage(kind, cfg: CrsnConfig, n, batch, seed):
    """Build the timed callable for one length; inputs depend only on (seed, n)."""
    d, m = cfg.d_model, cfg.agents
    rng = Rng(seed).child(n)
    tokens = rng.child(0).normal((batch, n, d))
    if kind == "sil":
        params = SILParams.init(d, rng.child(1))
        pop = AgentPopulation.at_rest(rng.child(2).normal((batch, m, d)))
        return lambda: sil_forward(tokens, pop, params, None, False)
    if kind == "mini_attn":
        g = rng.child(1).generator()
        Wq, Wk, Wv = (g.normal(0, 1 / math.sqrt(d), (d, d)) for _ in range(3))
        return lambda: attention_core(tokens, Wq, Wk, Wv)
    raise ValueError(f"unknown bench kind {kind!r}")


def time_scaling(kind, lengths, reps=9, profile="desk", batch=4, warmup=2, seed=0,
                 config: CrsnConfig | None = None) -> TimingSeries:
    """Median wall time of the token-interaction stage at each sequence length.

    For ``sil`` that is one full swarm layer; for ``mini_attn`` it is the
    projections, all-pairs scores, softmax and mixing. Runs pinned to one
    BLAS thread. A batch of a few windows per call keeps interpreter
    overhead from flattening the small-n end of the curve.
    """
    lengths = [int(n) for n in lengths]
    if not lengths or min(lengths) < MIN_LENGTH or max(lengths) > MAX_LENGTH:
        raise RangeError(f"lengths must lie in [{MIN_LENGTH}, {MAX_LENGTH}]")
    cfg = config or CrsnConfig.from_profile(profile)
    medians, samples = [], []
    with threadpool_limits(limits=1):
        for n in lengths:
            fn = _stage(kind, cfg, n, batch, seed)
            for _ in range(warmup):
                fn()
            times = []
            for _ in range(reps):
                t0 = time.perf_counter()
                fn()
                times.append(time.perf_counter() - t0)
            medians.append(float(np.median(times)))
            samples.append(times)
    resolution = time.get_clock_info("perf_counter").resolution
    if resolution > 0.01 * min(medians):
        raise MeasurementError(f"timer resolution {resolution:g}s exceeds 1% of the smallest "
                               f"median {min(medians):g}s; increase batch or reps")
    return TimingSeries(kind, lengths, medians, reps, warmup, batch, cfg.profile, samples)


def fit_loglog_slope(series) -> float:
    """Least-squares slope of log(time) against log(n)."""
    if isinstance(series, TimingSeries):
        n, t = series.lengths, series.medians
    else:
        n, t = series
    n = np.asarray(n, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if len(n) < 3:
        raise DegenerateInputError("slope fit needs at least 3 points")
    if np.any(t <= 0) or np.any(n <= 0):
        raise DegenerateInputError("slope fit needs positive lengths and times")
    x = np.log(n)
    y = np.log(t)
    xc = x - x.mean()
    return float((xc * (y - y.mean())).sum() / (xc * xc).sum())


# -----------------------------------------------------------------------------
# Activation memory
# -----------------------------------------------------------------------------


def activation_terms(config: CrsnConfig, n):
    """Stored forward activations per sample, split by what depends on n."""
    d, m, L, G, h = config.d_model, config.agents, config.layers, config.groups, config.decoder_hidden
    return {
        "tokens": (L + 1) * n * d,  # embedding plus each layer's token output
        "agents": (L + 1) * 2 * m * d,  # positions and velocities entering/leaving each layer
        "attention_rows": L * m * n,  # agent-over-token weights
        "hierarchy": m + G + G * d,
        "decoder": 2 * h + N_POLLUTANTS + 2 + N_POLLUTANTS,
    }


def activation_memory(config: CrsnConfig, n, bytes_per_scalar=2, batch=1) -> int:
    return int(sum(activation_terms(config, n).values()) * bytes_per_scalar * batch)


def length_for_memory(config: CrsnConfig, target_bytes=16 * 2**20, bytes_per_scalar=2, batch=1):
    """Sequence length whose activation footprint is nearest ``target_bytes``."""
    fixed = activation_memory(config, 0, bytes_per_scalar, batch)
    per_token = activation_memory(config, 1, bytes_per_scalar, batch) - fixed
    guess = (target_bytes - fixed) / per_token
    lo, hi = max(0, math.floor(guess)), max(0, math.ceil(guess))
    return min((lo, hi), key=lambda k: abs(activation_memory(config, k, bytes_per_scalar, batch)
                                            - target_bytes))


# -----------------------------------------------------------------------------
# Reports
# -----------------------------------------------------------------------------


def bench_csv(series_list):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "n", "median_s", "reps"])
    for s in series_list:
        for n, t in zip(s.lengths, s.medians):
            w.writerow([s.kind, n, repr(t), s.reps])
    return buf.getvalue()


def bench_summary(series_list, config: CrsnConfig | None = None):
    out = {"slopes": {s.kind: fit_loglog_slope(s) for s in series_list},
           "batch": {s.kind: s.batch for s in series_list},
           "profile": series_list[0].profile if series_list else None}
    if config is not None:
        out["memory_16mb_length"] = length_for_memory(config)
    return json.dumps(out, indent=2, sort_keys=True) + "\n"
