"""Synthetic influent corpus, CSV I/O, windowing, normalisation and perturbations.

Every descriptor is ``mean + scale * (diurnal + weekly + AR(1))``, with the
pollutant loads riding on the flow signal. Targets come from fixed closed
forms (see :data:`GENERATOR_CONSTANTS`), so the Bayes-optimal predictor is
known exactly:

    removal_p = sigmoid(a_p * aeration - b_p * load_p + c_p * (temperature - 12))
    EC        = e0 + e1 * aeration + sum_p s_p * load_p
    share_p   = s_p * load_p / sum_q s_q * load_q
    CE        = kappa * EC * grid_intensity + sum_p mu_p * (1 - removal_p) * load_p
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigError, DegenerateInputError, ParseError, RangeError, SchemaError
from .model import N_INPUTS, N_POLLUTANTS, POLLUTANTS, Prediction
from .numerics import Rng, sigmoid

N_DESCRIPTORS = 42
DESCRIPTOR_NAMES = tuple(f"d{i:02d}" for i in range(1, N_DESCRIPTORS + 1))
INPUT_NAMES = DESCRIPTOR_NAMES + ("aeration_load",)
TARGET_NAMES = (
    tuple(f"tgt_removal_{p}" for p in POLLUTANTS) + ("tgt_ec", "tgt_ce")
    + tuple(f"tgt_share_{p}" for p in POLLUTANTS)
)
CSV_HEADER = ("hour",) + INPUT_NAMES + TARGET_NAMES
GENERATOR_VERSION = "crsn-gen-1"

# descriptor layout (0-based column index)
LOAD_COLS = tuple(range(8))  # d01..d08, mg/L, Table II pollutant order
FLOW, TEMPERATURE, PH, DISSOLVED_O2, PATHOGEN = 8, 9, 10, 11, 12  # d09..d13
AUX_COLS = tuple(range(12, 42))  # d13..d42; d13 is the pathogen indicator

_LOAD_MEANS = [35.0, 8.0, 6.0, 420.0, 260.0, 0.6, 1.1, 2.4]

GENERATOR_CONSTANTS = {
    "version": GENERATOR_VERSION,
    "pollutants": list(POLLUTANTS),
    "channels": {
        "d01-d08": "pollutant loads (mg/L): " + ", ".join(POLLUTANTS),
        "d09": "flow (m3/h)", "d10": "temperature (C)", "d11": "pH",
        "d12": "dissolved oxygen (mg/L)", "d13": "pathogen indicator (log10 CFU/100 mL)",
        "d14-d42": "auxiliary channels mixing two core anomalies",
        "aeration_load": "metered aeration (kWh/m3)",
    },
    "core_means": _LOAD_MEANS + [1500.0, 18.0, 7.2, 2.0],
    "core_scales": _LOAD_MEANS + [1500.0, 4.0, 0.2, 0.6],
    "load_flow_coupling": 0.6,
    "aeration_mean": 0.28,
    "aeration_load_coupling": {"nh4": 0.4, "cod": 0.2},
    "temperature_bounds": [-5.0, 45.0],
    "removal": {
        "a": [12.0, 11.0, 10.5, 11.5, 13.0, 9.0, 9.5, 10.0],
        "b_relative": [1.0, 0.9, 0.9, 1.1, 0.8, 1.2, 1.1, 1.0],
        "c": [0.06, 0.05, 0.03, 0.04, 0.02, 0.05, 0.05, 0.03],
        "reference_temperature": 12.0,
    },
    "energy": {
        "e0": 0.05,
        "e1": 0.6,
        "s_relative": [0.030, 0.022, 0.020, 0.018, 0.016, 0.014, 0.013, 0.012],
    },
    "carbon": {
        "kappa": 1.0,
        "grid_intensity": 46.0,
        "mu_relative": [8.0, 4.0, 3.0, 6.0, 3.0, 2.0, 2.0, 2.0],
    },
    "notes": "b_p = b_relative_p / mean_load_p, s_p = s_relative_p / mean_load_p, "
             "mu_p = mu_relative_p / mean_load_p",
}


def _aux_mixing():
    """Fixed (core_a, core_b, w_a, w_b, mean) for each auxiliary channel."""
    rows = []
    for j in range(len(AUX_COLS)):
        a = j % 12
        b = (5 * j + 3) % 12
        if b == a:
            b = (b + 1) % 12
        mean = 6.0 if j == 0 else 10.0 + j  # j == 0 is the pathogen indicator
        rows.append([a, b, 0.5 - 0.01 * j, 0.3 if j % 2 else -0.3, mean])
    return rows


GENERATOR_CONSTANTS["aux_mixing"] = _aux_mixing()
GENERATOR_CONSTANTS["aux_mixing_columns"] = ["core_a", "core_b", "w_a", "w_b", "mean"]


def _phase(k, period):
    return (0.61803398875 * (k + 1) * (7 if period == 24 else 3)) % (2 * math.pi)


def _const_arrays():
    c = GENERATOR_CONSTANTS
    mean_load = np.array(c["core_means"][:8])
    rem = c["removal"]
    return {
        "a": np.array(rem["a"]),
        "b": np.array(rem["b_relative"]) / mean_load,
        "c": np.array(rem["c"]),
        "t_ref": rem["reference_temperature"],
        "e0": c["energy"]["e0"],
        "e1": c["energy"]["e1"],
        "s": np.array(c["energy"]["s_relative"]) / mean_load,
        "kappa": c["carbon"]["kappa"],
        "g": c["carbon"]["grid_intensity"],
        "mu": np.array(c["carbon"]["mu_relative"]) / mean_load,
    }


# -----------------------------------------------------------------------------
# Containers
# -----------------------------------------------------------------------------


@dataclass
class Records:
    """Column-oriented block of hourly influent records."""

    hour: np.ndarray  # [N] int64
    descriptors: np.ndarray  # [N, 42]
    aeration: np.ndarray  # [N], kWh m^-3

    def __post_init__(self):
        if self.descriptors.ndim != 2 or self.descriptors.shape[1] != N_DESCRIPTORS:
            raise SchemaError(f"records need exactly {N_DESCRIPTORS} descriptors, "
                              f"got shape {self.descriptors.shape}")

    def __len__(self):
        return len(self.hour)

    def __getitem__(self, idx):
        return Records(self.hour[idx], self.descriptors[idx], self.aeration[idx])

    def inputs(self):
        return np.concatenate([self.descriptors, self.aeration[:, None]], axis=1)

    def with_inputs(self, x):
        return Records(self.hour.copy(), np.array(x[:, :N_DESCRIPTORS]), np.array(x[:, N_DESCRIPTORS]))

    def copy(self):
        return Records(self.hour.copy(), self.descriptors.copy(), self.aeration.copy())


@dataclass(frozen=True)
class CorpusSpec:
    n_records: int = 6500
    seed: int = 42
    diurnal_amplitude: float = 0.15
    weekly_amplitude: float = 0.05
    rho: float = 0.8
    noise_scale: float = 0.1

    def __post_init__(self):
        if self.n_records < 1:
            raise ConfigError("n_records must be >= 1")
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError("rho must be in [0, 1)")
        if min(self.diurnal_amplitude, self.weekly_amplitude, self.noise_scale) < 0:
            raise ConfigError("amplitudes and noise scale must be non-negative")


# -----------------------------------------------------------------------------
# Generation
# -----------------------------------------------------------------------------


def _ar1(rng: Rng, n, rho, scale):
    if scale == 0.0:
        return np.zeros(n)
    eps = rng.normal(n) * scale * math.sqrt(1.0 - rho * rho)
    start = rng.child(1).normal(1)[0] * scale
    return lfilter([1.0], [1.0, -rho], eps, zi=[rho * start])[0]


def _seasonal(t, k, spec: CorpusSpec):
    return (spec.diurnal_amplitude * np.sin(2 * np.pi * t / 24.0 + _phase(k, 24))
            + spec.weekly_amplitude * np.sin(2 * np.pi * t / 168.0 + _phase(k, 168)))


def targets_from_inputs(loads, aeration, temperature) -> Prediction:
    """Closed-form ground truth for arrays of loads [N, 8], aeration [N], temperature [N]."""
    k = _const_arrays()
    logit = k["a"] * aeration[:, None] - k["b"] * loads + k["c"] * (temperature[:, None] - k["t_ref"])
    removals = sigmoid(logit)
    parts = k["s"] * loads
    ec = k["e0"] + k["e1"] * aeration + parts.sum(axis=1)
    total = parts.sum(axis=1, keepdims=True)
    shares = np.where(total > 0, parts / np.where(total > 0, total, 1.0), 1.0 / N_POLLUTANTS)
    ce = k["kappa"] * ec * k["g"] + (k["mu"] * (1.0 - removals) * loads).sum(axis=1)
    return Prediction(removals, ec, ce, shares)


def generate_corpus(spec: CorpusSpec = CorpusSpec()):
    """Return ``(records, targets)`` for ``spec``; a pure function of ``spec``."""
    c = GENERATOR_CONSTANTS
    N = spec.n_records
    t = np.arange(N, dtype=np.float64)
    rng = Rng(spec.seed)
    means = np.array(c["core_means"])
    scales = np.array(c["core_scales"])

    # core anomalies in units of each channel's scale
    anom = np.empty((N, 12))
    for k in range(12):
        anom[:, k] = _seasonal(t, k, spec) + _ar1(rng.child(k), N, spec.rho, spec.noise_scale)
    flow_anom = anom[:, FLOW]
    anom[:, :8] += c["load_flow_coupling"] * flow_anom[:, None]

    desc = np.empty((N, N_DESCRIPTORS))
    desc[:, :12] = means + scales * anom
    desc[:, :8] = np.maximum(desc[:, :8], 0.0)
    desc[:, FLOW] = np.maximum(desc[:, FLOW], 0.0)
    lo, hi = c["temperature_bounds"]
    desc[:, TEMPERATURE] = np.clip(desc[:, TEMPERATURE], lo, hi)
    desc[:, DISSOLVED_O2] = np.maximum(desc[:, DISSOLVED_O2], 0.0)
    for j, (a, b, wa, wb, mean) in enumerate(c["aux_mixing"]):
        k = 12 + j
        own = _seasonal(t, k, spec) + _ar1(rng.child(k), N, spec.rho, spec.noise_scale)
        desc[:, k] = np.maximum(mean * (1.0 + wa * anom[:, int(a)] + wb * anom[:, int(b)] + own), 0.0)

    cpl = c["aeration_load_coupling"]
    aer_anom = (cpl["nh4"] * anom[:, 0] + cpl["cod"] * anom[:, 3]
                + _seasonal(t, 42, spec) + _ar1(rng.child(42), N, spec.rho, spec.noise_scale))
    aeration = np.maximum(c["aeration_mean"] * (1.0 + aer_anom), 0.02)

    records = Records(np.arange(N, dtype=np.int64), desc, aeration)
    targets = targets_from_inputs(desc[:, :8], aeration, desc[:, TEMPERATURE])
    return records, targets


def constants_sidecar(spec: CorpusSpec | None = None):
    out = dict(GENERATOR_CONSTANTS)
    if spec is not None:
        out["corpus_spec"] = asdict(spec)
    return json.dumps(out, indent=2, sort_keys=True) + "\n"


# -----------------------------------------------------------------------------
# CSV
# -----------------------------------------------------------------------------


def _target_columns(targets: Prediction):
    return np.concatenate([targets.removals, targets.ec[:, None], targets.ce[:, None],
                           targets.shares], axis=1)


def corpus_to_csv(records: Records, targets: Prediction) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    body = np.concatenate([records.inputs(), _target_columns(targets)], axis=1)
    for h, row in zip(records.hour, body):
        w.writerow([str(int(h))] + [repr(float(v)) for v in row])
    return buf.getvalue()


def save_corpus(path, records: Records, targets: Prediction):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(corpus_to_csv(records, targets))


def load_corpus(path):
    """Read a corpus CSV written by :func:`save_corpus`; returns ``(records, targets)``."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        descriptor_cols = [h for h in header if len(h) == 3 and h[0] == "d" and h[1:].isdigit()]
        if len(descriptor_cols) != N_DESCRIPTORS:
            raise SchemaError(f"{path}: expected {N_DESCRIPTORS} descriptor columns, "
                              f"found {len(descriptor_cols)}")
        for col in CSV_HEADER:
            if col not in header:
                raise SchemaError(f"{path}: missing column {col!r}")
        extra = [h for h in header if h not in CSV_HEADER]
        if extra:
            raise SchemaError(f"{path}: unexpected columns {extra}")
        order = [header.index(col) for col in CSV_HEADER]
        rows = []
        for r, raw in enumerate(reader):
            if len(raw) != len(header):
                raise ParseError(f"{path}: row {r} has {len(raw)} cells, expected {len(header)}", r)
            vals = []
            for col_name, j in zip(CSV_HEADER, order):
                cell = raw[j]
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"{path}: row {r}, column {col_name!r}: "
                                     f"non-numeric value {cell!r}", r, col_name) from None
                if not math.isfinite(v):
                    raise ParseError(f"{path}: row {r}, column {col_name!r}: "
                                     f"non-finite value {cell!r}", r, col_name)
                vals.append(v)
            rows.append(vals)
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(CSV_HEADER))
    k = 1 + N_INPUTS
    records = Records(data[:, 0].astype(np.int64), data[:, 1:1 + N_DESCRIPTORS].copy(),
                      data[:, 1 + N_DESCRIPTORS].copy())
    tg = data[:, k:]
    targets = Prediction(tg[:, :8].copy(), tg[:, 8].copy(), tg[:, 9].copy(), tg[:, 10:18].copy())
    return records, targets


# -----------------------------------------------------------------------------
# Splits, windows, normalisation
# -----------------------------------------------------------------------------


def split_corpus(records: Records, targets: Prediction, ratios=(0.7, 0.15, 0.15)):
    """Chronological train/val/test split (no shuffling across time)."""
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1: {ratios}")
    N = len(records)
    a = int(round(N * ratios[0]))
    b = a + int(round(N * ratios[1]))
    cuts = [slice(0, a), slice(a, b), slice(b, N)]
    return [(records[s], targets.select(s)) for s in cuts]


@dataclass
class Windows:
    inputs: np.ndarray  # [S, n, 43]
    targets: Prediction  # value at each window's last record
    end: np.ndarray  # [S] index of the last record

    def __len__(self):
        return len(self.end)

    def subset(self, idx):
        return Windows(self.inputs[idx], self.targets.select(idx), self.end[idx])


def window_count(N, n, stride):
    return (N - n) // stride + 1


def make_windows(inputs, targets: Prediction, n, stride=1) -> Windows:
    """Sliding windows of ``n`` consecutive records, labelled by the last one."""
    if isinstance(inputs, Records):
        inputs = inputs.inputs()
    N = len(inputs)
    if n < 1 or stride < 1:
        raise RangeError("window length and stride must be >= 1")
    if n > N:
        raise RangeError(f"window length {n} exceeds record count {N}")
    starts = np.arange(0, N - n + 1, stride)
    view = np.lib.stride_tricks.sliding_window_view(inputs, n, axis=0)  # [N-n+1, 43, n]
    win = np.ascontiguousarray(view[starts].transpose(0, 2, 1))
    end = starts + n - 1
    return Windows(win, targets.select(end), end)


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    MIN_STD = 1e-12

    @classmethod
    def fit(cls, x):
        x = x.inputs() if isinstance(x, Records) else np.asarray(x, dtype=np.float64)
        if x.size == 0 or len(x) == 0:
            raise DegenerateInputError("cannot fit a normaliser on no records")
        return cls(x.mean(axis=0), x.std(axis=0))

    def apply(self, x):
        x = x.inputs() if isinstance(x, Records) else np.asarray(x, dtype=np.float64)
        if len(x) == 0:
            raise DegenerateInputError("nothing to normalise")
        live = self.std >= self.MIN_STD
        return np.where(live, (x - self.mean) / np.where(live, self.std, 1.0), x)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float))


def fit_normalizer(records):
    return Normalizer.fit(records)


def apply_normalizer(normalizer: Normalizer, records):
    return normalizer.apply(records)


# -----------------------------------------------------------------------------
# Perturbations
# -----------------------------------------------------------------------------


PERTURBATION_KINDS = ("sensor_drift", "hydraulic_surge", "pathogen_shock")
DEFAULT_CHANNELS = {
    "sensor_drift": ("d01",),
    "hydraulic_surge": ("d09",) + DESCRIPTOR_NAMES[:8],
    "pathogen_shock": ("d13", "d04"),
}


@dataclass(frozen=True)
class PerturbationSpec:
    """One injected fault.

    ``duration=None`` runs to the end of the record block. ``noise`` adds
    per-replica multiplicative jitter ``1 + noise * N(0, 1)`` to the injected
    effect, so replicas differ only when noise > 0.
    """

    kind: str
    magnitude: float
    onset: int = 0
    duration: int | None = None
    channels: tuple | None = None
    noise: float = 0.0

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ConfigError(f"unknown perturbation kind {self.kind!r}")
        if self.magnitude < 0:
            raise ConfigError("perturbation magnitude must be non-negative")
        if self.onset < 0:
            raise ConfigError("perturbation onset must be non-negative")
        if self.duration is not None and self.duration < 1:
            raise ConfigError("perturbation duration must be >= 1")
        if self.noise < 0:
            raise ConfigError("perturbation noise must be non-negative")
        if self.channels is not None:
            object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def channel_set(self):
        return self.channels if self.channels is not None else DEFAULT_CHANNELS[self.kind]

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channel_set)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {"kind", "magnitude", "onset", "duration", "channels", "noise"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown perturbation keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _channel_index(name):
    try:
        return INPUT_NAMES.index(name)
    except ValueError:
        raise ConfigError(f"unknown channel {name!r}") from None


def apply_perturbation(records: Records, spec: PerturbationSpec, rng: Rng | None = None) -> Records:
    """Return a perturbed copy of ``records``; rows before the onset are untouched."""
    N = len(records)
    cols = [_channel_index(c) for c in spec.channel_set]
    duration = N - spec.onset if spec.duration is None else spec.duration
    if spec.onset + duration > N:
        raise RangeError(f"perturbation window [{spec.onset}, {spec.onset + duration}) "
                         f"exceeds {N} records")
    x = records.inputs()
    out = x.copy()
    if spec.magnitude == 0.0 or duration == 0:
        return records.with_inputs(out)
    rows = np.arange(spec.onset, spec.onset + duration)
    block = x[np.ix_(rows, cols)]
    if spec.kind == "sensor_drift":
        effect = spec.magnitude * (rows - spec.onset)[:, None] * np.ones(len(cols))
    elif spec.kind == "hydraulic_surge":
        effect = spec.magnitude * block
    else:
        baseline = x[:, cols].mean(axis=0)
        effect = spec.magnitude * baseline * np.ones((len(rows), 1))
    if spec.noise > 0:
        if rng is None:
            raise ConfigError("a noisy perturbation needs an Rng")
        effect = effect * (1.0 + spec.noise * rng.normal(effect.shape))
    out[np.ix_(rows, cols)] = block + effect
    return records.with_inputs(out)


# -----------------------------------------------------------------------------
# Micro corpus for memorisation checks
# -----------------------------------------------------------------------------


def make_micro_corpus(n_windows=8, window=24, seed=7, low=0.82, high=0.96, threshold=0.9):
    """Non-overlapping windows whose removal targets sit at ``low`` or ``high``.

    Each removal target is snapped to ``high`` when the generator's value is at
    or above ``threshold`` and to ``low`` otherwise, so every target is at least
    ``min(high - threshold, threshold - low)`` from the compliance threshold.
    Returns ``(records, targets, windows_raw)`` with raw (unnormalised) inputs.
    """
    records, targets = generate_corpus(CorpusSpec(n_records=n_windows * window, seed=seed))
    snapped = np.where(targets.removals >= threshold, high, low)
    targets = Prediction(snapped, targets.ec, targets.ce, targets.shares)
    return records, targets, make_windows(records, targets, window, stride=window)


__all__ = [
    "CorpusSpec", "Records", "Windows", "Normalizer", "PerturbationSpec", "generate_corpus",
    "load_corpus", "save_corpus", "make_windows", "fit_normalizer", "apply_normalizer",
    "apply_perturbation", "split_corpus", "constants_sidecar", "targets_from_inputs",
    "make_micro_corpus", "GENERATOR_CONSTANTS", "CSV_HEADER",
]
