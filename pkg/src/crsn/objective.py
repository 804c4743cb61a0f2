"""Carbon-aware composite loss and evaluation metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .model import N_POLLUTANTS, POLLUTANTS, Prediction

CARBON_THRESHOLD = 20.0  # g m^-3, neutrality threshold for the hinge
_ZERO_NORM = 1e-12


@dataclass(frozen=True)
class LossWeights:
    reg: float = 0.5
    carbon: float = 0.3
    pareto: float = 0.2

    def __post_init__(self):
        if min(self.reg, self.carbon, self.pareto) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.reg + self.carbon + self.pareto <= 0:
            raise ValueError("loss weights must not all be zero")

    def combine(self, mse, co2, div):
        return self.reg * mse + self.carbon * co2 + self.pareto * div


@dataclass(frozen=True)
class LossBreakdown:
    mse: float
    co2: float
    diversity: float
    total: float
    weights: LossWeights = field(default_factory=LossWeights)

    def recompute(self):
        return self.weights.combine(self.mse, self.co2, self.diversity)

    def as_dict(self):
        return {"mse": self.mse, "co2": self.co2, "diversity": self.diversity, "total": self.total}


@dataclass
class OutputScale:
    """Per-output standard deviations used to put the regression targets on one scale."""

    removals: np.ndarray
    ec: float
    ce: float
    shares: np.ndarray

    @classmethod
    def fit(cls, targets: Prediction):
        def guard(s):
            s = np.asarray(s, dtype=np.float64)
            return np.where(s < 1e-12, 1.0, s)
        return cls(guard(targets.removals.std(axis=0)), float(guard(targets.ec.std())),
                   float(guard(targets.ce.std())), guard(targets.shares.std(axis=0)))

    @classmethod
    def unit(cls):
        return cls(np.ones(N_POLLUTANTS), 1.0, 1.0, np.ones(N_POLLUTANTS))

    def to_dict(self):
        return {"removals": self.removals.tolist(), "ec": self.ec, "ce": self.ce,
                "shares": self.shares.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["removals"], float), float(d["ec"]), float(d["ce"]),
                   np.asarray(d["shares"], float))


# -----------------------------------------------------------------------------
# Loss terms
# -----------------------------------------------------------------------------


def co2_penalty(ce, tau=CARBON_THRESHOLD):
    """Batch mean of max(0, CE - tau) / tau."""
    ce = np.atleast_1d(np.asarray(ce, dtype=np.float64))
    return float(np.mean(np.maximum(ce - tau, 0.0)) / tau)


def co2_penalty_grad(ce, tau=CARBON_THRESHOLD):
    ce = np.atleast_1d(np.asarray(ce, dtype=np.float64))
    return (ce > tau) / (tau * ce.size)


def _unit_rows(X):
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    live = norms > _ZERO_NORM
    U = np.where(live, X / np.where(live, norms, 1.0), 0.0)
    return U, norms, live


def diversity_penalty(positions):
    """Mean pairwise cosine similarity over agent pairs i < j.

    Accepts ``[m, d]`` or a batch ``[B, m, d]`` (averaged over the batch).
    Agents at the origin count as similarity 0 with everything.
    """
    X = np.asarray(positions, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    m = X.shape[1]
    if m < 2:
        raise DegenerateInputError("diversity needs at least two agents")
    U, _, _ = _unit_rows(X)
    total = U.sum(axis=1)
    pair_sum = (total * total).sum(axis=-1) - (U * U).sum(axis=(1, 2))
    return float(np.mean(pair_sum / (m * (m - 1))))


def diversity_penalty_grad(positions):
    X = np.asarray(positions, dtype=np.float64)
    B, m, _ = X.shape
    U, norms, live = _unit_rows(X)
    total = U.sum(axis=1, keepdims=True)
    dU = 2.0 * (total - U) / (m * (m - 1) * B)
    radial = (U * dU).sum(axis=-1, keepdims=True)
    return np.where(live, (dU - U * radial) / np.where(live, norms, 1.0), 0.0)


def _mse_terms(pred: Prediction, target: Prediction, scale: OutputScale):
    return (
        (pred.removals - target.removals) / scale.removals,
        (pred.ec - target.ec) / scale.ec,
        (pred.ce - target.ce) / scale.ce,
        (pred.shares - target.shares) / scale.shares,
    )


def composite_loss(pred: Prediction, target: Prediction, positions=None,
                   weights: LossWeights = LossWeights(), scale: OutputScale | None = None,
                   tau=CARBON_THRESHOLD, with_grad=False):
    """Weighted sum of scaled MSE, CO2 hinge and agent-similarity terms.

    The MSE term averages over every sample and all 18 outputs (8 removals,
    EC, CE, 8 energy shares), each divided by its training-set spread. With
    ``positions=None`` (models without agents) the diversity term is 0.

    Returns the :class:`LossBreakdown`; with ``with_grad`` also returns the
    gradients w.r.t. ``pred`` (as a :class:`Prediction`) and ``positions``.
    """
    B = len(pred)
    if B == 0:
        raise DegenerateInputError("empty batch")
    if len(target) != B or pred.removals.shape != target.removals.shape:
        raise ShapeError(f"prediction batch {pred.removals.shape} vs target {target.removals.shape}")
    scale = scale or OutputScale.unit()
    n_out = 2 * N_POLLUTANTS + 2
    er, ee, ec, es = _mse_terms(pred, target, scale)
    sq = (er * er).sum() + (ee * ee).sum() + (ec * ec).sum() + (es * es).sum()
    mse = float(sq / (B * n_out))
    co2 = co2_penalty(pred.ce, tau)
    div = 0.0 if positions is None else diversity_penalty(positions)
    total = weights.combine(mse, co2, div)
    out = LossBreakdown(mse, co2, div, total, weights)
    if not with_grad:
        return out
    k = 2.0 * weights.reg / (B * n_out)
    grad_pred = Prediction(
        k * er / scale.removals,
        k * ee / scale.ec,
        k * ec / scale.ce + weights.carbon * co2_penalty_grad(pred.ce, tau),
        k * es / scale.shares,
    )
    grad_pos = None if positions is None else weights.pareto * diversity_penalty_grad(positions)
    return out, grad_pred, grad_pos


# -----------------------------------------------------------------------------
# Metrics
# -----------------------------------------------------------------------------


def f1_per_pollutant(pred_removals, true_removals, thresholds=0.9):
    """F1 of the 'compliant' class (removal >= threshold), one value per pollutant.

    When neither prediction nor truth contains a compliant sample the score is 1.
    """
    p = np.asarray(pred_removals, dtype=np.float64) >= thresholds
    t = np.asarray(true_removals, dtype=np.float64) >= thresholds
    tp = (p & t).sum(axis=0)
    fp = (p & ~t).sum(axis=0)
    fn = (~p & t).sum(axis=0)
    denom = 2 * tp + fp + fn
    return np.where(denom == 0, 1.0, 2 * tp / np.where(denom == 0, 1, denom))


@dataclass
class MetricsReport:
    model: str
    re: float
    re_mae: float
    ec: float
    ce: float
    f1: list
    energy_share: list
    sigma_re: float
    samples: int
    replicas: int

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @staticmethod
    def csv_header():
        cols = ["model", "RE", "EC", "CE"]
        for name in POLLUTANTS:
            cols += [f"f1_{name}", f"share_{name}"]
        return cols + ["RE_mae", "sigma_RE"]

    def csv_row(self):
        row = [self.model, repr(self.re), repr(self.ec), repr(self.ce)]
        for f, s in zip(self.f1, self.energy_share):
            row += [repr(f), repr(s)]
        return row + [repr(self.re_mae), repr(self.sigma_re)]

    def to_csv(self):
        return reports_to_csv([self])


def reports_to_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MetricsReport.csv_header())
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


def removal_efficiency(pred: Prediction):
    return float(pred.removals.mean() * 100.0)


def spread(values):
    """Population standard deviation, exactly 0 when every value is identical."""
    v = np.asarray(values, dtype=np.float64)
    return float((v - v[0]).std()) if v.size else 0.0


def _pool(values):
    """Mean over replicas, anchored on the first so identical replicas pool exactly."""
    v = np.asarray(values, dtype=np.float64)
    return v[0] + (v - v[0]).mean(axis=0)


def compute_metrics(preds, target: Prediction, thresholds=0.9, model="crsn") -> MetricsReport:
    """Aggregate one prediction batch, or a list of replica batches over the same targets.

    Point metrics average over replicas (every replica has the same sample
    count, so this equals pooling); sigma_RE is the population standard
    deviation of the per-replica RE (0 for a single replica).
    """
    replicas = [preds] if isinstance(preds, Prediction) else list(preds)
    if not replicas or len(replicas[0]) == 0:
        raise DegenerateInputError("compute_metrics needs a non-empty batch")
    if any(len(r) != len(target) for r in replicas):
        raise DegenerateInputError("every replica must cover the target batch")
    pooled = Prediction.concat(replicas) if len(replicas) > 1 else replicas[0]
    truth = Prediction.concat([target] * len(replicas)) if len(replicas) > 1 else target
    per_re = np.array([removal_efficiency(r) for r in replicas])
    return MetricsReport(
        model=model,
        re=float(_pool(per_re)),
        re_mae=float(_pool([np.abs(r.removals - target.removals).mean() for r in replicas])),
        ec=float(_pool([r.ec.mean() for r in replicas])),
        ce=float(_pool([r.ce.mean() for r in replicas])),
        f1=[float(v) for v in f1_per_pollutant(pooled.removals, truth.removals, thresholds)],
        energy_share=[float(v) for v in _pool([r.shares.mean(axis=0) for r in replicas]) * 100.0],
        sigma_re=spread(per_re),
        samples=len(target),
        replicas=len(replicas),
    )
