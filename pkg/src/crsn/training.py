"""Training loop, evaluation, inertia-gate sweep and perturbation ensembles."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import (
    Normalizer,
    PerturbationSpec,
    Records,
    Windows,
    apply_perturbation,
    make_windows,
    split_corpus,
)
from .errors import ConfigError, ContractError, NumericError
from .model import (
    AttnConfig,
    CrsnConfig,
    MlpConfig,
    Model,
    Prediction,
    build_model,
)
from .numerics import AdamWState, LrSchedule, Rng, adamw_step
from .objective import (
    CARBON_THRESHOLD,
    LossWeights,
    MetricsReport,
    OutputScale,
    compute_metrics,
    composite_loss,
    removal_efficiency,
    spread,
)
from .swarm import GATE_HIGH, GATE_LOW

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 15
    weights: LossWeights = field(default_factory=LossWeights)
    base_lr: float = 3e-4
    warmup_steps: int = 1000
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 42
    model: str = "crsn"
    profile: str = "desk"
    min_delta: float = 1e-6
    tau: float = CARBON_THRESHOLD
    thresholds: float = 0.9

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")

    def schedule(self, steps_per_epoch):
        total = self.max_epochs * steps_per_epoch
        return LrSchedule(self.base_lr, min(self.warmup_steps, total), total)


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int = -1

    def to_jsonl(self):
        lines = []
        for e in self.epochs:
            lines.append(json.dumps(e, sort_keys=True))
        return "\n".join(lines) + "\n"


@dataclass
class Dataset:
    """Normalised train/val/test windows plus the raw test block for perturbation runs."""

    train: Windows
    val: Windows
    test: Windows
    normalizer: Normalizer
    window: int
    stride: int
    raw_test: tuple | None = None


def prepare_data(records: Records, targets: Prediction, window=24, stride=1,
                 ratios=(0.7, 0.15, 0.15)) -> Dataset:
    (tr, ttr), (va, tva), (te, tte) = split_corpus(records, targets, ratios)
    norm = Normalizer.fit(tr)
    return Dataset(
        make_windows(norm.apply(tr), ttr, window, stride),
        make_windows(norm.apply(va), tva, window, stride),
        make_windows(norm.apply(te), tte, window, stride),
        norm, window, stride, raw_test=(te, tte),
    )


def default_model_config(kind, profile="desk", window=24, **overrides):
    if kind == "crsn":
        return CrsnConfig.from_profile(profile, window=window, **overrides)
    if kind == "mlp":
        return MlpConfig(**overrides)
    if kind == "mini_attn":
        d = 256 if profile == "paper" else 64
        return AttnConfig(d_model=d, window=window, ff_width=4 * d, **overrides)
    raise ConfigError(f"unknown model kind {kind!r}")


class EarlyStopping:
    """Tracks the best validation loss; improvement means a drop of at least ``min_delta``."""

    def __init__(self, patience, min_delta=1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = -1

    def update(self, epoch, value):
        """Record ``value``; returns ``(improved, should_stop)``."""
        if value < self.best - self.min_delta:
            self.best, self.best_epoch = value, epoch
            return True, False
        return False, epoch - self.best_epoch >= self.patience


def _loss(model: Model, windows: Windows, cfg: TrainConfig, scale: OutputScale, batch=512):
    """Evaluation-mode composite loss over a whole split (sample-weighted mean)."""
    parts = np.zeros(4)
    for s in range(0, len(windows), batch):
        idx = slice(s, s + batch)
        pred, cache = model.forward(windows.inputs[idx], None, False)
        lb = composite_loss(pred, windows.targets.select(idx), cache["positions"], cfg.weights,
                            scale, cfg.tau)
        parts += len(pred) * np.array([lb.mse, lb.co2, lb.diversity, lb.total])
    return parts / len(windows)


def train(config: TrainConfig, data: Dataset, model_config=None, model: Model | None = None,
          log_every=0):
    """Fit a model; returns ``(model, history)`` with the best-validation parameters loaded.

    The model's ``meta`` carries the normaliser and output scale so a saved
    checkpoint can be evaluated on its own.
    """
    if len(data.train) == 0 or len(data.val) == 0:
        raise ConfigError("train and validation splits must be non-empty")
    rng = Rng(config.seed)
    if model is None:
        model_config = model_config or default_model_config(config.model, config.profile, data.window)
        model = build_model(config.model, model_config, rng.child(1))
    scale = OutputScale.fit(data.train.targets)
    model.set_output_scales(data.train.targets.ec.mean(), data.train.targets.ce.mean())
    model.meta = {
        "normalizer": data.normalizer.to_dict(), "output_scale": scale.to_dict(),
        "window": data.window, "stride": data.stride, "tau": config.tau,
        "thresholds": config.thresholds, "weights": asdict(config.weights),
    }

    S = len(data.train)
    steps = math.ceil(S / config.batch_size)
    schedule = config.schedule(steps)
    state = AdamWState(config.beta1, config.beta2, config.weight_decay)
    stopper = EarlyStopping(config.patience, config.min_delta)
    history = TrainHistory()
    best_params = copy.deepcopy(model.params)
    frozen = model.buffers
    step = 0
    for epoch in range(config.max_epochs):
        order = rng.child(2, epoch).generator().permutation(S)
        sums = np.zeros(4)
        lr = 0.0
        for b in range(steps):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            batch_rng = rng.child(3, epoch, b)
            pred, cache = model.forward(data.train.inputs[idx], batch_rng, True)
            lb, gpred, gpos = composite_loss(pred, data.train.targets.select(idx),
                                             cache["positions"], config.weights, scale,
                                             config.tau, with_grad=True)
            if not math.isfinite(lb.total):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = model.backward(cache, gpred, gpos)
            step += 1
            lr = schedule.rate(step)
            adamw_step(model.params, grads, state, lr, skip=frozen)
            model.post_step()
            sums += len(idx) * np.array([lb.mse, lb.co2, lb.diversity, lb.total])
        train_parts = sums / S
        val_parts = _loss(model, data.val, config, scale)
        val_pred = model.predict(data.val.inputs)
        val_mae = float(np.abs(val_pred.removals - data.val.targets.removals).mean())
        improved, stop = stopper.update(epoch, float(val_parts[3]))
        if improved:
            best_params = copy.deepcopy(model.params)
        history.epochs.append({
            "epoch": epoch,
            "train": dict(zip(("mse", "co2", "diversity", "total"), map(float, train_parts))),
            "val_loss": float(val_parts[3]),
            "val_re_mae": val_mae,
            "lr": lr,
        })
        if log_every and epoch % log_every == 0:
            log.info("epoch %d train %.5f val %.5f re_mae %.4f", epoch, train_parts[3],
                     val_parts[3], val_mae)
        if stop:
            history.stopped_early = True
            break
    history.best_epoch = stopper.best_epoch
    model.params = best_params
    return model, history


# -----------------------------------------------------------------------------
# Evaluation
# -----------------------------------------------------------------------------


def evaluate(model: Model, windows, replicas=1, thresholds=None, name=None) -> MetricsReport:
    """Metrics for one split.

    ``windows`` is a :class:`Windows` (evaluated ``replicas`` times, which are
    identical because evaluation is deterministic) or a list of replica
    ``Windows`` sharing the same targets.
    """
    reps = [windows] * replicas if isinstance(windows, Windows) else list(windows)
    if not reps:
        raise ContractError("evaluate needs at least one replica")
    target = reps[0].targets
    preds = []
    for w in reps:
        if len(w) != len(target):
            raise ContractError("replicas must share the same targets")
        preds.append(model.predict(w.inputs))
    if thresholds is None:
        thresholds = getattr(model, "meta", {}).get("thresholds", 0.9)
    return compute_metrics(preds if len(preds) > 1 else preds[0], target, thresholds,
                           model=name or model.kind)


def _model_normalizer(model: Model):
    meta = getattr(model, "meta", None) or {}
    if "normalizer" not in meta:
        raise ContractError("model carries no normaliser; train it or load a checkpoint")
    return Normalizer.from_dict(meta["normalizer"]), meta.get("window"), meta.get("stride", 1)


def perturbation_eval(model: Model, records: Records, targets: Prediction, suite,
                      replicas=3, seed=42):
    """Evaluate ``model`` on the clean block and on each perturbation in ``suite``.

    Perturbations corrupt the inputs only; the targets stay those of the clean
    process. Replica r of spec k uses its own noise stream. Returns a dict with
    a clean row, one row per spec, and sigma_RE pooled over every perturbed
    replica and grouped by kind.
    """
    suite = list(suite)
    if not suite:
        raise ConfigError("perturbation suite is empty")
    norm, window, stride = _model_normalizer(model)
    clean_w = make_windows(norm.apply(records), targets, window, stride)
    clean = evaluate(model, clean_w, name="clean")
    rows = [_resilience_row("clean", None, clean)]
    all_re, by_kind = [], {}
    rng = Rng(seed)
    for k, spec in enumerate(suite):
        preds = []
        for r in range(replicas):
            pert = apply_perturbation(records, spec, rng.child(k, r))
            preds.append(model.predict(make_windows(norm.apply(pert), targets,
                                                    window, stride).inputs))
        rep = compute_metrics(preds if replicas > 1 else preds[0], clean_w.targets,
                              model.meta.get("thresholds", 0.9), model=spec.kind)
        per = [removal_efficiency(p) for p in preds]
        all_re += per
        by_kind.setdefault(spec.kind, []).extend(per)
        rows.append(_resilience_row(spec.kind, spec, rep))
    return {
        "rows": rows,
        "sigma_re_all": spread(all_re),
        "sigma_re_by_kind": {k: spread(v) for k, v in sorted(by_kind.items())},
        "replicas": replicas,
        "seed": seed,
    }


def _resilience_row(label, spec: PerturbationSpec | None, rep: MetricsReport):
    return {
        "label": label,
        "kind": spec.kind if spec else "none",
        "magnitude": spec.magnitude if spec else 0.0,
        "re": rep.re,
        "re_mae": rep.re_mae,
        "sigma_re": rep.sigma_re,
        "ec": rep.ec,
        "ce": rep.ce,
    }


RESILIENCE_COLUMNS = ("label", "kind", "magnitude", "re", "re_mae", "sigma_re", "ec", "ce")


def default_suite(noise=0.1):
    """Two magnitudes per perturbation kind, starting a quarter of the way into the block."""
    return [
        PerturbationSpec("sensor_drift", 0.01, noise=noise),
        PerturbationSpec("sensor_drift", 0.05, noise=noise),
        PerturbationSpec("hydraulic_surge", 0.2, noise=noise),
        PerturbationSpec("hydraulic_surge", 0.5, noise=noise),
        PerturbationSpec("pathogen_shock", 0.5, noise=noise),
        PerturbationSpec("pathogen_shock", 1.0, noise=noise),
    ]


# -----------------------------------------------------------------------------
# Inertia-gate sweep
# -----------------------------------------------------------------------------


def sweep_inertia(config: TrainConfig, data: Dataset, gates, model_config: CrsnConfig | None = None):
    """Train one CRSN per frozen gate value and record validation error and agent motion.

    Every run shares the seed, so initial parameters and random streams are
    identical across gate values. Rows come back sorted by gate.
    """
    gates = [float(g) for g in gates]
    for g in gates:
        if not GATE_LOW < g < GATE_HIGH:
            raise ConfigError(f"gate value {g} outside (0.3, 0.9)")
    base = model_config or default_model_config("crsn", config.profile, data.window)
    rows = []
    for g in sorted(gates):
        cfg = replace(base, frozen_gate=g)
        model, hist = train(replace(config, model="crsn"), data, cfg)
        probe = data.val.inputs[: min(len(data.val), 256)]
        _, cache = model.forward(probe, None, False)
        rows.append({
            "gate": g,
            "val_re_mae": hist.epochs[hist.best_epoch]["val_re_mae"],
            "displacement": cache["displacement"],
            "epochs": len(hist.epochs),
        })
    return rows
