"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that ``conftest.py`` prints at the end
of the run (``pytest -v tests/test_acceptance.py``). The long runs are the
50-epoch training (criterion 5, a few minutes) and the bench (criterion 2).
"""

import json
import math
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest
from helpers import GC_D, GC_G, GC_M, GC_N, gc_models, model_grad_error, random_prediction, record

from crsn.bench import fit_loglog_slope, time_scaling
from crsn.data import (
    CorpusSpec,
    Normalizer,
    PerturbationSpec,
    generate_corpus,
    make_micro_corpus,
    make_windows,
)
from crsn.model import (
    CrsnConfig,
    CrsnModel,
    Prediction,
    decode,
    decode_bwd,
    decoder_init,
    embed_tokens,
    embed_tokens_bwd,
    hierarchical_attention,
    hierarchical_attention_bwd,
    init_agents,
    init_agents_bwd,
)
from crsn.numerics import (
    Rng,
    activation,
    activation_bwd,
    grad_check,
    layer_norm,
    layer_norm_bwd,
    layer_norm_fwd,
    linear_bwd,
    linear_fwd,
    softmax,
)
from crsn.objective import (
    CARBON_THRESHOLD,
    LossWeights,
    OutputScale,
    co2_penalty,
    composite_loss,
)
from crsn.swarm import (
    GATE_HIGH,
    GATE_LOW,
    AgentPopulation,
    FgnSampler,
    SILParams,
    fgn_autocovariance,
    inertia_gate,
    sil_backward,
    sil_forward,
)
from crsn.training import Dataset, EarlyStopping, TrainConfig, evaluate, perturbation_eval, prepare_data, train

GRAD_TOL = 1e-4
TRIALS = 10_000


# -----------------------------------------------------------------------------
# 1. gradient fidelity
# -----------------------------------------------------------------------------


def _layer_checks():
    g = np.random.default_rng(0)
    B = 2
    checks = {}

    P = {"x": g.normal(size=(B, GC_N, GC_D)), "w": g.normal(size=(GC_D, GC_D)), "b": g.normal(size=GC_D)}
    up = g.normal(size=(B, GC_N, GC_D))

    def lin(P):
        y, _ = linear_fwd(P["x"], P["w"], P["b"])
        dx, dw, db = linear_bwd(up, P["x"], P["w"])
        return float(np.sum(up * y)), {"x": dx, "w": dw, "b": db}
    checks["linear"] = grad_check(lin, P)

    P = {"x": g.normal(size=(B, GC_N, GC_D)), "gain": g.normal(size=GC_D), "bias": g.normal(size=GC_D)}

    def ln(P):
        y, cache = layer_norm_fwd(P["x"], P["gain"], P["bias"])
        dx, dg, db = layer_norm_bwd(up, cache)
        return float(np.sum(up * y)), {"x": dx, "gain": dg, "bias": db}
    checks["layer_norm"] = grad_check(ln, P)

    for kind in ("gelu", "sigmoid", "softplus", "softmax"):
        x = g.normal(size=(B, GC_D))
        w = g.normal(size=(B, GC_D))
        checks[kind] = grad_check(lambda x, k=kind: (float(np.sum(w * activation(k, x))),
                                                     activation_bwd(k, x, activation(k, x), w)), x)

    x = g.normal(size=(B, GC_N, 43))
    P = {"W": g.normal(size=(GC_D, 43)), "b": g.normal(size=GC_D), "pos": g.normal(size=(GC_N, GC_D))}

    def emb(P):
        E = embed_tokens(x, P["W"], P["b"], P["pos"])
        dW, db, dpos, _ = embed_tokens_bwd(up, x)
        return float(np.sum(up * E)), {"W": dW, "b": db, "pos": dpos}
    checks["embedding"] = grad_check(emb, P)

    P = {"E": g.normal(size=(B, GC_N, GC_D)), "W_in": g.normal(size=(GC_D, GC_D)),
         "agent": g.normal(size=(GC_M, GC_D))}
    wX = g.normal(size=(B, GC_M, GC_D))

    def agents(P):
        pop, cache = init_agents(P["E"], P["W_in"], P["agent"])
        dE, dW, da = init_agents_bwd(wX, cache, P["W_in"])
        return float(np.sum(wX * pop.positions)), {"E": dE, "W_in": dW, "agent": da}
    checks["agent_init"] = grad_check(agents, P)

    for training in (False, True):
        p = SILParams.init(GC_D, Rng(9), sigma=0.1)
        p.w_raw = np.array(0.3)
        P = dict(p.arrays(), E=g.normal(size=(B, GC_N, GC_D)), X=g.normal(size=(B, GC_M, GC_D)),
                 V=g.normal(size=(B, GC_M, GC_D)))
        wE, wP, wV = (g.normal(size=s.shape) for s in (P["E"], P["X"], P["V"]))

        def sil(P):
            out, pop, cache = sil_forward(P["E"], AgentPopulation(P["X"], P["V"]),
                                          SILParams.from_arrays(P), Rng(5), training)
            loss = np.sum(wE * out) + np.sum(wP * pop.positions) + np.sum(wV * pop.velocities)
            dE, dpop, grads = sil_backward(cache, wE, AgentPopulation(wP, wV))
            return float(loss), dict(grads, E=dE, X=dpop.positions, V=dpop.velocities)
        checks[f"sil_{'train' if training else 'eval'}"] = grad_check(sil, P)

    P = {"X": g.normal(size=(B, GC_M, GC_D)), "q1": g.normal(size=GC_D), "q2": g.normal(size=GC_D)}
    wz = g.normal(size=(B, GC_D))

    def hier(P):
        z, cache = hierarchical_attention(P["X"], P["q1"], P["q2"], GC_G)
        dX, dq1, dq2 = hierarchical_attention_bwd(wz, cache, P["q1"], P["q2"])
        return float(np.sum(wz * z)), {"X": dX, "q1": dq1, "q2": dq2}
    checks["hierarchy"] = grad_check(hier, P)

    params = {}
    decoder_init(params, "dec", GC_D, 12, Rng(4))
    params.setdefault("dec.b4", np.zeros(20))
    params["dec.ec_scale"] = np.array(0.5)
    params["dec.ce_scale"] = np.array(20.0)
    params["z"] = g.normal(size=(B, GC_D))
    wp = random_prediction(g, B)
    names = [k for k in params if not k.endswith("_scale")]

    def dec(P):
        pred, cache = decode(P["z"], P)
        dz, grads = decode_bwd(wp, cache, P)
        loss = sum(float(np.sum(getattr(wp, k) * getattr(pred, k)))
                   for k in ("removals", "ec", "ce", "shares"))
        return loss, dict(grads, z=dz)
    checks["decoder"] = grad_check(dec, params, names=names)

    t = random_prediction(g, B)
    t = Prediction(1 / (1 + np.exp(-t.removals)), np.abs(t.ec), 25 * np.abs(t.ce), softmax(t.shares))
    P = {"rem": g.normal(size=(B, 8)), "ec": g.uniform(0.2, 1, B), "ce": g.uniform(5, 40, B),
         "sh": g.normal(size=(B, 8)), "X": g.normal(size=(B, GC_M, GC_D))}
    scale = OutputScale.fit(t)

    def loss(P):
        shares = softmax(P["sh"])
        pred = Prediction(P["rem"], P["ec"], P["ce"], shares)
        lb, gp, gx = composite_loss(pred, t, P["X"], scale=scale, with_grad=True)
        gsh = shares * (gp.shares - np.sum(gp.shares * shares, axis=-1, keepdims=True))
        return lb.total, {"rem": gp.removals, "ec": gp.ec, "ce": gp.ce, "sh": gsh, "X": gx}
    checks["composite_loss"] = grad_check(loss, P)
    return checks


def test_criterion_1_gradient_fidelity():
    t0 = time.perf_counter()
    checks = _layer_checks()
    for model in gc_models():
        for training in (False, True):
            checks[f"{model.kind}_{'train' if training else 'eval'}"] = model_grad_error(model, training)
    elapsed = time.perf_counter() - t0
    worst = max(checks, key=checks.get)
    ok = checks[worst] <= GRAD_TOL and elapsed < 120
    record(1, ok, f"{len(checks)} checks, worst {worst} rel err {checks[worst]:.2e} "
                  f"(<= {GRAD_TOL:g}), {elapsed:.1f}s (< 120s)")
    assert ok, checks


# -----------------------------------------------------------------------------
# 2. interaction-stage scaling
# -----------------------------------------------------------------------------


def test_criterion_2_linear_scaling():
    t0 = time.perf_counter()
    sil = time_scaling("sil", [128, 256, 512, 1024, 2048])
    attn = time_scaling("mini_attn", [128, 256, 512, 1024])
    elapsed = time.perf_counter() - t0
    s_sil, s_attn = fit_loglog_slope(sil), fit_loglog_slope(attn)
    ok = 0.8 <= s_sil <= 1.3 and s_attn >= 1.7 and elapsed < 300
    record(2, ok, f"SIL slope {s_sil:.3f} in [0.8, 1.3], mini-attention slope {s_attn:.3f} >= 1.7, "
                  f"{elapsed:.1f}s single-threaded (< 300s)")
    assert ok


# -----------------------------------------------------------------------------
# 3. composite loss arithmetic
# -----------------------------------------------------------------------------


def test_criterion_3_loss_arithmetic():
    g = np.random.default_rng(3)
    w = LossWeights()
    bitwise = True
    for _ in range(200):
        B = int(g.integers(1, 9))
        t = Prediction(g.uniform(0, 1, (B, 8)), g.uniform(0.1, 1, B), g.uniform(5, 40, B),
                       softmax(g.normal(size=(B, 8))))
        p = Prediction(g.uniform(0, 1, (B, 8)), g.uniform(0.1, 1, B), g.uniform(5, 40, B),
                       softmax(g.normal(size=(B, 8))))
        lb = composite_loss(p, t, g.normal(size=(B, 4, 6)), w)
        bitwise &= lb.total == w.reg * lb.mse + w.carbon * lb.co2 + w.pareto * lb.diversity
    defaults = (w.reg, w.carbon, w.pareto) == (0.5, 0.3, 0.2)
    ce = np.array([0.0, 10.0, CARBON_THRESHOLD, np.nextafter(CARBON_THRESHOLD, 0)])
    hinge_zero = co2_penalty(ce) == 0.0 and co2_penalty(np.array([21.0])) > 0
    ok = bitwise and defaults and hinge_zero and CARBON_THRESHOLD == 20.0
    record(3, ok, f"total == weighted sum bitwise over 200 batches: {bitwise}; defaults "
                  f"(0.5, 0.3, 0.2): {defaults}; hinge zero at/below tau=20: {hinge_zero}")
    assert ok


# -----------------------------------------------------------------------------
# 4. fGn autocovariance
# -----------------------------------------------------------------------------


def _lag1(hurst, draws=100_000):
    path = FgnSampler(hurst, horizon=2).sample(Rng(2024), 2, draws)
    return float(np.mean(path[0] * path[1]))


def test_criterion_4_fgn():
    analytic = float(fgn_autocovariance(0.7, 1))
    g7, g5 = _lag1(0.7), _lag1(0.5)
    ok = abs(analytic - 0.3195) < 5e-5 and abs(g7 - 0.3195) <= 0.02 and abs(g5) <= 0.02
    record(4, ok, f"lag-1 autocovariance over 1e5 draws: H=0.7 {g7:.4f} (0.3195 +/- 0.02, "
                  f"analytic {analytic:.4f}); H=0.5 {g5:.4f} (0 +/- 0.02)")
    assert ok


# -----------------------------------------------------------------------------
# 5. learning sanity (also provides the model for criterion 7)
# -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def corpus_data():
    records, targets = generate_corpus(CorpusSpec(n_records=6500, seed=42))
    return prepare_data(records, targets)


@pytest.fixture(scope="module")
def desk_run(corpus_data):
    t0 = time.perf_counter()
    model, history = train(TrainConfig(max_epochs=50, seed=42), corpus_data,
                           CrsnConfig.from_profile("desk"))
    return model, history, time.perf_counter() - t0


def test_criterion_5_learning_sanity(corpus_data, desk_run):
    model, history, elapsed = desk_run
    best = min(e["val_re_mae"] for e in history.epochs)
    small = prepare_data(*generate_corpus(CorpusSpec(n_records=400, seed=42)), window=8, stride=4)
    frozen_cfg = TrainConfig(base_lr=0.0, patience=15, max_epochs=50, batch_size=32)
    _, frozen = train(frozen_cfg, small, CrsnConfig.from_profile("desk", window=8))
    stopper = EarlyStopping(15)
    stop_at = next(e for e in range(100) if stopper.update(e, 1.0)[1])
    patience_ok = (frozen.stopped_early and frozen.best_epoch == 0 and len(frozen.epochs) == 16
                   and stop_at == 15)
    ok = best <= 0.05 and len(history.epochs) <= 50 and patience_ok and elapsed < 900
    record(5, ok, f"desk CRSN best val RE_mae {best:.4f} (<= 0.05) in {len(history.epochs)} epochs, "
                  f"{elapsed:.0f}s (< 900s); non-improving run stopped after "
                  f"{len(frozen.epochs) - 1 - frozen.best_epoch} flat epochs (patience 15)")
    assert ok


# -----------------------------------------------------------------------------
# 6. memorisation
# -----------------------------------------------------------------------------


def test_criterion_6_memorisation():
    records, targets, _ = make_micro_corpus()
    norm = Normalizer.fit(records)
    w = make_windows(norm.apply(records), targets, 24, 24)
    data = Dataset(w, w, w, norm, 24, 24)
    results = {}
    for kind in ("crsn", "mlp", "mini_attn"):
        cfg = TrainConfig(batch_size=8, max_epochs=300, patience=300, base_lr=3e-3,
                          warmup_steps=10, model=kind)
        model, _ = train(cfg, data)
        rep = evaluate(model, w)
        results[kind] = (rep.re_mae, min(rep.f1))
    ok = all(mae <= 0.02 and f1 == 1.0 for mae, f1 in results.values())
    record(6, ok, "8-window micro-corpus train RE_mae / min F1: " + ", ".join(
        f"{k} {mae:.4f}/{f1:g}" for k, (mae, f1) in results.items()) + " (<= 0.02, F1 = 1)")
    assert ok


# -----------------------------------------------------------------------------
# 7. resilience harness
# -----------------------------------------------------------------------------


def test_criterion_7_resilience(corpus_data, desk_run):
    model = desk_run[0]
    records, targets = corpus_data.raw_test
    identity = [PerturbationSpec(k, 0.0, noise=0.1)
                for k in ("sensor_drift", "hydraulic_surge", "pathogen_shock")]
    out = perturbation_eval(model, records, targets, identity, replicas=3)
    clean = out["rows"][0]
    fields = ("re", "re_mae", "sigma_re", "ec", "ce")
    identity_ok = all(all(r[f] == clean[f] for f in fields) for r in out["rows"][1:])
    identity_ok &= out["sigma_re_all"] == 0.0
    curves = []
    for seed in (1, 2, 3):
        drift = [PerturbationSpec("sensor_drift", m, noise=0.1) for m in (0.0, 0.05, 0.1)]
        rows = perturbation_eval(model, records, targets, drift, replicas=3, seed=seed)["rows"][1:]
        curves.append([r["re_mae"] for r in rows])
    monotone = all(a <= b for c in curves for a, b in zip(c, c[1:]))
    ok = identity_ok and monotone
    record(7, ok, f"identity suite reproduces clean with sigma_RE 0: {identity_ok}; drift "
                  f"{{0, 0.05, 0.1}} RE_mae per seed " +
                  "; ".join("/".join(f"{v:.4f}" for v in c) for c in curves) + " (non-decreasing)")
    assert ok


# -----------------------------------------------------------------------------
# 8. exploration monotonicity
# -----------------------------------------------------------------------------


def test_criterion_8_exploration():
    gates = (0.35, 0.62, 0.85)
    cfg = CrsnConfig.from_profile("desk")
    violations = 0
    means = np.zeros(len(gates))
    populations = 100
    for s in range(populations):
        x = Rng(1000 + s).normal((4, 24, 43))
        disp = []
        for gate in gates:
            model = CrsnModel(replace(cfg, frozen_gate=gate), rng=Rng(s))
            _, cache = model.forward(x, None, False)
            disp.append(cache["displacement"])
        violations += not (disp[0] <= disp[1] <= disp[2])
        means += np.array(disp) / populations
    ok = violations == 0 and means[0] <= means[1] <= means[2]
    record(8, ok, f"mean agent displacement at gates {gates}: " +
                  ", ".join(f"{v:.3f}" for v in means) +
                  f"; {violations} of {populations} populations out of order")
    assert ok


# -----------------------------------------------------------------------------
# 9. determinism
# -----------------------------------------------------------------------------


def _pipeline(out, config):
    for sub in ("datagen", "train", "eval"):
        argv = [sys.executable, "-m", "crsn", sub, "--config", str(config), "--seed", "42",
                "--out", str(out)]
        if sub == "eval":
            argv += ["--checkpoint", str(out / "model.ckpt")]
        subprocess.run(argv, check=True, capture_output=True)


def test_criterion_9_determinism(tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"model": {"profile": "desk"}, "data": {"n": 800},
                                  "training": {"max_epochs": 2, "warmup": 50}}))
    _pipeline(tmp_path / "a", config)
    _pipeline(tmp_path / "b", config)
    names = ["corpus.csv", "corpus_constants.json", "model.ckpt", "history.jsonl",
             "metrics.json", "metrics.csv"]
    same = [n for n in names if (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()]
    ok = len(same) == len(names)
    record(9, ok, f"two datagen->train->eval runs with seed 42 in separate processes: "
                  f"{len(same)}/{len(names)} artefacts byte-identical")
    assert ok, set(names) - set(same)


# -----------------------------------------------------------------------------
# 10. invariants
# -----------------------------------------------------------------------------


def _heavy(g, shape):
    return g.normal(size=shape) * 10.0 ** g.uniform(-3, 3, size=shape)


def test_criterion_10_invariants():
    g = np.random.default_rng(10)
    failures = {}

    model = CrsnModel(CrsnConfig(d_model=8, layers=1, agents=4, window=6, groups=2,
                                 profile="desk", decoder_hidden=12), rng=Rng(1))
    model.set_output_scales(0.5, 20.0)
    x = _heavy(g, (TRIALS, 6, 43))
    preds = [model.predict(x[i:i + 500]) for i in range(0, TRIALS, 500)]
    pred = Prediction.concat(preds)
    bad = ~((pred.removals >= 0) & (pred.removals <= 1)).all(axis=1)
    bad |= ~((pred.ec >= 0) & (pred.ce >= 0) & np.isfinite(pred.ec) & np.isfinite(pred.ce))
    failures["prediction bounds"] = int(bad.sum())

    simplex = (pred.shares >= 0).all(axis=1) & (np.abs(pred.shares.sum(axis=1) - 1) <= 1e-12)
    failures["share simplex"] = int((~simplex).sum())

    raw = np.concatenate([_heavy(g, TRIALS // 2), g.uniform(-1e300, 1e300, TRIALS - TRIALS // 2)])
    gates = np.array([inertia_gate(w) for w in raw])
    failures["gate range"] = int(np.sum(~((gates > GATE_LOW) & (gates < GATE_HIGH))))

    logits = _heavy(g, (TRIALS, 16))
    s = softmax(logits)
    failures["softmax normalisation"] = int(np.sum(~((s >= 0).all(axis=1)
                                                      & (np.abs(s.sum(axis=1) - 1) <= 1e-12))))

    rows = g.normal(size=(TRIALS, 16)) * g.uniform(0.1, 10, (TRIALS, 1))
    shift = g.uniform(-100, 100, (TRIALS, 1))
    gain, bias = g.normal(size=16), g.normal(size=16)
    diff = np.abs(layer_norm(rows + shift, gain, bias) - layer_norm(rows, gain, bias))
    failures["layer-norm shift invariance"] = int(np.sum(diff.max(axis=1) > 1e-8))

    ok = not any(failures.values())
    record(10, ok, f"{TRIALS} randomized trials each, violations: " +
                   ", ".join(f"{k} {v}" for k, v in failures.items()))
    assert ok, failures


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
