import math
from dataclasses import replace

import numpy as np
import pytest

from crsn.data import CorpusSpec, PerturbationSpec, generate_corpus, make_micro_corpus
from crsn.errors import ConfigError, ContractError
from crsn.model import CrsnConfig, load_checkpoint, save_checkpoint
from crsn.training import (
    EarlyStopping,
    TrainConfig,
    default_suite,
    evaluate,
    perturbation_eval,
    prepare_data,
    sweep_inertia,
    train,
)

W = 8


def tiny_crsn(**kw):
    return CrsnConfig(d_model=8, layers=1, agents=4, window=W, groups=2, profile="desk",
                      decoder_hidden=16, **kw)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(CorpusSpec(n_records=400, seed=5))


@pytest.fixture(scope="module")
def data(corpus):
    return prepare_data(*corpus, window=W, stride=4)


def quick(**kw):
    base = dict(batch_size=16, max_epochs=3, patience=15, base_lr=3e-3, warmup_steps=5)
    return TrainConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def trained(data):
    return train(quick(), data, tiny_crsn())


class TestEarlyStopping:
    def test_flat_sequence_stops_after_patience(self):
        s = EarlyStopping(15)
        stops = [s.update(e, 1.0)[1] for e in range(40)]
        assert stops.index(True) == 15
        assert s.best_epoch == 0

    def test_improvement_resets(self):
        s = EarlyStopping(3)
        for e, v in enumerate([5, 4, 4, 4, 3, 3, 3]):
            improved, stop = s.update(e, v)
        assert s.best_epoch == 4 and not stop
        assert s.update(7, 3)[1]

    def test_min_delta(self):
        s = EarlyStopping(2, min_delta=0.1)
        s.update(0, 1.0)
        assert s.update(1, 0.95) == (False, False)
        assert s.update(2, 0.85)[0]

    def test_frozen_run_stops_at_patience(self, data):
        _, hist = train(quick(base_lr=0.0, max_epochs=40, patience=4), data, tiny_crsn())
        assert hist.stopped_early
        assert hist.best_epoch == 0 and len(hist.epochs) == 5


class TestTrain:
    def test_history_shape(self, trained):
        _, hist = trained
        assert len(hist.epochs) == 3 and not hist.stopped_early
        assert set(hist.epochs[0]) == {"epoch", "train", "val_loss", "val_re_mae", "lr"}
        for e in hist.epochs:
            assert all(math.isfinite(v) for v in e["train"].values())

    def test_reproducible(self, data, trained):
        model, hist = train(quick(), data, tiny_crsn())
        assert hist.to_jsonl() == trained[1].to_jsonl()
        for k, v in model.params.items():
            assert np.array_equal(v, trained[0].params[k])

    def test_seed_matters(self, data, trained):
        _, hist = train(quick(seed=7), data, tiny_crsn())
        assert hist.to_jsonl() != trained[1].to_jsonl()

    def test_best_parameters_restored(self, data, trained):
        model, hist = trained
        val = evaluate(model, data.val)
        assert val.re_mae == pytest.approx(hist.epochs[hist.best_epoch]["val_re_mae"], rel=1e-12)

    @pytest.mark.parametrize("kind", ["mlp", "mini_attn"])
    def test_baselines_train(self, data, kind):
        from crsn.model import AttnConfig, MlpConfig
        cfg = MlpConfig(widths=(16, 16, 8, 8), decoder_hidden=16) if kind == "mlp" else \
            AttnConfig(d_model=8, window=W, ff_width=16, decoder_hidden=16)
        _, hist = train(quick(model=kind, max_epochs=2), data, cfg)
        assert len(hist.epochs) == 2

    def test_micro_corpus_loss_falls(self):
        from crsn.data import Normalizer, make_windows
        from crsn.training import Dataset
        rec, tg, _ = make_micro_corpus()
        norm = Normalizer.fit(rec)
        w = make_windows(norm.apply(rec), tg, 24, 24)
        cfg = TrainConfig(batch_size=8, max_epochs=30, patience=30, base_lr=3e-3, warmup_steps=5)
        _, hist = train(cfg, Dataset(w, w, w, norm, 24, 24),
                        replace(tiny_crsn(), window=24))
        assert hist.epochs[-1]["train"]["total"] < 0.5 * hist.epochs[0]["train"]["total"]

    def test_config_errors(self, data):
        with pytest.raises(ConfigError):
            TrainConfig(patience=0)
        with pytest.raises(ConfigError):
            train(quick(model="rnn"), data)


class TestEvaluate:
    def test_checkpoint_round_trip(self, tmp_path, data, trained):
        model = trained[0]
        save_checkpoint(tmp_path / "m.ckpt", model)
        loaded, meta = load_checkpoint(tmp_path / "m.ckpt")
        a, b = evaluate(model, data.test), evaluate(loaded, data.test)
        assert a.to_json() == b.to_json()
        assert meta["window"] == W

    def test_single_replica_has_zero_spread(self, data, trained):
        rep = evaluate(trained[0], data.test, replicas=1)
        assert rep.sigma_re == 0.0
        assert evaluate(trained[0], data.test, replicas=3).sigma_re == 0.0

    def test_mismatched_replicas(self, data, trained):
        with pytest.raises(ContractError):
            evaluate(trained[0], [data.test, data.train])


class TestPerturbationEval:
    def test_identity_suite_reproduces_clean(self, data, trained):
        suite = [PerturbationSpec(k, 0.0) for k in ("sensor_drift", "hydraulic_surge", "pathogen_shock")]
        out = perturbation_eval(trained[0], *data.raw_test, suite, replicas=3)
        assert len(out["rows"]) == len(suite) + 1
        clean = out["rows"][0]
        for row in out["rows"][1:]:
            assert row["re_mae"] == clean["re_mae"]
            assert row["sigma_re"] == 0.0
        assert out["sigma_re_all"] == 0.0

    def test_default_suite_runs(self, data, trained):
        out = perturbation_eval(trained[0], *data.raw_test, default_suite(), replicas=2, seed=1)
        assert [r["kind"] for r in out["rows"][1:]] == [s.kind for s in default_suite()]
        assert sorted(out["sigma_re_by_kind"]) == ["hydraulic_surge", "pathogen_shock", "sensor_drift"]
        assert any(r["sigma_re"] > 0 for r in out["rows"][1:])

    def test_empty_suite(self, data, trained):
        with pytest.raises(ConfigError):
            perturbation_eval(trained[0], *data.raw_test, [])


class TestSweep:
    def test_single_gate(self, data):
        rows = sweep_inertia(quick(max_epochs=1), data, [0.62], tiny_crsn())
        assert len(rows) == 1 and rows[0]["gate"] == 0.62
        assert rows[0]["displacement"] > 0

    def test_rows_sorted_and_exact(self, data):
        rows = sweep_inertia(quick(max_epochs=1), data, [0.85, 0.35], tiny_crsn())
        assert [r["gate"] for r in rows] == [0.35, 0.85]

    @pytest.mark.parametrize("gate", [0.3, 0.9, 1.2])
    def test_out_of_range(self, data, gate):
        with pytest.raises(ConfigError):
            sweep_inertia(quick(max_epochs=1), data, [gate], tiny_crsn())
