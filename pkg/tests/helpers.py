"""Shared fixtures-by-function for the test modules."""

import numpy as np

from crsn.model import AttnConfig, CrsnConfig, MlpConfig, MiniAttnModel, MlpModel, CrsnModel, Prediction
from crsn.numerics import Rng, grad_check

# the small shapes every finite-difference check runs at
GC_N, GC_M, GC_D, GC_L, GC_G = 6, 4, 8, 2, 2


def gc_crsn_config(**kw):
    return CrsnConfig(d_model=GC_D, layers=GC_L, agents=GC_M, window=GC_N, groups=GC_G,
                      profile="desk", decoder_hidden=12, **kw)


def gc_models(seed=3):
    """One instance of each model kind at grad-check scale."""
    return [
        CrsnModel(gc_crsn_config(), rng=Rng(seed)),
        MlpModel(MlpConfig(widths=(16, 12, 10, 8), decoder_hidden=12), rng=Rng(seed)),
        MiniAttnModel(AttnConfig(d_model=GC_D, window=GC_N, ff_width=16, decoder_hidden=12),
                      rng=Rng(seed)),
    ]


def random_prediction(rng, B):
    return Prediction(rng.normal(size=(B, 8)), rng.normal(size=B), rng.normal(size=B),
                      rng.normal(size=(B, 8)))


def model_grad_error(model, training, batch=2, seed=0):
    """Worst relative error of model.backward against central differences.

    The loss is a fixed random linear functional of every output (and of the
    final agent positions when the model has them), which exercises every
    gradient path with non-trivial upstream values.
    """
    g = np.random.default_rng(seed)
    x = g.normal(size=(batch, GC_N, 43))
    wp = random_prediction(g, batch)
    wpos = g.normal(size=(batch, GC_M, GC_D))
    model.set_output_scales(0.5, 20.0)

    def loss(_):
        pred, cache = model.forward(x, Rng(11), training)
        total = sum(float(np.sum(getattr(wp, k) * getattr(pred, k)))
                    for k in ("removals", "ec", "ce", "shares"))
        gpos = None
        if cache["positions"] is not None:
            total += float(np.sum(wpos * cache["positions"]))
            gpos = wpos
        return total, model.backward(cache, wp, gpos)

    return grad_check(loss, model.params, names=model.trainable())


# criterion number -> (passed, detail); filled by test_acceptance, printed by conftest
ACCEPTANCE = {}


def record(criterion, passed, detail):
    ACCEPTANCE[criterion] = (bool(passed), detail)
    return passed
