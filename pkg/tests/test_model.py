from __future__ import annotations

import numpy as np
import pytest

from rgbpose import model
from rgbpose.diffmath import Tape
from rgbpose.errors import ConfigError, EmptyInstanceError
from rgbpose.gradsuite import _randomize


@pytest.fixture(scope="module")
def setup(tiny_cfg, tiny_ds):
    params = model.build_params(tiny_cfg)
    _randomize(params, np.random.default_rng(3), 0.2)
    items = [(s, model.prepare(s, params, tiny_cfg)) for s in tiny_ds.samples("train")[:5]]
    return tiny_cfg, params, items


def test_build_params_is_seeded(tiny_cfg):
    a, b = model.build_params(tiny_cfg), model.build_params(tiny_cfg)
    for (na, ta), (nb, tb) in zip(a, b):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)
    c = model.build_params(tiny_cfg.replace(seed=1))
    assert not np.array_equal(c["embed.w"].data, a["embed.w"].data)


def test_batch_loss_is_mean_of_sample_losses(setup):
    cfg, params, items = setup
    batch = model.batch_loss(items, params, cfg).values()
    singles = [model.sample_loss(p, s, params, cfg).values() for s, p in items]
    for key in batch:
        assert batch[key] == pytest.approx(np.mean([v[key] for v in singles]), rel=1e-12, abs=1e-15)


def test_batch_gradient_is_mean_of_sample_gradients(setup):
    cfg, params, items = setup

    def grads(group):
        with Tape() as tape:
            loss = model.batch_loss(group, params, cfg).total
        params.zero_grad()
        tape.backward(loss)
        return {n: (t.grad.copy() if t.grad is not None else 0.0) for n, t in params if n not in params.frozen}

    batch = grads(items)
    singles = [grads([it]) for it in items]
    for name, g in batch.items():
        np.testing.assert_allclose(g, np.mean([s[name] for s in singles], axis=0), rtol=1e-9, atol=1e-13)


def test_oracle_prediction_is_exact(tiny_cfg, tiny_ds):
    smp = tiny_ds.sample("test", 1)
    pred = model.predict_oracle(smp, tiny_cfg, 5)
    assert pred.success
    np.testing.assert_allclose(pred.pose.R, smp.pose.R, atol=1e-6)
    np.testing.assert_allclose(pred.pose.t, smp.pose.t, atol=1e-6)


def test_predict_runs_on_untrained_model(tiny_cfg, tiny_ds):
    params = model.build_params(tiny_cfg)
    pred = model.predict(tiny_ds.sample("test", 0), params, tiny_cfg, 0)
    assert pred.extents.shape == (3,)
    assert pred.success or pred.pose is None


def test_empty_mask_raises(tiny_cfg, tiny_ds):
    smp = tiny_ds.sample("test", 0)
    smp.mask = np.zeros_like(smp.mask)
    with pytest.raises(EmptyInstanceError):
        model.predict_oracle(smp, tiny_cfg, 0)


def test_check_compatible(tiny_cfg):
    params = model.build_params(tiny_cfg)
    model.check_compatible(params, tiny_cfg, tiny_cfg.prior_points, 64)
    with pytest.raises(ConfigError):
        model.check_compatible(params, tiny_cfg, tiny_cfg.prior_points + 1)
