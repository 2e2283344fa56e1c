from __future__ import annotations

import numpy as np
import pytest

from rgbpose import model, train
from rgbpose.diffmath import Params, Tape
from rgbpose import losses


def test_adam_matches_hand_computed_steps():
    p = Params()
    x = p.add("x", np.array([[1.0, -2.0]]))
    opt = train.Adam(p, lr=0.1)
    g1, g2 = np.array([[0.5, -1.0]]), np.array([[0.2, 0.4]])
    m = v = np.zeros((1, 2))
    expect = x.data.copy()
    for k, g in enumerate((g1, g2), 1):
        x.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        expect = expect - 0.1 * (m / (1 - 0.9**k)) / (np.sqrt(v / (1 - 0.999**k)) + 1e-8)
        np.testing.assert_allclose(x.data, expect, rtol=1e-14)


def test_checkpoint_round_trip_is_bit_exact(tmp_path, tiny_cfg, tiny_ds):
    state = train.new_state(tiny_cfg)
    prepared = train.prepare_all(tiny_ds.samples("train"), state.params, tiny_cfg)
    train.run_epochs(state, prepared, 1)
    train.save_checkpoint(state, tmp_path / "a.ckpt")
    back = train.load_checkpoint(tmp_path / "a.ckpt")
    assert back.epoch == 1 and back.opt.step_count == state.opt.step_count and back.cfg == state.cfg
    for (na, ta), (nb, tb) in zip(state.params, back.params):
        assert na == nb and ta.data.tobytes() == tb.data.tobytes()
    assert state.params.frozen == back.params.frozen
    for n in state.opt.m:
        assert state.opt.m[n].tobytes() == back.opt.m[n].tobytes()
        assert state.opt.v[n].tobytes() == back.opt.v[n].tobytes()
    assert state.rng.bit_generator.state == back.rng.bit_generator.state


def test_resume_reproduces_uninterrupted_log(tmp_path, tiny_cfg, tiny_ds):
    cfg = tiny_cfg.replace(epochs=3, checkpoint_every=1)
    train.train(cfg, tiny_ds, tmp_path / "full")
    train.train(cfg.replace(epochs=1), tiny_ds, tmp_path / "part")
    train.train(cfg, tiny_ds, tmp_path / "part", resume=str(tmp_path / "part" / "last.ckpt"))
    full = (tmp_path / "full" / "loss_log.tsv").read_bytes()
    assert full == (tmp_path / "part" / "loss_log.tsv").read_bytes()
    assert (tmp_path / "full" / "last.ckpt").read_bytes() == (tmp_path / "part" / "last.ckpt").read_bytes()


def test_training_is_deterministic(tmp_path, tiny_cfg, tiny_ds):
    train.train(tiny_cfg, tiny_ds, tmp_path / "a")
    train.train(tiny_cfg, tiny_ds, tmp_path / "b")
    for name in ("loss_log.tsv", "last.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_frozen_tensors_untouched_by_training(tiny_cfg, tiny_ds):
    state = train.new_state(tiny_cfg)
    before = {n: state.params[n].data.copy() for n in state.params.frozen}
    prepared = train.prepare_all(tiny_ds.samples("train"), state.params, tiny_cfg)
    train.run_epochs(state, prepared, 2)
    for n, arr in before.items():
        assert state.params[n].data.tobytes() == arr.tobytes()


def test_nonfinite_loss_aborts_with_diagnostic(tiny_cfg, tiny_ds):
    state = train.new_state(tiny_cfg)
    prepared = train.prepare_all(tiny_ds.samples("train")[:2], state.params, tiny_cfg)
    state.params["head.scale.0.w"].data[0, 0] = np.nan
    with pytest.raises(train.NonFiniteLossError, match="head.scale.0.w"):
        train.train_step(state, prepared)


def test_guidance_only_training_decreases_l_g(tiny_cfg, tiny_ds):
    cfg = tiny_cfg.replace(lr=1e-3)
    params = model.build_params(cfg)
    opt = train.Adam(params, cfg.lr)
    smp = tiny_ds.sample("train", 0)
    prep = model.prepare(smp, params, cfg)
    values = []
    for _ in range(51):
        params.zero_grad()
        with Tape() as tape:
            out = model.forward(prep, smp.prior, smp.s_b, params, cfg)
            L_g = losses.guidance_loss(out.F_guid, prep.F_N)
        values.append(L_g.item())
        tape.backward(L_g)
        opt.step()
    assert all(b < a for a, b in zip(values, values[1:]))


def test_one_sample_overfit(tiny_cfg, tiny_ds):
    cfg = tiny_cfg.replace(lr=3e-3)
    state = train.new_state(cfg)
    batch = train.prepare_all(tiny_ds.samples("train")[:1], state.params, cfg)
    first = train.train_step(state, batch)["total"]
    for _ in range(299):
        last = train.train_step(state, batch)["total"]
    assert last <= 0.1 * first
