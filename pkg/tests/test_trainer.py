import json

import numpy as np
import pytest

from mtmetric.metric import ANGULAR_HINGE, OPML_NLL, LossConfig, MetricParams
from mtmetric.miner import InadmissibleError, MinerConfig
from mtmetric.stiefel import random_point
from mtmetric.trainer import (CheckpointError, DivergenceError, TrainConfig, finite_diff_audit,
                              initial_params, load_checkpoint, save_checkpoint, train)


def quick_config(**kw):
    base = dict(epochs=3, lr=0.05, l=4, seed=1, batch_size=32, miner=MinerConfig(n=3))
    base.update(kw)
    return TrainConfig(**base)


def test_zero_epochs_returns_initial_params(small_synth):
    ds, _ = small_synth
    res = train(ds, quick_config(epochs=0))
    init = initial_params(ds.d, 4, 1)
    np.testing.assert_array_equal(res.params.L, init.L)
    np.testing.assert_array_equal(res.params.R, init.R)
    assert len(res.history) == 0 and res.epoch == 0


def test_same_seed_bit_identical(small_synth):
    ds, _ = small_synth
    a = train(ds, quick_config())
    b = train(ds, quick_config())
    assert a.history.entries == b.history.entries
    np.testing.assert_array_equal(a.params.L, b.params.L)
    np.testing.assert_array_equal(a.params.R, b.params.R)
    c = train(ds, quick_config(seed=2))
    assert c.history.entries != a.history.entries


@pytest.mark.parametrize("mode", [ANGULAR_HINGE, OPML_NLL])
@pytest.mark.parametrize("optimizer", ["rsgd", "rcg"])
def test_training_stays_on_manifold(small_synth, mode, optimizer):
    ds, _ = small_synth
    res = train(ds, quick_config(loss=LossConfig(mode=mode), optimizer=optimizer))
    for e in res.history.entries:
        assert e["residual_L"] <= 1e-8 and e["residual_R"] <= 1e-8
        assert np.isfinite(e["loss"]) and e["batches"] > 0


def test_unconstrained_R_option(small_synth):
    ds, _ = small_synth
    res = train(ds, quick_config(constrain_R=False))
    assert res.history.entries[-1]["residual_L"] <= 1e-8


def test_inadmissible_n(small_synth):
    ds, _ = small_synth
    with pytest.raises(InadmissibleError, match="n too strict"):
        train(ds, quick_config(miner=MinerConfig(n=ds.n_tasks + 1)))


def test_l_must_be_below_d(small_synth):
    ds, _ = small_synth
    with pytest.raises(ValueError, match="smaller than d"):
        train(ds, quick_config(l=ds.d))


def test_checkpoint_round_trip(tmp_path, small_synth):
    ds, _ = small_synth
    res = train(ds, quick_config(epochs=2, optimizer="rcg"))
    save_checkpoint(res, tmp_path / "c.json")
    back = load_checkpoint(tmp_path / "c.json")
    np.testing.assert_array_equal(back.params.L, res.params.L)
    np.testing.assert_array_equal(back.params.R, res.params.R)
    np.testing.assert_array_equal(back.params.scaler_mean, res.params.scaler_mean)
    assert back.params.head_offsets == res.params.head_offsets
    assert back.history.entries == res.history.entries
    assert back.config.to_dict() == res.config.to_dict()
    np.testing.assert_array_equal(back.opt_L.direction, res.opt_L.direction)
    assert back.schema_hash == ds.schema_hash


def test_truncated_checkpoint(tmp_path, small_synth):
    ds, _ = small_synth
    save_checkpoint(train(ds, quick_config(epochs=1)), tmp_path / "c.json")
    text = (tmp_path / "c.json").read_text()
    (tmp_path / "t.json").write_text(text[:len(text) // 2])
    with pytest.raises(CheckpointError, match="byte offset"):
        load_checkpoint(tmp_path / "t.json")
    (tmp_path / "x.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.json")


def test_resume_matches_uninterrupted(tmp_path, small_synth):
    ds, _ = small_synth
    full = train(ds, quick_config(epochs=4))
    half = train(ds, quick_config(epochs=2))
    save_checkpoint(half, tmp_path / "c.json")
    rest = train(ds, quick_config(epochs=4), resume=load_checkpoint(tmp_path / "c.json"))
    assert rest.history.entries == full.history.entries
    np.testing.assert_array_equal(rest.params.L, full.params.L)
    np.testing.assert_array_equal(rest.params.R, full.params.R)


def test_divergence_keeps_last_checkpoint(tmp_path, small_synth):
    ds, _ = small_synth
    good = train(ds, quick_config(epochs=2, checkpoint_every=1), checkpoint_dir=tmp_path)
    before = (tmp_path / "checkpoint.json").read_bytes()
    with pytest.raises(DivergenceError, match=r"epoch 3, batch \d+"):
        train(ds, quick_config(epochs=4, lr=float("inf"), checkpoint_every=1),
              resume=good, checkpoint_dir=tmp_path)
    assert (tmp_path / "checkpoint.json").read_bytes() == before
    assert load_checkpoint(tmp_path / "checkpoint.json").epoch == 2


def test_huge_finite_lr_stays_orthonormal(small_synth):
    # the QR retraction bounds every iterate, so a large step cannot blow up L
    ds, _ = small_synth
    res = train(ds, quick_config(epochs=2, lr=1e6))
    assert res.history.entries[-1]["residual_L"] <= 1e-8


def _audit_instance(seed, mode, lam):
    rng = np.random.default_rng(seed)
    d, l = 6, 3
    params = MetricParams(random_point(d, l, rng), random_point(d, l, rng))
    trip = tuple(rng.standard_normal((4, d)) for _ in range(3))
    Y = rng.standard_normal((5, 2))
    cfg = LossConfig(mode=mode, lambda_mse=lam, head_assignment={0: 2, 1: 0})
    return params, trip, (rng.standard_normal((5, d)), Y), cfg


@pytest.mark.parametrize("mode", [ANGULAR_HINGE, OPML_NLL])
def test_finite_diff_audit(mode):
    params, trip, samples, cfg = _audit_instance(0, mode, 0.5)
    assert finite_diff_audit(params, trip, samples, cfg) < 1e-5


def test_finite_diff_audit_zero_gradient():
    L = np.eye(3)[:, :2]
    trip = ([[0.0, 0, 0]], [[0.0, 0, 0]], [[1.0, 0, 0]])
    cfg = LossConfig(mode=ANGULAR_HINGE, lambda_mse=0.0)
    assert finite_diff_audit(MetricParams(L, L), trip, None, cfg) == 0.0


def test_config_from_json(tmp_path):
    raw = {"epochs": 2, "l": 3, "loss": {"mode": "angular_hinge", "alpha": 50},
           "miner": {"n": 2, "strategy": "hard"}}
    (tmp_path / "c.json").write_text(json.dumps(raw))
    cfg = TrainConfig.from_json(tmp_path / "c.json")
    assert cfg.loss.alpha == 50 and cfg.miner.strategy == "hard"
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))).to_dict() == cfg.to_dict()
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochz": 1})
