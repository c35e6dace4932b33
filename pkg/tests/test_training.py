import math

import numpy as np
import pytest

from radarocc.network import RadarOcc
from radarocc.tensor_core import ParamStore
from radarocc.training import (Adam, NumericError, RunConfig, Sample, block_means, load_dataset, load_model,
                               lr_at, read_loss_csv, save_dataset, save_model, synthetic_dataset, train)
from radarocc.volume_reduction import SparseRT

TINY = {"grid": [0, 6.4, -3.2, 3.2, -2.0, 1.2, 0.4], "n_r": 8, "embed": 8, "rwa_layers": 1,
        "enc_channels": [8, 8, 8, 8], "feat_dim": 8, "deform_points": 2, "deform_layers": 1, "mlp_hidden": [16]}


def tiny_run(tmp_path, **kw) -> RunConfig:
    base = dict(seed=3, out_dir=str(tmp_path), steps=6, n_train=3, n_val=2, model=dict(TINY))
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def data():
    cfg = RunConfig(model=dict(TINY)).model_config()
    return synthetic_dataset(cfg, 3, seed=1), synthetic_dataset(cfg, 2, seed=1, offset=100)


# ---------------------------------------------------------------- schedule and optimizer

def test_lr_schedule():
    total, base = 300, 3e-4
    assert lr_at(0, total, base) == 0.0
    assert lr_at(50, total, base) == pytest.approx(base / 2)
    assert lr_at(100, total, base) == pytest.approx(base, abs=1e-15)
    assert lr_at(total - 1, total, base) < 1e-12
    lrs = [lr_at(s, total, base) for s in range(total)]
    assert all(a < b for a, b in zip(lrs[:100], lrs[1:101]))
    assert all(a >= b for a, b in zip(lrs[100:], lrs[101:]))


def test_adam_matches_closed_form():
    ps = ParamStore(0)
    p = ps.zeros("w", (3,))
    opt = Adam(ps, 0.9, 0.999, 1e-8)
    grads = [np.array([1.0, -2.0, 0.5]), np.array([0.5, 1.0, -1.0]), np.array([2.0, 0.0, 0.1])]
    m = v = np.zeros(3)
    want = np.zeros(3)
    for t, g in enumerate(grads, start=1):
        p.grad = g.copy()
        opt.step(1e-2)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        want = want - 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert np.allclose(p.data, want, rtol=1e-14, atol=1e-16)
    # the first step moves every coordinate by lr in the direction opposite its gradient
    ps2 = ParamStore(0)
    q = ps2.zeros("w", (3,))
    q.grad = grads[0].copy()
    Adam(ps2).step(1e-3)
    assert np.allclose(q.data, -1e-3 * np.sign(grads[0]), rtol=1e-7)


def test_run_config_validation(tmp_path):
    with pytest.raises(ValueError, match="unknown"):
        RunConfig.from_dict({"lr": 1e-3, "learning_rate": 1})
    with pytest.raises(ValueError):
        RunConfig(batch_size=2)
    with pytest.raises(ValueError):
        RunConfig(sss="bogus")
    run = tiny_run(tmp_path)
    assert RunConfig.from_dict(run.to_dict()) == run


# ---------------------------------------------------------------- data

def test_dataset_roundtrip(tmp_path, data):
    train_set, _ = data
    save_dataset(tmp_path / "d", train_set)
    back = load_dataset(tmp_path / "d")
    assert [s.name for s in back] == [s.name for s in train_set]
    for a, b in zip(train_set, back):
        assert np.array_equal(a.rt.power, b.rt.power) and np.array_equal(a.gt.labels, b.gt.labels)
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "missing")


def test_synthetic_data_is_seeded():
    cfg = RunConfig(model=dict(TINY)).model_config()
    a, b = synthetic_dataset(cfg, 2, seed=5), synthetic_dataset(cfg, 2, seed=5)
    assert all(np.array_equal(x.rt.power, y.rt.power) for x, y in zip(a, b))
    c = synthetic_dataset(cfg, 2, seed=6)
    assert not np.array_equal(a[0].rt.power, c[0].rt.power)


# ---------------------------------------------------------------- training

def test_one_step_changes_parameters(tmp_path, data):
    run = tiny_run(tmp_path, steps=2)
    before = RadarOcc(run.model_config(), seed=run.seed).params
    res = train(run, data[0])
    after = res["model"].params
    moved = [n for n in after.names() if not np.array_equal(after[n].data, before[n].data)]
    assert len(moved) > 0.9 * len(after.names())
    rows = read_loss_csv(tmp_path / "loss.csv")
    assert [r["step"] for r in rows] == [0, 1] and rows[0]["lr"] == 0.0
    assert rows[0]["total"] == pytest.approx(4.0)


def test_stop_and_resume_is_bit_exact(tmp_path, data):
    train_set, val_set = data
    full = tiny_run(tmp_path / "full", val_every=3)
    train(full, train_set, val_set)
    part = tiny_run(tmp_path / "part", val_every=3)
    res = train(part, train_set, val_set, stop_at=4)
    assert res["steps"] == 4 and (tmp_path / "part" / "step000004.ckpt").exists()
    train(part, train_set, val_set, resume=str(tmp_path / "part" / "step000004.ckpt"))
    for name in ("final.ckpt", "best.ckpt", "loss.csv"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes(), name


def test_checkpoint_roundtrip(tmp_path, data):
    run = tiny_run(tmp_path)
    model = RadarOcc(run.model_config(), seed=4)
    save_model(tmp_path / "m.ckpt", model)
    back, _ = load_model(tmp_path / "m.ckpt")
    assert back.cfg == model.cfg
    t = data[0][0].reduced(model.cfg)
    assert np.array_equal(back.forward(t).data, model.forward(t).data)


def test_nan_input_aborts_with_numeric_error(tmp_path, data):
    cfg = RunConfig(model=dict(TINY)).model_config()
    good = data[0][0]
    bad_feats = np.full((3, 8), np.nan)
    bad = Sample("bad", good.gt, sparse=SparseRT(np.array([[1, 2, 1], [2, 2, 1], [3, 0, 0]]), bad_feats,
                                                  cfg.radar_bins))
    with pytest.raises(NumericError) as err:
        train(tiny_run(tmp_path, steps=2), [bad])
    assert err.value.step == 0


def test_block_means():
    assert block_means(np.arange(100.0), 50) == [24.5, 74.5]
    assert block_means(np.arange(120.0), 50) == [24.5, 74.5]
    assert math.isclose(block_means([1.0] * 50)[0], 1.0)
