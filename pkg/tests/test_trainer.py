from collections import Counter

import numpy as np
import pytest

from larvseg.config import RunConfig
from larvseg.errors import ConfigError, ContractError, NaNAbort
from larvseg.head import MemoryBank
from larvseg.synthdata import DatasetManifest, generate
from larvseg.numcore import Tensor
from larvseg.trainer import (
    OptimizerState,
    Trainer,
    batch_scheduler,
    kind_sequence,
    lr_at,
    sgd_step,
    train,
)

SMALL = dict(C=8, F=6, H=8, W=8, novel_fraction=0.375, n_seg=24, n_multilabel=24,
             n_singlelabel=24, n_eval=8, hidden_dim=12, embed_dim=8, batch_size=4,
             total_iters=60, checkpoint_every=20, memory_size=6, top_k=4)


@pytest.fixture(scope="module")
def small():
    cfg = RunConfig(**SMALL)
    return cfg, generate(DatasetManifest.from_config(cfg))


# -- learning-rate schedule -------------------------------------------------------------

def test_lr_boundaries_exact():
    cfg = RunConfig(base_lr=0.01, min_lr=1e-5, total_iters=1000)
    assert lr_at(0, cfg) == 0.01
    assert lr_at(1000, cfg) == 1e-5


def test_lr_midpoint():
    cfg = RunConfig(base_lr=0.01, min_lr=0.0, total_iters=100)
    assert lr_at(50, cfg) == pytest.approx(0.01 * 0.5 ** 0.9, rel=1e-15)


def test_lr_monotone_and_bounded():
    cfg = RunConfig(total_iters=500)
    lrs = [lr_at(i, cfg) for i in range(501)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert min(lrs) >= cfg.min_lr


def test_lr_out_of_range():
    with pytest.raises(ContractError):
        lr_at(11, RunConfig(total_iters=10))


def test_lr_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(base_lr=1e-6, min_lr=1e-5)


# -- optimiser --------------------------------------------------------------------------------

def test_sgd_two_steps_hand_oracle():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    st = OptimizerState()
    sgd_step(p, {"w": np.array([0.5, 1.0])}, st, lr=0.1, momentum=0.9)
    np.testing.assert_allclose(p["w"].data, [0.95, -2.1])
    sgd_step(p, {"w": np.array([0.5, 1.0])}, st, lr=0.1, momentum=0.9)
    # v = 0.9*g + g = 1.9 g
    np.testing.assert_allclose(p["w"].data, [0.95 - 0.095, -2.1 - 0.19])


def test_sgd_nan_abort():
    p = {"w": Tensor(np.ones(2))}
    with pytest.raises(NaNAbort):
        sgd_step(p, {"w": np.array([np.nan, 0.0])}, OptimizerState(), 0.1, 0.9)
    np.testing.assert_array_equal(p["w"].data, 1.0)


# -- scheduler ------------------------------------------------------------------------------------

def test_kind_sequence():
    assert kind_sequence((1, 1, 1)) == ["seg", "multilabel", "singlelabel"]
    assert kind_sequence((2, 1, 0)) == ["seg", "multilabel", "seg"]


@pytest.mark.parametrize("ratio,expect", [("1:1:1", (100, 100, 100)), ("1:1:0", (150, 150, 0)),
                                          ("1:0:0", (300, 0, 0)), ("3:2:1", (150, 100, 50))])
def test_schedule_counts(small, ratio, expect):
    cfg, ds = small
    gen = batch_scheduler(cfg.replace(ratio=ratio), ds)
    counts = Counter(next(gen)[0] for _ in range(300))
    for kind, n in zip(("seg", "multilabel", "singlelabel"), expect):
        assert abs(counts[kind] - n) <= 1


def test_schedule_resume_matches(small):
    cfg, ds = small
    full = batch_scheduler(cfg, ds)
    stream = [next(full) for _ in range(40)]
    tail = batch_scheduler(cfg, ds, start=23)
    for kind, idx in stream[23:]:
        k2, i2 = next(tail)
        assert k2 == kind and np.array_equal(idx, i2)


def test_schedule_covers_each_epoch(small):
    cfg, ds = small
    gen = batch_scheduler(cfg.replace(ratio="1:0:0"), ds)
    seen = np.concatenate([next(gen)[1] for _ in range(ds.count("seg") // cfg.batch_size)])
    assert sorted(seen.tolist()) == list(range(ds.count("seg")))


def test_supervised_ignores_ratio(small):
    cfg, ds = small
    gen = batch_scheduler(cfg.replace(mode="supervised"), ds)
    assert {next(gen)[0] for _ in range(30)} == {"seg"}


# -- training -------------------------------------------------------------------------------------

def _params(tr):
    return {k: p.data.copy() for k, p in tr.model.parameters().items()}


def test_lambda_zero_reduces_to_supervised(small):
    cfg, ds = small
    a = Trainer(cfg.replace(mode="supervised"), ds)
    b = Trainer(cfg.replace(mode="larvseg", lambda_cls=0.0, lambda_aux=0.0, ratio="1:0:0"), ds)
    for _ in range(25):
        la, lb = a.train_step(), b.train_step()
        assert la.total == lb.total
    pa, pb = _params(a), _params(b)
    for k in pa:
        np.testing.assert_array_equal(pa[k], pb[k])


def test_lambda_zero_classification_batches_leave_model_unchanged(small):
    cfg, ds = small
    tr = Trainer(cfg.replace(lambda_cls=0.0, lambda_aux=0.0, ratio="0:1:1"), ds)
    before = _params(tr)
    for _ in range(4):
        tr.train_step()
    for k, v in _params(tr).items():
        np.testing.assert_array_equal(v, before[k])


@pytest.mark.parametrize("mode", ["baseline", "larvseg", "single-image-ca"])
def test_loss_decreases(small, mode):
    cfg, ds = small
    tr = Trainer(cfg.replace(mode=mode, total_iters=150), ds)
    totals = [tr.train_step().total for _ in range(150)]
    assert np.mean(totals[-15:]) < np.mean(totals[:15])


def test_shared_parameters_touched_by_each_kind(small):
    cfg, ds = small
    tr = Trainer(cfg.replace(mode="baseline"), ds)
    for kind in ("seg", "multilabel"):
        idx = np.arange(cfg.batch_size)
        for p in tr.model.parameters().values():
            p.grad = None
        loss, _ = tr.losses(kind, idx, update_bank=False)
        loss.backward()
        assert all(np.abs(p.grad).sum() > 0 for p in tr.model.parameters().values())


def test_bank_invariants_hold_during_training(small):
    cfg, ds = small
    tr = Trainer(cfg, ds)
    for _ in range(30):
        tr.train_step()
        tr.bank.check()
        for c in ds.base_ids:
            assert c not in tr.bank
    assert any(tr.bank.fill(c) > 0 for c in ds.novel_ids)


def test_aux_appears_after_warmup(small):
    cfg, ds = small
    tr = Trainer(cfg, ds)
    aux = [tr.train_step().aux for _ in range(40)]
    assert aux[0] == 0.0 and any(a > 0 for a in aux)


def test_resume_bit_exact(tmp_path, small):
    cfg, ds = small
    full = train(cfg, ds, tmp_path / "full")
    train(cfg, ds, tmp_path / "part", stop_at=20)
    resumed = train(cfg, ds, tmp_path / "part", resume_from=tmp_path / "part" / "ckpt_000020.lckp")
    a, b = _params(full), _params(resumed)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    assert (tmp_path / "full" / "final.lckp").read_bytes() == (tmp_path / "part" / "final.lckp").read_bytes()
    assert (tmp_path / "full" / "metrics.csv").read_text() == (tmp_path / "part" / "metrics.csv").read_text()


def test_metrics_and_config_written(tmp_path, small):
    cfg, ds = small
    train(cfg.replace(total_iters=10), ds, tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,lr,L_seg,L_cls,L_aux,total"
    assert len(lines) == 11
    assert "mode = larvseg" in (tmp_path / "config.txt").read_text()


def test_nan_loss_aborts(small):
    cfg, ds = small
    tr = Trainer(cfg.replace(mode="supervised"), ds)
    tr.model.backbone.w1.data[...] = np.nan
    with pytest.raises(NaNAbort):
        tr.train_step()


def test_dataset_config_mismatch(small):
    cfg, ds = small
    with pytest.raises(ConfigError):
        Trainer(cfg.replace(C=9), ds)


def test_bank_is_not_a_parameter(small):
    cfg, ds = small
    tr = Trainer(cfg, ds)
    assert isinstance(tr.bank, MemoryBank)
    assert not any(k.startswith("bank") for k in tr.model.parameters())
