import json
import math

import numpy as np
import pytest
import torch
from torch.utils.data import TensorDataset

from tiger_triage import dataset as ds
from tiger_triage.errors import DivergenceDetected, EmptyTestSet
from tiger_triage.metrics import ci95
from tiger_triage.model import BackboneSpec, FreezePolicy, build, load_checkpoint
from tiger_triage.preprocess import IMAGENET_STATS
from tiger_triage.train import (EpochRecord, RecordDataset, TrainConfig, evaluate, lr_at,
                                make_optimizer, read_history_csv, run_cv, run_protocol_b,
                                train_fold, write_history_csv)

from conftest import corpus_rows, write_corpus

TINY = BackboneSpec("tinycnn", pretrained=False)


def tiny_cfg(**kw):
    base = dict(backbone=TINY, image_size=(32, 32), epochs=3, batch_size=8, lr0=0.01)
    return TrainConfig(**{**base, **kw})


@pytest.mark.parametrize("epoch,expected", [(0, 1e-3), (6, 1e-3), (7, 1e-4), (13, 1e-4),
                                            (14, 1e-5), (21, 1e-6), (24, 1e-6)])
def test_lr_schedule(epoch, expected):
    assert math.isclose(lr_at(epoch, TrainConfig()), expected, rel_tol=1e-12)


def test_momentum_recurrence_on_quadratic():
    cfg = TrainConfig(lr0=0.1, step_size_epochs=3)
    w = torch.nn.Parameter(torch.tensor([2.0], dtype=torch.float64))
    opt = make_optimizer([w], cfg)
    a, w_ref, v = 3.0, 2.0, 0.0
    for step in range(10):
        lr = lr_at(step, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        opt.zero_grad()
        (0.5 * a * w ** 2).sum().backward()
        opt.step()
        v = 0.7 * v + a * w_ref
        w_ref -= lr * v
        assert abs(float(w.detach()) - w_ref) < 1e-10


def test_config_roundtrip_and_overrides():
    cfg = tiny_cfg()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert set(cfg.overrides()) == {"backbone", "image_size", "epochs", "batch_size", "lr0"}
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1})
    with pytest.raises(ValueError):
        TrainConfig(protocol="holdout")


def _records(corpus):
    manifest, root = corpus
    return ds.ingest_manifest(manifest, root)


def test_train_fold_history_and_checkpoints(corpus, tmp_path):
    recs = ds.eligible(_records(corpus))
    tr, va = recs[::2], recs[1::2]
    cfg = tiny_cfg(epochs=8, step_size_epochs=3)
    net = build(TINY, seed=1, input_size=(32, 32))
    res = train_fold(net, RecordDataset(tr, IMAGENET_STATS, (32, 32)),
                     RecordDataset(va, IMAGENET_STATS, (32, 32)), cfg, 0, tmp_path / "ck")
    assert [h.epoch for h in res.history] == list(range(8))
    assert all(math.isclose(h.lr, 0.01 * 0.1 ** (h.epoch // 3), rel_tol=1e-12) for h in res.history)
    assert res.best_val_accuracy == max(h.val_acc for h in res.history)
    for which in ("best", "final"):
        ck = load_checkpoint(res.checkpoints[which])
        assert ck.meta["fold"] == 0 and len(ck.meta["model_hash"]) == 64
    final = load_checkpoint(res.checkpoints["final"])
    ev = evaluate(final.net, RecordDataset(va, IMAGENET_STATS, (32, 32)))
    assert ev.accuracy == res.history[-1].val_acc


def test_train_fold_is_deterministic(corpus):
    recs = ds.eligible(_records(corpus))
    data = RecordDataset(recs, IMAGENET_STATS, (32, 32))
    runs = []
    for _ in range(2):
        net = build(TINY, seed=3, input_size=(32, 32))
        runs.append(train_fold(net, data, None, tiny_cfg()))
    assert [h.train_loss for h in runs[0].history] == [h.train_loss for h in runs[1].history]
    for a, b in zip(runs[0].net.parameters(), runs[1].net.parameters()):
        assert torch.equal(a, b)


def test_overlapping_sets_rejected(corpus):
    recs = ds.eligible(_records(corpus))
    data = RecordDataset(recs, IMAGENET_STATS, (32, 32))
    with pytest.raises(ValueError):
        train_fold(build(TINY, input_size=(32, 32)), data, data, tiny_cfg())


def test_divergence_detected():
    x = torch.full((4, 3, 32, 32), float("inf"))
    data = TensorDataset(x, torch.tensor([0, 1, 0, 1]))
    with pytest.raises(DivergenceDetected) as err:
        train_fold(build(TINY, input_size=(32, 32)), data, None, tiny_cfg())
    assert err.value.details["epoch"] == 0 and err.value.details["batch"] == 0


def test_frozen_trunk_stays_fixed_with_cached_features(corpus):
    recs = ds.eligible(_records(corpus))
    spec = BackboneSpec("tinycnn", pretrained=False, freeze_policy=FreezePolicy.FEATURES_ONLY)
    net = build(spec, input_size=(32, 32))
    before = [p.clone() for p in net.features.parameters()]
    head_before = [p.clone() for p in net.head.parameters()]
    train_fold(net, RecordDataset(recs, IMAGENET_STATS, (32, 32)), None, tiny_cfg(backbone=spec))
    assert all(torch.equal(a, b) for a, b in zip(before, net.features.parameters()))
    assert not all(torch.equal(a, b) for a, b in zip(head_before, net.head.parameters()))


def test_history_csv_roundtrip(tmp_path):
    hist = [EpochRecord(0, 0, 0.5, 0.7, 0.25, 0.9, 1e-3), EpochRecord(1, 0, 0.75, 0.5, None, None, 1e-3)]
    write_history_csv(hist, tmp_path / "h.csv")
    assert read_history_csv(tmp_path / "h.csv") == hist


def test_run_cv(corpus, tmp_path):
    recs = _records(corpus)
    summary = run_cv(recs, tiny_cfg(epochs=2), tmp_path / "run", config_hash="abc")
    pool = ds.eligible(recs)
    assert len(summary.folds) == 5
    seen = []
    for f in summary.folds:
        tr, va = summary.plan.split(pool, f.fold)
        assert not {r.id for r in tr} & {r.id for r in va}
        assert f.n_train + f.n_val == len(pool)
        seen += [r.id for r in va]
    assert sorted(seen) == sorted(r.id for r in pool)
    sizes = [f.n_val for f in summary.folds]
    accs = [f.val_accuracy for f in summary.folds]
    assert summary.val_accuracy == pytest.approx(np.average(accs, weights=sizes), abs=1e-12)
    assert summary.val_accuracy_ci == pytest.approx(1.96 * np.std(accs, ddof=1) / math.sqrt(5))
    assert summary.pooled.counts.total == len(pool)
    saved = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert saved["config_hash"] == "abc" and saved["test"]["accuracy"] == summary.val_accuracy
    assert len(read_history_csv(tmp_path / "run" / "history.csv")) == 10
    assert ds.FoldPlan.from_json((tmp_path / "run" / "folds.json").read_text()) == summary.plan


def test_weighted_mean_uses_fold_sizes():
    mean, _ = ci95([1.0, 0.4], [2, 1])
    assert mean == pytest.approx(0.8, abs=1e-12)


def test_protocol_b(corpus, tmp_path):
    recs = _records(corpus)
    res = run_protocol_b(recs, tiny_cfg(epochs=2), tmp_path / "b")
    assert res.n_train == 24 and res.test.counts.total == 4
    assert res.test.source == "single_split"
    assert json.loads((tmp_path / "b" / "summary.json").read_text())["protocol"] == \
        "confirmed_vs_unconfirmed"


def test_protocol_b_single_test_image(tmp_path):
    manifest = write_corpus(tmp_path, corpus_rows(6, 6, 1))
    res = run_protocol_b(ds.ingest_manifest(manifest, tmp_path / "images"), tiny_cfg(epochs=1))
    assert res.test.accuracy in (0.0, 1.0)


def test_protocol_b_without_test_records(tmp_path):
    manifest = write_corpus(tmp_path, corpus_rows(4, 4))
    with pytest.raises(EmptyTestSet):
        run_protocol_b(ds.ingest_manifest(manifest, tmp_path / "images"), tiny_cfg(epochs=1))
