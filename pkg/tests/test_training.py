import math

import numpy as np
import pytest

from ctxnlu import autodiff as ad
from ctxnlu import training
from ctxnlu.metrics import CatalogMismatch
from ctxnlu.models import IntentCatalog, Output
from ctxnlu.training import (
    History,
    TrainingConfig,
    combined_loss,
    example_losses,
    train,
)

from conftest import TINY


def _ce(z, y):
    z = np.asarray(z, float)
    return math.log(np.exp(z).sum()) - z[y]


def _out(u, c):
    return Output(ad.parameter(np.array(u, float)), ad.parameter(np.array(c, float)))


def test_contextless_loss_is_utterance_ce():
    out = _out([[1.0, 2.0, 0.5]], [[3.0, -1.0]])
    loss = combined_loss(out, np.array([0]), np.array([1]), np.array([False]), 1.0)
    assert float(loss.data) == pytest.approx(_ce([1.0, 2.0, 0.5], 0), abs=1e-12)


def test_equal_terms_double():
    out = _out([[0.2, 0.7]], [[0.2, 0.7]])
    v = _ce([0.2, 0.7], 1)
    loss = combined_loss(out, np.array([1]), np.array([1]), np.array([True]), 1.0)
    assert float(loss.data) == pytest.approx(2 * v, abs=1e-12)


def test_lambda_scales_and_batch_mean():
    out = _out([[0.0, 1.0], [2.0, 0.0]], [[1.0, 0.0], [0.0, 0.0]])
    yu, yc, ctx = np.array([1, 1]), np.array([0, 1]), np.array([True, False])
    lam = 0.6
    expected = (_ce([0, 1], 1) + lam * _ce([1, 0], 0) + _ce([2, 0], 1)) / 2
    assert float(combined_loss(out, yu, yc, ctx, lam).data) == pytest.approx(expected, abs=1e-12)
    np.testing.assert_allclose(example_losses(out, yu, yc, ctx, lam).mean(), expected, atol=1e-12)


def test_perfect_predictions_give_zero_loss():
    out = _out([[0.0, 800.0]], [[900.0, 0.0]])
    assert float(combined_loss(out, np.array([1]), np.array([0]), np.array([True]), 1.0).data) == 0.0


@pytest.mark.parametrize("kind", ["mtl-cnlu", "mtl-cnlu-sawc", "mtl-cnlu-sawc-shared"])
def test_contextless_examples_leave_conversation_head_untouched(kind, tiny_classifier, small_data):
    clf = tiny_classifier(kind, seed=2)
    rows = [r for r in small_data["train"] if r["transaction"] is None][:16]
    enc = clf.encode(rows)
    conv = {k: p for k, p in clf.model.params.items() if k.startswith("conv.")}
    assert conv
    ad.zero_grads(clf.model.params.values())
    with ad.evaluation():
        combined_loss(clf.model(enc.batch), enc.y_u, enc.y_c, enc.has_context, 1.0).backward()
    for p in conv.values():
        assert p.grad is None or not np.any(p.grad)


def test_contextless_rows_add_nothing_to_conversation_gradient(tiny_classifier, small_data):
    clf = tiny_classifier("mtl-cnlu", seed=3)
    with_ctx = [r for r in small_data["train"] if r["transaction"]][:8]
    without = [r for r in small_data["train"] if r["transaction"] is None][:8]
    conv = {k: p for k, p in clf.model.params.items() if k.startswith("conv.")}

    def grads(rows):
        enc = clf.encode(rows)
        ad.zero_grads(clf.model.params.values())
        with ad.evaluation():
            combined_loss(clf.model(enc.batch), enc.y_u, enc.y_c, enc.has_context, 1.0).backward()
        return {k: p.grad.copy() * len(rows) for k, p in conv.items()}

    a, b = grads(with_ctx), grads(with_ctx + without)
    for k in conv:
        np.testing.assert_allclose(a[k], b[k], rtol=1e-12, atol=1e-15)


def test_lambda_zero_keeps_conversation_head_at_init(small_data, catalog):
    cfg = TrainingConfig(lam=0.0, max_epochs=1, dropout=0.0, seed=1)
    init = training.build_classifier("mtl-cnlu", small_data["train"], catalog, cfg, TINY)
    before = {k: p.data.copy() for k, p in init.model.params.items() if k.startswith("conv.")}
    clf, _ = train("mtl-cnlu", small_data["train"], small_data["validation"], catalog, cfg, TINY)
    changed = [k for k, p in clf.model.params.items() if not k.startswith("conv.") and k in init.model.params
               and not np.array_equal(p.data, init.model.params[k].data)]
    assert changed
    for k, v in before.items():
        assert np.array_equal(clf.model.params[k].data, v), k


def _toy_rows():
    rng = np.random.default_rng(0)
    rows = []
    for k in range(40):
        word = ("apple", "banana")[k % 2]
        filler = " ".join(rng.choice(["the", "a", "my", "one"], size=3))
        rows.append({"utterance": f"{filler} {word}", "transaction": None,
                     "utterance_label": word, "conversation_label": word})
    return rows


def test_baseline_fits_separable_toy():
    rows = _toy_rows()
    catalog = IntentCatalog(["apple", "banana"], ["apple", "banana"], ["apple", "banana"])
    clf, hist = train("baseline", rows, rows, catalog, TrainingConfig(lr=1e-3, dropout=0.0, max_epochs=50, patience=50))
    assert clf.evaluate(rows).utterance.micro_f1 == 1.0
    assert hist.best_epoch <= 50


def test_identical_seed_identical_history(small_data, catalog):
    cfg = TrainingConfig(max_epochs=2, lr=1e-3, seed=7)
    h1 = train("mtl-cnlu-sawc", small_data["train"], small_data["validation"], catalog, cfg, TINY)[1]
    h2 = train("mtl-cnlu-sawc", small_data["train"], small_data["validation"], catalog, cfg, TINY)[1]
    assert h1.rows == h2.rows and h1.to_csv() == h2.to_csv()
    h3 = train("mtl-cnlu-sawc", small_data["train"], small_data["validation"], catalog,
               TrainingConfig(max_epochs=2, lr=1e-3, seed=8), TINY)[1]
    assert h3.rows != h1.rows


def test_training_loss_decreases(small_data, catalog):
    cfg = TrainingConfig(max_epochs=5, patience=10, lr=1e-3, seed=0)
    hist = train("cawc", small_data["train"], small_data["validation"], catalog, cfg, TINY)[1]
    losses = [r["train_loss"] for r in hist.rows]
    assert all(np.isfinite(losses)) and min(losses) >= 0
    assert sum(b > a for a, b in zip(losses, losses[1:])) <= 1


def test_non_finite_loss_aborts_and_keeps_best(small_data, catalog, monkeypatch):
    calls = {"n": 0}
    real = training.combined_loss
    steps_per_epoch = math.ceil(len(small_data["train"]) / 32)

    def flaky(*args):
        calls["n"] += 1
        loss = real(*args)
        if calls["n"] > steps_per_epoch:
            loss.data = np.array(np.nan)
        return loss

    monkeypatch.setattr(training, "combined_loss", flaky)
    seen = {}
    cfg = TrainingConfig(max_epochs=5, lr=1e-3, seed=0)
    clf, hist = train("concat", small_data["train"], small_data["validation"], catalog, cfg, TINY,
                      on_epoch=lambda e, c: seen.setdefault(e, c.evaluate(small_data["validation"]).summary()))
    assert hist.aborted and hist.best_epoch == 1 and len(hist.rows) == 1
    assert clf.evaluate(small_data["validation"]).summary() == seen[1]


def test_catalog_mismatch(tiny_classifier, small_data):
    clf = tiny_classifier("cawc")
    bad = dict(small_data["test"][0], utterance_label="order_pizza")
    with pytest.raises(CatalogMismatch, match="order_pizza"):
        clf.encode([bad])


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        TrainingConfig(lam=-1.0)
    with pytest.raises(ValueError):
        TrainingConfig(batch_size=0)
    cfg = TrainingConfig(lr=3e-4, seed=9)
    assert TrainingConfig.from_dict(cfg.to_dict()) == cfg


def test_history_csv():
    h = History([{"epoch": 1, "train_loss": 0.5, "val_micro_f1": 0.25, "val_macro_f1": 0.2, "val_top2": 0.75}], 1)
    lines = h.to_csv().strip().splitlines()
    assert lines[0] == "epoch,train_loss,val_micro_f1,val_macro_f1,val_top2"
    assert lines[1].startswith("1,")


def test_predict_fields(tiny_classifier, small_data, catalog):
    clf = tiny_classifier("mtl-cnlu-sawc")
    preds = clf.predict(small_data["test"][:3])
    p = preds[0]
    assert p["utterance_intent"] in catalog.utterance and p["conversation_intent"] in catalog.conversation
    assert len(p["top2"]) == 2
    assert sum(p["utterance_probs"].values()) == pytest.approx(1.0)
