"""Losses, the mini-batch AdamW loop with early stopping, and batch inference/evaluation."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .encoder import Vocabulary, tokenize_batch
from .featurizer import Featurizer, TransactionRecord
from .metrics import CatalogMismatch, EvalReport, build_report
from .models import Batch, IntentCatalog, IntentModel, ModelConfig, Output, top2_pair

log = logging.getLogger(__name__)

LAMBDA_GRID = (0.6, 0.8, 1.0, 1.2, 1.4)


@dataclass
class TrainingConfig:
    lr: float = 1e-4
    batch_size: int = 32
    dropout: float = 0.5
    lam: float = 1.0
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        return cls(**d)


@dataclass
class Encoded:
    """A labeled split turned into arrays the model consumes."""

    batch: Batch
    y_u: np.ndarray
    y_c: np.ndarray

    def __len__(self) -> int:
        return len(self.y_u)

    @property
    def has_context(self) -> np.ndarray:
        return self.batch.context.present

    def take(self, idx) -> "Encoded":
        return Encoded(Batch(self.batch.tokens[idx], self.batch.context.take(idx)), self.y_u[idx], self.y_c[idx])


def encode_rows(rows: Sequence[dict], vocab: Vocabulary, featurizer: Featurizer, max_len: int) -> Batch:
    tokens = tokenize_batch([r["utterance"] for r in rows], vocab, max_len)
    records = [None if r.get("transaction") is None else TransactionRecord.from_dict(r["transaction"]) for r in rows]
    return Batch(tokens, featurizer.transform(records))


def encode_labeled(rows: Sequence[dict], vocab, featurizer, catalog: IntentCatalog, max_len: int) -> Encoded:
    u_index = {n: i for i, n in enumerate(catalog.utterance)}
    c_index = {n: i for i, n in enumerate(catalog.conversation)}
    try:
        y_u = np.array([u_index[r["utterance_label"]] for r in rows], dtype=np.int64)
        y_c = np.array([c_index[r["conversation_label"]] for r in rows], dtype=np.int64)
    except KeyError as exc:
        raise CatalogMismatch(f"label {exc.args[0]!r} is not in the model's intent catalog") from None
    return Encoded(encode_rows(rows, vocab, featurizer, max_len), y_u, y_c)


# ---------------------------------------------------------------- loss


def combined_loss(out: Output, y_u: np.ndarray, y_c: np.ndarray, has_context: np.ndarray, lam: float) -> ad.Tensor:
    """Mean over the batch of CE(utterance) + lambda_eff * CE(conversation).

    lambda_eff is 0 for examples without context. When every example in the
    batch has lambda_eff = 0 the conversation term is left out of the graph,
    so conversation-only parameters receive no gradient at all.
    """
    m = len(y_u)
    loss = ad.softmax_cross_entropy(out.utt_logits, y_u)
    if out.conv_logits is not None:
        weights = np.where(has_context, lam, 0.0)
        if np.any(weights != 0):
            loss = ad.add(loss, ad.softmax_cross_entropy(out.conv_logits, y_c, weights))
    return ad.mul(loss, 1.0 / m)


def example_losses(out: Output, y_u, y_c, has_context, lam) -> np.ndarray:
    def nll(z, y):
        shifted = z - z.max(axis=1, keepdims=True)
        return np.log(np.exp(shifted).sum(axis=1)) - shifted[np.arange(len(y)), y]

    total = nll(out.utt_logits.data, y_u)
    if out.conv_logits is not None:
        total = total + np.where(has_context, lam, 0.0) * nll(out.conv_logits.data, y_c)
    return total


# ---------------------------------------------------------------- classifier bundle


class Classifier:
    """A model together with everything needed to featurize raw rows for it."""

    def __init__(self, model: IntentModel, vocab: Vocabulary, train_config: TrainingConfig):
        self.model = model
        self.vocab = vocab
        self.train_config = train_config

    @property
    def catalog(self) -> IntentCatalog:
        return self.model.catalog

    @property
    def featurizer(self) -> Featurizer:
        return self.model.featurizer

    def encode(self, rows: Sequence[dict]) -> Encoded:
        return encode_labeled(rows, self.vocab, self.featurizer, self.catalog, self.model.config.max_len)

    def forward(self, batch: Batch, chunk: int = 512) -> tuple[np.ndarray, np.ndarray | None]:
        """Eval-mode logits for a whole batch, computed in chunks."""
        utt, conv = [], []
        with ad.evaluation(), ad.no_grad():
            for lo in range(0, len(batch), chunk):
                sl = slice(lo, lo + chunk)
                out = self.model(Batch(batch.tokens[sl], batch.context.take(sl)))
                utt.append(out.utt_logits.data)
                if out.conv_logits is not None:
                    conv.append(out.conv_logits.data)
        if not utt:
            n_u = len(self.catalog.utterance)
            return np.zeros((0, n_u)), None
        return np.concatenate(utt), (np.concatenate(conv) if conv else None)

    def predict(self, rows: Sequence[dict]) -> list[dict]:
        batch = encode_rows(rows, self.vocab, self.featurizer, self.model.config.max_len)
        return predictions_from_logits(*self.forward(batch), self.catalog)

    def evaluate(self, rows_or_encoded, name: str | None = None) -> EvalReport:
        enc = rows_or_encoded if isinstance(rows_or_encoded, Encoded) else self.encode(rows_or_encoded)
        if len(enc) == 0:
            raise ValueError("evaluate: empty dataset")
        utt_logits, conv_logits = self.forward(enc.batch)
        return report_from_logits(name or self.model.kind, utt_logits, conv_logits, enc, self.catalog)


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def predictions_from_logits(utt_logits, conv_logits, catalog: IntentCatalog) -> list[dict]:
    up = _softmax(utt_logits)
    cp = None if conv_logits is None else _softmax(conv_logits)
    pairs = top2_pair(up, cp, catalog)
    out = []
    for i, pair in enumerate(pairs):
        d = {
            "utterance_probs": {n: float(p) for n, p in zip(catalog.utterance, up[i])},
            "utterance_intent": catalog.utterance[int(np.argmax(up[i]))],
            "top2": list(pair),
        }
        if cp is not None:
            d["conversation_probs"] = {n: float(p) for n, p in zip(catalog.conversation, cp[i])}
            d["conversation_intent"] = catalog.conversation[int(np.argmax(cp[i]))]
        out.append(d)
    return out


def report_from_logits(name, utt_logits, conv_logits, enc: Encoded, catalog: IntentCatalog) -> EvalReport:
    up = _softmax(utt_logits)
    cp = None if conv_logits is None else _softmax(conv_logits)
    pairs = top2_pair(up, cp, catalog)
    utt_pred = [catalog.utterance[i] for i in np.argmax(up, axis=1)]
    conv_pred = None if cp is None else [catalog.conversation[i] for i in np.argmax(cp, axis=1)]
    y_u = [catalog.utterance[i] for i in enc.y_u]
    y_c = [catalog.conversation[i] for i in enc.y_c]
    return build_report(name, utt_pred, conv_pred, pairs, y_u, y_c)


# ---------------------------------------------------------------- training loop


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    aborted: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["epoch", "train_loss", "val_micro_f1", "val_macro_f1", "val_top2"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in cols})
        return buf.getvalue()


def build_classifier(
    kind: str,
    train_rows: Sequence[dict],
    catalog: IntentCatalog,
    config: TrainingConfig,
    model_config: ModelConfig | None = None,
) -> Classifier:
    model_config = copy.deepcopy(model_config) if model_config is not None else ModelConfig()
    model_config.dropout = config.dropout
    vocab = Vocabulary.build(r["utterance"] for r in train_rows)
    records = [TransactionRecord.from_dict(r["transaction"]) for r in train_rows if r.get("transaction")]
    if not records and kind == "baseline":
        featurizer = Featurizer.neutral()
    else:
        featurizer = Featurizer.fit(records)
    model = IntentModel(kind, catalog, len(vocab), featurizer, model_config, seed=config.seed)
    return Classifier(model, vocab, config)


def selection_score(report: EvalReport, dual_head: bool) -> tuple:
    """Early-stopping key, compared lexicographically.

    Validation top-2 sits at the label-noise ceiling after an epoch or two on
    easy corpora and then moves only by noise, so dual-head models rank on
    top-2 plus utterance micro-F1.
    """
    if dual_head:
        return (report.top2 + report.utterance.micro_f1, report.top2)
    return (report.utterance.micro_f1, report.utterance.macro_f1)


def train(
    kind: str,
    train_rows: Sequence[dict],
    val_rows: Sequence[dict],
    catalog: IntentCatalog,
    config: TrainingConfig | None = None,
    model_config: ModelConfig | None = None,
    progress: bool = False,
    on_epoch: Callable[[int, Classifier], None] | None = None,
) -> tuple[Classifier, History]:
    """Fit a model; returns the best-validation parameters and the per-epoch history.

    ``on_epoch(epoch, classifier)`` runs after each epoch's validation pass.
    """
    config = config or TrainingConfig()
    clf = build_classifier(kind, train_rows, catalog, config, model_config)
    model = clf.model
    train_enc = clf.encode(train_rows)
    val_enc = clf.encode(val_rows)
    params = model.params
    state = ad.OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, 1])
    history = History()
    best_score, best_params, stale = None, _snapshot(params), 0

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_enc))
        total, count = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            part = train_enc.take(order[lo : lo + config.batch_size])
            ad.zero_grads(params.values())
            out = model(part.batch, rng=rng)
            loss = combined_loss(out, part.y_u, part.y_c, part.has_context, config.lam)
            value = float(loss.data)
            if not math.isfinite(value):
                log.warning("non-finite loss at epoch %d; keeping the best parameters so far", epoch)
                history.aborted = True
                break
            loss.backward()
            ad.adamw_step(params, state)
            total += value * len(part)
            count += len(part)
        if history.aborted:
            break
        report = clf.evaluate(val_enc)
        row = {
            "epoch": epoch,
            "train_loss": total / max(count, 1),
            "val_micro_f1": report.utterance.micro_f1,
            "val_macro_f1": report.utterance.macro_f1,
            "val_top2": report.top2,
        }
        history.rows.append(row)
        if progress:
            log.info("%s epoch %d loss %.4f micro %.4f top2 %.4f", kind, epoch, row["train_loss"], row["val_micro_f1"], row["val_top2"])
        if on_epoch is not None:
            on_epoch(epoch, clf)
        score = selection_score(report, model.dual_head)
        if best_score is None or score > best_score:
            best_score, best_params, stale = score, _snapshot(params), 0
            history.best_epoch = epoch
        else:
            stale += 1
            if stale >= config.patience:
                break
    _restore(params, best_params)
    ad.zero_grads(params.values())
    return clf, history


def _snapshot(params: dict[str, ad.Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def _restore(params: dict[str, ad.Tensor], saved: dict[str, np.ndarray]) -> None:
    for k, p in params.items():
        p.data[...] = saved[k]
