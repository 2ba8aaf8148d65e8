"""Order-history context features.

A ``TransactionRecord`` is reduced to 18 scalar features (3 time gaps in hours
plus 15 any/all flags over the order's items) and 3 categorical codes. Scalars
are imputed and min-max normalized with statistics fitted on training data;
codes index learnable embedding tables. The assembled context vector is

    [18 normalized scalars | fulfillment emb | cancellation emb | store emb]

which is 18 + 3 * 25 = 93 values at the default embedding width.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad

HOUR = 3600.0

NUMERIC_FEATURES = (
    "hours_since_order",
    "hours_since_last_delivered",
    "hours_since_last_shipped",
)
BINARY_FEATURES = (
    "any_left_to_deliver",
    "all_left_to_deliver",
    "any_left_to_ship",
    "all_left_to_ship",
    "any_past_expected",
    "all_past_expected",
    "any_substituted",
    "any_cancelled_by_store",
    "any_cancelled_by_customer",
    "any_cancelled_by_other",
    "all_cancelled_by_store",
    "all_cancelled_by_customer",
    "all_cancelled_by_other",
    "any_return",
    "all_return",
)
SCALAR_FEATURES = NUMERIC_FEATURES + BINARY_FEATURES
CATEGORICAL_FEATURES = ("fulfillment_type", "cancellation_reason", "store_indicator")
N_SCALARS = len(SCALAR_FEATURES)
EMBED_DIM = 25
CONTEXT_DIM = N_SCALARS + EMBED_DIM * len(CATEGORICAL_FEATURES)

CANCELLERS = ("none", "store", "customer", "other")

# ablation groups; single features may also be named directly
FEATURE_GROUPS = {
    "order": ("hours_since_order",) + CATEGORICAL_FEATURES,
    "item": ("hours_since_last_delivered", "hours_since_last_shipped"),
    "handcrafted": BINARY_FEATURES,
    "any_left_to_deliver": ("any_left_to_deliver",),
    "any_cancelled": ("any_cancelled_by_store", "any_cancelled_by_customer", "any_cancelled_by_other"),
}


class RecordError(ValueError):
    """A transaction record violates its ordering invariants."""


@dataclass
class ItemRecord:
    delivered_at: float | None = None
    shipped_at: float | None = None
    expected_delivery_at: float | None = None
    substituted: bool = False
    cancelled_by: str = "none"
    return_initiated: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "ItemRecord":
        return cls(
            delivered_at=d.get("delivered_at"),
            shipped_at=d.get("shipped_at"),
            expected_delivery_at=d.get("expected_delivery_at"),
            substituted=bool(d.get("substituted", False)),
            cancelled_by=d.get("cancelled_by", "none"),
            return_initiated=bool(d.get("return_initiated", False)),
        )

    def to_dict(self) -> dict:
        return {
            "delivered_at": self.delivered_at,
            "shipped_at": self.shipped_at,
            "expected_delivery_at": self.expected_delivery_at,
            "substituted": self.substituted,
            "cancelled_by": self.cancelled_by,
            "return_initiated": self.return_initiated,
        }


@dataclass
class TransactionRecord:
    """Timestamps are epoch seconds."""

    order_placed_at: float
    chat_at: float
    fulfillment_type: str | None
    cancellation_reason: str | None
    store_indicator: str | None
    items: list[ItemRecord] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict) -> "TransactionRecord":
        return cls(
            order_placed_at=float(d["order_placed_at"]),
            chat_at=float(d["chat_at"]),
            fulfillment_type=d.get("fulfillment_type"),
            cancellation_reason=d.get("cancellation_reason"),
            store_indicator=d.get("store_indicator"),
            items=[ItemRecord.from_dict(i) for i in d.get("items", [])],
        )

    def to_dict(self) -> dict:
        return {
            "order_placed_at": self.order_placed_at,
            "chat_at": self.chat_at,
            "fulfillment_type": self.fulfillment_type,
            "cancellation_reason": self.cancellation_reason,
            "store_indicator": self.store_indicator,
            "items": [i.to_dict() for i in self.items],
        }


@dataclass
class RawFeatures:
    scalars: dict[str, float | None]
    categoricals: dict[str, str | None]

    def vector(self) -> list[float | None]:
        return [self.scalars[k] for k in SCALAR_FEATURES]


def validate_record(record: TransactionRecord) -> None:
    if record.chat_at < record.order_placed_at:
        raise RecordError("chat_at: precedes order_placed_at")
    if not record.items:
        raise RecordError("items: empty item list on a present record")
    for n, item in enumerate(record.items):
        if item.cancelled_by not in CANCELLERS:
            raise RecordError(f"items[{n}].cancelled_by: unknown value {item.cancelled_by!r}")
        for name in ("shipped_at", "delivered_at"):
            t = getattr(item, name)
            if t is None:
                continue
            if t < record.order_placed_at:
                raise RecordError(f"items[{n}].{name}: precedes order_placed_at")
            if t > record.chat_at:
                raise RecordError(f"items[{n}].{name}: after chat_at")
        if item.delivered_at is not None and item.shipped_at is not None and item.delivered_at < item.shipped_at:
            raise RecordError(f"items[{n}].delivered_at: precedes shipped_at")


def derive_raw_features(record: TransactionRecord) -> RawFeatures:
    """Aggregate item-level facts into the 18 scalar features and 3 codes."""
    validate_record(record)
    items = record.items
    n = len(items)
    active = [i for i in items if i.cancelled_by == "none"]
    # cancelled items are never "left" to deliver or ship
    undelivered = [i for i in active if i.delivered_at is None]
    unshipped = [i for i in undelivered if i.shipped_at is None]
    overdue = [i for i in undelivered if i.expected_delivery_at is not None and record.chat_at > i.expected_delivery_at]

    def gap(stamps):
        stamps = [t for t in stamps if t is not None]
        return (record.chat_at - max(stamps)) / HOUR if stamps else None

    s: dict[str, float | None] = {
        "hours_since_order": (record.chat_at - record.order_placed_at) / HOUR,
        "hours_since_last_delivered": gap(i.delivered_at for i in items),
        "hours_since_last_shipped": gap(i.shipped_at for i in items),
        "any_left_to_deliver": float(len(undelivered) > 0),
        "all_left_to_deliver": float(len(undelivered) == n),
        "any_left_to_ship": float(len(unshipped) > 0),
        "all_left_to_ship": float(len(unshipped) == n),
        "any_past_expected": float(len(overdue) > 0),
        "all_past_expected": float(len(overdue) == n),
        "any_substituted": float(any(i.substituted for i in items)),
        "any_return": float(any(i.return_initiated for i in items)),
        "all_return": float(all(i.return_initiated for i in items)),
    }
    for who in ("store", "customer", "other"):
        hits = sum(i.cancelled_by == who for i in items)
        s[f"any_cancelled_by_{who}"] = float(hits > 0)
        s[f"all_cancelled_by_{who}"] = float(hits == n)
    cats = {
        "fulfillment_type": record.fulfillment_type,
        "cancellation_reason": record.cancellation_reason,
        "store_indicator": record.store_indicator,
    }
    return RawFeatures(s, cats)


# ---------------------------------------------------------------- normalization


@dataclass
class NormalizationStats:
    minimum: list[float]
    maximum: list[float]
    impute: list[float]

    def to_dict(self) -> dict:
        return {"min": self.minimum, "max": self.maximum, "impute": self.impute}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(list(d["min"]), list(d["max"]), list(d["impute"]))

    def normalize(self, raw: Sequence[float | None]) -> np.ndarray:
        """Impute missing values, min-max scale, clamp to [0, 1]."""
        x = np.array([self.impute[k] if v is None else v for k, v in enumerate(raw)], dtype=float)
        lo = np.asarray(self.minimum)
        span = np.asarray(self.maximum) - lo
        # constant feature: scale 1, so the training value maps to 0
        span = np.where(span > 0, span, 1.0)
        return np.clip((x - lo) / span, 0.0, 1.0)


def fit_normalization(train: Iterable[RawFeatures]) -> NormalizationStats:
    rows = [r.vector() for r in train]
    if not rows:
        raise ValueError("fit_normalization: empty training set")
    lo, hi, med = [], [], []
    for k in range(N_SCALARS):
        seen = [r[k] for r in rows if r[k] is not None]
        if not seen:
            seen = [0.0]
        lo.append(float(min(seen)))
        hi.append(float(max(seen)))
        med.append(float(np.median(seen)))
    return NormalizationStats(lo, hi, med)


# ---------------------------------------------------------------- categoricals


UNKNOWN = 0


@dataclass
class CategoricalVocab:
    """Codes seen in training map to 1..k; anything else (or missing) to row 0."""

    codes: list[str]

    def index(self, code: str | None) -> int:
        try:
            return self.codes.index(code) + 1
        except ValueError:
            return UNKNOWN

    def __len__(self) -> int:
        return len(self.codes) + 1


def encode_categorical(code: str | None, vocab: CategoricalVocab, table: ad.Tensor) -> ad.Tensor:
    row = ad.embedding(table, np.array([vocab.index(code)]))
    return ad.reshape(row, (table.shape[1],))


# ---------------------------------------------------------------- assembly


@dataclass
class ContextBatch:
    """Pre-embedding context for a batch: normalized scalars, code indices, presence."""

    scalars: np.ndarray  # (B, 18)
    codes: np.ndarray  # (B, 3) int
    present: np.ndarray  # (B,) bool

    def __len__(self) -> int:
        return len(self.present)

    def take(self, idx) -> "ContextBatch":
        return ContextBatch(self.scalars[idx], self.codes[idx], self.present[idx])


@dataclass
class ContextVector:
    values: np.ndarray
    present: bool


class Featurizer:
    """Fitted normalization statistics plus categorical vocabularies."""

    def __init__(self, stats: NormalizationStats, vocabs: dict[str, CategoricalVocab], embed_dim: int = EMBED_DIM):
        self.stats = stats
        self.vocabs = vocabs
        self.embed_dim = embed_dim

    @property
    def context_dim(self) -> int:
        return N_SCALARS + self.embed_dim * len(CATEGORICAL_FEATURES)

    @classmethod
    def fit(cls, records: Iterable[TransactionRecord | None], embed_dim: int = EMBED_DIM) -> "Featurizer":
        raws = [derive_raw_features(r) for r in records if r is not None]
        if not raws:
            raise ValueError("Featurizer.fit: no training records with context")
        stats = fit_normalization(raws)
        vocabs = {
            name: CategoricalVocab(sorted({r.categoricals[name] for r in raws if r.categoricals[name] is not None}))
            for name in CATEGORICAL_FEATURES
        }
        return cls(stats, vocabs, embed_dim)

    @classmethod
    def neutral(cls, embed_dim: int = EMBED_DIM) -> "Featurizer":
        """Placeholder for models that never read context (text-only baseline)."""
        zeros = [0.0] * N_SCALARS
        return cls(NormalizationStats(zeros, list(zeros), list(zeros)), {n: CategoricalVocab([]) for n in CATEGORICAL_FEATURES}, embed_dim)

    def transform(self, records: Sequence[TransactionRecord | None]) -> ContextBatch:
        b = len(records)
        scalars = np.zeros((b, N_SCALARS))
        codes = np.zeros((b, len(CATEGORICAL_FEATURES)), dtype=np.int64)
        present = np.zeros(b, dtype=bool)
        for i, rec in enumerate(records):
            if rec is None:
                continue
            raw = derive_raw_features(rec)
            scalars[i] = self.stats.normalize(raw.vector())
            codes[i] = [self.vocabs[n].index(raw.categoricals[n]) for n in CATEGORICAL_FEATURES]
            present[i] = True
        return ContextBatch(scalars, codes, present)

    def new_tables(self, rng: np.random.Generator) -> dict[str, ad.Tensor]:
        return {
            name: ad.parameter(rng.normal(0.0, 0.1, size=(len(self.vocabs[name]), self.embed_dim)), name=f"embed.{name}")
            for name in CATEGORICAL_FEATURES
        }

    def to_dict(self) -> dict:
        return {
            "stats": self.stats.to_dict(),
            "vocabs": {k: v.codes for k, v in self.vocabs.items()},
            "embed_dim": self.embed_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Featurizer":
        return cls(
            NormalizationStats.from_dict(d["stats"]),
            {k: CategoricalVocab(list(v)) for k, v in d["vocabs"].items()},
            int(d["embed_dim"]),
        )


def assemble_context(batch: ContextBatch, tables: dict[str, ad.Tensor], mask: np.ndarray | None = None) -> ad.Tensor:
    """Differentiable (B, 93) context; absent rows are exactly zero."""
    parts = [ad.Tensor(batch.scalars)]
    for k, name in enumerate(CATEGORICAL_FEATURES):
        parts.append(ad.embedding(tables[name], batch.codes[:, k]))
    c = ad.concat(parts, axis=-1)
    keep = batch.present[:, None].astype(float)
    if mask is not None:
        keep = keep * np.asarray(mask, dtype=float)[None, :]
    return ad.mul(c, keep)


def context_vector(
    record: TransactionRecord | None, featurizer: Featurizer, tables: dict[str, ad.Tensor]
) -> ContextVector:
    batch = featurizer.transform([record])
    with ad.no_grad():
        values = assemble_context(batch, tables).data[0].copy()
    return ContextVector(values, bool(batch.present[0]))


def feature_slots(name: str, embed_dim: int = EMBED_DIM) -> list[int]:
    if name in SCALAR_FEATURES:
        return [SCALAR_FEATURES.index(name)]
    if name in CATEGORICAL_FEATURES:
        start = N_SCALARS + CATEGORICAL_FEATURES.index(name) * embed_dim
        return list(range(start, start + embed_dim))
    raise KeyError(f"unknown context feature {name!r}")


def feature_mask(names: Iterable[str], embed_dim: int = EMBED_DIM) -> np.ndarray:
    """1/0 mask over context slots; each name is a group from FEATURE_GROUPS or a single feature."""
    mask = np.ones(N_SCALARS + embed_dim * len(CATEGORICAL_FEATURES))
    for name in names:
        members = FEATURE_GROUPS.get(name, (name,))
        for member in members:
            mask[feature_slots(member, embed_dim)] = 0.0
    return mask
