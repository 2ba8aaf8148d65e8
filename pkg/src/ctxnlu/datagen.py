"""Seeded synthetic corpus of customer-care utterances with order context and dual labels.

Each example comes from a *scenario*: a family of utterance templates, a
sampler over order states, and a label rule mapping the order state to the
(utterance label, conversation label) pair. Some families are ambiguous: the
text alone cannot decide the label ("order cancelled" is a cancel request or
a complaint depending on who cancelled). Non-flow utterances ("hello",
"talk to an agent") carry a conversation label that only the order state
explains.

Per-family state samplers are deliberately skewed. Greetings only ever arrive
with a store-cancelled order (whose surviving items are often late), and no
non-flow family ever carries an overdue order. A model that lets the query
drive its latent-intent prediction therefore learns "hello -> why cancelled",
which ``generate_probe("greet", "overdue", n)`` exposes.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .featurizer import HOUR, ItemRecord, TransactionRecord, derive_raw_features

FLOW_INTENTS = [
    "where_is_my_order",
    "order_late",
    "cancel_order",
    "why_order_cancelled",
    "missing_items",
    "refund_status",
    "return_item",
    "substitution_issue",
]
NON_FLOW_INTENTS = ["greet", "agent_contact", "affirmative", "thanks"]
UTTERANCE_INTENTS = FLOW_INTENTS + NON_FLOW_INTENTS
CONVERSATION_INTENTS = list(FLOW_INTENTS)

STATES = (
    "not_shipped",
    "in_transit",
    "overdue",
    "delivered",
    "substituted",
    "store_cancelled",
    "customer_cancelled",
    "return_initiated",
)

SPLITS = ("train", "validation", "test")
BASE_TIME = 1_700_000_000


class InfeasibleManifest(ValueError):
    pass


def classify_state(record: TransactionRecord) -> str:
    """Order state as read back from the derived features; the label rules key on this."""
    f = derive_raw_features(record).scalars
    if f["any_cancelled_by_store"]:
        return "store_cancelled"
    if f["any_cancelled_by_customer"]:
        return "customer_cancelled"
    if f["any_return"]:
        return "return_initiated"
    if f["any_past_expected"]:
        return "overdue"
    if f["any_left_to_deliver"]:
        return "not_shipped" if f["all_left_to_ship"] else "in_transit"
    if f["any_substituted"]:
        return "substituted"
    return "delivered"


# ---------------------------------------------------------------- scenarios


def latent_intent(state: str) -> str:
    """What a customer with this order state is most likely really asking about."""
    return {
        "not_shipped": "where_is_my_order",
        "in_transit": "where_is_my_order",
        "overdue": "order_late",
        "delivered": "missing_items",
        "substituted": "substitution_issue",
        "store_cancelled": "why_order_cancelled",
        "customer_cancelled": "refund_status",
        "return_initiated": "refund_status",
    }[state]


@dataclass
class ScenarioSpec:
    name: str
    templates: list[str]
    state_weights: dict[str, float]
    rule: Callable[[str | None], tuple[str, str]]
    ambiguous: bool = False
    contextless_ok: bool = False
    weight: float = 1.0

    def labels(self, state: str | None) -> tuple[str, str]:
        return self.rule(state)


def _fixed(intent: str, conv: Callable[[str], str] | None = None):
    def rule(state):
        if state is None or conv is None:
            return intent, intent
        return intent, conv(state)

    return rule


def _wismo_conv(state):
    return {"overdue": "order_late", "delivered": "missing_items"}.get(state, "where_is_my_order")


def _cancel_conv(state):
    return "why_order_cancelled" if state == "store_cancelled" else "cancel_order"


def _return_conv(state):
    return "refund_status" if state == "return_initiated" else "return_item"


def _same(fn):
    def rule(state):
        y = fn(state)
        return y, y

    return rule


def _cancelled_ambiguous(state):
    return "why_order_cancelled" if state == "store_cancelled" else "cancel_order"


def _when_receive(state):
    return {"overdue": "order_late", "delivered": "missing_items"}.get(state, "where_is_my_order")


def _not_received(state):
    if state in ("return_initiated", "customer_cancelled"):
        return "refund_status"
    return _when_receive(state)


def _non_flow(intent):
    def rule(state):
        if state is None:
            raise ValueError(f"{intent}: non-flow utterances always carry context")
        return intent, latent_intent(state)

    return rule


def _order_help(state):
    if state is None:
        return "where_is_my_order", "where_is_my_order"
    return "where_is_my_order", latent_intent(state)


def default_scenarios() -> list[ScenarioSpec]:
    S = ScenarioSpec
    return [
        S("wismo", ["where is my order", "track my order", "where is my package", "order status",
                    "has my order shipped", "track my package", "can you track my order"],
          {"not_shipped": 2, "in_transit": 3, "overdue": 2, "delivered": 2}, _fixed("where_is_my_order", _wismo_conv),
          contextless_ok=True),
        S("late", ["my order is late", "my delivery is delayed", "the package is running late",
                   "my order is overdue", "delivery is taking too long"],
          {"overdue": 4, "in_transit": 1}, _fixed("order_late", lambda s: "order_late"), contextless_ok=True),
        S("cancel", ["cancel my order", "i want to cancel", "please cancel the order", "cancel this order",
                     "stop my order"],
          {"not_shipped": 3, "in_transit": 2, "store_cancelled": 1}, _fixed("cancel_order", _cancel_conv),
          contextless_ok=True),
        S("why_cancel", ["why was my order cancelled", "why did you cancel my order", "who cancelled my order",
                         "reason for the cancellation"],
          {"store_cancelled": 3, "customer_cancelled": 1}, _fixed("why_order_cancelled", lambda s: "why_order_cancelled"),
          contextless_ok=True),
        S("missing", ["items missing from my order", "missing item", "i did not get all items",
                      "some items were missing", "part of my order is missing"],
          {"delivered": 4, "substituted": 1}, _fixed("missing_items", lambda s: "missing_items"), contextless_ok=True),
        S("refund", ["where is my refund", "refund status", "when do i get my money back", "i want my refund",
                     "check my refund"],
          {"return_initiated": 3, "customer_cancelled": 2}, _fixed("refund_status", lambda s: "refund_status"),
          contextless_ok=True),
        S("return", ["i want to return an item", "how do i return this", "return my order", "start a return",
                     "send this item back"],
          {"delivered": 3, "substituted": 1, "return_initiated": 2}, _fixed("return_item", _return_conv),
          contextless_ok=True),
        S("substitution", ["wrong item substituted", "you replaced my item", "substitution problem",
                           "i got a different item", "bad replacement item"],
          {"substituted": 4, "delivered": 1}, _fixed("substitution_issue", lambda s: "substitution_issue"),
          contextless_ok=True),
        S("order_cancelled", ["order cancelled", "my order got cancelled", "cancelled order", "order was cancelled"],
          {"store_cancelled": 1, "not_shipped": 1, "in_transit": 1}, _same(_cancelled_ambiguous), ambiguous=True, weight=2.0),
        S("when_receive", ["when will i receive the items", "when will it arrive", "when is my delivery",
                           "when do i get my items"],
          {"overdue": 1, "in_transit": 1, "not_shipped": 1}, _same(_when_receive), ambiguous=True, weight=2.0),
        S("my_order", ["my order", "about my order", "my package", "regarding my order"],
          {"overdue": 1, "delivered": 1, "in_transit": 1}, _same(_when_receive), ambiguous=True, weight=2.0),
        S("not_received", ["not received", "i have not received it", "did not receive", "never received"],
          {"return_initiated": 1, "overdue": 1, "delivered": 1, "customer_cancelled": 1}, _same(_not_received),
          ambiguous=True, weight=2.0),
        S("order_help", ["order help", "help with my order", "problem with order", "issue with my order"],
          {"delivered": 2, "overdue": 1, "store_cancelled": 1, "return_initiated": 1, "substituted": 1, "in_transit": 1},
          _order_help, ambiguous=True, weight=2.0),
        S("greet", ["hello", "hi", "hello there", "hey", "good morning", "hi there"],
          {"store_cancelled": 1}, _non_flow("greet"), weight=1.5),
        S("agent_contact", ["contact customer care", "talk to an agent", "i need a human", "customer service",
                            "connect me to a person", "speak to someone"],
          {"not_shipped": 1, "in_transit": 1, "delivered": 1, "substituted": 1, "customer_cancelled": 1,
           "return_initiated": 1}, _non_flow("agent_contact")),
        S("affirmative", ["yes", "yes please", "sure", "ok", "yeah", "correct"],
          {"in_transit": 30, "not_shipped": 1, "delivered": 1, "customer_cancelled": 1, "return_initiated": 1,
           "substituted": 1}, _non_flow("affirmative")),
        S("thanks", ["thanks", "thank you", "thank you so much", "thanks a lot", "much appreciated"],
          {"delivered": 30, "substituted": 1, "return_initiated": 1, "not_shipped": 1, "in_transit": 1,
           "customer_cancelled": 1}, _non_flow("thanks")),
    ]


PREFIXES = ["", "", "", "um", "so", "please", "quick question", "i need help", "excuse me"]
SUFFIXES = ["", "", "", "please", "asap", "today", "right now", "again", "urgent"]


def _realize(template: str, rng: np.random.Generator) -> str:
    pre = PREFIXES[rng.integers(len(PREFIXES))]
    suf = SUFFIXES[rng.integers(len(SUFFIXES))]
    return " ".join(p for p in (pre, template, suf) if p)


# ---------------------------------------------------------------- records


FULFILLMENT = ["delivery", "pickup", "ship_to_home"]
STORES = ["store_01", "store_02", "store_03", "store_04", "store_05"]
STORE_REASONS = ["out_of_stock", "store_closed", "unspecified"]
CUSTOMER_REASONS = ["changed_mind", "duplicate_order", "unspecified"]
OTHER_REASONS = ["payment_declined", "address_issue"]


def build_record(state: str, rng: np.random.Generator) -> TransactionRecord:
    """Sample a transaction whose derived features classify as ``state``."""
    chat = float(BASE_TIME + int(rng.integers(0, 60 * 24 * 3600)))
    n = int(rng.integers(1, 6))
    ranges = {
        "not_shipped": (1, 48),
        "in_transit": (12, 120),
        "overdue": (96, 400),
        "delivered": (24, 300),
        "substituted": (6, 100),
        "store_cancelled": (2, 200),
        "customer_cancelled": (2, 200),
        "return_initiated": (48, 500),
    }
    lo, hi = ranges[state]
    age = float(rng.integers(lo * 60, hi * 60)) * 60.0
    placed = chat - age

    def at(frac_lo, frac_hi):
        # a moment between order placement and chat time, rounded to the second
        return float(round(placed + age * rng.uniform(frac_lo, frac_hi)))

    def future():
        return float(round(chat + HOUR * rng.uniform(2, 96)))

    def delivered_item():
        s = at(0.05, 0.5)
        d = max(s, at(0.5, 0.95))
        return ItemRecord(delivered_at=d, shipped_at=s, expected_delivery_at=float(round(d + HOUR * rng.uniform(0, 48))))

    items: list[ItemRecord] = []
    reason: str | None = None
    if state == "not_shipped":
        items = [ItemRecord(expected_delivery_at=future()) for _ in range(n)]
    elif state == "in_transit":
        items = [ItemRecord(shipped_at=at(0.1, 0.9), expected_delivery_at=future()) for _ in range(n)]
        for k in range(1, n):
            r = rng.random()
            if r < 0.3:
                items[k] = delivered_item()
            elif r < 0.45:
                items[k] = ItemRecord(expected_delivery_at=future())
    elif state == "overdue":
        late = int(rng.integers(1, n + 1))
        for k in range(n):
            if k < late:
                shipped = at(0.05, 0.6) if rng.random() < 0.7 else None
                items.append(ItemRecord(shipped_at=shipped, expected_delivery_at=float(round(chat - HOUR * rng.uniform(2, 72)))))
            else:
                items.append(delivered_item())
    elif state in ("delivered", "substituted"):
        items = [delivered_item() for _ in range(n)]
        if state == "substituted":
            for k in range(n):
                items[k].substituted = k == 0 or rng.random() < 0.3
    elif state in ("store_cancelled", "customer_cancelled"):
        who = "store" if state == "store_cancelled" else "customer"
        hit = int(rng.integers(1, n + 1))
        for k in range(n):
            r = rng.random()
            if k < hit:
                items.append(ItemRecord(cancelled_by=who))
            elif r < 0.35:
                items.append(delivered_item())
            elif r < 0.65:
                items.append(ItemRecord(shipped_at=at(0.1, 0.9), expected_delivery_at=future()))
            else:
                # the surviving items can be late; the cancellation still decides the state
                items.append(ItemRecord(shipped_at=at(0.05, 0.6), expected_delivery_at=float(round(chat - HOUR * rng.uniform(2, 72)))))
        pool = STORE_REASONS if who == "store" else CUSTOMER_REASONS
        reason = pool[rng.integers(len(pool))] if rng.random() < 0.8 else None
    elif state == "return_initiated":
        items = [delivered_item() for _ in range(n)]
        for k in range(n):
            items[k].return_initiated = k == 0 or rng.random() < 0.4
    else:
        raise ValueError(f"unknown state {state!r}")

    # occasional item cancelled for some other reason; never changes the state
    if state in ("in_transit", "delivered", "return_initiated") and n > 1 and rng.random() < 0.15:
        items[-1] = ItemRecord(cancelled_by="other")
        if reason is None:
            reason = OTHER_REASONS[rng.integers(len(OTHER_REASONS))]
    order = rng.permutation(len(items))
    items = [items[k] for k in order]
    fulfillment = FULFILLMENT[rng.integers(len(FULFILLMENT))] if rng.random() < 0.95 else None
    record = TransactionRecord(
        order_placed_at=float(round(placed)),
        chat_at=chat,
        fulfillment_type=fulfillment,
        cancellation_reason=reason,
        store_indicator=STORES[rng.integers(len(STORES))],
        items=items,
    )
    got = classify_state(record)
    if got != state:
        raise AssertionError(f"build_record: asked for {state}, built {got}")
    return record


# ---------------------------------------------------------------- manifest and generation


@dataclass
class DatasetManifest:
    train: int = 10_000
    validation: int = 1_000
    test: int = 1_000
    context_fraction: float = 0.70
    distinct_fraction: float = 0.45
    noise: float = 0.05
    seed: int = 0
    realized: dict = field(default_factory=dict)

    def counts(self) -> dict[str, int]:
        return {"train": self.train, "validation": self.validation, "test": self.test}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(**d)


def catalog_dict() -> dict:
    return {"utterance": UTTERANCE_INTENTS, "conversation": CONVERSATION_INTENTS, "flow": FLOW_INTENTS}


def _combos(scenarios: Sequence[ScenarioSpec]):
    """(scenario, state, weight, distinct) over the joint support, weights normalized per scenario."""
    out = []
    for sc in scenarios:
        total = sum(sc.state_weights.values())
        for state, w in sc.state_weights.items():
            yu, yc = sc.labels(state)
            out.append((sc, state, sc.weight * w / total, yu != yc))
    return out


def check_feasible(manifest: DatasetManifest, scenarios: Sequence[ScenarioSpec]) -> None:
    m = manifest
    for name in ("context_fraction", "distinct_fraction", "noise"):
        v = getattr(m, name)
        if not 0.0 <= v <= 1.0:
            raise InfeasibleManifest(f"{name}: {v} outside [0, 1]")
    for sc in scenarios:
        for state in sc.state_weights:
            if state not in STATES:
                raise InfeasibleManifest(f"scenario {sc.name}: unknown state {state!r}")
            try:
                yu, yc = sc.labels(state)
            except Exception as exc:  # label rule must be total over the sampler's support
                raise InfeasibleManifest(f"scenario {sc.name}: label rule undefined for {state}: {exc}") from exc
            if yu not in UTTERANCE_INTENTS or yc not in CONVERSATION_INTENTS:
                raise InfeasibleManifest(f"scenario {sc.name}: labels {yu}/{yc} outside the catalog")
    if m.distinct_fraction > m.context_fraction + 1e-12:
        raise InfeasibleManifest("distinct_fraction exceeds context_fraction; contextless examples have equal labels")
    combos = _combos(scenarios)
    if m.context_fraction > 0 and m.distinct_fraction > 0 and not any(c[3] for c in combos):
        raise InfeasibleManifest("no scenario yields distinct labels")
    if m.distinct_fraction < m.context_fraction and not any(not c[3] for c in combos):
        raise InfeasibleManifest("no scenario yields equal labels with context")
    if m.context_fraction < 1 and not any(sc.contextless_ok for sc in scenarios):
        raise InfeasibleManifest("no scenario can be generated without context")


def _sample_split(n, manifest, scenarios, rng, start_id):
    n_ctx = int(round(n * manifest.context_fraction))
    n_distinct = min(int(round(n * manifest.distinct_fraction)), n_ctx)
    kinds = np.array(["distinct"] * n_distinct + ["equal"] * (n_ctx - n_distinct) + ["none"] * (n - n_ctx))
    kinds = kinds[rng.permutation(n)]

    combos = _combos(scenarios)
    pools = {
        "distinct": [c for c in combos if c[3]],
        "equal": [c for c in combos if not c[3]],
    }
    probs = {k: np.array([c[2] for c in v]) / sum(c[2] for c in v) for k, v in pools.items() if v}
    bare = [sc for sc in scenarios if sc.contextless_ok]

    rows = []
    for k, kind in enumerate(kinds):
        if kind == "none":
            sc = bare[rng.integers(len(bare))]
            state, record = None, None
        else:
            sc, state, _, _ = pools[kind][rng.choice(len(pools[kind]), p=probs[kind])]
            record = build_record(state, rng)
        text = _realize(sc.templates[rng.integers(len(sc.templates))], rng)
        yu, yc = sc.labels(state)
        noisy = bool(rng.random() < manifest.noise)
        if noisy:
            yu, yc = _flip(yu, yc, rng)
        rows.append(
            {
                "id": start_id + k,
                "utterance": text,
                "transaction": None if record is None else record.to_dict(),
                "utterance_label": yu,
                "conversation_label": yc,
                "scenario": sc.name,
                "noisy": noisy,
            }
        )
    return rows


def _flip(yu: str, yc: str, rng: np.random.Generator) -> tuple[str, str]:
    """Replace the utterance label by another of the same kind; keeps equal/distinct status."""
    pool = FLOW_INTENTS if yu in FLOW_INTENTS else NON_FLOW_INTENTS
    if yu == yc:
        choices = [x for x in pool if x != yu]
        new = choices[rng.integers(len(choices))]
        return new, new
    choices = [x for x in pool if x not in (yu, yc)]
    return choices[rng.integers(len(choices))], yc


def generate(
    manifest: DatasetManifest,
    out_dir: str | Path | None = None,
    scenarios: Sequence[ScenarioSpec] | None = None,
) -> dict[str, list[dict]]:
    """Generate all splits; writes JSONL + manifest + catalog when ``out_dir`` is given."""
    scenarios = list(scenarios or default_scenarios())
    check_feasible(manifest, scenarios)
    rng = np.random.default_rng(manifest.seed)
    data, next_id = {}, 0
    for split, n in manifest.counts().items():
        data[split] = _sample_split(n, manifest, scenarios, rng, next_id)
        next_id += n
    manifest.realized = {split: split_stats(rows) for split, rows in data.items()}
    if out_dir is not None:
        write_dataset(out_dir, data, manifest)
    return data


def generate_probe(scenario: str, state: str, n: int, seed: int = 0) -> list[dict]:
    """Noise-free instances of one (scenario, order state) family, e.g. greetings with an overdue order."""
    sc = {s.name: s for s in default_scenarios()}[scenario]
    rng = np.random.default_rng(seed)
    yu, yc = sc.labels(state)
    rows = []
    for k in range(n):
        record = build_record(state, rng)
        rows.append(
            {
                "id": k,
                "utterance": _realize(sc.templates[rng.integers(len(sc.templates))], rng),
                "transaction": record.to_dict(),
                "utterance_label": yu,
                "conversation_label": yc,
                "scenario": sc.name,
                "noisy": False,
            }
        )
    return rows


def split_stats(rows: Sequence[dict]) -> dict:
    n = len(rows)
    if n == 0:
        return {"count": 0}
    return {
        "count": n,
        "context_fraction": sum(r["transaction"] is not None for r in rows) / n,
        "distinct_fraction": sum(r["utterance_label"] != r["conversation_label"] for r in rows) / n,
        "noise_fraction": sum(bool(r.get("noisy")) for r in rows) / n,
        "utterance_intents": len({r["utterance_label"] for r in rows}),
        "conversation_intents": len({r["conversation_label"] for r in rows}),
    }


def write_jsonl(path: Path, rows: Sequence[dict]) -> None:
    with path.open("w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_dataset(out_dir, data: dict[str, list[dict]], manifest: DatasetManifest) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, rows in data.items():
        write_jsonl(out / f"{split}.jsonl", rows)
    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "catalog.json").write_text(json.dumps(catalog_dict(), indent=2) + "\n")


def load_dataset(data_dir) -> tuple[dict[str, list[dict]], DatasetManifest, dict]:
    d = Path(data_dir)
    data = {s: read_jsonl(d / f"{s}.jsonl") for s in SPLITS if (d / f"{s}.jsonl").exists()}
    manifest = DatasetManifest.from_dict(json.loads((d / "manifest.json").read_text()))
    catalog = json.loads((d / "catalog.json").read_text())
    return data, manifest, catalog


# ---------------------------------------------------------------- verification


@dataclass
class VerifyReport:
    stats: dict
    violations: list[dict]
    stats_match: bool

    @property
    def ok(self) -> bool:
        return not self.violations and self.stats_match


def verify(data_dir, scenarios: Sequence[ScenarioSpec] | None = None, tol: float = 0.02) -> VerifyReport:
    """Recompute split statistics and re-derive every noise-free label from its stored context."""
    data, manifest, _ = load_dataset(data_dir)
    by_name = {s.name: s for s in (scenarios or default_scenarios())}
    violations = []
    for split, rows in data.items():
        for r in rows:
            if r.get("noisy"):
                continue
            sc = by_name.get(r["scenario"])
            if sc is None:
                violations.append({"split": split, "id": r["id"], "problem": f"unknown scenario {r['scenario']}"})
                continue
            state = None
            if r["transaction"] is not None:
                state = classify_state(TransactionRecord.from_dict(r["transaction"]))
            try:
                expected = sc.labels(state)
            except ValueError as exc:
                violations.append({"split": split, "id": r["id"], "problem": str(exc)})
                continue
            got = (r["utterance_label"], r["conversation_label"])
            if got != expected:
                violations.append({"split": split, "id": r["id"], "problem": f"labels {got} but rule gives {expected}"})
    stats = {split: split_stats(rows) for split, rows in data.items()}
    match = stats == manifest.realized
    for s in stats.values():
        if s["count"]:
            match &= abs(s["context_fraction"] - manifest.context_fraction) <= tol
            match &= abs(s["distinct_fraction"] - manifest.distinct_fraction) <= tol
    return VerifyReport(stats, violations, match)


def label_counts(rows: Sequence[dict]) -> Counter:
    return Counter((r["utterance_label"], r["conversation_label"]) for r in rows)
