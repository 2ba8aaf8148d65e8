"""Intent classifiers: text-only baseline, query-context fusion variants and dual-head MTL models.

Every model shares the same outer contract: ``model(batch)`` returns an
``Output`` holding utterance-head logits and, for dual-head kinds,
conversation-head logits plus the flow gate that was applied.

Parameter names carry their partition as a prefix:

    backbone.*   text encoder (shared by both heads)
    context.*    categorical embedding tables
    utt.*        utterance head (attention + MLP)
    conv.*       conversation head
    shared.*     query-context module shared by both heads (shared variants)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attention import AttentionModule, weighted_context
from .encoder import EncoderConfig, TextEncoder, uniform_fan_in
from .featurizer import ContextBatch, Featurizer, assemble_context

SINGLE_HEAD = ("baseline", "concat", "mlp-concat", "cawc")
DUAL_HEAD = ("mtl-cnlu", "mtl-cnlu-sawc", "mtl-cnlu-shared", "mtl-cnlu-sawc-shared")
MODEL_KINDS = SINGLE_HEAD + DUAL_HEAD
NOT_IMPLEMENTED_KINDS = ("unimodal", "gating", "weighted-sum")


@dataclass
class IntentCatalog:
    utterance: list[str]
    conversation: list[str]
    flow: list[str]

    def __post_init__(self):
        for names, what in ((self.utterance, "utterance"), (self.conversation, "conversation")):
            if len(names) < 2:
                raise ValueError(f"catalog: need at least 2 {what} intents")
            if len(set(names)) != len(names):
                raise ValueError(f"catalog: duplicate {what} intent names")
        unknown = set(self.flow) - set(self.utterance)
        if unknown:
            raise ValueError(f"catalog: flow intents not in utterance intents: {sorted(unknown)}")

    @property
    def flow_mask(self) -> np.ndarray:
        flow = set(self.flow)
        return np.array([u in flow for u in self.utterance])

    def to_dict(self) -> dict:
        return {"utterance": self.utterance, "conversation": self.conversation, "flow": self.flow}

    @classmethod
    def from_dict(cls, d: dict) -> "IntentCatalog":
        return cls(list(d["utterance"]), list(d["conversation"]), list(d["flow"]))


@dataclass
class ModelConfig:
    d_query: int = 64
    heads: int = 2
    max_len: int = 24
    ffn_dim: int = 128
    d_proj: int = 64
    mlp_hidden: int = 128
    context_mlp: int = 64
    dropout: float = 0.5
    present_flag: bool = False
    feature_mask: list[float] | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Batch:
    tokens: np.ndarray
    context: ContextBatch

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Output:
    utt_logits: ad.Tensor
    conv_logits: ad.Tensor | None = None
    flow_gate: np.ndarray | None = None

    @property
    def utt_probs(self) -> np.ndarray:
        return _softmax_np(self.utt_logits.data)

    @property
    def conv_probs(self) -> np.ndarray | None:
        return None if self.conv_logits is None else _softmax_np(self.conv_logits.data)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class MLPBlock:
    """Hidden layer with ReLU and dropout, then the output layer (softmax lives in the loss)."""

    def __init__(self, d_in: int, hidden: int, n_out: int, rng: np.random.Generator, prefix: str):
        self.d_in = d_in
        self.params = {
            f"{prefix}.w1": ad.parameter(uniform_fan_in(rng, d_in, (d_in, hidden)), name=f"{prefix}.w1"),
            f"{prefix}.b1": ad.parameter(np.zeros(hidden), name=f"{prefix}.b1"),
            f"{prefix}.w2": ad.parameter(uniform_fan_in(rng, hidden, (hidden, n_out)), name=f"{prefix}.w2"),
            f"{prefix}.b2": ad.parameter(np.zeros(n_out), name=f"{prefix}.b2"),
        }
        self._w = list(self.params.values())

    def __call__(self, x: ad.Tensor, rate: float, rng: np.random.Generator | None) -> ad.Tensor:
        if x.shape[-1] != self.d_in:
            raise ad.ShapeError(f"mlp: incompatible shapes {x.shape} and ({self.d_in},)")
        w1, b1, w2, b2 = self._w
        h = ad.dropout(ad.relu(ad.linear(x, w1, b1)), rate, rng)
        return ad.linear(h, w2, b2)


class IntentModel:
    def __init__(
        self,
        kind: str,
        catalog: IntentCatalog,
        vocab_size: int,
        featurizer: Featurizer,
        config: ModelConfig | None = None,
        seed: int = 0,
    ):
        if kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {kind!r}; choose from {', '.join(MODEL_KINDS)}")
        self.kind = kind
        self.catalog = catalog
        self.featurizer = featurizer
        self.config = config = config or ModelConfig()
        rng = np.random.default_rng(seed)

        self.encoder = TextEncoder(
            vocab_size,
            EncoderConfig(config.d_query, config.heads, config.max_len, config.ffn_dim),
            rng,
            prefix="backbone",
        )
        self.params: dict[str, ad.Tensor] = dict(self.encoder.params)
        self.tables: dict[str, ad.Tensor] = {}
        if kind != "baseline":
            self.tables = featurizer.new_tables(rng)
            self.params.update({f"context.{k}": t for k, t in self.tables.items()})

        dq, dc = config.d_query, featurizer.context_dim
        extra = 1 if config.present_flag else 0
        n_u, n_c = len(catalog.utterance), len(catalog.conversation)
        self._flow = catalog.flow_mask
        self._mask = None if config.feature_mask is None else np.asarray(config.feature_mask, dtype=float)

        def att(prefix):
            return self._register(AttentionModule(dq, dc, rng, d_proj=config.d_proj, prefix=prefix))

        def mlp(d_in, n_out, prefix):
            return self._register(MLPBlock(d_in, config.mlp_hidden, n_out, rng, prefix))

        self.utt_att = self.conv_att = None
        self.ctx_proj = None
        self.conv_mlp = None
        if kind == "baseline":
            self.utt_mlp = mlp(dq, n_u, "utt.mlp")
        elif kind == "concat":
            self.utt_mlp = mlp(dq + dc + extra, n_u, "utt.mlp")
        elif kind == "mlp-concat":
            self.ctx_proj = {
                "utt.ctx.w": ad.parameter(uniform_fan_in(rng, dc, (dc, config.context_mlp)), name="utt.ctx.w"),
                "utt.ctx.b": ad.parameter(np.zeros(config.context_mlp), name="utt.ctx.b"),
            }
            self.params.update(self.ctx_proj)
            self.utt_mlp = mlp(dq + config.context_mlp + extra, n_u, "utt.mlp")
        elif kind == "cawc":
            self.utt_att = att("utt.att")
            self.utt_mlp = mlp(dq + dc + extra, n_u, "utt.mlp")
        else:
            shared = kind.endswith("-shared")
            sawc = "sawc" in kind
            if shared:
                self.utt_att = self.conv_att = att("shared.att")
            else:
                self.utt_att = att("utt.att")
                self.conv_att = att("conv.att")
            self.utt_mlp = mlp(dq + dc + extra, n_u, "utt.mlp")
            conv_in = (dc if sawc else dq + dc) + extra
            self.conv_mlp = mlp(conv_in, n_c, "conv.mlp")

    def _register(self, module):
        self.params.update(module.params)
        return module

    @property
    def dual_head(self) -> bool:
        return self.kind in DUAL_HEAD

    @property
    def sawc(self) -> bool:
        return "sawc" in self.kind

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def context(self, batch: ContextBatch) -> ad.Tensor:
        return assemble_context(batch, self.tables, self._mask)

    def __call__(
        self,
        batch: Batch,
        rng: np.random.Generator | None = None,
        flow_override: np.ndarray | None = None,
    ) -> Output:
        """Forward pass.

        ``flow_override`` pins the SAWC gate per example (True = flow branch)
        instead of deriving it from the utterance head's argmax; gradient
        checks use it to hold the hard branch fixed.
        """
        rate = self.config.dropout
        q = self.encoder(batch.tokens)
        if self.kind == "baseline":
            return Output(self.utt_mlp(q, rate, rng))

        c = self.context(batch.context)
        present = ad.Tensor(batch.context.present[:, None].astype(float))

        def with_flag(parts):
            if self.config.present_flag:
                parts = parts + [present]
            return ad.concat(parts, axis=-1)

        if self.kind == "concat":
            return Output(self.utt_mlp(with_flag([q, c]), rate, rng))
        if self.kind == "mlp-concat":
            z = ad.relu(ad.linear(c, self.ctx_proj["utt.ctx.w"], self.ctx_proj["utt.ctx.b"]))
            return Output(self.utt_mlp(with_flag([q, z]), rate, rng))

        a_u = self.utt_att(q, c)
        c_u = weighted_context(a_u, c)
        utt_logits = self.utt_mlp(with_flag([q, c_u]), rate, rng)
        if self.kind == "cawc":
            return Output(utt_logits)

        shared = self.kind.endswith("-shared")
        if not self.sawc:
            c_c = c_u if shared else weighted_context(self.conv_att(q, c), c)
            conv_logits = self.conv_mlp(with_flag([q, c_c]), rate, rng)
            return Output(utt_logits, conv_logits)

        if flow_override is None:
            gate = self._flow[np.argmax(utt_logits.data, axis=1)]
        else:
            gate = np.asarray(flow_override, dtype=bool)
        attended = c_u if shared else weighted_context(self.conv_att(q, c), c)
        c_tilde = ad.where(gate[:, None], attended, c)
        conv_logits = self.conv_mlp(with_flag([c_tilde]), rate, rng)
        return Output(utt_logits, conv_logits, gate)


def top2_pair(utt_probs: np.ndarray, conv_probs: np.ndarray | None, catalog: IntentCatalog) -> list[tuple[str, str]]:
    """Predicted intent pair per example.

    Single head: the two most probable utterance intents. Dual head: the
    argmax of each head, even when both name the same intent. Ties go to the
    lower class index.
    """
    pairs = []
    if conv_probs is None:
        # stable sort on the negated row keeps the lower index first on ties
        order = np.argsort(-utt_probs, axis=1, kind="stable")
        for row in order:
            pairs.append((catalog.utterance[row[0]], catalog.utterance[row[1]]))
    else:
        for u, c in zip(np.argmax(utt_probs, axis=1), np.argmax(conv_probs, axis=1)):
            pairs.append((catalog.utterance[u], catalog.conversation[c]))
    return pairs
