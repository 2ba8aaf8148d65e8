"""Small trainable text encoder producing the query embedding.

Tokens are embedded, given learned position embeddings, passed through one
multi-head self-attention block with a position-wise feed-forward layer, and
mean-pooled over the non-padding positions.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad

PAD = 0
UNK = 1
_SPLIT = re.compile(r"[^0-9a-z]+")
NEG_INF = -1e9


def words(text: str) -> list[str]:
    return [w for w in _SPLIT.split(text.lower()) if w]


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        self.tokens = ["<pad>", "<unk>"] + list(tokens)
        self._index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, utterances: Iterable[str], min_count: int = 1) -> "Vocabulary":
        counts = Counter(w for u in utterances for w in words(u))
        return cls(sorted(w for w, n in counts.items() if n >= min_count))

    def __len__(self) -> int:
        return len(self.tokens)

    def index(self, word: str) -> int:
        return self._index.get(word, UNK)


def tokenize(utterance: str, vocab: Vocabulary, max_len: int = 24) -> np.ndarray:
    ids = [vocab.index(w) for w in words(utterance)][:max_len]
    out = np.full(max_len, PAD, dtype=np.int64)
    out[: len(ids)] = ids
    return out


def tokenize_batch(utterances: Sequence[str], vocab: Vocabulary, max_len: int = 24) -> np.ndarray:
    if not utterances:
        return np.zeros((0, max_len), dtype=np.int64)
    return np.stack([tokenize(u, vocab, max_len) for u in utterances])


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class EncoderConfig:
    d_model: int = 64
    heads: int = 2
    max_len: int = 24
    ffn_dim: int = 128


class TextEncoder:
    """Parameters live in ``self.params`` under ``prefix``."""

    def __init__(self, vocab_size: int, config: EncoderConfig, rng: np.random.Generator, prefix: str = "backbone"):
        if config.d_model % config.heads:
            raise ValueError("d_model must be divisible by heads")
        self.config = config
        d, f = config.d_model, config.ffn_dim
        shapes = {
            "tok": (vocab_size, d),
            "pos": (config.max_len, d),
            "wq": (d, d),
            "wk": (d, d),
            "wv": (d, d),
            "wo": (d, d),
            "w1": (d, f),
            "b1": (f,),
            "w2": (f, d),
            "b2": (d,),
        }
        self.params: dict[str, ad.Tensor] = {}
        for key, shape in shapes.items():
            if key.startswith("b"):
                data = np.zeros(shape)
            elif key in ("tok", "pos"):
                data = rng.normal(0.0, 0.1, size=shape)
            else:
                data = uniform_fan_in(rng, shape[0], shape)
            self.params[f"{prefix}.{key}"] = ad.parameter(data, name=f"{prefix}.{key}")
        self._p = {k[len(prefix) + 1 :]: v for k, v in self.params.items()}

    def __call__(self, tokens: np.ndarray) -> ad.Tensor:
        """(B, L) token ids with L <= max_len -> (B, d_model) query embeddings."""
        p, cfg = self._p, self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        b, length = tokens.shape
        if length > cfg.max_len:
            raise ad.ShapeError(f"encoder: sequence length {length} exceeds max_len {cfg.max_len}")
        h, dh = cfg.heads, cfg.d_model // cfg.heads

        keep = tokens != PAD
        # an all-padding row attends to and pools over every position
        keep[~keep.any(axis=1)] = True

        x = ad.add(ad.embedding(p["tok"], tokens), ad.embedding(p["pos"], np.arange(length)))

        def heads(t):
            return ad.transpose(ad.reshape(t, (b, length, h, dh)), (0, 2, 1, 3))

        q = heads(ad.matmul(x, p["wq"]))
        k = heads(ad.matmul(x, p["wk"]))
        v = heads(ad.matmul(x, p["wv"]))
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        bias = np.where(keep, 0.0, NEG_INF)[:, None, None, :]
        att = ad.softmax(ad.add(scores, bias), axis=-1)
        mixed = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, length, cfg.d_model))
        x = ad.add(x, ad.matmul(mixed, p["wo"]))
        ff = ad.linear(ad.relu(ad.linear(x, p["w1"], p["b1"])), p["w2"], p["b2"])
        x = ad.add(x, ff)

        weights = keep / keep.sum(axis=1, keepdims=True)
        return ad.sum_(ad.mul(x, weights[:, :, None]), axis=1)
