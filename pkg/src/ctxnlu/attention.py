"""Query-context attention: a per-feature sigmoid gate over the context vector.

    e = concat(W_q q, W_c c)
    a = sigmoid(W_l3 tanh(W_l2 tanh(W_l1 e)))
    c_hat = a * c

Hidden widths halve: h1 = (2 * d_p) // 2, h2 = h1 // 2.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .encoder import uniform_fan_in


class AttentionModule:
    def __init__(self, d_query: int, d_context: int, rng: np.random.Generator, d_proj: int = 64, prefix: str = "att"):
        self.d_query, self.d_context = d_query, d_context
        combined = 2 * d_proj
        h1 = combined // 2
        h2 = h1 // 2
        dims = {
            "wq": (d_query, d_proj),
            "wc": (d_context, d_proj),
            "wl1": (combined, h1),
            "wl2": (h1, h2),
            "wl3": (h2, d_context),
        }
        self.params: dict[str, ad.Tensor] = {}
        for key, (fan_in, fan_out) in dims.items():
            w = uniform_fan_in(rng, fan_in, (fan_in, fan_out))
            self.params[f"{prefix}.{key}"] = ad.parameter(w, name=f"{prefix}.{key}")
            bkey = "b" + key[1:]
            self.params[f"{prefix}.{bkey}"] = ad.parameter(np.zeros(fan_out), name=f"{prefix}.{bkey}")
        self._p = {k[len(prefix) + 1 :]: v for k, v in self.params.items()}
        self.widths = (d_proj, h1, h2)

    def __call__(self, q: ad.Tensor, c: ad.Tensor) -> ad.Tensor:
        return attention_weights(q, c, self._p)


def attention_weights(q: ad.Tensor, c: ad.Tensor, p: dict[str, ad.Tensor]) -> ad.Tensor:
    if q.shape[-1] != p["wq"].shape[0] or c.shape[-1] != p["wc"].shape[0]:
        raise ad.ShapeError(
            f"attention_weights: incompatible shapes {q.shape} and {c.shape} "
            f"for projections {p['wq'].shape} and {p['wc'].shape}"
        )
    e = ad.concat([ad.linear(q, p["wq"], p["bq"]), ad.linear(c, p["wc"], p["bc"])], axis=-1)
    h = ad.tanh(ad.linear(e, p["wl1"], p["bl1"]))
    h = ad.tanh(ad.linear(h, p["wl2"], p["bl2"]))
    return ad.sigmoid(ad.linear(h, p["wl3"], p["bl3"]))


def weighted_context(a: ad.Tensor, c: ad.Tensor) -> ad.Tensor:
    if a.shape != c.shape:
        raise ad.ShapeError(f"weighted_context: incompatible shapes {a.shape} and {c.shape}")
    return ad.mul(a, c)
