"""Per-layer skipping gates, exit classifiers, gated residual mixing and the
normalized-entropy exit criterion.

Gates and classifiers share one compact attention block: tokens are reduced
to a small inner width, then attend to each other with learned query/key
maps over the reduced states (values are the reduced states themselves).
A classifier reads the [CLS] row through a linear layer; a gate
attention-pools all rows and maps the pooled vector to one logit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .encoder import ModelConfig

SKIP_THRESHOLD = 0.5


@dataclass(frozen=True)
class GateDecision:
    layer: int  # 1-based
    p_skip: float
    skip: bool

    @classmethod
    def from_probability(cls, layer: int, p_skip: float) -> "GateDecision":
        return cls(layer, float(p_skip), bool(p_skip >= SKIP_THRESHOLD))


def init_gate_params(cfg: ModelConfig, rng: np.random.Generator, index: int) -> dict[str, Value]:
    d, g, s = cfg.hidden_dim, cfg.gate_inner_dim, cfg.init_std
    p = f"gate{index}."
    return {
        p + "wr": ad.parameter(rng.normal(0, s, (d, g)), p + "wr"),
        p + "br": ad.parameter(np.zeros(g), p + "br"),
        p + "wq": ad.parameter(rng.normal(0, s, (g, g)), p + "wq"),
        p + "wk": ad.parameter(rng.normal(0, s, (g, g)), p + "wk"),
        p + "w_pool": ad.parameter(rng.normal(0, s, (g, 1)), p + "w_pool"),
        p + "w_out": ad.parameter(rng.normal(0, s, (g, 1)), p + "w_out"),
        p + "b_out": ad.parameter(np.zeros(1), p + "b_out"),
    }


def init_classifier_params(cfg: ModelConfig, rng: np.random.Generator, index: int) -> dict[str, Value]:
    d, c, s = cfg.hidden_dim, cfg.classifier_inner_dim, cfg.init_std
    p = f"cls{index}."
    return {
        p + "wr": ad.parameter(rng.normal(0, s, (d, c)), p + "wr"),
        p + "br": ad.parameter(np.zeros(c), p + "br"),
        p + "wq": ad.parameter(rng.normal(0, s, (c, c)), p + "wq"),
        p + "wk": ad.parameter(rng.normal(0, s, (c, c)), p + "wk"),
        p + "wc": ad.parameter(rng.normal(0, s, (c, cfg.num_classes)), p + "wc"),
        p + "bc": ad.parameter(np.zeros(cfg.num_classes), p + "bc"),
    }


def view(params: dict[str, Value], prefix: str) -> dict[str, Value]:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def compact_attention(x: Value, p: dict[str, Value], mask: np.ndarray) -> Value:
    """Single-head attention in a reduced width; returns [B, N, inner]."""
    v = x @ p["wr"] + p["br"]
    width = v.shape[-1]
    scores = ((v @ p["wq"]) @ (v @ p["wk"]).swapaxes(-1, -2)) * (1.0 / math.sqrt(width))
    weights = ad.softmax(scores, axis=-1, mask=mask[:, None, :])
    return weights @ v


def gate_forward(x: Value, gp: dict[str, Value], mask: np.ndarray) -> Value:
    """Skip probability per sample, shape [B], strictly inside (0, 1)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise ValueError("gate input has a sequence with no real tokens to pool")
    h = compact_attention(x, gp, mask)
    b, n, width = h.shape
    pool = ad.softmax((h @ gp["w_pool"]).reshape(b, n), axis=-1, mask=mask)
    pooled = (pool.reshape(b, 1, n) @ h).reshape(b, width)
    return ad.sigmoid((pooled @ gp["w_out"] + gp["b_out"]).reshape(b))


def soft_skip_mix(x_prev: Value, layer_out: Value, g: Value) -> Value:
    """g * x_prev + (1 - g) * layer_out with a per-sample scalar g of shape [B]."""
    if x_prev.shape != layer_out.shape:
        raise ad.ShapeError(f"mix shapes disagree: {x_prev.shape} vs {layer_out.shape}")
    g = ad.as_value(g)
    if g.ndim == 0:
        g = g.reshape(1)
    g = g.reshape((g.shape[0],) + (1,) * (x_prev.ndim - 1))
    return g * x_prev + (1.0 - g) * layer_out


def classifier_forward(x: Value, cp: dict[str, Value], mask: np.ndarray) -> tuple[Value, Value, Value]:
    """Returns (class distribution z [B, C], attention hidden h [B, N, inner],
    logits [B, C])."""
    h = compact_attention(x, cp, np.asarray(mask, dtype=bool))
    logits = h[:, 0, :] @ cp["wc"] + cp["bc"]
    return ad.softmax(logits, axis=-1), h, logits


def normalized_entropy(z) -> np.ndarray | float:
    """Shannon entropy divided by ln C, with 0 ln 0 = 0.  Accepts [C] or [B, C]."""
    z = np.asarray(z.data if isinstance(z, Value) else z, dtype=np.float64)
    if z.shape[-1] < 2:
        raise ValueError("need at least two classes")
    totals = z.sum(axis=-1)
    if np.any(np.abs(totals - 1.0) > 1e-6) or np.any(z < 0):
        raise ValueError("z is not a probability distribution")
    safe = np.where(z > 0, z, 1.0)
    ent = -(z * np.log(safe)).sum(axis=-1) / math.log(z.shape[-1])
    ent = np.clip(ent, 0.0, 1.0)
    return float(ent) if ent.ndim == 0 else ent
