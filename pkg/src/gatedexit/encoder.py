"""Token embedding and post-norm transformer encoder layers."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value

PAD_ID = 0


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 6
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 64
    max_seq_len: int = 32
    num_classes: int = 2
    classifier_inner_dim: int = 16
    gate_inner_dim: int = 16
    proj_dim: int = 32
    dropout_rate: float = 0.0
    layer_norm_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        for name in (
            "num_layers",
            "hidden_dim",
            "num_heads",
            "ffn_dim",
            "vocab_size",
            "max_seq_len",
            "classifier_inner_dim",
            "gate_inner_dim",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_dim % self.num_heads:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.proj_dim < 2:
            raise ValueError("proj_dim must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


def _normal(rng: np.random.Generator, shape, std: float, name: str) -> Value:
    return ad.parameter(rng.normal(0.0, std, size=shape), name=name)


def _zeros(shape, name: str) -> Value:
    return ad.parameter(np.zeros(shape), name=name)


def _ones(shape, name: str) -> Value:
    return ad.parameter(np.ones(shape), name=name)


def init_embedding_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Value]:
    d, s = cfg.hidden_dim, cfg.init_std
    return {
        "embed.tok": _normal(rng, (cfg.vocab_size, d), s, "embed.tok"),
        "embed.pos": _normal(rng, (cfg.max_seq_len, d), s, "embed.pos"),
        "embed.ln_g": _ones(d, "embed.ln_g"),
        "embed.ln_b": _zeros(d, "embed.ln_b"),
    }


def init_layer_params(cfg: ModelConfig, rng: np.random.Generator, index: int) -> dict[str, Value]:
    d, f, s = cfg.hidden_dim, cfg.ffn_dim, cfg.init_std
    p = f"layer{index}."
    out = {}
    for w in ("wq", "wk", "wv", "wo"):
        out[p + w] = _normal(rng, (d, d), s, p + w)
        out[p + "b" + w[1]] = _zeros(d, p + "b" + w[1])
    out[p + "w1"] = _normal(rng, (d, f), s, p + "w1")
    out[p + "b1"] = _zeros(f, p + "b1")
    out[p + "w2"] = _normal(rng, (f, d), s, p + "w2")
    out[p + "b2"] = _zeros(d, p + "b2")
    for ln in ("ln1", "ln2"):
        out[p + ln + "_g"] = _ones(d, p + ln + "_g")
        out[p + ln + "_b"] = _zeros(d, p + ln + "_b")
    return out


def layer_view(params: dict[str, Value], index: int) -> dict[str, Value]:
    """Strip the ``layer{i}.`` prefix so layer code can use short keys."""
    prefix = f"layer{index}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def embed(
    token_ids: np.ndarray,
    params: dict[str, Value],
    cfg: ModelConfig,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Value, np.ndarray]:
    """X^0 = LayerNorm(token + position embeddings) for a padded id batch.

    Returns the [B, N, D] embeddings and a boolean [B, N] mask of real tokens.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.shape[1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    mask = ids != PAD_ID
    n = ids.shape[1]
    x = params["embed.tok"][ids] + params["embed.pos"][:n]
    x = ad.layer_norm(x, params["embed.ln_g"], params["embed.ln_b"], cfg.layer_norm_eps)
    return ad.dropout(x, cfg.dropout_rate, rng, training), mask


def self_attention(
    x: Value, lp: dict[str, Value], mask: np.ndarray, num_heads: int
) -> tuple[Value, Value]:
    """Multi-head scaled dot-product attention; returns (output, weights)."""
    b, n, d = x.shape
    hd = d // num_heads

    def heads(t: Value) -> Value:
        return t.reshape(b, n, num_heads, hd).transpose(0, 2, 1, 3)

    q = heads(x @ lp["wq"] + lp["bq"])
    k = heads(x @ lp["wk"] + lp["bk"])
    v = heads(x @ lp["wv"] + lp["bv"])
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(hd))
    weights = ad.softmax(scores, axis=-1, mask=mask[:, None, None, :])
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return ctx @ lp["wo"] + lp["bo"], weights


def encoder_layer_forward(
    x: Value,
    lp: dict[str, Value],
    mask: np.ndarray,
    cfg: ModelConfig,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Value:
    """One post-norm block: LN(x + Attn(x)) then LN(h + FFN(h))."""
    if x.ndim != 3 or x.shape[-1] != cfg.hidden_dim:
        raise ad.ShapeError(f"encoder layer expects [B, N, {cfg.hidden_dim}], got {x.shape}")
    if mask.shape != x.shape[:2]:
        raise ad.ShapeError(f"mask shape {mask.shape} does not match input {x.shape[:2]}")
    eps = cfg.layer_norm_eps
    attn, _ = self_attention(x, lp, mask, cfg.num_heads)
    h = ad.layer_norm(x + ad.dropout(attn, cfg.dropout_rate, rng, training), lp["ln1_g"], lp["ln1_b"], eps)
    ff = ad.gelu(h @ lp["w1"] + lp["b1"]) @ lp["w2"] + lp["b2"]
    return ad.layer_norm(h + ad.dropout(ff, cfg.dropout_rate, rng, training), lp["ln2_g"], lp["ln2_b"], eps)
