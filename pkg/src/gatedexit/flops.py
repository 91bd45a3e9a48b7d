"""Closed-form multiply-accumulate accounting.

Only matrix-product MACs are counted; biases, layer norms, softmax and
activations are ignored.  The single exception is the embedding, whose cost
is the n*D position-embedding addition so that every op kind has a positive
cost.  ``convention="flops"`` reports 2 FLOPs per MAC.

Per-op formulas for sequence length n, hidden D, FFN width F, gate width g,
classifier width c and C classes:

  encoder_layer  4 n D^2 (Q, K, V, output) + 2 n^2 D (scores, context) + 2 n D F
  gate           n D g (reduce) + 2 n g^2 (query/key) + 2 n^2 g (scores, context)
                 + 2 n g (pool scores, pooled sum) + g (output logit)
  classifier     n D c + 2 n c^2 + 2 n^2 c + c C
  embedding      n D
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

from .encoder import ModelConfig

OP_KINDS = ("embedding", "encoder_layer", "gate", "classifier")
CONVENTIONS = {"macs": 1, "flops": 2}


def op_breakdown(cfg: ModelConfig, seq_len: int) -> dict[str, dict[str, int]]:
    n, d, f = seq_len, cfg.hidden_dim, cfg.ffn_dim
    g, c, k = cfg.gate_inner_dim, cfg.classifier_inner_dim, cfg.num_classes
    return {
        "embedding": {"position_add": n * d},
        "encoder_layer": {
            "qkv_projections": 3 * n * d * d,
            "attention_scores": n * n * d,
            "attention_context": n * n * d,
            "output_projection": n * d * d,
            "ffn": 2 * n * d * f,
        },
        "gate": {
            "reduce": n * d * g,
            "query_key": 2 * n * g * g,
            "attention_scores": n * n * g,
            "attention_context": n * n * g,
            "pooling": 2 * n * g,
            "output": g,
        },
        "classifier": {
            "reduce": n * d * c,
            "query_key": 2 * n * c * c,
            "attention_scores": n * n * c,
            "attention_context": n * n * c,
            "output": c * k,
        },
    }


@dataclass
class FlopsLedger:
    seq_len: int
    convention: str
    op_macs: dict[str, int]
    breakdown: dict[str, dict[str, int]]
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def multiplier(self) -> int:
        return CONVENTIONS[self.convention]

    def cost(self, kind: str) -> int:
        return self.op_macs[kind] * self.multiplier

    @property
    def total(self) -> int:
        return sum(self.counts.get(k, 0) * self.cost(k) for k in OP_KINDS)

    def to_dict(self) -> dict:
        return {
            "seq_len": self.seq_len,
            "convention": self.convention,
            "per_op": {k: self.cost(k) for k in OP_KINDS},
            "counts": {k: self.counts.get(k, 0) for k in OP_KINDS},
            "total": self.total,
        }


def count_flops(
    cfg: ModelConfig,
    seq_len: int | None = None,
    ops: Iterable[tuple[str, int]] | None = None,
    convention: str = "flops",
) -> FlopsLedger:
    """Ledger for ``ops`` (``(kind, layer)`` pairs from a trace).

    Without ``ops`` the counts describe the vanilla full forward: one
    embedding and ``L`` encoder layers, no plugins.
    """
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown convention {convention!r}")
    n = cfg.max_seq_len if seq_len is None else seq_len
    if n < 1:
        raise ValueError("seq_len must be >= 1")
    breakdown = op_breakdown(cfg, n)
    op_macs = {k: sum(v.values()) for k, v in breakdown.items()}
    if ops is None:
        counts = {"embedding": 1, "encoder_layer": cfg.num_layers}
    else:
        counts = dict(Counter(kind for kind, _ in ops))
        unknown = set(counts) - set(OP_KINDS)
        if unknown:
            raise ValueError(f"unknown op kinds {sorted(unknown)}")
    return FlopsLedger(n, convention, op_macs, breakdown, counts)


def vanilla_flops(cfg: ModelConfig, seq_len: int, convention: str = "flops") -> int:
    """Cost of the plain backbone (embedding + L layers), the cost-ratio denominator."""
    return count_flops(cfg, seq_len, None, convention).total
