"""Cross-layer contrastive losses.

The same token in two consecutive layers forms the positive pair; every other
real token of the same sequence in the next layer is a negative.  Pads never
act as anchors or candidates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value


@dataclass(frozen=True)
class CCLConfig:
    temperature: float = 0.1
    exclude_cls_last_layer: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


def init_projection_params(
    rng: np.random.Generator, in_dim: int, proj_dim: int, prefix: str, std: float = 0.02
) -> dict[str, Value]:
    """Two-layer GELU MLP ``in_dim -> in_dim -> proj_dim``."""
    if proj_dim < 2:
        raise ValueError("proj_dim must be >= 2")
    return {
        prefix + "w1": ad.parameter(rng.normal(0, std, (in_dim, in_dim)), prefix + "w1"),
        prefix + "b1": ad.parameter(np.zeros(in_dim), prefix + "b1"),
        prefix + "w2": ad.parameter(rng.normal(0, std, (in_dim, proj_dim)), prefix + "w2"),
        prefix + "b2": ad.parameter(np.zeros(proj_dim), prefix + "b2"),
    }


def project(x: Value, proj: dict[str, Value] | None) -> Value:
    """Apply the projection head; ``None`` means identity."""
    if proj is None:
        return x
    return ad.gelu(x @ proj["w1"] + proj["b1"]) @ proj["w2"] + proj["b2"]


def info_nce_row(anchor: Value, candidates: Value, positive_index: int, temperature: float) -> Value:
    """-log softmax_k(cos(anchor, c_k) / tau)[positive_index]."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    anchor, candidates = ad.as_value(anchor), ad.as_value(candidates)
    k = candidates.shape[0]
    if not 0 <= positive_index < k:
        raise IndexError(f"positive_index {positive_index} outside [0, {k})")
    sims = ad.cosine_similarity(anchor.reshape(1, -1), candidates, axis=-1) * (1.0 / temperature)
    return -ad.log_softmax(sims.reshape(1, k), axis=-1)[0, positive_index]


def cross_layer_loss(
    reps: list[Value],
    mask: np.ndarray,
    proj: dict[str, Value] | None,
    cfg: CCLConfig,
) -> Value:
    """Mean InfoNCE over consecutive layer pairs (i, i+1) and real tokens.

    Each sequence averages over its valid (pair, anchor) entries; the batch
    loss is the mean over sequences.  With ``exclude_cls_last_layer`` the
    [CLS] anchor (position 0) of the final pair is dropped.
    """
    if len(reps) < 2:
        raise ValueError("cross-layer loss needs at least two layers")
    mask = np.asarray(mask, dtype=bool)
    b, n = mask.shape
    inv_tau = 1.0 / cfg.temperature
    projected = [ad.l2_normalize(project(r, proj), axis=-1) for r in reps]
    diag = np.arange(n)
    key_mask = mask[:, None, :]
    total = None
    counts = np.zeros(b)
    last = len(reps) - 2
    for i in range(len(reps) - 1):
        sims = (projected[i] @ projected[i + 1].swapaxes(-1, -2)) * inv_tau
        logp = ad.log_softmax(sims, axis=-1, mask=key_mask)[:, diag, diag]
        anchors = mask.copy()
        if cfg.exclude_cls_last_layer and i == last:
            anchors[:, 0] = False
        counts += anchors.sum(axis=1)
        term = ad.where(anchors, -logp, 0.0).sum(axis=1)
        total = term if total is None else total + term
    per_seq = total * (1.0 / np.maximum(counts, 1.0))
    return per_seq.mean()


def ccl_loss_stage1(
    layer_outputs: list[Value], mask: np.ndarray, proj: dict[str, Value] | None, cfg: CCLConfig
) -> Value:
    """Contrastive loss over the gated block outputs X^1..X^L."""
    return cross_layer_loss(layer_outputs, mask, proj, cfg)


def ccl_loss_stage2(
    classifier_hiddens: list[Value], mask: np.ndarray, proj: dict[str, Value] | None, cfg: CCLConfig
) -> Value:
    """Contrastive loss over the classifiers' attention hiddens h^1..h^L."""
    return cross_layer_loss(classifier_hiddens, mask, proj, cfg)
