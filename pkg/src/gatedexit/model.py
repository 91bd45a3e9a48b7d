"""Parameter container and the gated encoder stream shared by training and
inference."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adaptive import (
    SKIP_THRESHOLD,
    classifier_forward,
    gate_forward,
    init_classifier_params,
    init_gate_params,
    soft_skip_mix,
    view,
)
from .autodiff import Value
from .contrastive import init_projection_params
from .encoder import ModelConfig, embed, encoder_layer_forward, init_embedding_params, init_layer_params, layer_view

# soft/hard: learned gates used as mixing coefficients (hard = straight-through).
# off: no gates evaluated, every layer executes.
# execute/skip: gates evaluated (for the record) but the decision is forced.
# linearized_hard: hard forward whose backward equals the straight-through
#   rule; used to finite-difference check hard-mode gradients.
GATE_MODES = ("soft", "hard", "off", "execute", "skip", "linearized_hard")

GROUPS = ("embedding", "encoder", "gates", "classifiers", "last_classifier", "proj1", "proj2")


class ModelParams:
    """Named float64 parameters for every component of the model.

    Names carry their component: ``embed.*``, ``layer{i}.*``, ``gate{i}.*``,
    ``cls{i}.*``, ``proj1.*``, ``proj2.*`` with 0-based layer indices.
    """

    def __init__(self, config: ModelConfig, values: dict[str, Value]):
        self.config = config
        self.values = values

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "ModelParams":
        rng = np.random.Generator(np.random.PCG64(seed))
        values: dict[str, Value] = {}
        values.update(init_embedding_params(config, rng))
        for i in range(config.num_layers):
            values.update(init_layer_params(config, rng, i))
        for i in range(config.num_layers):
            values.update(init_gate_params(config, rng, i))
        for i in range(config.num_layers):
            values.update(init_classifier_params(config, rng, i))
        values.update(
            init_projection_params(rng, config.hidden_dim, config.proj_dim, "proj1.", config.init_std)
        )
        values.update(
            init_projection_params(
                rng, config.classifier_inner_dim, config.proj_dim, "proj2.", config.init_std
            )
        )
        return cls(config, values)

    def __getitem__(self, name: str) -> Value:
        return self.values[name]

    def group_of(self, name: str) -> str:
        if name.startswith("embed."):
            return "embedding"
        if name.startswith("layer"):
            return "encoder"
        if name.startswith("gate"):
            return "gates"
        if name.startswith("cls"):
            index = int(name[3 : name.index(".")])
            return "last_classifier" if index == self.config.num_layers - 1 else "classifiers"
        return name.split(".", 1)[0]

    def names_in(self, *groups: str) -> list[str]:
        unknown = set(groups) - set(GROUPS)
        if unknown:
            raise KeyError(f"unknown parameter groups {sorted(unknown)}")
        return [n for n in self.values if self.group_of(n) in groups]

    def layer(self, i: int) -> dict[str, Value]:
        return layer_view(self.values, i)

    def gate(self, i: int) -> dict[str, Value]:
        return view(self.values, f"gate{i}.")

    def classifier(self, i: int) -> dict[str, Value]:
        return view(self.values, f"cls{i}.")

    def projection(self, stage: int) -> dict[str, Value]:
        return view(self.values, f"proj{stage}.")

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.values.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config, {k: ad.parameter(v.data.copy(), k) for k, v in self.values.items()}
        )

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "ModelParams":
        return cls(config, {k: ad.parameter(np.array(v, dtype=np.float64), k) for k, v in arrays.items()})

    def digest(self, *groups: str) -> str:
        """SHA-256 over the raw bytes of the selected groups (all when empty)."""
        names = self.names_in(*groups) if groups else list(self.values)
        h = hashlib.sha256()
        for n in sorted(names):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.values[n].data).tobytes())
        return h.hexdigest()


@dataclass
class StreamOutput:
    embeddings: Value
    mask: np.ndarray
    layer_outputs: list[Value]
    gate_probs: list[Value | None]
    mix: list[Value | None] = field(default_factory=list)

    def skip_decisions(self) -> np.ndarray:
        """[B, L] booleans of the skip decision actually applied per layer."""
        cols = []
        for m in self.mix:
            if m is None:
                cols.append(np.zeros(self.mask.shape[0], dtype=bool))
            else:
                cols.append(np.asarray(m.data) >= SKIP_THRESHOLD)
        return np.stack(cols, axis=1)


def run_stream(
    params: ModelParams,
    token_ids: np.ndarray,
    gate_mode: str = "hard",
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
    anchors: list[np.ndarray] | None = None,
) -> StreamOutput:
    """Embed and push a padded batch through all L gated blocks.

    ``anchors`` (``linearized_hard`` only) holds per-layer constants
    ``1[p0 >= 0.5] - p0`` computed at a reference point; the mixing
    coefficient is then ``p + anchor``.
    """
    if gate_mode not in GATE_MODES:
        raise ValueError(f"unknown gate mode {gate_mode!r}; expected one of {GATE_MODES}")
    cfg = params.config
    x, mask = embed(token_ids, params.values, cfg, training=training, rng=rng)
    x0 = x
    outputs: list[Value] = []
    probs: list[Value | None] = []
    mixes: list[Value | None] = []
    batch = mask.shape[0]
    for i in range(cfg.num_layers):
        if gate_mode == "off":
            x = encoder_layer_forward(x, params.layer(i), mask, cfg, training=training, rng=rng)
            probs.append(None)
            mixes.append(None)
            outputs.append(x)
            continue
        p = gate_forward(x, params.gate(i), mask)
        if gate_mode == "soft":
            g = p
        elif gate_mode == "hard":
            g = ad.straight_through_threshold(p, SKIP_THRESHOLD)
        elif gate_mode == "linearized_hard":
            if anchors is None:
                raise ValueError("linearized_hard needs anchors")
            g = p + anchors[i]
        elif gate_mode == "execute":
            g = ad.Value(np.zeros(batch))
        else:
            g = ad.Value(np.ones(batch))
        layer_out = encoder_layer_forward(x, params.layer(i), mask, cfg, training=training, rng=rng)
        x = soft_skip_mix(x, layer_out, g)
        probs.append(p)
        mixes.append(g)
        outputs.append(x)
    return StreamOutput(x0, mask, outputs, probs, mixes)


def straight_through_anchors(params: ModelParams, token_ids: np.ndarray) -> list[np.ndarray]:
    """Reference-point constants for ``linearized_hard``."""
    with ad.no_grad():
        out = run_stream(params, token_ids, "hard")
    return [(p.data >= SKIP_THRESHOLD).astype(float) - p.data for p in out.gate_probs]


def classify(params: ModelParams, layer: int, x: Value, mask: np.ndarray) -> tuple[Value, Value, Value]:
    """Classifier at 0-based ``layer``: (z, h, logits)."""
    return classifier_forward(x, params.classifier(layer), mask)


def vanilla_forward(params: ModelParams, token_ids: np.ndarray) -> np.ndarray:
    """Plain stacked encoder followed by the last classifier; returns z [B, C]."""
    with ad.no_grad():
        out = run_stream(params, token_ids, "off")
        z, _, _ = classify(params, params.config.num_layers - 1, out.layer_outputs[-1], out.mask)
    return z.data
