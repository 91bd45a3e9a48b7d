"""Adaptive inference with skip-before-exit control flow, plus the sweeps and
diagnostics built on it.

``infer_sample`` is the literal per-sample procedure: for layer i = 1..L,
a gate with p_skip >= 0.5 carries X forward unchanged and (unless i = L)
moves on without classifying; otherwise layer i runs, classifier i is
evaluated, and the sample exits when its normalized entropy is below S.
Without an exit the layer-L classifier decides, on whatever X survived.

Gate decisions never depend on S, so sweeps compute one trajectory per
sample (every classifier evaluated on the hard-gated stream) and derive the
trace for each threshold from it.  ``trace_from_trajectory`` reproduces
``infer_sample`` exactly; the test suite checks this.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.metrics import accuracy_score, f1_score, matthews_corrcoef

from . import autodiff as ad
from .adaptive import SKIP_THRESHOLD, gate_forward, normalized_entropy
from .data import CLS_ID, Dataset, PAD_ID, pad_sequences
from .encoder import embed, encoder_layer_forward
from .flops import count_flops, vanilla_flops
from .model import ModelParams, classify, run_stream

# learned: the gate decides.  execute/skip: the gate runs (and is paid for)
# but its decision is overridden.  off: no gates at all, every layer runs.
GATE_POLICIES = ("learned", "execute", "skip", "off")

# mode -> (gate policy, entropy exits enabled)
ABLATION_MODES = {
    "full": ("learned", True),
    "skip_only": ("learned", False),
    "exit_only": ("off", True),
    "no_gates_no_exit": ("off", False),
}

METRICS = ("accuracy", "f1", "mcc")


class InferenceError(ValueError):
    pass


@dataclass
class InferenceTrace:
    """One sample's path.  Layers are 1-based; ``ops`` holds (kind, layer)
    with layer 0 for the embedding."""

    seq_len: int
    p_skip: list[float | None]
    skipped: list[bool]
    entropies: dict[int, float]
    exit_layer: int
    early_exit: bool
    predicted: int
    ops: list[tuple[str, int]]
    flops: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["entropies"] = {str(k): v for k, v in self.entropies.items()}
        d["ops"] = [list(op) for op in self.ops]
        return d


def check_finite(params: ModelParams) -> None:
    for name, v in params.values.items():
        if not np.all(np.isfinite(v.data)):
            raise InferenceError(f"parameter {name} holds non-finite values")


def _validate(S: float, gate_policy: str) -> None:
    if not S >= 0:
        raise InferenceError(f"entropy threshold must be >= 0, got {S}")
    if gate_policy not in GATE_POLICIES:
        raise InferenceError(f"unknown gate policy {gate_policy!r}; expected one of {GATE_POLICIES}")


def _ledger_total(params: ModelParams, seq_len: int, ops: list[tuple[str, int]]) -> int:
    return count_flops(params.config, seq_len, ops).total


def infer_sample(
    token_ids,
    params: ModelParams,
    S: float,
    gate_policy: str = "learned",
    exits: bool = True,
    *,
    check: bool = True,
) -> tuple[int, InferenceTrace]:
    """Run one unpadded sample through the adaptive procedure."""
    _validate(S, gate_policy)
    if check:
        check_finite(params)
    ids = np.asarray(token_ids, dtype=np.int64).reshape(1, -1)
    if ids.shape[1] == 0 or np.any(ids == PAD_ID):
        raise InferenceError("infer_sample expects a non-empty, unpadded sequence")
    cfg = params.config
    L = cfg.num_layers
    ops: list[tuple[str, int]] = [("embedding", 0)]
    p_skip: list[float | None] = []
    skipped: list[bool] = []
    entropies: dict[int, float] = {}
    with ad.no_grad():
        x, mask = embed(ids, params.values, cfg)
        for i in range(1, L + 1):
            skip = False
            if gate_policy == "off":
                p_skip.append(None)
            else:
                p = float(gate_forward(x, params.gate(i - 1), mask).data[0])
                ops.append(("gate", i))
                p_skip.append(p)
                skip = p >= SKIP_THRESHOLD if gate_policy == "learned" else gate_policy == "skip"
            skipped.append(skip)
            if skip:
                if i != L:
                    continue
            else:
                x = encoder_layer_forward(x, params.layer(i - 1), mask, cfg)
                ops.append(("encoder_layer", i))
            if not exits and i != L:
                continue
            z, _, _ = classify(params, i - 1, x, mask)
            ops.append(("classifier", i))
            ent = float(normalized_entropy(z.data[0]))
            entropies[i] = ent
            if i == L or (exits and ent < S):
                pred = int(np.argmax(z.data[0]))
                trace = InferenceTrace(
                    seq_len=ids.shape[1],
                    p_skip=p_skip + [None] * (L - i),
                    skipped=skipped + [False] * (L - i),
                    entropies=entropies,
                    exit_layer=i,
                    early_exit=i < L,
                    predicted=pred,
                    ops=ops,
                    flops=_ledger_total(params, ids.shape[1], ops),
                )
                return pred, trace
    raise AssertionError("unreachable: layer L always classifies")


# trajectories ----------------------------------------------------------------


@dataclass
class Trajectory:
    """S-independent record of one sample: per-layer gate output and decision,
    and every classifier's entropy and argmax on the gated stream."""

    seq_len: int
    p_skip: np.ndarray | None  # [L] or None when gates are off
    skip: np.ndarray  # [L] bool
    entropy: np.ndarray  # [L]
    pred: np.ndarray  # [L] int


_STREAM_MODE = {"learned": "hard", "execute": "execute", "skip": "skip", "off": "off"}


def compute_trajectories(
    params: ModelParams, ds: Dataset, gate_policy: str = "learned", batch_size: int = 256
) -> list[Trajectory]:
    """Trajectories in dataset order.  Samples are batched by exact length so
    nothing is padded."""
    if len(ds) == 0:
        raise InferenceError(f"{ds.split} dataset is empty")
    _validate(0.0, gate_policy)
    check_finite(params)
    L = params.config.num_layers
    by_len: dict[int, list[int]] = {}
    for i, seq in enumerate(ds.sequences):
        by_len.setdefault(len(seq), []).append(i)
    out: list[Trajectory | None] = [None] * len(ds)
    with ad.no_grad():
        for n in sorted(by_len):
            idx = by_len[n]
            for start in range(0, len(idx), batch_size):
                chunk = idx[start : start + batch_size]
                ids = pad_sequences([ds.sequences[i] for i in chunk], n)
                stream = run_stream(params, ids, _STREAM_MODE[gate_policy])
                zs = [classify(params, i, stream.layer_outputs[i], stream.mask)[0].data for i in range(L)]
                ent = np.stack([normalized_entropy(z) for z in zs], axis=1)
                pred = np.stack([z.argmax(axis=1) for z in zs], axis=1)
                skip = stream.skip_decisions()
                probs = None if stream.gate_probs[0] is None else np.stack([p.data for p in stream.gate_probs], 1)
                for row, i in enumerate(chunk):
                    out[i] = Trajectory(
                        n, None if probs is None else probs[row], skip[row], ent[row], pred[row]
                    )
    return out  # type: ignore[return-value]


def trace_from_trajectory(
    traj: Trajectory, params: ModelParams, S: float, gate_policy: str = "learned", exits: bool = True
) -> InferenceTrace:
    _validate(S, gate_policy)
    L = params.config.num_layers
    gated = gate_policy != "off"
    ops: list[tuple[str, int]] = [("embedding", 0)]
    entropies: dict[int, float] = {}
    for i in range(1, L + 1):
        if gated:
            ops.append(("gate", i))
        skip = bool(traj.skip[i - 1])
        if skip and i != L:
            continue
        if not skip:
            ops.append(("encoder_layer", i))
        if not exits and i != L:
            continue
        ops.append(("classifier", i))
        ent = float(traj.entropy[i - 1])
        entropies[i] = ent
        if i == L or (exits and ent < S):
            break
    rest = L - i
    p = [float(v) for v in traj.p_skip[:i]] if gated else [None] * i
    return InferenceTrace(
        seq_len=traj.seq_len,
        p_skip=p + [None] * rest,
        skipped=[bool(v) for v in traj.skip[:i]] + [False] * rest,
        entropies=entropies,
        exit_layer=i,
        early_exit=i < L,
        predicted=int(traj.pred[i - 1]),
        ops=ops,
        flops=_ledger_total(params, traj.seq_len, ops),
    )


# metrics and sweeps ------------------------------------------------------------


def score(preds, labels, metric: str = "accuracy") -> float:
    """Accuracy, macro-averaged F1 or Matthews correlation."""
    if metric == "accuracy":
        return float(accuracy_score(labels, preds))
    if metric == "f1":
        return float(f1_score(labels, preds, average="macro", zero_division=0))
    if metric == "mcc":
        return float(matthews_corrcoef(labels, preds))
    raise InferenceError(f"unknown metric {metric!r}; expected one of {METRICS}")


@dataclass
class SweepResult:
    threshold: float
    mode: str
    metric_name: str
    metric_value: float
    mean_flops: float
    cost_ratio: float
    skip_counts: list[int]
    exit_counts: list[int]
    fallthrough: int
    mean_exit_layer: float
    num_samples: int
    traces: list[InferenceTrace] = field(default_factory=list, repr=False)

    def row(self) -> dict:
        return {
            "S": self.threshold,
            "mode": self.mode,
            "metric_name": self.metric_name,
            "metric_value": self.metric_value,
            "mean_flops": self.mean_flops,
            "cost_ratio": self.cost_ratio,
        }


def mean_vanilla_flops(params: ModelParams, ds: Dataset) -> float:
    return math.fsum(vanilla_flops(params.config, len(s)) for s in ds.sequences) / len(ds)


def summarize(
    traces: list[InferenceTrace],
    labels,
    params: ModelParams,
    S: float,
    mode: str,
    metric: str,
    vanilla_mean: float,
) -> SweepResult:
    L = params.config.num_layers
    skips = np.zeros(L, dtype=int)
    exits = np.zeros(L, dtype=int)
    fallthrough = 0
    for t in traces:
        skips += np.asarray(t.skipped, dtype=int)
        if t.early_exit:
            exits[t.exit_layer - 1] += 1
        else:
            fallthrough += 1
    mean_flops = math.fsum(t.flops for t in traces) / len(traces)
    return SweepResult(
        threshold=float(S),
        mode=mode,
        metric_name=metric,
        metric_value=score([t.predicted for t in traces], labels, metric),
        mean_flops=mean_flops,
        cost_ratio=mean_flops / vanilla_mean,
        skip_counts=skips.tolist(),
        exit_counts=exits.tolist(),
        fallthrough=fallthrough,
        mean_exit_layer=float(np.mean([t.exit_layer for t in traces])),
        num_samples=len(traces),
        traces=traces,
    )


def sweep_thresholds(
    params: ModelParams,
    ds: Dataset,
    thresholds,
    mode: str = "full",
    metric: str = "accuracy",
    trajectories: list[Trajectory] | None = None,
) -> list[SweepResult]:
    if mode not in ABLATION_MODES:
        raise InferenceError(f"unknown mode {mode!r}; expected one of {tuple(ABLATION_MODES)}")
    if len(ds) == 0:
        raise InferenceError(f"{ds.split} dataset is empty")
    policy, exits = ABLATION_MODES[mode]
    trajectories = trajectories or compute_trajectories(params, ds, policy)
    vanilla_mean = mean_vanilla_flops(params, ds)
    results = []
    for S in thresholds:
        traces = [trace_from_trajectory(t, params, S, policy, exits) for t in trajectories]
        results.append(summarize(traces, ds.labels, params, S, mode, metric, vanilla_mean))
    return results


def ablation_modes(params: ModelParams, ds: Dataset, mode: str, S: float, metric: str = "accuracy") -> SweepResult:
    return sweep_thresholds(params, ds, [S], mode, metric)[0]


@dataclass
class Frequencies:
    threshold: float
    skip_counts: list[int]
    exit_counts: list[int]
    fallthrough: int
    num_samples: int


def skip_exit_frequencies(params: ModelParams, ds: Dataset, S: float) -> Frequencies:
    r = sweep_thresholds(params, ds, [S], "full")[0]
    return Frequencies(r.threshold, r.skip_counts, r.exit_counts, r.fallthrough, r.num_samples)


def exit_layer_by_tag(result: SweepResult, tags) -> dict[str, float]:
    """Mean exit layer per sample tag (e.g. easy/hard)."""
    groups: dict[str, list[int]] = {}
    for t, tag in zip(result.traces, tags):
        groups.setdefault(tag, []).append(t.exit_layer)
    return {k: float(np.mean(v)) for k, v in sorted(groups.items())}


# representation similarity -------------------------------------------------------


@dataclass
class LayerSimilarity:
    layers: tuple[int, int]  # 1-based consecutive pair; 0 is the embedding output
    token_mean: float
    cls_mean: float
    token_count: int


def layer_similarity_diagnostic(
    params: ModelParams, ds: Dataset, gate_mode: str = "off", batch_size: int = 256
) -> list[LayerSimilarity]:
    """Mean cosine similarity of each token's representation in consecutive
    layers, pooled over all non-pad non-[CLS] tokens, and separately for
    [CLS].  Pairs run (0, 1) .. (L-1, L), layer 0 being the embeddings."""
    if len(ds) == 0:
        raise InferenceError(f"{ds.split} dataset is empty")
    L = params.config.num_layers
    tok_parts: list[list[float]] = [[] for _ in range(L)]
    cls_parts: list[list[float]] = [[] for _ in range(L)]
    counts = [0] * L
    by_len: dict[int, list[int]] = {}
    for i, seq in enumerate(ds.sequences):
        by_len.setdefault(len(seq), []).append(i)
    with ad.no_grad():
        for n in sorted(by_len):
            idx = by_len[n]
            for start in range(0, len(idx), batch_size):
                chunk = idx[start : start + batch_size]
                ids = pad_sequences([ds.sequences[i] for i in chunk], n)
                out = run_stream(params, ids, gate_mode)
                states = [out.embeddings.data] + [x.data for x in out.layer_outputs]
                is_cls = ids == CLS_ID
                for k in range(L):
                    cos = ad.cosine_similarity(ad.Value(states[k]), ad.Value(states[k + 1]), axis=-1).data
                    cos = np.clip(cos, -1.0, 1.0)
                    tok_parts[k].extend(cos[~is_cls].tolist())
                    cls_parts[k].extend(cos[:, 0].tolist())
                    counts[k] += int((~is_cls).sum())
    res = []
    for k in range(L):
        tok = math.fsum(tok_parts[k]) / counts[k] if counts[k] else float("nan")
        res.append(LayerSimilarity((k, k + 1), tok, math.fsum(cls_parts[k]) / len(cls_parts[k]), counts[k]))
    return res
