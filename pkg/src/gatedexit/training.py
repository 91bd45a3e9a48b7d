"""Two-stage training.

Stage 1 fine-tunes embeddings, encoder layers, gates, the last classifier and
the stage-1 projection head on

    CE(z^L, y) + skip_weight / (eps + sum_i p_skip^i) + ccl_weight * CCL_1

Stage 2 freezes all of that and trains the intermediate classifiers and the
stage-2 projection head on

    sum_{i<L} CE(z^i, y) + ccl_weight * CCL_2

over the hard-gated stream.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .checkpoint import Checkpoint, OptimizerState
from .contrastive import CCLConfig, ccl_loss_stage1, ccl_loss_stage2
from .data import Batch, Dataset, iterate_batches, make_batch
from .encoder import ModelConfig
from .model import ModelParams, classify, run_stream

GATE_SCHEDULES = ("soft", "hard", "soft_then_hard", "off")

STAGE1_GROUPS = ("embedding", "encoder", "gates", "last_classifier", "proj1")
STAGE2_GROUPS = ("classifiers", "proj2")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    skip_weight: float = 0.1
    ccl_weight: float = 0.1
    lr_stage1: float = 1e-3
    lr_stage2: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    stage1_epochs: int = 5
    stage2_epochs: int = 4
    soft_warmup_epochs: int = 2
    warmup_steps: int = 0
    seed: int = 0
    gate_mode: str = "soft_then_hard"
    regularizer_epsilon: float = 1e-6
    temperature: float = 0.1
    exclude_cls_last_layer: bool = True
    val_fraction: float = 0.1
    vanilla_epochs: int = 5
    warm_start: bool = True
    bucket_chunk: int = 20

    def __post_init__(self):
        if not 0.0 <= self.skip_weight <= 1.0 or not 0.0 <= self.ccl_weight <= 1.0:
            raise ValueError("skip_weight and ccl_weight must lie in [0, 1]")
        if self.lr_stage1 <= 0 or self.lr_stage2 <= 0:
            raise ValueError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.gate_mode not in GATE_SCHEDULES:
            raise ValueError(f"gate_mode must be one of {GATE_SCHEDULES}")
        if not 0 <= self.soft_warmup_epochs <= self.stage1_epochs:
            raise ValueError("soft_warmup_epochs must lie in [0, stage1_epochs]")
        if self.regularizer_epsilon <= 0:
            raise ValueError("regularizer_epsilon must be positive")

    def vanilla(self) -> "TrainConfig":
        """Settings for the plain fine-tuned backbone: no gates, no extra losses."""
        return replace(
            self,
            gate_mode="off",
            skip_weight=0.0,
            ccl_weight=0.0,
            stage1_epochs=self.vanilla_epochs,
            soft_warmup_epochs=0,
        )

    @property
    def ccl(self) -> CCLConfig:
        return CCLConfig(self.temperature, self.exclude_cls_last_layer)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def gate_mode_for_epoch(self, epoch: int) -> str:
        if self.gate_mode == "soft_then_hard":
            return "soft" if epoch < self.soft_warmup_epochs else "hard"
        return self.gate_mode


@dataclass
class LossTerms:
    total: Value
    ce: Value
    skip_reg: Value | None = None
    ccl: Value | None = None

    def floats(self) -> dict[str, float]:
        out = {"total": self.total.item(), "ce": self.ce.item()}
        if self.skip_reg is not None:
            out["skip_reg"] = self.skip_reg.item()
        if self.ccl is not None:
            out["ccl"] = self.ccl.item()
        return out


def skip_regularizer(gate_probs: list[Value], weight: float, eps: float) -> Value:
    """Batch mean of weight / (eps + sum over layers of the soft skip probability)."""
    total = gate_probs[0]
    for p in gate_probs[1:]:
        total = total + p
    return (weight / (total + eps)).mean()


def stage1_loss(
    batch: Batch,
    params: ModelParams,
    cfg: TrainConfig,
    gate_mode: str = "soft",
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
    anchors: list[np.ndarray] | None = None,
) -> LossTerms:
    stream = run_stream(params, batch.ids, gate_mode, training=training, rng=rng, anchors=anchors)
    last = params.config.num_layers - 1
    _, _, logits = classify(params, last, stream.layer_outputs[-1], stream.mask)
    ce = ad.cross_entropy(logits, batch.labels)
    total = ce
    reg = ccl = None
    if gate_mode != "off":
        reg = skip_regularizer(stream.gate_probs, cfg.skip_weight, cfg.regularizer_epsilon)
        total = total + reg
    if cfg.ccl_weight > 0 and params.config.num_layers >= 2:
        ccl = ccl_loss_stage1(stream.layer_outputs, stream.mask, params.projection(1), cfg.ccl)
        total = total + cfg.ccl_weight * ccl
    return LossTerms(total, ce, reg, ccl)


def stage2_loss(batch: Batch, params: ModelParams, cfg: TrainConfig, gate_mode: str = "hard") -> LossTerms:
    """Intermediate-classifier loss over a frozen, hard-gated stream."""
    L = params.config.num_layers
    with ad.no_grad():
        stream = run_stream(params, batch.ids, gate_mode)
    ce_sum = None
    hiddens = []
    for i in range(L - 1):
        _, h, logits = classify(params, i, stream.layer_outputs[i], stream.mask)
        ce = ad.cross_entropy(logits, batch.labels)
        ce_sum = ce if ce_sum is None else ce_sum + ce
        hiddens.append(h)
    if ce_sum is None:
        raise TrainingError("stage 2 needs at least two layers")
    total = ce_sum
    ccl = None
    if cfg.ccl_weight > 0:
        with ad.no_grad():
            _, h_last, _ = classify(params, L - 1, stream.layer_outputs[-1], stream.mask)
        ccl = ccl_loss_stage2(hiddens + [h_last], stream.mask, params.projection(2), cfg.ccl)
        total = total + cfg.ccl_weight * ccl
    return LossTerms(total, ce_sum, None, ccl)


# optimizer -----------------------------------------------------------------


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    groups: dict[str, str] | None = None,
) -> OptimizerState:
    """One AdamW update, in place on ``params``.

    Decay is decoupled: ``w -= lr * wd * w`` before the bias-corrected Adam
    step ``w -= lr * m_hat / (sqrt(v_hat) + eps)``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            group = groups.get(name, "?") if groups else "?"
            raise FloatingPointError(f"non-finite gradient for {name} (group {group})")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        w = params[name]
        if w.shape != g.shape:
            raise ad.ShapeError(f"gradient shape {g.shape} != parameter shape {w.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(w)
            v = np.zeros_like(w)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        if weight_decay:
            w -= lr * weight_decay * w
        w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# loops ----------------------------------------------------------------------

MetricsSink = Callable[[dict], None]


def predict_last(params: ModelParams, ds: Dataset, gate_mode: str, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Last-classifier predictions on the gated stream and the [N, L] soft
    skip probabilities (NaN when gates are off)."""
    preds, probs = [], []
    L = params.config.num_layers
    with ad.no_grad():
        for b in iterate_batches(ds, batch_size):
            out = run_stream(params, b.ids, gate_mode)
            z, _, _ = classify(params, L - 1, out.layer_outputs[-1], out.mask)
            preds.append(z.data.argmax(axis=1))
            if out.gate_probs[0] is None:
                probs.append(np.full((len(b.labels), L), np.nan))
            else:
                probs.append(np.stack([p.data for p in out.gate_probs], axis=1))
    return np.concatenate(preds), np.concatenate(probs)


def predict_all_layers(params: ModelParams, ds: Dataset, gate_mode: str = "hard", batch_size: int = 256) -> np.ndarray:
    """[N, L] argmax of every classifier on the gated stream."""
    out_preds = []
    L = params.config.num_layers
    with ad.no_grad():
        for b in iterate_batches(ds, batch_size):
            out = run_stream(params, b.ids, gate_mode)
            cols = [classify(params, i, out.layer_outputs[i], out.mask)[0].data.argmax(axis=1) for i in range(L)]
            out_preds.append(np.stack(cols, axis=1))
    return np.concatenate(out_preds)


def _lr(base: float, step: int, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return base
    return base * min(1.0, (step + 1) / warmup_steps)


def _run_epochs(
    params: ModelParams,
    train: Dataset,
    cfg: TrainConfig,
    trainable: list[str],
    loss_fn: Callable[[Batch, str, np.random.Generator], LossTerms],
    epochs: int,
    lr: float,
    stage: str,
    rng: np.random.Generator,
    on_epoch_end: Callable[[int, str, dict], None],
    mode_for_epoch: Callable[[int], str],
    state: OptimizerState,
) -> None:
    if len(train) == 0:
        raise TrainingError(f"{stage}: empty training set")
    groups = {n: params.group_of(n) for n in trainable}
    values = [params.values[n] for n in trainable]
    arrays = {n: params.values[n].data for n in trainable}
    for epoch in range(epochs):
        mode = mode_for_epoch(epoch)
        sums: dict[str, float] = {}
        steps = 0
        for step, batch in enumerate(iterate_batches(train, cfg.batch_size, rng, cfg.bucket_chunk)):
            ad.zero_grad(values)
            terms = loss_fn(batch, mode, rng)
            loss = terms.total.item()
            if not math.isfinite(loss):
                raise TrainingError(f"{stage}: non-finite loss {loss} at epoch {epoch} step {step}")
            ad.backward(terms.total)
            grads = {n: v.grad for n, v in zip(trainable, values) if v.grad is not None}
            adamw_step(
                arrays,
                grads,
                state,
                _lr(lr, state.step, cfg.warmup_steps),
                (cfg.beta1, cfg.beta2),
                cfg.adam_eps,
                cfg.weight_decay,
                groups,
            )
            for k, val in terms.floats().items():
                sums[k] = sums.get(k, 0.0) + val
            steps += 1
        ad.zero_grad(values)
        on_epoch_end(epoch, mode, {k: s / steps for k, s in sums.items()})


def _accuracy(preds: np.ndarray, labels) -> float:
    return float(np.mean(preds == np.asarray(labels)))


def train_stage1(
    train: Dataset,
    val: Dataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    *,
    params: ModelParams | None = None,
    log: MetricsSink | None = None,
) -> Checkpoint:
    """Joint fine-tuning of backbone, gates and last classifier.

    Returns the epoch with the best validation accuracy of the last
    classifier (ties go to the later epoch) evaluated with hard gates.
    """
    if len(train) == 0 or len(val) == 0:
        raise TrainingError("stage1: empty dataset")
    params = params or ModelParams.initialize(model_cfg, cfg.seed)
    stream = ad.RngStream([cfg.seed, 1])
    rng = stream.generator
    trainable = params.names_in(*STAGE1_GROUPS)
    state = OptimizerState()
    eval_mode = "off" if cfg.gate_mode == "off" else "hard"
    best: dict = {}

    def loss_fn(batch, mode, rng_):
        return stage1_loss(batch, params, cfg, mode, training=True, rng=rng_)

    def on_epoch_end(epoch, mode, losses):
        preds, probs = predict_last(params, val, eval_mode)
        acc = _accuracy(preds, val.labels)
        record = {
            "stage": "stage1",
            "epoch": epoch,
            "gate_mode": mode,
            "loss": losses,
            "val_accuracy": acc,
            "gate_mean": [None if math.isnan(x) else float(x) for x in np.mean(probs, axis=0)],
            "skip_rate": [float(x) for x in np.mean(probs >= 0.5, axis=0)],
        }
        if log:
            log(record)
        if not best or acc >= best["acc"]:
            best.update(
                acc=acc,
                epoch=epoch,
                arrays={k: v.copy() for k, v in params.arrays().items()},
                opt=OptimizerState(state.step, {k: v.copy() for k, v in state.m.items()}, {k: v.copy() for k, v in state.v.items()}),
                rng=stream.get_state(),
            )

    _run_epochs(
        params, train, cfg, trainable, loss_fn, cfg.stage1_epochs, cfg.lr_stage1, "stage1",
        rng, on_epoch_end, cfg.gate_mode_for_epoch, state,
    )
    if not best:
        raise TrainingError("stage1: no epochs were run")
    return Checkpoint(
        params=ModelParams.from_arrays(model_cfg, best["arrays"]),
        train_config=cfg.to_dict(),
        stage="stage1",
        epoch=best["epoch"],
        optimizer=best["opt"],
        rng_state=best["rng"],
        meta={"val_accuracy": best["acc"]},
    )


def train_vanilla(
    train: Dataset,
    val: Dataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    *,
    log: MetricsSink | None = None,
) -> Checkpoint:
    """Plain fine-tuning of the stacked encoder and last classifier.

    This is both the comparison baseline and, with ``warm_start``, the
    starting point of stage 1 (the stand-in for a pretrained backbone).
    """

    def relabel(record):
        if log:
            log({**record, "stage": "vanilla"})

    ckpt = train_stage1(train, val, model_cfg, cfg.vanilla(), log=relabel)
    ckpt.stage = "vanilla"
    return ckpt


def train_stage2(
    train: Dataset,
    val: Dataset,
    stage1: Checkpoint,
    cfg: TrainConfig,
    *,
    log: MetricsSink | None = None,
) -> Checkpoint:
    """Train the intermediate classifiers on the frozen stage-1 model."""
    if len(train) == 0 or len(val) == 0:
        raise TrainingError("stage2: empty dataset")
    params = stage1.params.copy()
    stream = ad.RngStream([cfg.seed, 2])
    trainable = params.names_in(*STAGE2_GROUPS)
    state = OptimizerState()
    gate_mode = "off" if stage1.train_config.get("gate_mode") == "off" else "hard"

    def loss_fn(batch, mode, rng_):
        return stage2_loss(batch, params, cfg, mode)

    def on_epoch_end(epoch, mode, losses):
        preds = predict_all_layers(params, val, gate_mode)
        accs = [_accuracy(preds[:, i], val.labels) for i in range(preds.shape[1])]
        if log:
            log({"stage": "stage2", "epoch": epoch, "gate_mode": mode, "loss": losses, "val_accuracy_per_layer": accs})

    _run_epochs(
        params, train, cfg, trainable, loss_fn, cfg.stage2_epochs, cfg.lr_stage2, "stage2",
        stream.generator, on_epoch_end, lambda e: gate_mode, state,
    )
    return Checkpoint(
        params=params,
        train_config=cfg.to_dict(),
        stage="stage2",
        epoch=cfg.stage2_epochs - 1,
        optimizer=state,
        rng_state=stream.get_state(),
        meta={"stage1_epoch": stage1.epoch, **stage1.meta},
    )
