"""End-to-end acceptance suite, one test per criterion.

Each test records a pass/fail line in ``conftest.ACCEPTANCE`` before
asserting, so the session summary lists every criterion even when some fail.
The desk-scale criteria share one trained toy run (about 12 minutes of CPU);
set ``GATEDEXIT_ACCEPTANCE_RUN`` to an existing run directory to reuse it.
"""

import math
import os
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from gatedexit import autodiff as ad
from gatedexit import checkpoint as ckio
from gatedexit.cli import load_data, main
from gatedexit.config import load_config
from gatedexit.contrastive import CCLConfig, cross_layer_loss
from gatedexit.data import Batch, SyntheticTaskSpec, generate_synthetic
from gatedexit.encoder import ModelConfig
from gatedexit.flops import count_flops
from gatedexit.inference import (
    exit_layer_by_tag,
    infer_sample,
    layer_similarity_diagnostic,
    skip_exit_frequencies,
    sweep_thresholds,
)
from gatedexit.model import ModelParams, run_stream, straight_through_anchors, vanilla_forward
from gatedexit.reports import parse_sweep_csv, sweep_csv
from gatedexit.training import TrainConfig, stage1_loss, stage2_loss, train_stage1, train_stage2

from conftest import ACCEPTANCE

ROOT = Path(__file__).resolve().parents[1]
TOY_CFG = ROOT / "configs" / "toy.cfg"
S_GRID = (0.0, 0.1, 0.3, 0.5, 0.7, 1.0)


def record(k, title, ok, detail):
    ACCEPTANCE[k] = (title, bool(ok), detail)
    assert ok, f"criterion {k} ({title}): {detail}"


# shared trained toy run ------------------------------------------------------


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    cfg = load_config(TOY_CFG)
    reuse = os.environ.get("GATEDEXIT_ACCEPTANCE_RUN")
    rd = Path(reuse) if reuse else tmp_path_factory.mktemp("toy") / "run"
    if not (rd / "checkpoints" / "stage2.ckpt").is_file():
        assert main(["train", "--config", str(TOY_CFG), "--run-dir", str(rd)]) == 0
    ck = {st: ckio.load(rd / "checkpoints" / f"{st}.ckpt") for st in ("vanilla", "stage2")}
    _, _, test = load_data(cfg)
    return cfg, ck["vanilla"].params, ck["stage2"].params, test


# 1 ---------------------------------------------------------------------------


def test_criterion_1_flops_calibration():
    bert = load_config(ROOT / "configs" / "bert_base.cfg").model
    ledger = count_flops(bert, 128)
    layer, gate, cls = (ledger.cost(k) for k in ("encoder_layer", "gate", "classifier"))
    dev = layer / 1811.8e6 - 1
    balance = abs(gate - cls) / max(gate, cls)
    ok = abs(dev) <= 0.10 and balance <= 0.05 and max(gate, cls) < 0.03 * layer
    record(
        1, "FLOPs calibration", ok,
        f"layer {layer / 1e6:.2f}M ({dev:+.1%} vs 1811.8M), gate {gate / 1e6:.2f}M, "
        f"classifier {cls / 1e6:.2f}M ({max(gate, cls) / layer:.2%} of a layer)",
    )


# 2 ---------------------------------------------------------------------------

FD_MODEL = ModelConfig(
    num_layers=2, hidden_dim=8, num_heads=2, ffn_dim=16, vocab_size=16, max_seq_len=4,
    classifier_inner_dim=4, gate_inner_dim=4, proj_dim=4, init_std=0.3,
)


def _fd_batch():
    rng = np.random.default_rng(0)
    ids = np.concatenate([np.ones((3, 1), int), rng.integers(4, 16, size=(3, 3))], axis=1)
    ids[2, 3] = 0  # one padded position
    return Batch(ids=ids, labels=np.array([0, 1, 1]), indices=np.arange(3))


def _max_rel_error(params, loss_fn, names):
    """Largest per-tensor relative error between backprop and central differences.

    The denominator is floored at 1e-6: tensors whose true gradient is
    identically zero (attention key biases) otherwise divide roundoff by zero.
    """
    ad.zero_grad(params.values.values())
    ad.backward(loss_fn())
    worst = 0.0
    for n in names:
        v = params[n]
        analytic = np.zeros_like(v.data) if v.grad is None else v.grad
        numeric = ad.finite_difference_gradient(lambda _: loss_fn(), v, h=1e-6)
        scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-6)
        worst = max(worst, float(np.abs(analytic - numeric).max() / scale))
    return worst


def test_criterion_2_gradient_correctness():
    params = ModelParams.initialize(FD_MODEL, 1)
    batch = _fd_batch()
    cfg = TrainConfig(skip_weight=0.5, ccl_weight=0.5, temperature=0.5)
    s1_names = params.names_in("embedding", "encoder", "gates", "last_classifier", "proj1")
    s2_names = params.names_in("classifiers", "proj2")
    anchors = straight_through_anchors(params, batch.ids)
    errs = {
        "stage1 soft": _max_rel_error(params, lambda: stage1_loss(batch, params, cfg, "soft").total, s1_names),
        "stage1 hard (straight-through)": _max_rel_error(
            params, lambda: stage1_loss(batch, params, cfg, "linearized_hard", anchors=anchors).total, s1_names
        ),
        "stage2": _max_rel_error(params, lambda: stage2_loss(batch, params, cfg).total, s2_names),
    }
    # the real hard path must backpropagate exactly what the linearized one does
    ad.zero_grad(params.values.values())
    ad.backward(stage1_loss(batch, params, cfg, "hard").total)
    hard = {n: params[n].grad.copy() for n in s1_names}
    ad.zero_grad(params.values.values())
    ad.backward(stage1_loss(batch, params, cfg, "linearized_hard", anchors=anchors).total)
    errs["hard vs linearized"] = max(
        float(np.abs(hard[n] - params[n].grad).max() / max(np.abs(hard[n]).max(), 1e-8)) for n in s1_names
    )
    worst = max(errs.values())
    record(2, "gradient correctness", worst <= 1e-3, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))


# 3 ---------------------------------------------------------------------------


def test_criterion_3_straight_through_contract():
    params = ModelParams.initialize(FD_MODEL, 2)
    batch = _fd_batch()
    out = run_stream(params, batch.ids, "hard")
    binary = all(set(np.unique(m.data)) <= {0.0, 1.0} for m in out.mix)
    w = np.random.default_rng(3).normal(size=out.layer_outputs[-1].shape)
    ad.backward((out.layer_outputs[-1] * w).sum())
    identity = all(np.array_equal(p.grad, g.grad) for p, g in zip(out.gate_probs, out.mix))
    # the pre-activation is the sigmoid's sole parent
    pre_ok = all(
        np.allclose(p._parents[0].grad, g.grad * p.data * (1 - p.data), rtol=1e-14, atol=0)
        for p, g in zip(out.gate_probs, out.mix)
    )
    ok = binary and identity and pre_ok
    record(3, "straight-through contract", ok, f"binary mix {binary}, identity backward {identity}, pre-activation {pre_ok}")


# 4 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_4_procedure_matches_vanilla(toy_run):
    cfg, _, params, _ = toy_run
    spec = replace(cfg.data.synthetic_spec(cfg.model), n_train=10, n_val=10, n_test=1000, seed=123)
    _, _, ds = generate_synthetic(spec)
    agree = 0
    for seq in ds.sequences:
        pred, _ = infer_sample(seq, params, 0.0, "execute")
        agree += pred == int(np.argmax(vanilla_forward(params, np.array([seq]))[0]))
    L = cfg.model.num_layers
    _, t = infer_sample(ds.sequences[0], params, 0.3, "skip")
    expect = [("embedding", 0)] + [("gate", i) for i in range(1, L + 1)] + [("classifier", L)]
    ok = agree == len(ds) and t.ops == expect
    record(4, "procedure oracle", ok, f"{agree}/{len(ds)} argmax agree, all-skip trace {len(t.ops)} ops")


# 5 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_threshold_monotonicity(toy_run):
    _, _, params, test = toy_run
    res = sweep_thresholds(params, test, S_GRID)
    exits = np.array([[t.exit_layer for t in r.traces] for r in res])
    flops = np.array([[t.flops for t in r.traces] for r in res])
    bad = int(np.sum(np.any(np.diff(exits, axis=0) > 0, axis=0) | np.any(np.diff(flops, axis=0) > 0, axis=0)))
    record(5, "threshold monotonicity", bad == 0, f"{bad}/{len(test)} samples violate over S={list(S_GRID)}")


# 6, 7 ------------------------------------------------------------------------


def _vanilla_accuracy(vanilla_params, test):
    return sweep_thresholds(vanilla_params, test, [0.0], "no_gates_no_exit")[0].metric_value


@pytest.mark.slow
def test_criterion_6_cost_accuracy_tradeoff(toy_run):
    _, van, params, test = toy_run
    base = _vanilla_accuracy(van, test)
    r = sweep_thresholds(params, test, [0.3], "full")[0]
    by_tag = exit_layer_by_tag(r, test.tags)
    ok = r.cost_ratio <= 0.7 and r.metric_value >= base - 0.02 and by_tag["easy"] < by_tag["hard"]
    record(
        6, "cost/accuracy trade-off at S=0.3", ok,
        f"cost ratio {r.cost_ratio:.3f}, acc {r.metric_value:.4f} vs vanilla {base:.4f}, "
        f"mean exit layer easy {by_tag['easy']:.2f} hard {by_tag['hard']:.2f}",
    )


@pytest.mark.slow
def test_criterion_7_skip_only(toy_run):
    cfg, van, params, test = toy_run
    base = _vanilla_accuracy(van, test)
    r = sweep_thresholds(params, test, [cfg.inference.threshold], "skip_only")[0]
    ok = r.cost_ratio <= 0.85 and r.metric_value >= base - 0.02
    record(7, "skip-only ablation", ok, f"cost ratio {r.cost_ratio:.3f}, acc {r.metric_value:.4f} vs vanilla {base:.4f}")


# 8 ---------------------------------------------------------------------------


def test_criterion_8_freeze_contracts():
    model = ModelConfig(num_layers=2, hidden_dim=16, num_heads=2, ffn_dim=32, classifier_inner_dim=8,
                        gate_inner_dim=8, proj_dim=8)
    tcfg = TrainConfig(stage1_epochs=2, soft_warmup_epochs=1, stage2_epochs=1, batch_size=16)
    train, val, _ = generate_synthetic(SyntheticTaskSpec(n_train=96, n_val=32, n_test=8, seed=5))
    init = ModelParams.initialize(model, tcfg.seed)
    s1 = train_stage1(train, val, model, tcfg)
    s2 = train_stage2(train, val, s1, tcfg)
    stage1_groups = ("embedding", "encoder", "gates", "last_classifier", "proj1")
    a = s1.params.digest("classifiers", "proj2") == init.digest("classifiers", "proj2")
    b = s2.params.digest(*stage1_groups) == s1.params.digest(*stage1_groups)
    moved = s2.params.digest("classifiers") != s1.params.digest("classifiers")
    record(8, "freeze contracts", a and b and moved,
           f"stage1 keeps classifiers {a}, stage2 keeps stage-1 params {b}, stage2 trains classifiers {moved}")


# 9 ---------------------------------------------------------------------------


def test_criterion_9_contrastive_closed_forms():
    keep = CCLConfig(temperature=0.1, exclude_cls_last_layer=False)
    rng = np.random.default_rng(0)
    errs = []
    one = [ad.Value(rng.normal(size=(1, 1, 4))) for _ in range(2)]
    errs.append(abs(cross_layer_loss(one, np.ones((1, 1), bool), None, keep).item()))
    for k in (2, 5):
        first = ad.Value(rng.normal(size=(1, k, 5)))
        same = ad.Value(np.tile(rng.normal(size=(1, 1, 5)), (1, k, 1)))
        errs.append(abs(cross_layer_loss([first, same], np.ones((1, k), bool), None, keep).item() - math.log(k)))
    for n, tau in ((3, 0.1), (6, 0.5)):
        x = ad.Value(np.eye(n)[None])
        want = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + n - 1))
        errs.append(abs(cross_layer_loss([x, x], np.ones((1, n), bool), None, CCLConfig(tau, False)).item() - want))
    record(9, "contrastive closed forms", max(errs) <= 1e-9, f"max abs error {max(errs):.1e}")


# 10 --------------------------------------------------------------------------

REDUCED = """\
[model]
num_layers = 2
hidden_dim = 16
num_heads = 2
ffn_dim = 32
classifier_inner_dim = 8
gate_inner_dim = 8
proj_dim = 8
[train]
vanilla_epochs = 1
stage1_epochs = 2
soft_warmup_epochs = 1
stage2_epochs = 1
batch_size = 16
[data]
n_train = 96
n_val = 32
n_test = 48
"""


def test_criterion_10_determinism_and_reporting(tmp_path):
    cfg = tmp_path / "reduced.cfg"
    cfg.write_text(REDUCED)
    files = {}
    for run in ("a", "b"):
        rd = tmp_path / run
        args = ["--config", str(cfg), "--run-dir", str(rd)]
        assert main(["train", *args]) == 0
        assert main(["sweep", *args]) == 0
        files[run] = {p.relative_to(rd): p.read_bytes() for p in sorted(rd.rglob("*")) if p.is_file()}
    same = files["a"] == files["b"]
    n_ckpt = sum(p.suffix == ".ckpt" for p in files["a"])
    n_csv = sum(p.suffix == ".csv" for p in files["a"])
    params = ckio.load(tmp_path / "a" / "checkpoints" / "stage2.ckpt").params
    _, _, test = load_data(load_config(cfg))
    res = sweep_thresholds(params, test, S_GRID)
    roundtrip = parse_sweep_csv(sweep_csv(res)) == [r.row() for r in res]
    on_disk = parse_sweep_csv(files["a"][Path("reports/sweep_full.csv")].decode()) == [r.row() for r in res]
    ok = same and n_ckpt == 3 and n_csv >= 1 and roundtrip and on_disk
    record(10, "determinism and reporting", ok,
           f"{len(files['a'])} files byte-identical {same} ({n_ckpt} checkpoints, {n_csv} CSV), "
           f"CSV round-trip {roundtrip}, disk matches memory {on_disk}")


# 11 --------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_11_diagnostics(toy_run):
    cfg, _, params, test = toy_run
    L = cfg.model.num_layers
    mismatches = 0
    for S in S_GRID:
        f = skip_exit_frequencies(params, test, S)
        r = sweep_thresholds(params, test, [S])[0]
        skips = np.sum([t.skipped for t in r.traces], axis=0).tolist()
        exits = [sum(t.early_exit and t.exit_layer == i for t in r.traces) for i in range(1, L + 1)]
        fall = sum(not t.early_exit for t in r.traces)
        mismatches += (f.skip_counts != skips) + (f.exit_counts != exits) + (f.fallthrough != fall)
    sims = layer_similarity_diagnostic(params, test)
    in_range = all(-1.0 <= v <= 1.0 for s in sims for v in (s.token_mean, s.cls_mean))
    observed = " ".join(f"{a}-{b}:{s.token_mean:.2f}" for s in sims for a, b in [s.layers])
    record(11, "diagnostics", mismatches == 0 and in_range,
           f"{mismatches} frequency mismatches, similarities in [-1,1] {in_range} (observed {observed})")
