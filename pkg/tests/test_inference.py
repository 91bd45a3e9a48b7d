import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gatedexit.flops import count_flops, vanilla_flops
from gatedexit.inference import (
    ABLATION_MODES,
    InferenceError,
    ablation_modes,
    compute_trajectories,
    infer_sample,
    layer_similarity_diagnostic,
    score,
    skip_exit_frequencies,
    sweep_thresholds,
    trace_from_trajectory,
)
from gatedexit.model import ModelParams, vanilla_forward

from conftest import TINY, random_dataset, set_gate_bias

S_GRID = (0.0, 0.1, 0.3, 0.5, 0.7, 1.0)
L = TINY.num_layers


@pytest.fixture
def params():
    # gate 1 always executes, gates 2 and 3 depend on the input; sharper
    # classifier readouts spread the entropies so exits fire at several S
    p = ModelParams.initialize(TINY, seed=11)
    set_gate_bias(p, 0, -6.0)
    for i in range(L):
        p.values[f"cls{i}.wc"].data *= 10.0
    return p


@pytest.fixture
def ds():
    return random_dataset(np.random.default_rng(0), 40)


def test_forced_execute_at_zero_threshold_is_vanilla(params, ds):
    for seq in ds.sequences:
        pred, trace = infer_sample(seq, params, 0.0, "execute")
        assert trace.exit_layer == L and not trace.early_exit
        assert pred == int(np.argmax(vanilla_forward(params, np.array([seq]))[0]))


def test_all_skip_trace(params, ds):
    _, trace = infer_sample(ds.sequences[0], params, 0.5, "skip")
    assert trace.ops == [("embedding", 0)] + [("gate", i) for i in range(1, L + 1)] + [("classifier", L)]
    assert list(trace.entropies) == [L] and trace.exit_layer == L


def test_threshold_one_exits_at_first_executed_layer(params, ds):
    for seq in ds.sequences[:10]:
        _, trace = infer_sample(seq, params, 1.0 + 1e-9)
        first = trace.skipped.index(False) + 1
        assert trace.exit_layer == first


def test_skip_has_priority_over_exit(params, ds):
    for seq in ds.sequences:
        for S in S_GRID:
            _, t = infer_sample(seq, params, S)
            for i, skipped in enumerate(t.skipped, start=1):
                if skipped and i != L:
                    assert i not in t.entropies
                    assert ("classifier", i) not in t.ops
            assert set(t.entropies) <= {i for i, s in enumerate(t.skipped, 1) if not s} | {L}


def test_trajectory_traces_equal_literal_procedure(params, ds):
    for policy in ("learned", "execute", "skip", "off"):
        trajs = compute_trajectories(params, ds, policy)
        for exits in (True, False):
            for S in (0.0, 0.3, 0.9):
                for seq, traj in zip(ds.sequences, trajs):
                    _, lit = infer_sample(seq, params, S, policy, exits)
                    fast = trace_from_trajectory(traj, params, S, policy, exits)
                    assert fast.ops == lit.ops and fast.predicted == lit.predicted
                    assert fast.exit_layer == lit.exit_layer and fast.flops == lit.flops
                    assert fast.entropies.keys() == lit.entropies.keys()
                    for k, e in lit.entropies.items():
                        assert fast.entropies[k] == pytest.approx(e, abs=1e-9)


def test_flops_equal_ledger_over_ops(params, ds):
    _, t = infer_sample(ds.sequences[3], params, 0.4)
    assert t.flops == count_flops(TINY, t.seq_len, t.ops).total


def test_threshold_monotonicity(params, ds):
    res = sweep_thresholds(params, ds, S_GRID)
    exits = np.array([[t.exit_layer for t in r.traces] for r in res])
    flops = np.array([[t.flops for t in r.traces] for r in res])
    assert np.all(np.diff(exits, axis=0) <= 0) and np.all(np.diff(flops, axis=0) <= 0)
    assert all(a.mean_flops >= b.mean_flops for a, b in zip(res, res[1:]))


def test_sweep_mean_flops_recomputed_from_traces(params, ds):
    for r in sweep_thresholds(params, ds, (0.2, 0.6)):
        direct = math.fsum(count_flops(TINY, t.seq_len, t.ops).total for t in r.traces) / len(ds)
        assert r.mean_flops == pytest.approx(direct, rel=1e-9)
        van = math.fsum(vanilla_flops(TINY, len(s)) for s in ds.sequences) / len(ds)
        assert r.cost_ratio == pytest.approx(direct / van, rel=1e-12)
        assert 0 < r.cost_ratio <= 1.1


def test_gateless_modes_pay_only_classifier_overhead(params, ds):
    r = ablation_modes(params, ds, "exit_only", 0.0)
    extra = math.fsum(count_flops(TINY, len(s)).cost("classifier") * L for s in ds.sequences) / len(ds)
    van = math.fsum(vanilla_flops(TINY, len(s)) for s in ds.sequences) / len(ds)
    assert r.cost_ratio == pytest.approx(1.0 + extra / van, rel=1e-12)
    base = ablation_modes(params, ds, "no_gates_no_exit", 0.3)
    one = math.fsum(count_flops(TINY, len(s)).cost("classifier") for s in ds.sequences) / len(ds)
    assert base.cost_ratio == pytest.approx(1.0 + one / van, rel=1e-12)


def test_exit_only_at_zero_equals_vanilla_predictions(params, ds):
    a = ablation_modes(params, ds, "exit_only", 0.0)
    b = ablation_modes(params, ds, "no_gates_no_exit", 0.0)
    assert [t.predicted for t in a.traces] == [t.predicted for t in b.traces]


def test_skip_only_never_runs_more_layers_than_vanilla(params, ds):
    skip = ablation_modes(params, ds, "skip_only", 0.3)
    base = ablation_modes(params, ds, "no_gates_no_exit", 0.3)
    gate = [count_flops(TINY, len(s)).cost("gate") for s in ds.sequences]
    for s, b, g in zip(skip.traces, base.traces, gate):
        layers = sum(op == "encoder_layer" for op, _ in s.ops)
        assert layers <= L
        # same classifier, plus gates, minus skipped layers
        assert s.flops == b.flops + L * g - (L - layers) * count_flops(TINY, s.seq_len).cost("encoder_layer")


def test_full_runs_no_more_layers_than_exit_only_when_exit_layers_agree(params, ds):
    full = ablation_modes(params, ds, "full", 0.4)
    exit_only = ablation_modes(params, ds, "exit_only", 0.4)
    for f, e in zip(full.traces, exit_only.traces):
        if f.exit_layer == e.exit_layer:
            layers = lambda t: sum(op == "encoder_layer" for op, _ in t.ops)
            assert layers(f) <= layers(e)


def test_frequencies_reconcile_with_traces(params, ds):
    for S in S_GRID:
        f = skip_exit_frequencies(params, ds, S)
        r = sweep_thresholds(params, ds, [S])[0]
        assert sum(f.exit_counts) + f.fallthrough == len(ds)
        per_layer = np.zeros(L, int)
        for t in r.traces:
            per_layer += np.asarray(t.skipped, int)
        assert f.skip_counts == per_layer.tolist()
        assert f.exit_counts[L - 1] == 0
    assert skip_exit_frequencies(params, ds, 0.0).fallthrough == len(ds)


def test_forced_off_gates_never_skip(params, ds):
    r = ablation_modes(params, ds, "exit_only", 0.5)
    assert r.skip_counts == [0] * L


def test_similarity_range_and_order_invariance(params, ds):
    sims = layer_similarity_diagnostic(params, ds)
    assert [s.layers for s in sims] == [(0, 1), (1, 2), (2, 3)]
    for s in sims:
        assert -1.0 <= s.token_mean <= 1.0 and -1.0 <= s.cls_mean <= 1.0
    perm = np.random.default_rng(1).permutation(len(ds))
    shuffled = layer_similarity_diagnostic(params, ds.subset(perm))
    for a, b in zip(sims, shuffled):
        assert a.token_mean == pytest.approx(b.token_mean, abs=1e-12)
        assert a.cls_mean == pytest.approx(b.cls_mean, abs=1e-12)


def test_near_identity_layers_give_similarity_near_one(ds):
    p = ModelParams.initialize(TINY, 0)
    for name, v in p.values.items():
        if name.startswith("layer") and name.rsplit(".", 1)[1] in ("wo", "w2"):
            v.data[...] = 0.0  # residual branches vanish; LN of LN(x) is ~x
    for s in layer_similarity_diagnostic(p, ds):
        assert s.token_mean > 0.999 and s.cls_mean > 0.999


@given(st.floats(0.0, 2.0))
def test_infer_returns_valid_trace(S):
    p = ModelParams.initialize(TINY, 4)
    pred, t = infer_sample([1, 5, 6, 7], p, S)
    assert pred in (0, 1) and 1 <= t.exit_layer <= L and t.predicted == pred
    assert len(t.p_skip) == len(t.skipped) == L


def test_errors(params, ds):
    with pytest.raises(InferenceError):
        infer_sample([1, 5], params, -0.1)
    with pytest.raises(InferenceError):
        infer_sample([1, 5, 0], params, 0.3)
    with pytest.raises(InferenceError):
        ablation_modes(params, ds, "half", 0.3)
    with pytest.raises(InferenceError):
        sweep_thresholds(params, ds.subset([]), [0.1])
    bad = params.copy()
    bad.values["layer0.w1"].data[0, 0] = np.nan
    with pytest.raises(InferenceError, match="non-finite"):
        infer_sample([1, 5], bad, 0.3)


def test_metrics():
    assert score([1, 0, 1, 1], [1, 0, 0, 1]) == 0.75
    assert score([1, 1, 0, 0], [1, 1, 0, 0], "mcc") == pytest.approx(1.0)
    assert score([1, 0, 1, 0], [1, 1, 0, 0], "f1") == pytest.approx(0.5)
    with pytest.raises(InferenceError):
        score([1], [1], "auc")


def test_ablation_mode_table():
    assert ABLATION_MODES["skip_only"] == ("learned", False)
    assert ABLATION_MODES["exit_only"] == ("off", True)
