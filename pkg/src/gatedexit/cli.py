"""Command-line entry point.

Run directory layout (``--run-dir``, default ``$GATEDEXIT_RUN_ROOT/<config
stem>`` with root ``runs``)::

    checkpoints/{vanilla,stage1,stage2}.ckpt
    reports/    CSV, JSON-lines and summary files
    logs/       metrics_<stage>.jsonl, one record per epoch

Existing outputs are never replaced without ``--overwrite``.

Exit codes: 0 ok, 1 runtime failure, 2 usage, 3 config, 4 checkpoint
missing or unreadable, 5 data, 6 output exists.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

from . import checkpoint as ckio
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .data import DataError, TsvSchema, generate_synthetic, load_tsv, split_validation, write_tsv
from .flops import OP_KINDS, count_flops
from .inference import (
    ABLATION_MODES,
    InferenceError,
    exit_layer_by_tag,
    infer_sample,
    skip_exit_frequencies,
    summarize,
    sweep_thresholds,
    layer_similarity_diagnostic,
    mean_vanilla_flops,
)
from .reports import ReportError, emit_report
from .training import TrainingError, train_stage1, train_stage2, train_vanilla

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_DATA, EXIT_CLOBBER = range(7)
RUN_ROOT_ENV = "GATEDEXIT_RUN_ROOT"
STAGES = ("vanilla", "stage1", "stage2")


class MissingCheckpoint(FileNotFoundError):
    pass


# helpers ---------------------------------------------------------------------


def run_dir(args) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    return root / (Path(args.config).stem if args.config else "default")


def load_data(cfg: RunConfig):
    d, m = cfg.data, cfg.model
    if d.source == "synthetic":
        train, val, test = generate_synthetic(d.synthetic_spec(m))
    else:
        schema = TsvSchema(d.text_columns, d.label_column, d.tag_column or None)
        opts = dict(max_seq_len=m.max_seq_len, num_classes=m.num_classes)
        train = load_tsv(d.train_path, schema, split="train", max_vocab=d.max_vocab or None, **opts)
        if d.val_path:
            val = load_tsv(d.val_path, schema, train.vocab, split="val", **opts)
        else:
            train, val = split_validation(train, cfg.train.val_fraction, d.seed)
        test = load_tsv(d.test_path, schema, train.vocab, split="test", **opts)
    if len(train.vocab) > m.vocab_size:
        raise DataError(f"vocabulary has {len(train.vocab)} tokens but model.vocab_size is {m.vocab_size}")
    if max(train.max_len(), val.max_len(), test.max_len()) > m.max_seq_len:
        raise DataError(f"sequences longer than model.max_seq_len = {m.max_seq_len}")
    return train, val, test


def load_checkpoint(path: Path) -> ckio.Checkpoint:
    if not path.is_file():
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    return ckio.load(path)


def checkpoint_path(rd: Path, stage: str) -> Path:
    return rd / "checkpoints" / f"{stage}.ckpt"


def model_checkpoint(args, rd: Path, default_stage: str = "stage2") -> ckio.Checkpoint:
    return load_checkpoint(Path(args.checkpoint) if args.checkpoint else checkpoint_path(rd, default_stage))


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_jsonl(path: Path, records: list[dict], overwrite: bool) -> None:
    if path.exists() and not overwrite:
        raise FileExistsError(f"refusing to overwrite {path} (pass --overwrite)")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")


def parse_thresholds(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from exc
    if not values or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("thresholds must be a non-empty list of values >= 0")
    return values


# commands --------------------------------------------------------------------


def cmd_train(cfg: RunConfig, args) -> int:
    rd = run_dir(args)
    tcfg = cfg.train if args.seed is None else dataclasses.replace(cfg.train, seed=args.seed)
    stages = STAGES if args.stage == "all" else (args.stage,)
    if not args.overwrite:
        for st in stages:
            if checkpoint_path(rd, st).exists():
                raise FileExistsError(f"refusing to overwrite {checkpoint_path(rd, st)} (pass --overwrite)")
    train, val, _ = load_data(cfg)
    (rd / "checkpoints").mkdir(parents=True, exist_ok=True)
    for st in stages:
        records: list[dict] = []
        if st == "vanilla":
            ckpt = train_vanilla(train, val, cfg.model, tcfg, log=records.append)
        elif st == "stage1":
            init = None
            if tcfg.warm_start:
                init = load_checkpoint(checkpoint_path(rd, "vanilla")).params.copy()
            ckpt = train_stage1(train, val, cfg.model, tcfg, params=init, log=records.append)
        else:
            s1 = load_checkpoint(checkpoint_path(rd, "stage1"))
            ckpt = train_stage2(train, val, s1, tcfg, log=records.append)
        path = checkpoint_path(rd, st)
        ckio.save(ckpt, path)
        write_jsonl(rd / "logs" / f"metrics_{st}.jsonl", records, overwrite=True)
        print(f"{st}: epoch {ckpt.epoch} sha256 {file_digest(path)} -> {path}")
    return EXIT_OK


def cmd_infer(cfg: RunConfig, args) -> int:
    rd = run_dir(args)
    ckpt = model_checkpoint(args, rd)
    _, _, test = load_data(cfg)
    S = cfg.inference.threshold if args.S is None else args.S
    mode = args.mode or cfg.inference.mode
    policy, exits = ABLATION_MODES[mode]
    n = len(test) if args.limit is None else min(args.limit, len(test))
    if n == 0:
        raise InferenceError("no samples to infer")
    subset = test.subset(range(n))
    traces = [infer_sample(seq, ckpt.params, S, policy, exits, check=(i == 0))[1] for i, seq in enumerate(subset.sequences)]
    result = summarize(traces, subset.labels, ckpt.params, S, mode, cfg.inference.metric, mean_vanilla_flops(ckpt.params, subset))
    emit_report([result], rd / "reports", name="infer", labels=subset.labels, overwrite=args.overwrite)
    print(f"{mode} S={S:g}: {result.metric_name}={result.metric_value:.4f} cost ratio={result.cost_ratio:.4f}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    rd = run_dir(args)
    ckpt = model_checkpoint(args, rd)
    _, _, test = load_data(cfg)
    mode = args.mode or cfg.inference.mode
    thresholds = args.thresholds or cfg.inference.thresholds
    results = sweep_thresholds(ckpt.params, test, thresholds, mode, cfg.inference.metric)
    emit_report(results, rd / "reports", name=f"sweep_{mode}", labels=test.labels, overwrite=args.overwrite)
    for r in results:
        print(f"S={r.threshold:g} {r.metric_name}={r.metric_value:.4f} cost ratio={r.cost_ratio:.4f}")
    return EXIT_OK


def cmd_flops(cfg: RunConfig, args) -> int:
    n = args.seq_len or cfg.model.max_seq_len
    ledger = count_flops(cfg.model, n, convention=args.convention)
    unit = "MACs" if args.convention == "macs" else "FLOPs"
    if args.json:
        print(json.dumps({**ledger.to_dict(), "breakdown": ledger.breakdown}, indent=2, sort_keys=True))
        return EXIT_OK
    print(f"sequence length {n}, {unit} (matrix products only)")
    for kind in OP_KINDS:
        print(f"  {kind:<14} {ledger.cost(kind) / 1e6:12.2f}M")
    layer = ledger.cost("encoder_layer")
    for kind in ("gate", "classifier"):
        print(f"  {kind} / encoder_layer = {ledger.cost(kind) / layer:.4f}")
    print(f"  vanilla forward {ledger.total / 1e6:.2f}M")
    return EXIT_OK


def cmd_frequencies(cfg: RunConfig, args) -> int:
    rd = run_dir(args)
    ckpt = model_checkpoint(args, rd)
    _, _, test = load_data(cfg)
    thresholds = args.thresholds or cfg.inference.thresholds
    freqs = [skip_exit_frequencies(ckpt.params, test, S) for S in thresholds]
    emit_report([], rd / "reports", name="skip_exit", frequencies=freqs, overwrite=args.overwrite)
    for f in freqs:
        print(f"S={f.threshold:g} skips={f.skip_counts} exits={f.exit_counts} fallthrough={f.fallthrough}")
    return EXIT_OK


def cmd_similarity(cfg: RunConfig, args) -> int:
    rd = run_dir(args)
    ckpt = model_checkpoint(args, rd, default_stage="stage1")
    _, _, test = load_data(cfg)
    sims = layer_similarity_diagnostic(ckpt.params, test)
    emit_report([], rd / "reports", name="layer", similarity=sims, overwrite=args.overwrite)
    for s in sims:
        print(f"layers {s.layers[0]}->{s.layers[1]}: tokens {s.token_mean:.4f} [CLS] {s.cls_mean:.4f}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    rd = run_dir(args)
    ckpt = model_checkpoint(args, rd)
    _, _, test = load_data(cfg)
    S = cfg.inference.threshold if args.S is None else args.S
    results = [sweep_thresholds(ckpt.params, test, [S], m, cfg.inference.metric)[0] for m in ABLATION_MODES]
    vanilla = checkpoint_path(rd, "vanilla")
    if vanilla.is_file():
        base = sweep_thresholds(ckio.load(vanilla).params, test, [S], "no_gates_no_exit", cfg.inference.metric)[0]
        results.append(dataclasses.replace(base, mode="vanilla"))
    emit_report(results, rd / "reports", name="ablation", labels=test.labels, with_traces=False, overwrite=args.overwrite)
    for r in results:
        line = f"{r.mode:<17} {r.metric_name}={r.metric_value:.4f} cost ratio={r.cost_ratio:.4f}"
        if test.tags is not None:
            line += " exit layer " + " ".join(f"{k}={v:.2f}" for k, v in exit_layer_by_tag(r, test.tags).items())
        print(line)
    return EXIT_OK


def cmd_generate_data(cfg: RunConfig, args) -> int:
    out = Path(args.out) if args.out else run_dir(args) / "data"
    targets = [out / f"{s}.tsv" for s in ("train", "val", "test")]
    if not args.overwrite and any(t.exists() for t in targets):
        raise FileExistsError(f"refusing to overwrite files in {out} (pass --overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    for ds, path in zip(generate_synthetic(cfg.data.synthetic_spec(cfg.model)), targets):
        write_tsv(ds, path)
        print(f"{ds.split}: {len(ds)} samples -> {path}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "sweep": cmd_sweep,
    "flops": cmd_flops,
    "frequencies": cmd_frequencies,
    "similarity": cmd_similarity,
    "ablate": cmd_ablate,
    "generate-data": cmd_generate_data,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [model] [train] [data] [inference] sections")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--run-dir", help=f"output directory (default ${RUN_ROOT_ENV}/<config stem>)")
    common.add_argument("--overwrite", action="store_true", help="replace existing outputs")

    ap = argparse.ArgumentParser(prog="gatedexit", description="Gated layer skipping with entropy early exit.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train the baseline and/or the two stages")
    p.add_argument("--stage", choices=("all",) + STAGES, default="all")
    p.add_argument("--seed", type=int)

    for name, help_ in (("infer", "per-sample adaptive inference on the test split"), ("ablate", "compare ablation modes at one threshold")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--S", type=float, help="entropy threshold")
        p.add_argument("--checkpoint")
        if name == "infer":
            p.add_argument("--mode", choices=tuple(ABLATION_MODES))
            p.add_argument("--limit", type=int)

    p = sub.add_parser("sweep", parents=[common], help="accuracy and cost over entropy thresholds")
    p.add_argument("--thresholds", type=parse_thresholds)
    p.add_argument("--mode", choices=tuple(ABLATION_MODES))
    p.add_argument("--checkpoint")

    p = sub.add_parser("flops", parents=[common], help="print the analytic cost ledger")
    p.add_argument("--seq-len", type=int)
    p.add_argument("--convention", choices=("flops", "macs"), default="flops")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("frequencies", parents=[common], help="per-layer skip and exit counts")
    p.add_argument("--thresholds", type=parse_thresholds)
    p.add_argument("--checkpoint")

    p = sub.add_parser("similarity", parents=[common], help="consecutive-layer token cosine similarity")
    p.add_argument("--checkpoint")

    p = sub.add_parser("generate-data", parents=[common], help="write the synthetic splits as TSV")
    p.add_argument("--out")
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    errors = (
        (ConfigError, EXIT_CONFIG, "config error"),
        (MissingCheckpoint, EXIT_CHECKPOINT, "checkpoint error"),
        (CheckpointError, EXIT_CHECKPOINT, "checkpoint error"),
        (DataError, EXIT_DATA, "data error"),
        (FileExistsError, EXIT_CLOBBER, "output exists"),
        ((TrainingError, InferenceError, ReportError, FloatingPointError), EXIT_RUNTIME, "runtime error"),
    )
    try:
        cfg = load_config(args.config, args.set)
        return COMMANDS[args.command](cfg, args)
    except Exception as exc:
        for kinds, code, label in errors:
            if isinstance(exc, kinds):
                print(f"gatedexit: {label}: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
