"""Report files: sweep CSV, per-sample trace JSON lines, frequency and
similarity tables, a plain-text summary and a manifest.

Schemas (version ``SCHEMA_VERSION``):

  sweep.csv        S, mode, metric_name, metric_value, mean_flops, cost_ratio
  traces.jsonl     one object per (threshold, sample): schema_version,
                   sample_id, S, mode, seq_len, p_skip, skipped, exit_layer,
                   early_exit, entropies (keys are 1-based layers), predicted,
                   label, ops, flops
  frequencies.csv  S, layer, skips, exits, fallthrough (fallthrough only on
                   the last layer's row)
  similarity.csv   layer_from, layer_to, token_mean, cls_mean, token_count

Floats are written with ``repr`` so they parse back exactly, rows end in
``\\n`` and nothing time-dependent is written: equal inputs give equal bytes.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Sequence

from .inference import Frequencies, LayerSimilarity, SweepResult

SCHEMA_VERSION = 1
SWEEP_COLUMNS = ("S", "mode", "metric_name", "metric_value", "mean_flops", "cost_ratio")
FREQUENCY_COLUMNS = ("S", "layer", "skips", "exits", "fallthrough")
SIMILARITY_COLUMNS = ("layer_from", "layer_to", "token_mean", "cls_mean", "token_count")


class ReportError(OSError):
    pass


def _cell(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _csv_text(columns: Sequence[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r[c]) for c in columns])
    return buf.getvalue()


def sweep_csv(results: Sequence[SweepResult]) -> str:
    return _csv_text(SWEEP_COLUMNS, [r.row() for r in results])


def parse_sweep_csv(text: str) -> list[dict]:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append(
            {
                "S": float(r["S"]),
                "mode": r["mode"],
                "metric_name": r["metric_name"],
                "metric_value": float(r["metric_value"]),
                "mean_flops": float(r["mean_flops"]),
                "cost_ratio": float(r["cost_ratio"]),
            }
        )
    return rows


def traces_jsonl(results: Sequence[SweepResult], labels=None) -> str:
    lines = []
    for r in results:
        for i, t in enumerate(r.traces):
            rec = {"schema_version": SCHEMA_VERSION, "sample_id": i, "S": r.threshold, "mode": r.mode}
            rec.update(t.to_dict())
            if labels is not None:
                rec["label"] = int(labels[i])
            lines.append(json.dumps(rec, sort_keys=True, allow_nan=False))
    return "".join(line + "\n" for line in lines)


def frequencies_csv(freqs: Sequence[Frequencies]) -> str:
    rows = []
    for f in freqs:
        L = len(f.skip_counts)
        for k in range(L):
            rows.append(
                {
                    "S": f.threshold,
                    "layer": k + 1,
                    "skips": f.skip_counts[k],
                    "exits": f.exit_counts[k],
                    "fallthrough": f.fallthrough if k == L - 1 else 0,
                }
            )
    return _csv_text(FREQUENCY_COLUMNS, rows)


def similarity_csv(sims: Sequence[LayerSimilarity]) -> str:
    rows = [
        {
            "layer_from": s.layers[0],
            "layer_to": s.layers[1],
            "token_mean": s.token_mean,
            "cls_mean": s.cls_mean,
            "token_count": s.token_count,
        }
        for s in sims
    ]
    return _csv_text(SIMILARITY_COLUMNS, rows)


def summary_text(results: Sequence[SweepResult]) -> str:
    """One line per result; the cost ratio shown is the CSV value rounded to 4 places."""
    lines = []
    for r in results:
        lines.append(
            f"S={r.threshold:g} mode={r.mode} {r.metric_name}={r.metric_value:.4f} "
            f"mean_flops={r.mean_flops:.1f} cost ratio={r.cost_ratio:.4f} "
            f"mean exit layer={r.mean_exit_layer:.3f}"
        )
    return "".join(line + "\n" for line in lines)


def _write(path: Path, text: str, overwrite: bool) -> None:
    if path.exists() and not overwrite:
        raise FileExistsError(f"refusing to overwrite {path} (pass --overwrite)")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc}") from exc


def emit_report(
    results: Sequence[SweepResult],
    out_dir: str | Path,
    *,
    name: str = "sweep",
    labels=None,
    frequencies: Sequence[Frequencies] = (),
    similarity: Sequence[LayerSimilarity] = (),
    with_traces: bool = True,
    overwrite: bool = False,
) -> dict[str, Path]:
    """Write every report file under ``out_dir`` and return their paths."""
    out = Path(out_dir)
    files: dict[str, str] = {}
    if results or not (frequencies or similarity):
        files[f"{name}.csv"] = sweep_csv(results)
        files[f"{name}_summary.txt"] = summary_text(results)
    if with_traces and results:
        files[f"{name}_traces.jsonl"] = traces_jsonl(results, labels)
    if frequencies:
        files[f"{name}_frequencies.csv"] = frequencies_csv(frequencies)
    if similarity:
        files[f"{name}_similarity.csv"] = similarity_csv(similarity)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "files": sorted(files),
        "columns": {
            "sweep": list(SWEEP_COLUMNS),
            "frequencies": list(FREQUENCY_COLUMNS),
            "similarity": list(SIMILARITY_COLUMNS),
        },
    }
    files[f"{name}_manifest.json"] = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    if not overwrite:
        for fname in files:
            if (out / fname).exists():
                raise FileExistsError(f"refusing to overwrite {out / fname} (pass --overwrite)")
    written = {}
    for fname in sorted(files):
        _write(out / fname, files[fname], overwrite)
        written[fname] = out / fname
    return written
