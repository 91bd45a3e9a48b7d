"""Shared helpers for the experiment scripts."""

import argparse
from dataclasses import replace

from gatedexit.cli import load_data
from gatedexit.config import load_config
from gatedexit.training import train_stage1, train_stage2, train_vanilla


def parser(description: str) -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--config", default="configs/toy.cfg")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    ap.add_argument("--S", type=float, default=None, help="entropy threshold (default: config)")
    return ap


def setup(args):
    cfg = load_config(args.config, args.set)
    return cfg, load_data(cfg)


def train_pipeline(cfg, train, val, vanilla=None, **train_overrides):
    """Vanilla warm start (reused if given), then both adaptive stages."""
    tcfg = replace(cfg.train, **train_overrides)
    if vanilla is None:
        vanilla = train_vanilla(train, val, cfg.model, tcfg)
    init = vanilla.params.copy() if tcfg.warm_start else None
    s1 = train_stage1(train, val, cfg.model, tcfg, params=init)
    return vanilla, train_stage2(train, val, s1, tcfg)


def table(rows: list[dict], columns: list[str]) -> str:
    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    lines += ["| " + " | ".join(fmt(r[c]) for c in columns) + " |" for r in rows]
    return "\n".join(lines)
