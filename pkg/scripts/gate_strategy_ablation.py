"""Compare stage-1 gate schedules: soft only, hard only, soft then hard.

The vanilla warm start is trained once and shared.  Each schedule then runs
both adaptive stages and is evaluated at one threshold.
"""

from _common import parser, setup, table, train_pipeline

from gatedexit.inference import sweep_thresholds


def main():
    args = parser(__doc__.splitlines()[0]).parse_args()
    cfg, (train, val, test) = setup(args)
    S = cfg.inference.threshold if args.S is None else args.S
    vanilla = None
    rows = []
    for mode in ("soft", "hard", "soft_then_hard"):
        vanilla, model = train_pipeline(cfg, train, val, vanilla, gate_mode=mode)
        r = sweep_thresholds(model.params, test, [S], "full", cfg.inference.metric)[0]
        rows.append(dict(gate_mode=mode, metric=r.metric_value, cost_ratio=r.cost_ratio,
                         mean_exit_layer=r.mean_exit_layer))
    print(f"S = {S}")
    print(table(rows, ["gate_mode", "metric", "cost_ratio", "mean_exit_layer"]))


if __name__ == "__main__":
    main()
