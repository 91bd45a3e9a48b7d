"""Accuracy against compute over an entropy-threshold grid.

Trains the vanilla baseline and the adaptive model once, then evaluates the
adaptive model at every threshold (trajectories are threshold independent, so
the sweep itself is cheap).  Prints a markdown table with a vanilla row.
"""

from _common import parser, setup, table, train_pipeline

from gatedexit.inference import compute_trajectories, exit_layer_by_tag, sweep_thresholds


def main():
    ap = parser(__doc__.splitlines()[0])
    ap.add_argument("--thresholds", default=None, help="comma list (default: config)")
    args = ap.parse_args()
    cfg, (train, val, test) = setup(args)
    grid = [float(x) for x in args.thresholds.split(",")] if args.thresholds else cfg.inference.thresholds
    vanilla, model = train_pipeline(cfg, train, val)
    metric = cfg.inference.metric

    base = sweep_thresholds(vanilla.params, test, [0.0], "no_gates_no_exit", metric)[0]
    rows = [dict(S="vanilla", metric=base.metric_value, cost_ratio=1.0, easy_exit="-", hard_exit="-")]
    trajs = compute_trajectories(model.params, test, "learned")
    for r in sweep_thresholds(model.params, test, grid, "full", metric, trajectories=trajs):
        tags = exit_layer_by_tag(r, test.tags)
        rows.append(dict(S=r.threshold, metric=r.metric_value, cost_ratio=r.cost_ratio,
                         easy_exit=tags.get("easy", "-"), hard_exit=tags.get("hard", "-")))
    print(table(rows, ["S", "metric", "cost_ratio", "easy_exit", "hard_exit"]))


if __name__ == "__main__":
    main()
