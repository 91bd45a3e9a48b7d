"""Cross-layer contrastive weight on against off, in both training stages."""

from _common import parser, setup, table, train_pipeline

from gatedexit.inference import sweep_thresholds


def main():
    ap = parser(__doc__.splitlines()[0])
    ap.add_argument("--weight", type=float, default=None, help="contrastive weight when on (default: config)")
    args = ap.parse_args()
    cfg, (train, val, test) = setup(args)
    S = cfg.inference.threshold if args.S is None else args.S
    on = cfg.train.ccl_weight if args.weight is None else args.weight
    vanilla = None
    rows = []
    for w in (0.0, on):
        vanilla, model = train_pipeline(cfg, train, val, vanilla, ccl_weight=w)
        for mode in ("full", "exit_only"):
            r = sweep_thresholds(model.params, test, [S], mode, cfg.inference.metric)[0]
            rows.append(dict(ccl_weight=w, mode=mode, metric=r.metric_value, cost_ratio=r.cost_ratio))
    print(f"S = {S}")
    print(table(rows, ["ccl_weight", "mode", "metric", "cost_ratio"]))


if __name__ == "__main__":
    main()
