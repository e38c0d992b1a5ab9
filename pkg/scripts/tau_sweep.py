"""Temperature sweep of the adaptive layer on the toy task (optionally in parallel)."""
import argparse

from chanorm.experiments import ExperimentConfig, format_table, sweep, tau_spread, write_table_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--taus", default="0.05,0.1,0.2,0.5,1.0")
    ap.add_argument("--norm", default="acn", choices=("acn", "pcn"))
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="runs/tau_sweep")
    args = ap.parse_args()

    cfg = ExperimentConfig(data="toy", split=(0.6, 0.2, 0.2), eval_stride=4, epochs=args.epochs,
                           norm_kind=args.norm, proto_jitter=0.1)
    rows = sweep(cfg, {"tau": [float(t) for t in args.taus.split(",")]}, args.out, jobs=args.jobs)
    cols = ("tau", "test_mse", "aligned_mse", "epochs_run")
    print(format_table(rows, cols))
    write_table_csv(rows, f"{args.out}/tau_sweep.csv", cols)
    print(f"spread/mean over all test windows: {tau_spread(rows):.3f}")
    print(f"spread/mean over aligned windows:  {tau_spread(rows, 'aligned_mse'):.3f}")


if __name__ == "__main__":
    main()
