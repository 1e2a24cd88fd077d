"""Full comparison matrix on the drift benchmark; writes per-seed metric CSVs and a summary."""
import argparse
import logging
from pathlib import Path

from peso_cl.harness import BASELINES, ExperimentConfig, run_benchmark


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--lambdas", type=float, nargs="+", default=[0.5, 1.0, 2.0, 5.0, 8.0])
    p.add_argument("--out", default="runs/benchmark")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO)
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    res = run_benchmark(cfg, args.seeds, lambdas=tuple(args.lambdas))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in args.seeds:
        (out / f"metrics_test_seed{seed}.csv").write_text(res.csv(seed, "test"))
        (out / f"metrics_val_seed{seed}.csv").write_text(res.csv(seed, "val"))
    lam = res.best_lambda()
    labels = list(BASELINES) + [f"peso@{l!r}" for l in res.lambdas] + \
        [f"single_evolving@lr{s!r}" for s in res.lr_scales]
    lines = ["label,test_ndcg10,test_hit10"]
    for lbl in labels:
        lines.append(f"{lbl},{res.mean(lbl):.6f},{res.mean(lbl, key=('hit', 10)):.6f}")
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"best lambda by validation NDCG@10: {lam!r}")


if __name__ == "__main__":
    main()
