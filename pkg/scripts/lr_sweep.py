"""Continual-stage learning-rate scale sweep for single_evolving (validation NDCG@10)."""
import argparse
import copy

import numpy as np

from peso_cl.harness import ExperimentConfig, build_data, pretrain, run_pipeline


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--scales", type=float, nargs="+", default=[0.02, 0.05, 0.1, 0.3, 1.0])
    p.add_argument("--method", default="single_evolving")
    args = p.parse_args()
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg.eval.validate = True
    scores = {s: [] for s in args.scales}
    for seed in args.seeds:
        c = copy.deepcopy(cfg)
        c.seed = seed
        data = build_data(c)
        pre = pretrain(c, data)
        for s in args.scales:
            rep = run_pipeline(c.with_method(args.method, lr_scale=s), data, pre)
            scores[s].append(rep.averages(which="val")[("ndcg", 10)])
    print("lr_scale,val_ndcg10_mean,val_ndcg10_std")
    for s, v in scores.items():
        print(f"{s!r},{np.mean(v):.6f},{np.std(v):.6f}")


if __name__ == "__main__":
    main()
