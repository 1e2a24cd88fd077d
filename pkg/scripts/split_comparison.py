"""Chronological versus user-disjoint splits: block sizes and a few methods on each."""
import argparse
import copy

from peso_cl.harness import ExperimentConfig, build_data, run_methods


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--methods", nargs="+", default=["pretrain_only", "single_evolving", "peso"])
    args = p.parse_args()
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg.seed = args.seed
    print("split,method,block_records,test_ndcg10")
    for split in ("chronological", "user_disjoint"):
        c = copy.deepcopy(cfg)
        c.data.split = split
        data = build_data(c)
        sizes = "/".join(str(b.n_records) for b in data.blocks)
        for rep in run_methods(c, args.methods, data=data):
            print(f"{split},{rep.method},{sizes},{rep.averages()[('ndcg', 10)]:.6f}", flush=True)


if __name__ == "__main__":
    main()
