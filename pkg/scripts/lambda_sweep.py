"""PESO lambda grid for one or more regularizers, validation and test NDCG@10 per lambda."""
import argparse
import copy

from peso_cl.harness import ExperimentConfig, build_data, pretrain, run_pipeline
from peso_cl.proximal import REGULARIZERS


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 0.5, 1.0, 2.0, 5.0, 8.0])
    p.add_argument("--kinds", nargs="+", default=["softmax_kl_per_module"], choices=REGULARIZERS)
    args = p.parse_args()
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg.eval.validate = True
    print("seed,kind,lambda,val_ndcg10,test_ndcg10,mean_displacement")
    for seed in args.seeds:
        c = copy.deepcopy(cfg)
        c.seed = seed
        data = build_data(c)
        pre = pretrain(c, data)
        for kind in args.kinds:
            for lam in args.lambdas:
                rep = run_pipeline(c.with_method(f"peso:{kind}", lam=lam), data, pre)
                disp = sum(e["displacement"] for e in rep.logs[1:]) / len(rep.logs[1:])
                print(f"{seed},{kind},{lam!r},{rep.averages(which='val')[('ndcg', 10)]:.6f},"
                      f"{rep.averages()[('ndcg', 10)]:.6f},{disp:.6f}", flush=True)


if __name__ == "__main__":
    main()
