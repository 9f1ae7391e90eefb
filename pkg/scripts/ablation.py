"""Component ablation on one synthetic corpus: drop one piece of the framework at a time."""
import argparse
import time

from istdkd.bilevel import train
from istdkd.config import RunConfig
from istdkd.synthdata import Dataset, build_dataset

VARIANTS = {
    "full": {},
    "no_vfm": {"use_vfm": False},
    "no_val": {"use_val": False},
    "no_reweight": {"use_reweight": False},
    "no_inner_kd": {"inner_kd": False},
    "no_outer_kd": {"outer_kd": False},
    "no_evolution": {"evolve_from": 10 ** 9},
}


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--n-train", type=int, default=160)
    p.add_argument("--n-test", type=int, default=40)
    p.add_argument("--size", type=int, default=64)
    args = p.parse_args()

    samples, split = build_dataset(args.n_train, args.n_test, args.size, args.seed)
    ds = Dataset({s.id: s for s in samples}, split)
    print(f"{'variant':<14}{'test IoU':>10}{'best':>8}{'mask IoU':>10}{'sec':>7}")
    for name in args.variants:
        t0 = time.time()
        cfg = RunConfig(epochs=args.epochs, batch=args.batch, seed=args.seed, **VARIANTS[name])
        h = train(cfg, ds).history
        best = max(r["test_IoU"] for r in h)
        print(f"{name:<14}{h[-1]['test_IoU']:10.3f}{best:8.3f}{h[-1]['mask_IoU']:10.3f}{time.time() - t0:7.0f}",
              flush=True)


if __name__ == "__main__":
    main()
