"""Run the three-stage desk curriculum and print per-stage test metrics.

    python scripts/run_desk_curriculum.py --out runs/desk
    python scripts/run_desk_curriculum.py --config my.yaml --stages 2 3 --init runs/desk/checkpoints/stage1_final.npz
"""
import argparse
import logging
import time

from lipsplat import config as C
from lipsplat.cli import set_deterministic
from lipsplat.curriculum import run_curriculum


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--stages", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--init", help="checkpoint for the first stage when it is not stage 1")
    p.add_argument("--no-render", action="store_true", help="LVE only")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = C.load_config(args.config, seed=args.seed, out=args.out)
    set_deterministic(cfg.seed, cfg.deterministic)
    t0 = time.time()
    res = run_curriculum(cfg, cfg.out, tuple(args.stages), render=not args.no_render, init_checkpoint=args.init)
    keys = ["lve_mm", "psnr_db", "ssim", "feat_cos"]
    print("stage\tsplit\t" + "\t".join(keys) + "\ttrain_s\teval_s")
    for k, r in res.items():
        for split in ("test", "train"):
            if split in r:
                vals = "\t".join(f"{r[split][c]:.4f}" if c in r[split] else "-" for c in keys)
                print(f"{k}\t{split}\t{vals}\t{r['train_s']:.0f}\t{r['eval_s']:.0f}")
    if 2 in res and 3 in res and "feat_cos" in res[3]["test"]:
        for split in ("train", "test"):
            d2, d3 = 1 - res[2][split]["feat_cos"], 1 - res[3][split]["feat_cos"]
            print(f"{split}: lip-feature cosine distance {d2:.4f} -> {d3:.4f} ({100 * (d3 - d2) / d2:+.1f}%)")
        print(f"test LVE stage 3 vs 2: {100 * (res[3]['test']['lve_mm'] / res[2]['test']['lve_mm'] - 1):+.1f}%")
    print(f"total {(time.time() - t0) / 60:.1f} min")


if __name__ == "__main__":
    main()
