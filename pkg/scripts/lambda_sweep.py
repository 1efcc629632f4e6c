"""Stage-3 fine-tuning from one stage-2 checkpoint at several lambda_read values.

    python scripts/lambda_sweep.py --stage2 runs/desk/checkpoints/stage2_final.npz --lambdas 0 1e-6 1e-5 1e-4
"""
import argparse
import json
from pathlib import Path

from lipsplat import config as C
from lipsplat.cli import set_deterministic
from lipsplat.curriculum import run_curriculum


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--out", default="runs/lambda_sweep")
    p.add_argument("--stage2", required=True, help="stage-2 checkpoint every run starts from")
    p.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 1e-6, 1e-5, 1e-4])
    p.add_argument("--epochs", type=int, help="override the preset's stage-3 epochs")
    args = p.parse_args()

    rows = []
    for lam in args.lambdas:
        over = {"lambda_read": lam}
        if args.epochs is not None:
            over["epochs"] = args.epochs
        cfg = C.load_config(args.config)
        cfg.stages = {**cfg.stages, 3: {**cfg.stages.get(3, {}), **over}}
        set_deterministic(cfg.seed, cfg.deterministic)
        out = Path(args.out) / f"lambda_{lam:g}"
        r = run_curriculum(cfg, out, stages=(3,), init_checkpoint=args.stage2)[3]
        rows.append(dict(lambda_read=lam, **r))
        te, tr = r["test"], r["train"]
        print(f"lambda {lam:g}: test LVE {te['lve_mm']:.3f} mm, feat cos test {te['feat_cos']:.4f} / "
              f"train {tr['feat_cos']:.4f}, PSNR {te['psnr_db']:.2f}, SSIM {te['ssim']:.4f}", flush=True)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "sweep.json").write_text(json.dumps(rows, indent=1))


if __name__ == "__main__":
    main()
