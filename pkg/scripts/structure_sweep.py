"""Compare Conv-Adapter structures on the desk setup at one lambda.

    python scripts/structure_sweep.py --cache runs/cache --lambda-index 1

Uses the pretrained model of the desk experiment (trained if not cached),
adapts it once per structure and reports held-out loss, bpp and PSNR.
"""

import argparse
import json
from dataclasses import replace

import numpy as np

from liclab import codec as C
from liclab.adapters import Structure, adapter_param_report
from liclab.datagen import generate
from liclab.experiment import ExperimentConfig, pretrain_models
from liclab.trainer import adapt, evaluate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cache", help="directory for pretrained models")
    ap.add_argument("--lambda-index", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="optional JSON output path")
    args = ap.parse_args()

    cfg = replace(ExperimentConfig(), seed=args.seed)
    cfg = replace(cfg, lambdas=cfg.lambdas[: args.lambda_index + 1])
    model = pretrain_models(cfg, generate(cfg.source_spec(), cfg.source_count), args.cache)[-1]
    lmbda = cfg.lambdas[-1]
    target = generate(cfg.target_train_spec(), cfg.n_samples)
    test = generate(cfg.target_test_spec(), cfg.test_count)

    frozen = evaluate(model, None, test, lmbda)
    rows = [{"structure": "frozen", "loss": frozen.loss, "bpp": frozen.bpp, "psnr": C.psnr(frozen.mse), "share": 0.0}]
    for structure in Structure:
        aset, _ = adapt(model, target, cfg.n_samples, lmbda, cfg.seed, replace(cfg.adapt, structure=structure))
        terms = evaluate(model, aset, test, lmbda)
        share = adapter_param_report(aset, model).transmit_proportion
        rows.append({"structure": structure.name, "loss": terms.loss, "bpp": terms.bpp, "psnr": C.psnr(terms.mse),
                     "share": share})

    print(f"lambda {lmbda:g}, {len(test)} held-out images")
    print(f"{'structure':<22}{'loss':>10}{'bpp':>9}{'PSNR':>8}{'transmit %':>12}")
    for r in rows:
        print(f"{r['structure']:<22}{r['loss']:>10.4f}{r['bpp']:>9.4f}{r['psnr']:>8.2f}{100 * r['share']:>12.3f}")
    best = min(rows[1:], key=lambda r: r["loss"])
    print(f"lowest held-out loss: {best['structure']} ({np.round(best['loss'], 4)})")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"lambda": lmbda, "rows": rows}, fh, indent=2)


if __name__ == "__main__":
    main()
