"""Run the desk-scale adaptation experiment and write its artifacts.

    python scripts/desk_experiment.py --out runs/desk --cache runs/cache

Writes frozen/adapted RD curves (CSV), the BD-rate report, per-lambda energy
compaction numbers, channel statistics, the pretrained models and adapters.
"""

import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

from liclab import analysis as A
from liclab.adapters import adapter_param_report, save_adapters
from liclab.experiment import ExperimentConfig, run_experiment
from liclab.trainer import write_history


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--cache", help="directory for pretrained models, reused across runs")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--pretrain-steps", type=int, default=2000)
    ap.add_argument("--n-samples", type=int, default=25)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    cfg = replace(ExperimentConfig(), seed=args.seed, pretrain_steps=args.pretrain_steps, n_samples=args.n_samples)
    result = run_experiment(cfg, cache_dir=args.cache, strict=False)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    A.write_rd_csv(out / "rd_frozen.csv", result.frozen)
    A.write_rd_csv(out / "rd_adapted.csv", result.adapted)
    A.write_bd_report(
        out / "bd_rate.csv",
        [{"anchor": "frozen", "test": "adapted", "bd_rate_percent": f"{result.bd_rate:.6f}"}],
    )
    for lmbda, model, aset, report, fs, ads in zip(
        cfg.lambdas, result.models, result.adapters, result.reports, result.frozen_stats, result.adapted_stats
    ):
        tag = f"lambda{lmbda:g}"
        model.save(out / f"model_{tag}.licm")
        (out / f"adapters_{tag}.lica").write_bytes(save_adapters(aset))
        write_history(out / f"history_{tag}.csv", report.history)
        A.write_channel_stats_csv(out / f"channels_frozen_{tag}.csv", fs)
        A.write_channel_stats_csv(out / f"channels_adapted_{tag}.csv", ads)

    summary = result.summary()
    summary["adapters"] = [r.summary() for r in result.reports]
    budget = adapter_param_report(result.adapters[0], result.models[0])
    summary["transmit_proportion"] = budget.transmit_proportion
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=str))

    print(f"BD-rate adapted vs frozen: {result.bd_rate:.2f}%" + (f" ({result.bd_error})" if result.bd_error else ""))
    for e in result.energy:
        print(f"lambda {e.lmbda:g}: bottom-half energy {e.frozen_bottom_half:.3f} -> {e.adapted_bottom_half:.3f}")
    print(f"artifacts in {out}")


if __name__ == "__main__":
    main()
