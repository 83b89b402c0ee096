"""Train phgcn / pgcn / nogcn separately on several seeds and print seed-averaged metrics.

    python3 scripts/run_ablation.py configs/default.json --seeds 5 --out ablation.json
"""

import argparse
import json
from dataclasses import replace

import numpy as np

from phgcn.cli import run_training
from phgcn.config import load_config
from phgcn.dataset import generate_synthetic
from phgcn.retrieval import evaluate

VARIANTS = ("phgcn", "pgcn", "nogcn")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("config")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out")
    args = ap.parse_args()

    base = load_config(args.config)
    runs = []
    for seed in range(args.seeds):
        cfg = replace(base, seed=seed)
        ds = generate_synthetic(cfg.synth_config())
        for variant in VARIANTS:
            vcfg = replace(cfg, variant=variant)
            params, _, _ = run_training(vcfg, ds)
            rep = evaluate(params, ds, vcfg.spec, variant, vcfg.delta, seed=seed, config_digest=vcfg.digest())
            runs.append(rep.to_dict())
            print(f"seed {seed} {variant:6s} mAP {rep.map:.4f} CMC@1 {rep.cmc['1']:.4f}")

    summary = {}
    for variant in VARIANTS:
        mine = [r for r in runs if r["variant"] == variant]
        summary[variant] = {"map": float(np.mean([r["map"] for r in mine])),
                            "cmc1": float(np.mean([r["cmc"]["1"] for r in mine]))}
        print(f"mean   {variant:6s} mAP {summary[variant]['map']:.4f} CMC@1 {summary[variant]['cmc1']:.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"summary": summary, "runs": runs}, fh, indent=2)
            fh.write("\n")


if __name__ == "__main__":
    main()
