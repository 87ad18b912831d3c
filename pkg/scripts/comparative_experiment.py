"""Train persistence/baseline/Diff/CorrDiff/LDM on the 64x64 blob world and compare 18-step rollouts.

    python3 scripts/comparative_experiment.py --out results/comparative.json
"""

import argparse
import json
import logging
from dataclasses import asdict
from pathlib import Path

import torch

from edmcast.experiment import ComparativeConfig, format_report, run_comparative
from edmcast.sampler import SampleConfig


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", type=Path, default=Path("results/comparative.json"))
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=8)
    p.add_argument("--diff-epochs", type=int, default=6)
    p.add_argument("--num-steps", type=int, default=18)
    p.add_argument("--members", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()
    torch.set_num_threads(args.threads)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = ComparativeConfig(n_train=args.n_train, n_test=args.n_test, diff_epochs=args.diff_epochs,
                            members=args.members, seed=args.seed, sample=SampleConfig(num_steps=args.num_steps))
    rep = run_comparative(cfg)
    print(format_report(rep))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    payload = asdict(rep)
    payload["config"] = asdict(cfg)
    args.out.write_text(json.dumps(payload, indent=2, default=str), encoding="utf-8")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
