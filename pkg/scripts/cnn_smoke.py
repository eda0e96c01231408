"""A few rounds of the CNN on image-shaped synthetic data, full vs dense_0 frozen.

Reports per-round time and the peak simulated client allocation.
"""

import argparse

from fedpt.config import load_config
from fedpt.experiment import run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/emnist_smoke.toml")
    ap.add_argument("--rounds", type=int)
    args = ap.parse_args()
    cfg = load_config(args.config)
    if args.rounds:
        cfg = cfg.replace(rounds=args.rounds)
    for freeze in ((), ("dense_0",)):
        res = run_experiment(cfg.replace(freeze=list(freeze)))
        peak = max(r.peak_alloc_bytes for r in res.rows)
        print(f"freeze {list(freeze)!s:<12} trainable {100 * res.trainable_fraction:6.2f}%  "
              f"acc {100 * res.final_accuracy:5.1f}%  {res.mean_round_ms():8.1f} ms/round  peak {peak / 2**20:.1f} MiB")


if __name__ == "__main__":
    main()
