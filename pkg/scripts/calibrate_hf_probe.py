"""Seeded reference run of the high-frequency probe across all three kinds.

Prints one line per (kind, seed) and a summary of the directional checks.
The acceptance thresholds in tests/test_acceptance.py were fixed from this
run's output.
"""

import argparse
import time

from wavefcn.analysis import PROBE_EPOCHS, PROBE_KINDS, run_probe_set


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--epochs", type=int, default=PROBE_EPOCHS)
    ap.add_argument("--freq", type=float, default=6000.0)
    args = ap.parse_args()

    table = {k: [] for k in PROBE_KINDS}
    start = time.time()
    for seed in range(args.seeds):
        for rep in run_probe_set(PROBE_KINDS, args.freq, args.epochs, seed):
            table[rep.kind].append(rep)
            print(f"seed {seed} {rep.kind:14s} ratio {rep.band_ratio:.5f} mse {rep.final_mse:.5f} "
                  f"loss {rep.train_loss[0]:.4f}->{rep.train_loss[-1]:.5f}", flush=True)
    fcn = [r.band_ratio for r in table["wave-fcn"]]
    dnn = [r.band_ratio for r in table["wave-dnn-l512"]]
    l1 = [r.band_ratio for r in table["wave-dnn-l1"]]
    print(f"fcn min ratio {min(fcn):.5f}")
    print(f"dnn-l512 < fcn on {sum(d < f for d, f in zip(dnn, fcn))}/{len(fcn)} seeds")
    print(f"dnn-l1 within 2x of fcn on {sum(f / 2 <= x <= 2 * f for x, f in zip(l1, fcn))}/{len(fcn)} seeds")
    print(f"elapsed {time.time() - start:.0f}s")


if __name__ == "__main__":
    main()
