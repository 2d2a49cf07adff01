"""Small synth -> train -> enhance -> evaluate sweep over the four architectures.

Prints mean STOI (noisy and enhanced), MSE and high-band ratio per architecture
and SNR, plus the neighbour-correlation profile of the dense models' output
layers. Everything lands under --work-dir.
"""

import argparse
import csv
from pathlib import Path

from wavefcn.cli import main as cli

ARCHS = ["wave-dnn", "wave-cnn", "wave-fcn", "lps-dnn"]


def run(*argv):
    code = cli([str(a) for a in argv])
    if code:
        raise SystemExit(f"command failed ({code}): {' '.join(map(str, argv))}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--work-dir", default="compare_run")
    ap.add_argument("--utterances", type=int, default=20)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--noises", default="white,pink,engine")
    ap.add_argument("--snrs", default="-6,0,6")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    work = Path(args.work_dir)
    corpus = work / "corpus"
    run("synth", "--out-dir", corpus, "--num-utterances", args.utterances, "--noises", args.noises,
        f"--snrs={args.snrs}", "--test-utterances", max(2, args.utterances // 4), "--seed", args.seed)
    test = corpus / "test"

    for arch in ARCHS:
        run("train", "--corpus", corpus, "--arch", arch, "--out-dir", work / "models" / arch,
            "--epochs", args.epochs, "--seed", args.seed)
        run("enhance", "--checkpoint", work / "models" / arch / "model.wfcn", "--input", test / "noisy",
            "--out-dir", work / "enhanced" / arch)
        run("evaluate", "--clean", test / "clean", "--noisy", test / "noisy",
            "--enhanced", work / "enhanced" / arch, "--out", work / "reports" / f"{arch}.csv")

    print(f"\n{'arch':10s} {'snr':>6s} {'stoi_noisy':>11s} {'stoi_enh':>9s} {'mse':>10s} {'hiband':>8s}")
    for arch in ARCHS:
        with open(work / "reports" / f"{arch}_summary.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                print(f"{arch:10s} {row['snr_db']:>6s} {float(row['stoi_noisy']):11.4f} "
                      f"{float(row['stoi_enhanced']):9.4f} {float(row['mse']):10.6f} "
                      f"{float(row['hiband_enhanced']):8.4f}")

    print("\nneighbour correlation of output-layer rows (offsets 1, 2, 4, 8)")
    for arch in ("wave-dnn", "wave-cnn"):
        out = work / "correlation" / arch
        run("analyze", "correlation", "--checkpoint", work / "models" / arch / "model.wfcn", "--out-dir", out)
        with open(out / "neighbor_profile.csv", newline="") as fh:
            prof = {int(r["offset"]): float(r["mean_correlation"]) for r in csv.DictReader(fh)}
        print(f"{arch:10s} " + "  ".join(f"{prof[k]:+.3f}" for k in (1, 2, 4, 8)))


if __name__ == "__main__":
    main()
