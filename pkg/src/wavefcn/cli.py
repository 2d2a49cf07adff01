"""Command-line interface: synth, train, enhance, evaluate, analyze, info.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Failures print a single ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, metrics, models, signal, spectral
from .models import Arch, ModelSpec, TrainingConfig

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
ARCH_NAMES = [a.value for a in Arch if a is not Arch.IDENTITY]
CHECKPOINT_NAME = "model.wfcn"
SYNTH_PEAK = 0.99


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _noises(text: str) -> list[signal.NoiseKind]:
    return [signal.NoiseKind.parse(t) for t in text.split(",") if t.strip()]


def _snr_dir(snr: float) -> str:
    return f"{snr:g}"


def write_run_config(out_dir, command: str, params: dict) -> Path:
    """Plain key=value record of every resolved parameter."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"command={command}"]
    for key in sorted(params):
        value = params[key]
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    path = out_dir / "run_config.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def read_run_config(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key] = value
    return out


def _params(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "command", "analysis")}


# ------------------------------------------------------------------------ synth


def _synth_split(root: Path, ids: list[int], noises, snrs, args) -> list[dict]:
    rate = args.sample_rate
    length = int(round(args.duration * rate))
    (root / "clean").mkdir(parents=True, exist_ok=True)
    rows = []
    for uid in ids:
        name = f"utt{uid:04d}.wav"
        clean = signal.gen_speech_like(length, rate, args.seed * 100_003 + uid)
        noise_set = [signal.gen_signal(kind, length, rate, args.seed * 100_003 + uid * 101 + ni + 1)
                     for ni, kind in enumerate(noises)]
        # one gain per utterance keeps its loudest mixture clear of clipping
        peak = max(np.max(np.abs(signal.mix_at_snr(clean, noise, snr)[0].samples))
                   for noise in noise_set for snr in snrs)
        if peak > SYNTH_PEAK:
            clean = clean.with_samples(clean.samples * (SYNTH_PEAK / peak))
        signal.write_wav(root / "clean" / name, clean)
        # mixing uses the quantized clean so the stored pair hits the target SNR
        clean = signal.read_wav(root / "clean" / name)
        for kind, noise in zip(noises, noise_set):
            for snr in snrs:
                noisy, _ = signal.mix_at_snr(clean, noise, snr)
                d = root / "noisy" / kind.label / _snr_dir(snr)
                d.mkdir(parents=True, exist_ok=True)
                signal.write_wav(d / name, noisy)
                rows.append({"file": name, "noise": kind.label, "snr_db": _snr_dir(snr),
                             "clean_path": f"clean/{name}",
                             "noisy_path": f"noisy/{kind.label}/{_snr_dir(snr)}/{name}"})
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["file", "noise", "snr_db", "clean_path", "noisy_path"])
        w.writeheader()
        w.writerows(rows)
    return rows


def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    noises, snrs = _noises(args.noises), _floats(args.snrs)
    if args.num_utterances < 1:
        raise UsageError("--num-utterances must be >= 1")
    rows = _synth_split(out, list(range(args.num_utterances)), noises, snrs, args)
    test_rows = []
    if args.test_noises or args.test_snrs or args.test_utterances:
        test_noises = _noises(args.test_noises) if args.test_noises else noises
        test_snrs = _floats(args.test_snrs) if args.test_snrs else snrs
        n_test = args.test_utterances or args.num_utterances
        ids = list(range(args.num_utterances, args.num_utterances + n_test))
        test_rows = _synth_split(out / "test", ids, test_noises, test_snrs, args)
    write_run_config(out, "synth", _params(args))
    print(f"wrote {len(rows)} noisy training files" + (f", {len(test_rows)} test files" if test_rows else "")
          + f" to {out}")
    return 0


# ------------------------------------------------------------------------ train


def read_manifest(corpus: Path) -> list[dict]:
    path = corpus / "manifest.csv"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.csv in {corpus}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"corpus {corpus} is empty")
    return rows


def training_pairs(corpus: Path, arch: Arch, shift: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack (noisy, clean) frames or LPS vectors from every manifest row."""
    xs, ys = [], []
    for row in read_manifest(corpus):
        clean = signal.read_wav(corpus / row["clean_path"])
        noisy = signal.read_wav(corpus / row["noisy_path"])
        if arch is Arch.LPS_DNN:
            if len(clean) < spectral.N_FFT:
                continue
            xs.append(spectral.lps(spectral.stft(noisy)).values)
            ys.append(spectral.lps(spectral.stft(clean)).values)
        else:
            xs.append(signal.frame(noisy, models.FRAME_LEN, shift).frames)
            ys.append(signal.frame(clean, models.FRAME_LEN, shift).frames)
    if not xs or sum(x.shape[0] for x in xs) == 0:
        raise ValueError(f"corpus {corpus} yields no training frames")
    return np.concatenate(xs), np.concatenate(ys)


def cmd_train(args) -> int:
    arch = Arch(args.arch)
    corpus, out = Path(args.corpus), Path(args.out_dir)
    config = TrainingConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                            seed=args.seed, shuffle=not args.no_shuffle,
                            validation_fraction=args.val_fraction)
    model = models.build(ModelSpec(arch, seed=args.seed))
    noisy, clean = training_pairs(corpus, arch, args.shift)
    history = models.train(model, noisy, clean, config)
    out.mkdir(parents=True, exist_ok=True)
    models.save_model(model, out / CHECKPOINT_NAME)
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for i, (tr, va) in enumerate(zip(history.train, history.validation), 1):
            w.writerow([i, repr(tr), repr(va)])
    write_run_config(out, "train", {**_params(args), "frames": noisy.shape[0],
                                    "param_count": models.param_count(model)})
    last = f", final loss {history.train[-1]:.6g}" if history.train else ""
    print(f"trained {arch.value} on {noisy.shape[0]} frames for {args.epochs} epochs{last}")
    return 0


# ---------------------------------------------------------------------- enhance


def _wav_inputs(path: Path) -> list[tuple[Path, Path]]:
    if path.is_file():
        return [(path, Path(path.name))]
    if path.is_dir():
        return [(p, p.relative_to(path)) for p in sorted(path.rglob("*.wav"))]
    raise FileNotFoundError(f"no such file or directory: {path}")


def cmd_enhance(args) -> int:
    model = models.load_model(args.checkpoint)
    if args.filter_mode and model.arch not in (Arch.WAVE_DNN, Arch.IDENTITY):
        raise UsageError(f"--filter-mode needs a wave-dnn checkpoint, got {model.spec.tag}")
    out = Path(args.out_dir)
    done = skipped = 0
    for src, rel in _wav_inputs(Path(args.input)):
        wave = signal.read_wav(src)
        need = spectral.N_FFT if model.arch is Arch.LPS_DNN else model.spec.frame_len
        if len(wave) < need:
            print(f"warning: skipping {src}: {len(wave)} samples, needs {need}", file=sys.stderr)
            skipped += 1
            continue
        if model.arch is Arch.LPS_DNN:
            enhanced = models.enhance_lps(model, wave)
        elif args.filter_mode:
            enhanced = models.filter_mode_apply(model, wave)
        else:
            enhanced = models.enhance_waveform(model, wave, args.shift)
        if not np.all(np.isfinite(enhanced.samples)):
            raise FloatingPointError(f"non-finite output for {src}")
        dest = out / rel
        dest.parent.mkdir(parents=True, exist_ok=True)
        signal.write_wav(dest, enhanced)
        done += 1
    write_run_config(out, "enhance", {**_params(args), "architecture": model.spec.tag})
    print(f"enhanced {done} file(s), skipped {skipped}")
    return 0


# --------------------------------------------------------------------- evaluate


def _print_summary(report: metrics.EvaluationReport) -> None:
    cols = ["stoi_noisy", "stoi_enhanced", "mse", "output_snr_db", "hiband_enhanced"]
    print("snr_db".rjust(8) + "".join(c.rjust(16) for c in cols))
    rows = [(_fmt_snr(s), v) for s, v in report.per_snr.items()] + [("avg", report.overall)]
    for label, vals in rows:
        print(label.rjust(8) + "".join(f"{vals[c]:16.4f}" for c in cols))


def _fmt_snr(s: float) -> str:
    return f"{s:g}"


def cmd_evaluate(args) -> int:
    report = metrics.evaluate(args.clean, args.noisy, args.enhanced, pesq_csv=args.pesq_csv,
                              cutoff_hz=args.cutoff)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_report_csv(report, out)
    metrics.write_summary_csv(report, out.with_name(out.stem + "_summary.csv"))
    write_run_config(out.parent, "evaluate", _params(args))
    if report.records:
        _print_summary(report)
    if report.missing:
        for m in report.missing:
            print(f"missing: {m}", file=sys.stderr)
        raise ValueError(f"{len(report.missing)} counterpart file(s) missing")
    if not report.records:
        raise ValueError(f"no WAV files found under {args.noisy}")
    return 0


# ---------------------------------------------------------------------- analyze


def _model_from_args(args) -> models.Model:
    if args.checkpoint:
        return models.load_model(args.checkpoint)
    if args.arch:
        return models.build(ModelSpec(Arch(args.arch), seed=args.seed))
    raise UsageError("give --checkpoint or --arch")


def cmd_analyze_correlation(args) -> int:
    model = _model_from_args(args)
    if model.arch in (Arch.WAVE_FCN, Arch.IDENTITY):
        raise UsageError(f"weight correlation is defined for a fully connected output layer; "
                         f"{model.spec.tag} has none")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corr = analysis.weight_correlation(models.final_dense(model).weight.values)
    analysis.correlation_exports(corr, out)
    max_off = min(args.max_offset, corr.size - 1)
    with open(out / "neighbor_profile.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["offset", "mean_correlation"])
        for off in range(max_off + 1):
            w.writerow([off, repr(analysis.neighbor_profile(corr, off))])
    write_run_config(out, "analyze correlation", {**_params(args), "architecture": model.spec.tag})
    print(f"{model.spec.tag}: {corr.size}x{corr.size} correlation, "
          f"neighbor (offset 1) mean {analysis.neighbor_profile(corr, 1):.4f}")
    if corr.degenerate_rows:
        print(f"degenerate rows: {list(corr.degenerate_rows)}", file=sys.stderr)
    return 0


def cmd_analyze_receptive_field(args) -> int:
    model = _model_from_args(args)
    lo, hi = analysis.receptive_field(model, args.index)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = hi - lo + 1 if lo >= 0 else 0
    text = f"architecture={model.spec.tag}\nindex={args.index}\nmin={lo}\nmax={hi}\nwidth={width}\n"
    (out / "receptive_field.txt").write_text(text)
    write_run_config(out, "analyze receptive-field", {**_params(args), "architecture": model.spec.tag})
    print(f"{model.spec.tag} output {args.index}: inputs [{lo}, {hi}], width {width}")
    return 0


def cmd_analyze_hf_probe(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    for k in kinds:
        if k not in analysis.PROBE_KINDS:
            raise UsageError(f"unknown probe kind {k!r}; expected {', '.join(analysis.PROBE_KINDS)}")
    rows = []
    for seed in _ints(args.seeds):
        for rep in analysis.run_probe_set(kinds, args.freq, args.epochs, seed):
            rows.append(rep)
            analysis.write_probe_spectra(rep, out / f"spectra_{rep.kind}_seed{seed}.csv")
            print(f"{rep.kind:14s} seed {seed}: band ratio {rep.band_ratio:.4f}, mse {rep.final_mse:.6g}")
    with open(out / "hf_probe.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "seed", "train_freq_hz", "epochs", "cutoff_hz", "final_mse", "band_ratio"])
        for r in rows:
            w.writerow([r.kind, r.seed, f"{r.train_freq_hz:g}", r.epochs, f"{r.cutoff_hz:g}",
                        repr(r.final_mse), repr(r.band_ratio)])
    write_run_config(out, "analyze hf-probe", _params(args))
    return 0


def cmd_analyze_spectrogram(args) -> int:
    wave = signal.read_wav(args.input)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    formats = ["csv", "pgm"] if args.format == "both" else [args.format]
    for fmt in formats:
        spectral.spectrogram_export(wave, out / f"{stem}.{fmt}", fmt)
    write_run_config(out, "analyze spectrogram", _params(args))
    print(f"wrote {', '.join(f'{stem}.{f}' for f in formats)} to {out}")
    return 0


# ------------------------------------------------------------------------- info


def cmd_info(args) -> int:
    counts = {a: models.param_count(models.build(ModelSpec(Arch(a)))) for a in ARCH_NAMES}
    for a, c in counts.items():
        print(f"{a:10s} {c:>12,d}")
    fcn = counts["wave-fcn"]
    print(f"wave-fcn / wave-dnn = {100 * fcn / counts['wave-dnn']:.3f}%")
    print(f"wave-fcn / wave-cnn = {100 * fcn / counts['wave-cnn']:.3f}%")
    if args.out_dir:
        write_run_config(args.out_dir, "info", {**_params(args), **{f"params_{a}": c for a, c in counts.items()}})
    return 0


# ------------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wavefcn", description="Raw-waveform speech enhancement lab.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="synthesize a clean/noisy corpus")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--num-utterances", type=int, default=20)
    s.add_argument("--duration", type=float, default=1.0, help="seconds per utterance")
    s.add_argument("--sample-rate", type=int, default=16000)
    s.add_argument("--noises", default="white,pink,engine")
    s.add_argument("--snrs", default="-12,-6,0,6,12")
    s.add_argument("--test-noises", default="", help="noise kinds for a mismatched test split")
    s.add_argument("--test-snrs", default="", help="SNR ladder for a mismatched test split")
    s.add_argument("--test-utterances", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a corpus")
    t.add_argument("--corpus", required=True)
    t.add_argument("--arch", required=True, choices=ARCH_NAMES)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--val-fraction", type=float, default=0.1)
    t.add_argument("--shift", type=int, default=models.FRAME_LEN, help="training frame shift L")
    t.add_argument("--no-shuffle", action="store_true")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", help="enhance WAV files with a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--input", required=True, help="WAV file or directory")
    e.add_argument("--out-dir", required=True)
    e.add_argument("--shift", type=int, default=models.FRAME_LEN, help="window shift L")
    e.add_argument("--filter-mode", action="store_true", help="slide a wave-dnn one sample at a time")
    e.set_defaults(func=cmd_enhance)

    v = sub.add_parser("evaluate", help="score enhanced files against clean references")
    v.add_argument("--clean", required=True)
    v.add_argument("--noisy", required=True)
    v.add_argument("--enhanced", required=True)
    v.add_argument("--out", required=True, help="report CSV path")
    v.add_argument("--pesq-csv", default=None, help="external PESQ scores (file,pesq)")
    v.add_argument("--cutoff", type=float, default=metrics.HIBAND_CUTOFF_HZ)
    v.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("analyze", help="diagnostics")
    asub = a.add_subparsers(dest="analysis", required=True, parser_class=_Parser)

    def model_args(q):
        q.add_argument("--checkpoint", default=None)
        q.add_argument("--arch", default=None, choices=ARCH_NAMES)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--out-dir", required=True)

    c = asub.add_parser("correlation", help="final-layer weight correlation")
    model_args(c)
    c.add_argument("--max-offset", type=int, default=64)
    c.set_defaults(func=cmd_analyze_correlation)

    r = asub.add_parser("receptive-field", help="measure the input range of one output")
    model_args(r)
    r.add_argument("--index", type=int, default=256)
    r.set_defaults(func=cmd_analyze_receptive_field)

    h = asub.add_parser("hf-probe", help="high-frequency tone reconstruction probe")
    h.add_argument("--kinds", default=",".join(analysis.PROBE_KINDS))
    h.add_argument("--freq", type=float, default=6000.0)
    h.add_argument("--epochs", type=int, default=analysis.PROBE_EPOCHS)
    h.add_argument("--seeds", default="0")
    h.add_argument("--out-dir", required=True)
    h.set_defaults(func=cmd_analyze_hf_probe)

    g = asub.add_parser("spectrogram", help="export a dB spectrogram")
    g.add_argument("--input", required=True)
    g.add_argument("--out-dir", required=True)
    g.add_argument("--format", choices=["csv", "pgm", "both"], default="both")
    g.set_defaults(func=cmd_analyze_spectrogram)

    i = sub.add_parser("info", help="parameter counts and ratios")
    i.add_argument("--out-dir", default=None)
    i.set_defaults(func=cmd_info)
    return p


def _limit_threads():
    threads = int(os.environ.get("WAVEFCN_THREADS", "1"))
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(limits=max(threads, 1))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        with _limit_threads() or _nullcontext():
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_DATA


class _nullcontext:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


if __name__ == "__main__":
    sys.exit(main())
