"""Command-line entry point: gen, train, eval, synth, gradcheck."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import (
    FormatError,
    SynthConfig,
    atomic_write_bytes,
    gen_synthetic_corpus,
    read_corpus,
    read_features,
    synth_config_dict,
    write_corpus,
)
from .signal import (
    FeatureSequence,
    MfccConfig,
    ShapeError,
    Waveform,
    griffin_lim,
    invert_mfcc,
    read_wav,
    write_comparison_csv,
    write_wav,
)
from .train import (
    PAPER_TABLES,
    TrainConfig,
    decode_checkpoint,
    encode_checkpoint,
    evaluate,
    render_table,
    split_corpus,
    train_model,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TOLERANCE = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_DATA):
        super().__init__(message)
        self.code = code


def _default_seed() -> int:
    raw = os.environ.get("NVX_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"NVX_SEED must be an integer, got {raw!r}", EXIT_USAGE)


def _write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise CliError(f"no manifest.json in {directory}")
    return json.loads(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = SynthConfig(
        n_utterances=args.n,
        t_range=(args.t_min, args.t_max),
        eeg_dim=args.eeg_dim,
        mfcc_dim=args.mfcc,
        rate=args.rate,
        noise_std=args.noise,
        seed=args.seed,
    )
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".nvx-write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc}")
    corpus = gen_synthetic_corpus(cfg)
    write_corpus(out, corpus, meta={"synth_config": synth_config_dict(cfg)})
    print(f"wrote {len(corpus)} utterances to {out}")
    return EXIT_OK


def _train_config(args, manifest: dict) -> TrainConfig:
    approach = args.approach.replace("-", "_")
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        approach=approach,
        feature_set=args.feature_set,
        mfcc_dim=args.mfcc,
        rate=args.rate,
        model=args.model,
        reduce=not args.no_reduce,
        stage2_source="truth" if args.ground_truth_tvs else "predicted",
    )
    if manifest["mfcc_dim"] != cfg.mfcc_dim:
        raise CliError(f"data has {manifest['mfcc_dim']}-dim MFCC but --mfcc {cfg.mfcc_dim}")
    if int(manifest["rate_hz"]) != cfg.rate:
        raise CliError(f"data is sampled at {manifest['rate_hz']} Hz but --rate {cfg.rate}")
    if not cfg.reduce and manifest["eeg_dim"] != cfg.eeg_dim:
        raise CliError(
            f"--no-reduce needs {cfg.eeg_dim}-dim EEG for feature set {cfg.feature_set}, data has {manifest['eeg_dim']}"
        )
    return cfg


def cmd_train(args) -> int:
    manifest = _read_manifest(args.data)
    cfg = _train_config(args, manifest)
    corpus = read_corpus(args.data)
    split = split_corpus(corpus, cfg.seed)

    def log(entry):
        if args.verbose:
            print(json.dumps(entry), file=sys.stderr)

    pipeline, history = train_model(corpus, split, cfg, log=log)
    ckpt = Path(args.out)
    extra = {"split_seed": split.seed, "data_eeg_dim": manifest["eeg_dim"]}
    atomic_write_bytes(ckpt, encode_checkpoint(pipeline, extra))
    hist_path = Path(args.history) if args.history else ckpt.with_name(ckpt.name + ".history.json")
    doc = {"config": cfg.to_dict(), "stages": history}
    _write_text(hist_path, json.dumps(doc, indent=2) + "\n")
    heads = ", ".join(str(m.params.d_out) for m in pipeline.models)
    print(f"checkpoint {ckpt} ({len(pipeline.models)} model(s), heads {heads}); history {hist_path}")
    return EXIT_OK


def _load_ckpt(path):
    try:
        return decode_checkpoint(Path(path).read_bytes())
    except FileNotFoundError:
        raise CliError(f"checkpoint {path} not found")


def cmd_eval(args) -> int:
    corpus = read_corpus(args.data)
    reports, cells = [], {}
    for path in args.ckpt:
        pipeline, extra = _load_ckpt(path)
        cfg = pipeline.cfg
        eeg_d, _, mfcc_d = corpus.dims
        if eeg_d != pipeline.raw_eeg_dim or mfcc_d != cfg.mfcc_dim:
            raise CliError(
                f"checkpoint {path} expects EEG {pipeline.raw_eeg_dim} / MFCC {cfg.mfcc_dim}, data has {eeg_d} / {mfcc_d}"
            )
        split = split_corpus(corpus, extra.get("split_seed", cfg.seed))
        report = evaluate(pipeline, corpus, split)
        reports.append(report)
        cell = cells.setdefault(cfg.feature_set, {})
        cell["floor"] = report.baseline_mean_predictor_mcd
        cell["first" if cfg.approach == "direct" else "second"] = report.average_mcd
    if args.paper_ref and args.paper_ref not in PAPER_TABLES:
        raise CliError(f"unknown --paper-ref {args.paper_ref}; choose from {sorted(PAPER_TABLES)}", EXIT_USAGE)
    if len(reports) == 1:
        text = reports[0].to_json()
    else:
        text = json.dumps({"runs": [json.loads(r.to_json()) for r in reports]}, indent=2) + "\n"
    _write_text(args.report, text)
    table = render_table(cells, args.paper_ref)
    _write_text(Path(args.report).with_suffix(".txt"), table)
    print(table, end="")
    return EXIT_OK


def vocode(m: FeatureSequence, iterations: int = 60) -> Waveform:
    cfg = MfccConfig.for_regime(m.D, int(m.rate_hz))
    return griffin_lim(invert_mfcc(m, cfg), iterations)


def cmd_synth(args) -> int:
    pipeline, _ = _load_ckpt(args.ckpt)
    feats = read_features(args.input)
    if feats.kind != "eeg" or feats.D != pipeline.raw_eeg_dim:
        raise CliError(f"input must be {pipeline.raw_eeg_dim}-dim EEG, got {feats.kind} with D={feats.D}")
    if int(feats.rate_hz) != pipeline.cfg.rate:
        raise CliError(f"input is {feats.rate_hz} Hz, checkpoint was trained at {pipeline.cfg.rate} Hz")
    if args.compare and not (args.actual_wav or args.truth):
        raise CliError("--compare needs --actual-wav or --truth", EXIT_USAGE)
    predicted = vocode(pipeline.predict(feats), args.iterations)
    write_wav(args.out, predicted)
    if args.compare:
        if args.actual_wav:
            actual = read_wav(args.actual_wav)
        else:
            truth = read_features(args.truth)
            if truth.kind != "mfcc" or truth.T != feats.T:
                raise CliError("--truth must be an MFCC file aligned with --input")
            actual = vocode(truth, args.iterations)
        tmp = Path(args.compare).with_name(Path(args.compare).name + ".part")
        write_comparison_csv(tmp, actual, predicted)
        os.replace(tmp, args.compare)
    print(f"wrote {args.out} ({len(predicted)} samples at 16000 Hz)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.seed, perturb=args.perturb)
    ok = all(r["pass"] for r in results.values())
    print(json.dumps({"seed": args.seed, "ops": results, "ok": ok}, indent=2))
    if not ok:
        bad = [k for k, r in results.items() if not r["pass"]]
        print("gradient check failed for: " + ", ".join(bad), file=sys.stderr)
        return EXIT_TOLERANCE
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser(default_seed: int = 0) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nvx", description="EEG-to-speech attention regression pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic EEG/articulatory/MFCC corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--eeg-dim", type=int, choices=(30, 50, 93), default=30)
    g.add_argument("--mfcc", type=int, choices=(13, 128), default=13)
    g.add_argument("--rate", type=int, choices=(100, 32), default=100)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--t-min", type=int, default=20)
    g.add_argument("--t-max", type=int, default=40)
    g.add_argument("--seed", type=int, default=default_seed)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the direct or two-step pipeline")
    t.add_argument("--data", required=True)
    t.add_argument("--approach", choices=("direct", "two-step", "two_step"), default="direct")
    t.add_argument("--feature-set", type=int, choices=(1, 2, 3), default=1)
    t.add_argument("--mfcc", type=int, choices=(13, 128), default=13)
    t.add_argument("--rate", type=int, choices=(100, 32), default=100)
    t.add_argument("--model", choices=("attention", "baseline"), default="attention")
    t.add_argument("--epochs", type=int, default=2500)
    t.add_argument("--batch-size", type=int, default=100)
    t.add_argument("--no-reduce", action="store_true", help="skip KPCA; EEG must already have the set's dimension")
    t.add_argument("--ground-truth-tvs", action="store_true", help="train stage 2 on true tract variables (ablation)")
    t.add_argument("--seed", type=int, default=default_seed)
    t.add_argument("--out", required=True)
    t.add_argument("--history")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="test-set MCD report")
    e.add_argument("--ckpt", required=True, action="append", help="repeat to fill several table cells")
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--paper-ref", choices=sorted(PAPER_TABLES))
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="predict MFCC from EEG and vocode to a WAV")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--compare")
    s.add_argument("--actual-wav")
    s.add_argument("--truth", help="ground-truth MFCC file, vocoded for the comparison column")
    s.add_argument("--iterations", type=int, default=60)
    s.set_defaults(func=cmd_synth)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op")
    c.add_argument("--seed", type=int, default=default_seed)
    c.add_argument("--perturb", choices=("dense", "masked_mse", "gru_cell", "attention_step", "full_model"),
                   help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        parser = build_parser(_default_seed())
        args = parser.parse_args(argv)
    except CliError as exc:
        print(f"nvx: {exc}", file=sys.stderr)
        return exc.code
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"nvx: {exc}", file=sys.stderr)
        return exc.code
    except (FormatError, ShapeError, ValueError, KeyError, OSError, np.linalg.LinAlgError) as exc:
        print(f"nvx: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
