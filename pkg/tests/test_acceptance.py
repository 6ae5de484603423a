"""Acceptance criteria, one check per line.

Run with pytest (lines appear in the terminal summary) or directly:
``python3 tests/test_acceptance.py [--skip-slow]``.
"""

import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE_LINES  # noqa: E402
from oracle_values import ROUNDTRIP_MCD_THRESHOLD_13, ROUNDTRIP_MCD_THRESHOLD_128  # noqa: E402

from nvx.cli import main as cli_main  # noqa: E402
from nvx.data import (  # noqa: E402
    BadMagicError, ChecksumError, SynthConfig, TruncatedError, VersionError,
    decode_features, encode_features, gen_synthetic_corpus, speech_like_audio,
)
from nvx.gradcheck import TOLERANCES, run_suite  # noqa: E402
from nvx.model import forward, init_attention_model, ModelParams  # noqa: E402
from nvx.reduce import FEATURE_SET_DIMS, kpca_fit, kpca_transform  # noqa: E402
from nvx.signal import (  # noqa: E402
    FeatureSequence, MfccConfig, NormStats, Spectrogram, Waveform, design_bandpass, design_notch,
    extract_mfcc, griffin_lim, iir_filter, invert_mfcc, mcd, read_wav, stft_magnitude, write_wav,
)
from nvx.tensorgrad import make_rng  # noqa: E402
from nvx.train import (  # noqa: E402
    TrainConfig, decode_checkpoint, encode_checkpoint, evaluate, fit_network, split_corpus, train_model,
)

E2E_EPOCHS = 300
E2E_T_RANGE = (16, 24)


def record(name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------


def test_gradient_correctness():
    t0 = time.perf_counter()
    res = run_suite(seed=0)
    elapsed = time.perf_counter() - t0
    ok = all(r["max_rel_error"] <= TOLERANCES[k] for k, r in res.items()) and elapsed < 60
    detail = ", ".join(f"{k} {r['max_rel_error']:.1e}<={TOLERANCES[k]:.0e}" for k, r in res.items())
    record("gradient correctness", ok, f"{detail}; {elapsed:.1f}s")


def test_attention_normalization():
    worst, lo, hi = 0.0, 1.0, 0.0
    for draw in range(1000):
        rng = np.random.default_rng(draw)
        T = int(rng.integers(1, 20))
        m = init_attention_model(5, 6, draw, enc_hidden=8, dec_hidden=6)
        t = {k: v + rng.standard_normal(v.shape) * rng.choice([0.1, 1.0, 5.0]) for k, v in m.tensors().items()}
        m = ModelParams.from_tensors(t)
        a = forward(m, rng.standard_normal((T, 5)) * rng.choice([0.1, 1.0, 10.0]),
                    train_mode=bool(draw % 2), rng=make_rng(draw)).attention.weights
        worst = max(worst, float(np.max(np.abs(a.sum(axis=1) - 1))))
        lo, hi = min(lo, float(a.min())), max(hi, float(a.max()))
    ok = worst <= 1e-9 and lo >= 0 and hi <= 1
    record("attention normalization", ok, f"1000 draws, max |row sum - 1| = {worst:.1e}, entries in [{lo:.3g}, {hi:.3g}]")


def test_architecture_conformance():
    t = init_attention_model(30, 13, 0).tensors()
    shapes = {
        "encoder.W_z": (256, 30), "encoder.U_z": (256, 256), "attention.W": (256, 128),
        "decoder.W_z": (128, 256), "decoder.U_z": (128, 128), "head.W": (13, 128), "head.b": (13,),
    }
    ok = all(t[k].shape == v for k, v in shapes.items())
    stage1 = init_attention_model(30, 6, 0).head_W.shape
    ok = ok and stage1 == (6, 128)
    record("architecture conformance", ok,
           f"encoder 30->256, attention W {t['attention.W'].shape}, decoder 256->128, head 128->13, stage-1 head {stage1[0]}")


def test_overfit_probe():
    c = gen_synthetic_corpus(SynthConfig(n_utterances=5, t_range=(20, 20), eeg_dim=30, seed=11))
    ids = c.ids

    cfg = TrainConfig(epochs=2500, batch_size=100)
    xs = [c.get(i).eeg.data for i in ids]
    ys = [c.get(i).mfcc.data for i in ids]
    t0 = time.perf_counter()
    _, hist = fit_network(cfg, xs, ys, [], [], seed=0)
    elapsed = time.perf_counter() - t0
    first, last = hist[0]["train_loss"], hist[-1]["train_loss"]
    ratio = last / first
    record("overfit probe", ratio <= 0.05 and elapsed < 600,
           f"5 utts T=20 30->13, 2500 epochs: loss {first:.4f} -> {last:.2e} (ratio {ratio:.2e} <= 0.05), {elapsed:.0f}s")


def _e2e_config(eeg_dim):
    corpus = gen_synthetic_corpus(SynthConfig(n_utterances=200, t_range=E2E_T_RANGE, eeg_dim=eeg_dim, noise_std=0.05, seed=0))
    split = split_corpus(corpus, 0)
    fs = {v: k for k, v in FEATURE_SET_DIMS.items()}[eeg_dim]
    base = TrainConfig(epochs=E2E_EPOCHS, feature_set=fs, reduce=False, seed=0)
    out = {}
    for name, cfg in (
        ("direct", base),
        ("two_step", TrainConfig(**{**base.to_dict(), "approach": "two_step"})),
        ("baseline", TrainConfig(**{**base.to_dict(), "model": "baseline"})),
    ):
        t0 = time.perf_counter()
        pipe, _ = train_model(corpus, split, cfg)
        rep = evaluate(pipe, corpus, split)
        out[name] = rep.average_mcd
        out["floor"] = rep.baseline_mean_predictor_mcd
        out[name + "_s"] = time.perf_counter() - t0
    return out


@pytest.mark.slow
def test_end_to_end_learning():
    rows, below, wins = [], True, 0
    for d in (30, 50, 93):
        r = _e2e_config(d)
        below = below and r["direct"] < r["floor"] and r["two_step"] < r["floor"]
        wins += r["direct"] <= r["baseline"]
        rows.append(
            f"eeg {d}: floor {r['floor']:.2f} direct {r['direct']:.2f} two-step {r['two_step']:.2f} "
            f"baseline {r['baseline']:.2f} ({r['direct_s'] + r['two_step_s'] + r['baseline_s']:.0f}s)"
        )
    ok = below and wins >= 2
    record("end-to-end learning", ok,
           f"both pipelines below floor: {below}; attention <= baseline on {wins}/3 | " + " | ".join(rows))


def test_mcd_oracle():
    x = np.random.default_rng(0).standard_normal((20, 13))
    same = mcd(FeatureSequence(x, 100, "mfcc"), FeatureSequence(x, 100, "mfcc"))
    worst = 0.0
    for d, delta in ((1, 0.3), (5, -2.0), (12, 7.5)):
        y = x.copy()
        y[:, d] += delta
        got = mcd(FeatureSequence(y, 100, "mfcc"), FeatureSequence(x, 100, "mfcc"))
        worst = max(worst, abs(got - 10 / math.log(10) * math.sqrt(2) * abs(delta)))
    record("MCD oracle", same == 0.0 and worst <= 1e-12, f"identical -> {same}, offset error {worst:.1e} <= 1e-12")


def test_kpca_oracle():
    worst = 0.0
    for seed in range(20):
        X = np.random.default_rng(seed).standard_normal((20, 5))
        Xc = X - X.mean(0)
        vals, vecs = np.linalg.eigh(Xc.T @ Xc)
        pca = Xc @ vecs[:, ::-1]
        k = kpca_transform(kpca_fit(X, "linear", 5), X)
        worst = max(worst, float(np.max(np.abs(k - pca * np.sign(np.sum(k * pca, axis=0))))))
    X = np.random.default_rng(0).standard_normal((200, 93))
    counts = [kpca_fit(X, None, FEATURE_SET_DIMS[fs]).n_components for fs in (1, 2, 3)]
    record("KPCA oracle", worst <= 1e-8 and counts == [30, 50, 93],
           f"linear KPCA vs PCA max diff {worst:.1e} <= 1e-8 over 20 matrices; components {counts}")


def test_vocoder_chain():
    cfg = MfccConfig.for_regime(13, 100)
    t = np.arange(6400) / 16000
    harmonic = sum(np.sin(2 * np.pi * 180 * k * t) / k for k in range(1, 8))
    mag = stft_magnitude(harmonic, cfg.window_samples, cfg.hop_samples, cfg.fft_size)
    _, err = griffin_lim(Spectrogram(mag, cfg.fft_size, cfg.hop_samples, cfg.window_samples), 60, return_errors=True)
    monotone = bool(np.all(np.diff(err) <= 1e-9 * err[0]))
    tone = 0.5 * np.sin(2 * np.pi * 440 * np.arange(8000) / 16000)
    tm = stft_magnitude(tone, cfg.window_samples, cfg.hop_samples, cfg.fft_size)
    w = griffin_lim(Spectrogram(tm, cfg.fft_size, cfg.hop_samples, cfg.window_samples), 60)
    peak = int(np.argmax(stft_magnitude(w.samples, cfg.window_samples, cfg.hop_samples, cfg.fft_size).mean(0)))
    bin_off = abs(peak - 440 / (16000 / cfg.fft_size))
    rt = {}
    with tempfile.TemporaryDirectory() as d:
        for n_coeffs, rate in ((13, 100), (128, 32)):
            mc = MfccConfig.for_regime(n_coeffs, rate)
            vals = []
            for seed in (20, 21, 22):
                truth = extract_mfcc(speech_like_audio(1.0, seed), mc)
                write_wav(Path(d) / "x.wav", griffin_lim(invert_mfcc(truth, mc), 60))
                back = extract_mfcc(read_wav(Path(d) / "x.wav"), mc)
                st = NormStats.fit(truth.data)
                vals.append(mcd(FeatureSequence(st.apply(back.data), rate, "mfcc"),
                                FeatureSequence(st.apply(truth.data), rate, "mfcc")))
            rt[n_coeffs] = max(vals)
    ok = monotone and bin_off <= 1 and rt[13] < ROUNDTRIP_MCD_THRESHOLD_13 and rt[128] < ROUNDTRIP_MCD_THRESHOLD_128
    record("vocoder chain", ok,
           f"GL error non-increasing {monotone} ({err[0]:.1f} -> {err[-1]:.1f}); 440 Hz peak off by {bin_off:.2f} bins; "
           f"round-trip MCD {rt[13]:.2f} < {ROUNDTRIP_MCD_THRESHOLD_13} (13@100), {rt[128]:.2f} < {ROUNDTRIP_MCD_THRESHOLD_128} (128@32)")


def test_filter_conformance():
    bp = design_bandpass(0.1, 70.0, 4, 1000.0)
    dc = abs(bp.response(0.0, 1000.0)[0])
    mid = abs(bp.response(2.65, 1000.0)[0])
    notch = design_notch(60.0, 30.0, 1000.0)
    x = np.sin(2 * np.pi * 60 * np.arange(3000) / 1000)
    y = iir_filter(notch, x)
    ratio = np.sqrt(np.mean(y[1000:] ** 2) / np.mean(x[1000:] ** 2))
    ok = dc <= 1e-3 and mid >= 0.7 and ratio <= 0.05 and bp.is_stable() and notch.is_stable()
    record("filter conformance", ok, f"|H(0)| {dc:.1e} <= 1e-3, |H(2.65 Hz)| {mid:.3f} >= 0.7, notched 60 Hz RMS ratio {ratio:.4f} <= 0.05")


def test_determinism():
    with tempfile.TemporaryDirectory() as d:
        d = Path(d)
        assert cli_main(["gen", "--out", str(d / "data"), "--n", "20", "--t-min", "6", "--t-max", "10", "--seed", "2"]) == 0
        outs = []
        for run in ("a", "b"):
            (d / run).mkdir()
            for approach in ("direct", "two-step"):
                ck = d / run / f"{approach}.ckpt"
                assert cli_main(["train", "--data", str(d / "data"), "--approach", approach, "--epochs", "3",
                                 "--seed", "4", "--out", str(ck)]) == 0
            assert cli_main(["eval", "--ckpt", str(d / run / "direct.ckpt"), "--ckpt", str(d / run / "two-step.ckpt"),
                             "--data", str(d / "data"), "--report", str(d / run / "metrics.json")]) == 0
            outs.append({p.name: p.read_bytes() for p in sorted((d / run).iterdir())})
    ok = outs[0] == outs[1]
    record("determinism", ok, f"{len(outs[0])} files byte-identical across two train+eval runs: {sorted(outs[0])}")


def test_format_round_trips():
    rng = np.random.default_rng(0)
    n_feat = 0
    for T in (1, 2, 17, 33, 64):
        for D in (6, 13, 30, 50, 93, 128):
            kind = {6: "articulatory", 13: "mfcc", 128: "mfcc"}.get(D, "eeg")
            f = FeatureSequence(rng.standard_normal((T, D)), 100, kind)
            g = decode_features(encode_features(f))
            assert (g.T, g.D, g.kind) == (T, D, kind)
            assert np.array_equal(g.data, f.data.astype(np.float32).astype(np.float64))
            n_feat += 1
    with tempfile.TemporaryDirectory() as d:
        w = Waveform(np.clip(rng.normal(0, 0.3, 4000), -1, 1))
        write_wav(Path(d) / "w.wav", w)
        wav_err = float(np.max(np.abs(read_wav(Path(d) / "w.wav").samples - w.samples)))
    c = gen_synthetic_corpus(SynthConfig(n_utterances=12, t_range=(5, 7), seed=1))
    pipe, _ = train_model(c, split_corpus(c, 0), TrainConfig(epochs=1, approach="two_step", enc_hidden=6, dec_hidden=5))
    blob = encode_checkpoint(pipe)
    back, _ = decode_checkpoint(blob)
    ckpt_exact = encode_checkpoint(back) == blob and all(
        np.array_equal(v, b.params.tensors()[k]) for a, b in zip(pipe.models, back.models) for k, v in a.params.tensors().items()
    )
    errors = []
    fblob = encode_features(FeatureSequence(np.zeros((3, 13)), 100, "mfcc"))
    for label, bad, exc in (
        ("magic", b"XXXX" + fblob[4:], BadMagicError),
        ("crc", fblob[:-1] + bytes([fblob[-1] ^ 1]), ChecksumError),
        ("truncated", fblob[:-7], TruncatedError),
        ("ckpt crc", blob[:100] + bytes([blob[100] ^ 1]) + blob[101:], ChecksumError),
        ("ckpt truncated", blob[:-9], ChecksumError),
    ):
        try:
            (decode_checkpoint if label.startswith("ckpt") else decode_features)(bad)
            errors.append(f"{label}: accepted")
        except exc:
            pass
    import struct, zlib
    body = fblob[:4] + struct.pack("<I", 99) + fblob[8:-4]
    try:
        decode_features(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
        errors.append("version: accepted")
    except VersionError:
        pass
    ok = wav_err <= 0.5 / 32767 + 1e-12 and ckpt_exact and not errors
    record("format round trips", ok,
           f"{n_feat} FeatureFile shapes exact to f32; WAV max err {wav_err:.1e}; checkpoint bit-exact {ckpt_exact}; "
           f"corruption rejected ({'ok' if not errors else errors})")


if __name__ == "__main__":
    skip_slow = "--skip-slow" in sys.argv
    tests = [v for k, v in list(globals().items()) if k.startswith("test_")]
    failed = 0
    for fn in tests:
        if skip_slow and getattr(fn, "pytestmark", None):
            print(f"[SKIP] {fn.__name__}")
            continue
        try:
            fn()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
