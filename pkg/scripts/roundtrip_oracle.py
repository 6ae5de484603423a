"""Measure the vocoder round-trip MCD and print the thresholds frozen into the tests.

extract -> invert -> Griffin-Lim -> 16-bit WAV -> re-extract on speech-like
test audio, scored with MCD after z-scoring both operands with the original's
statistics. This is the chain behind ``nvx synth``.
"""

import argparse
import json
import math
import tempfile
from pathlib import Path

from nvx.data import speech_like_audio
from nvx.signal import (
    FeatureSequence, MfccConfig, NormStats, extract_mfcc, griffin_lim, invert_mfcc, mcd, read_wav, write_wav,
)

MARGIN = 1.2


def roundtrip_mcd(n_coeffs: int, rate: int, seed: int, iterations: int = 60, duration_s: float = 1.0) -> float:
    cfg = MfccConfig.for_regime(n_coeffs, rate)
    truth = extract_mfcc(speech_like_audio(duration_s, seed), cfg)
    with tempfile.TemporaryDirectory() as d:
        write_wav(Path(d) / "rt.wav", griffin_lim(invert_mfcc(truth, cfg), iterations))
        back = extract_mfcc(read_wav(Path(d) / "rt.wav"), cfg)
    stats = NormStats.fit(truth.data)
    z = lambda m: FeatureSequence(stats.apply(m.data), rate, "mfcc")
    return mcd(z(back), z(truth))


def unrelated_mcd(n_coeffs: int, rate: int, seed: int) -> float:
    """Reference level: MCD between two independent test signals."""
    cfg = MfccConfig.for_regime(n_coeffs, rate)
    a = extract_mfcc(speech_like_audio(1.0, seed), cfg)
    b = extract_mfcc(speech_like_audio(1.0, seed + 1000), cfg)
    stats = NormStats.fit(a.data)
    z = lambda m: FeatureSequence(stats.apply(m.data), rate, "mfcc")
    return mcd(z(b), z(a))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    args = ap.parse_args()
    out = {}
    for n_coeffs, rate in ((13, 100), (128, 32)):
        vals = [roundtrip_mcd(n_coeffs, rate, s) for s in range(args.seeds)]
        out[f"{n_coeffs}@{rate}"] = {
            "per_seed": [round(v, 4) for v in vals],
            "max": max(vals),
            "threshold": math.ceil(max(vals) * MARGIN * 10) / 10,
            "unrelated_min": min(unrelated_mcd(n_coeffs, rate, s) for s in range(args.seeds)),
        }
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
