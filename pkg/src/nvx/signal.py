"""Filtering, MFCC analysis/inversion, Griffin-Lim and mel cepstral distortion."""

from __future__ import annotations

import csv
import math
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft
import scipy.signal

AUDIO_RATE_HZ = 16000
KINDS = ("eeg", "mfcc", "articulatory")
MCD_SCALE = 10.0 / math.log(10.0)


class ShapeError(ValueError):
    """Array dimensions disagree with a declared contract."""


# ---------------------------------------------------------------------------
# value types


@dataclass(frozen=True)
class IirFilter:
    b: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.b, dtype=np.float64))
        a = np.atleast_1d(np.asarray(self.a, dtype=np.float64))
        if a[0] == 0:
            raise ValueError("a[0] must be nonzero")
        object.__setattr__(self, "b", b / a[0])
        object.__setattr__(self, "a", a / a[0])

    def poles(self) -> np.ndarray:
        return np.roots(self.a) if len(self.a) > 1 else np.zeros(0)

    def is_stable(self) -> bool:
        p = self.poles()
        return p.size == 0 or float(np.max(np.abs(p))) < 1.0

    def response(self, freq_hz, fs_hz: float) -> np.ndarray:
        """Complex frequency response evaluated directly on the unit circle."""
        w = 2 * np.pi * np.atleast_1d(np.asarray(freq_hz, dtype=np.float64)) / fs_hz
        zinv = np.exp(-1j * w)
        num = np.polyval(self.b[::-1], zinv)
        den = np.polyval(self.a[::-1], zinv)
        return num / den


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    rate_hz: int = AUDIO_RATE_HZ

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64).ravel()
        if self.rate_hz != AUDIO_RATE_HZ:
            raise ValueError(f"waveforms are {AUDIO_RATE_HZ} Hz, got {self.rate_hz}")
        if not np.all(np.isfinite(s)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class FeatureSequence:
    """T x D frame matrix tagged with its frame rate and feature kind."""

    data: np.ndarray
    rate_hz: float
    kind: str

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] < 1 or d.shape[1] < 1:
            raise ShapeError(f"feature data must be a non-empty T x D matrix, got {d.shape}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if not np.all(np.isfinite(d)):
            raise ValueError("feature data contains non-finite entries")
        if self.kind == "mfcc" and d.shape[1] not in (13, 128):
            raise ShapeError(f"mfcc sequences have 13 or 128 coefficients, got {d.shape[1]}")
        if self.kind == "articulatory" and d.shape[1] != 6:
            raise ShapeError(f"articulatory sequences have 6 tract variables, got {d.shape[1]}")
        object.__setattr__(self, "data", d)

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def D(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class MfccConfig:
    n_coeffs: int = 13
    frame_rate_hz: int = 100
    window_samples: int = 400
    hop_samples: int = 160
    fft_size: int = 512
    n_mel_bands: int = 40
    log_floor: float = 1e-10
    sample_rate_hz: int = AUDIO_RATE_HZ

    def __post_init__(self):
        if self.sample_rate_hz % self.frame_rate_hz or self.hop_samples != self.sample_rate_hz // self.frame_rate_hz:
            raise ValueError(
                f"hop {self.hop_samples} does not give {self.frame_rate_hz} Hz frames at {self.sample_rate_hz} Hz"
            )
        if self.n_coeffs > self.n_mel_bands:
            raise ValueError("n_coeffs cannot exceed n_mel_bands")
        if self.fft_size < self.window_samples:
            raise ValueError("fft_size must be >= window_samples")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @classmethod
    def for_regime(cls, n_coeffs: int, frame_rate_hz: int) -> "MfccConfig":
        """Standard framing for the 100 Hz and 32 Hz regimes."""
        if n_coeffs not in (13, 128):
            raise ValueError(f"n_coeffs must be 13 or 128, got {n_coeffs}")
        if frame_rate_hz == 100:
            window, fft = 400, 512
        elif frame_rate_hz == 32:
            window, fft = 1024, 1024
        else:
            raise ValueError(f"frame rate must be 100 or 32 Hz, got {frame_rate_hz}")
        return cls(
            n_coeffs=n_coeffs,
            frame_rate_hz=frame_rate_hz,
            window_samples=window,
            hop_samples=AUDIO_RATE_HZ // frame_rate_hz,
            fft_size=fft,
            n_mel_bands=40 if n_coeffs == 13 else 128,
        )


@dataclass(frozen=True)
class Spectrogram:
    frames: np.ndarray
    fft_size: int
    hop_samples: int
    window_samples: int = field(default=0)

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != self.fft_size // 2 + 1:
            raise ShapeError(f"spectrogram must be T x {self.fft_size // 2 + 1}, got {f.shape}")
        if not np.all(np.isfinite(f)) or np.any(f < 0):
            raise ValueError("spectrogram magnitudes must be finite and nonnegative")
        object.__setattr__(self, "frames", f)
        if not self.window_samples:
            object.__setattr__(self, "window_samples", self.fft_size)


# ---------------------------------------------------------------------------
# IIR filtering


def design_bandpass(low_hz: float, high_hz: float, order: int, fs_hz: float) -> IirFilter:
    """Butterworth band-pass of total order ``order`` (bilinear transform)."""
    if not 0 < low_hz < high_hz < fs_hz / 2:
        raise ValueError(f"need 0 < low < high < fs/2, got {low_hz}, {high_hz}, fs={fs_hz}")
    if order < 2 or order % 2:
        raise ValueError(f"band-pass order must be even and >= 2, got {order}")
    b, a = scipy.signal.butter(order // 2, [low_hz, high_hz], btype="bandpass", fs=fs_hz)
    f = IirFilter(b, a)
    if not f.is_stable():
        raise ArithmeticError("band-pass design is numerically unstable")
    return f


def design_notch(center_hz: float, q: float = 30.0, fs_hz: float = 1000.0) -> IirFilter:
    if not 0 < center_hz < fs_hz / 2:
        raise ValueError(f"notch frequency must lie in (0, fs/2), got {center_hz}")
    if q <= 0:
        raise ValueError("q must be positive")
    b, a = scipy.signal.iirnotch(center_hz, q, fs=fs_hz)
    f = IirFilter(b, a)
    if not f.is_stable():
        raise ArithmeticError("notch design is numerically unstable")
    return f


def iir_filter(f: IirFilter, x) -> np.ndarray:
    """Causal filtering from zero initial state; 2-D input is filtered per column."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("filter input contains non-finite values")
    return scipy.signal.lfilter(f.b, f.a, x, axis=0)


def preprocess_eeg(x, fs_hz: float = 1000.0) -> np.ndarray:
    """0.1-70 Hz fourth-order band-pass followed by a 60 Hz notch, per channel."""
    bp = design_bandpass(0.1, 70.0, 4, fs_hz)
    notch = design_notch(60.0, 30.0, fs_hz)
    return iir_filter(notch, iir_filter(bp, x))


# ---------------------------------------------------------------------------
# MFCC


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mel: int, fft_size: int, rate_hz: int = AUDIO_RATE_HZ) -> np.ndarray:
    """Triangular filters (n_mel x fft_size//2+1) on the HTK mel scale, 0 Hz to Nyquist."""
    bin_hz = np.arange(fft_size // 2 + 1) * rate_hz / fft_size
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(rate_hz / 2), n_mel + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_hz - lo) / (mid - lo)
    down = (hi - bin_hz) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def _frames(x: np.ndarray, window: int, hop: int) -> np.ndarray:
    n = 1 + (x.size - window) // hop
    idx = np.arange(window)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def stft_magnitude(x, window: int, hop: int, fft_size: int) -> np.ndarray:
    return np.abs(stft(x, window, hop, fft_size))


def stft(x, window: int, hop: int, fft_size: int) -> np.ndarray:
    """Unpadded Hann-windowed STFT, T x (fft_size//2+1)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < window:
        raise ValueError(f"signal of {x.size} samples is shorter than one {window}-sample window")
    win = scipy.signal.get_window("hann", window)
    return np.fft.rfft(_frames(x, window, hop) * win, n=fft_size, axis=1)


def extract_mfcc(w: Waveform, cfg: MfccConfig) -> FeatureSequence:
    if w.rate_hz != cfg.sample_rate_hz:
        raise ValueError("waveform rate does not match config")
    if len(w) < cfg.window_samples:
        raise ValueError(f"audio of {len(w)} samples is shorter than one window ({cfg.window_samples})")
    mag = stft_magnitude(w.samples, cfg.window_samples, cfg.hop_samples, cfg.fft_size)
    logmel = np.log(np.maximum(mag @ mel_filterbank(cfg.n_mel_bands, cfg.fft_size, cfg.sample_rate_hz).T, cfg.log_floor))
    ceps = scipy.fft.dct(logmel, type=2, norm="ortho", axis=1)[:, : cfg.n_coeffs]
    return FeatureSequence(ceps, cfg.frame_rate_hz, "mfcc")


def mfcc_to_logmel(m: FeatureSequence, cfg: MfccConfig) -> np.ndarray:
    if m.kind != "mfcc" or m.D != cfg.n_coeffs:
        raise ShapeError(f"expected mfcc with {cfg.n_coeffs} coefficients, got {m.kind} with D={m.D}")
    padded = np.zeros((m.T, cfg.n_mel_bands))
    padded[:, : m.D] = m.data
    return scipy.fft.idct(padded, type=2, norm="ortho", axis=1)


def spectrogram_logmel(s: Spectrogram, cfg: MfccConfig) -> np.ndarray:
    fb = mel_filterbank(cfg.n_mel_bands, cfg.fft_size, cfg.sample_rate_hz)
    return np.log(np.maximum(s.frames @ fb.T, cfg.log_floor))


def invert_mfcc(m: FeatureSequence, cfg: MfccConfig) -> Spectrogram:
    """Cepstra -> log-mel -> mel energies -> clipped filterbank pseudo-inverse."""
    energies = np.exp(mfcc_to_logmel(m, cfg))
    fb = mel_filterbank(cfg.n_mel_bands, cfg.fft_size, cfg.sample_rate_hz)
    mag = np.maximum(energies @ np.linalg.pinv(fb).T, 0.0)
    return Spectrogram(mag, cfg.fft_size, cfg.hop_samples, cfg.window_samples)


# ---------------------------------------------------------------------------
# Griffin-Lim


EDGE_COVERAGE = 0.1


def istft(spec: np.ndarray, window: int, hop: int, fft_size: int) -> np.ndarray:
    """Least-squares inverse of :func:`stft` (window-square-sum normalised overlap-add).

    Samples whose summed squared window is below ``EDGE_COVERAGE`` of the peak
    (the first and last few dozen) are set to zero.
    """
    win = scipy.signal.get_window("hann", window)
    n_frames = spec.shape[0]
    length = (n_frames - 1) * hop + window
    frames = np.fft.irfft(spec, n=fft_size, axis=1)[:, :window] * win
    out = np.zeros(length)
    norm = np.zeros(length)
    for i in range(n_frames):
        out[i * hop : i * hop + window] += frames[i]
        norm[i * hop : i * hop + window] += win * win
    # edge samples only seen through the Hann tails would be divided by ~0;
    # pinning them to zero keeps this an exact least-squares projection
    covered = norm > EDGE_COVERAGE * norm.max()
    out[covered] /= norm[covered]
    out[~covered] = 0.0
    return out


def _spectral_norm(x: np.ndarray, fft_size: int) -> float:
    # rfft bins other than DC/Nyquist stand for two conjugate bins of the full spectrum
    weight = np.full(x.shape[1], 2.0)
    weight[0] = 1.0
    if fft_size % 2 == 0:
        weight[-1] = 1.0
    return float(np.sqrt(np.sum(weight * np.abs(x) ** 2)))


def griffin_lim(
    s: Spectrogram,
    iterations: int = 60,
    seed: int = 0,
    init: str = "zero",
    return_errors: bool = False,
):
    """Reconstruct a waveform whose STFT magnitude approximates ``s``.

    Phase starts at zero (``init="random"`` draws it from ``seed`` instead).
    With ``return_errors`` the per-iteration consistency error
    ``|| |STFT(x_k)| - s ||`` (full-spectrum norm) is returned as well; it is
    non-increasing in exact arithmetic.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    mag = s.frames
    if mag.shape[0] == 0:
        raise ValueError("empty spectrogram")
    win, hop, nfft = s.window_samples, s.hop_samples, s.fft_size
    if init == "zero":
        phase = np.ones_like(mag, dtype=np.complex128)
    elif init == "random":
        rng = np.random.default_rng(seed)
        phase = np.exp(2j * np.pi * rng.random(mag.shape))
    else:
        raise ValueError(f"unknown init {init!r}")
    errors = []
    x = istft(mag * phase, win, hop, nfft)
    for _ in range(iterations):
        X = stft(x, win, hop, nfft)
        errors.append(_spectral_norm(np.abs(X) - mag, nfft))
        phase = np.exp(1j * np.angle(X))
        x = istft(mag * phase, win, hop, nfft)
    w = Waveform(x)
    return (w, np.array(errors)) if return_errors else w


# ---------------------------------------------------------------------------
# normalisation and distortion


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, frames) -> "NormStats":
        """Per-dimension statistics over stacked frames; zero-variance dimensions get std 1."""
        if isinstance(frames, FeatureSequence):
            x = frames.data
        elif isinstance(frames, (list, tuple)):
            x = np.concatenate([f.data if isinstance(f, FeatureSequence) else np.asarray(f) for f in frames])
        else:
            x = np.asarray(frames, dtype=np.float64)
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)

    @classmethod
    def identity(cls, dim: int) -> "NormStats":
        return cls(np.zeros(dim), np.ones(dim))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


def znormalize(x: FeatureSequence, stats: NormStats) -> FeatureSequence:
    if stats.mean.shape != (x.D,) or stats.std.shape != (x.D,):
        raise ShapeError(f"stats have dimension {stats.mean.shape}, sequence has D={x.D}")
    if np.any(stats.std <= 0):
        raise ValueError("stats std entries must be positive")
    return FeatureSequence(stats.apply(x.data), x.rate_hz, x.kind)


def mcd_frames(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {truth.shape}")
    diff = pred[:, 1:] - truth[:, 1:]
    # scaled norm: tiny differences must not underflow to a zero distance
    scale = np.max(np.abs(diff), axis=1, keepdims=True)
    unit = np.divide(diff, scale, out=np.zeros_like(diff), where=scale > 0)
    return MCD_SCALE * scale[:, 0] * np.sqrt(2.0 * np.sum(unit * unit, axis=1))


def mcd(pred: FeatureSequence, truth: FeatureSequence) -> float:
    """Frame-averaged mel cepstral distortion, coefficient 0 excluded, no time warping."""
    a = pred.data if isinstance(pred, FeatureSequence) else pred
    b = truth.data if isinstance(truth, FeatureSequence) else truth
    return float(np.mean(mcd_frames(a, b)))


# ---------------------------------------------------------------------------
# audio/figure files


def write_wav(path, w: Waveform) -> None:
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.rate_hz)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError("only mono 16-bit PCM is supported")
        if fh.getframerate() != AUDIO_RATE_HZ:
            raise ValueError(f"expected {AUDIO_RATE_HZ} Hz audio, got {fh.getframerate()}")
        raw = fh.readframes(fh.getnframes())
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0)


def peak_normalize(x: np.ndarray) -> np.ndarray:
    peak = np.max(np.abs(x)) if x.size else 0.0
    return x / peak if peak > 0 else x.copy()


def write_comparison_csv(path, actual: Waveform, predicted: Waveform) -> None:
    """``index,actual,predicted`` rows; the predicted column is peak-normalised.

    The shorter signal is zero-padded so both columns have equal length.
    """
    n = max(len(actual), len(predicted))
    a = np.zeros(n)
    a[: len(actual)] = actual.samples
    p = np.zeros(n)
    p[: len(predicted)] = peak_normalize(predicted.samples)
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["index", "actual", "predicted"])
        for i in range(n):
            wr.writerow([i, repr(float(a[i])), repr(float(p[i]))])
