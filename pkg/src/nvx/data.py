"""Feature files, corpus containers and the synthetic EEG/articulatory/acoustic generator."""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.signal

from .signal import (
    AUDIO_RATE_HZ,
    FeatureSequence,
    MfccConfig,
    ShapeError,
    Waveform,
    griffin_lim,
    invert_mfcc,
)

FEATURE_MAGIC = b"FMAT"
FEATURE_VERSION = 1
KIND_CODES = {"eeg": 0, "mfcc": 1, "articulatory": 2}
_HEADER = struct.Struct("<4sIBIId")


class FormatError(ValueError):
    """Base class for malformed binary files."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class TruncatedError(ChecksumError):
    """File too short for its declared layout (also a checksum failure)."""


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write to a temp file in the same directory, then rename into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def split_crc(blob: bytes, magic: bytes) -> bytes:
    """Check magic and trailing CRC32; return the body without the trailer."""
    head = blob[: len(magic)]
    if head != magic[: len(head)]:
        raise BadMagicError(f"bad magic {blob[:len(magic)]!r}, expected {magic!r}")
    if len(blob) < len(magic) + 4:
        raise TruncatedError(f"file of {len(blob)} bytes is too short")
    body, trailer = blob[:-4], blob[-4:]
    if zlib.crc32(body) & 0xFFFFFFFF != struct.unpack("<I", trailer)[0]:
        raise ChecksumError("CRC32 mismatch")
    return body


# ---------------------------------------------------------------------------
# FeatureFile


def encode_features(f: FeatureSequence) -> bytes:
    T, D = f.data.shape
    body = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, KIND_CODES[f.kind], T, D, float(f.rate_hz))
    body += np.ascontiguousarray(f.data, dtype="<f4").tobytes()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_features(blob: bytes) -> FeatureSequence:
    if blob[:4] == FEATURE_MAGIC and len(blob) >= _HEADER.size:
        # length implied by the header is checked first so a cut file reads as truncated
        T, D = _HEADER.unpack_from(blob)[3:5]
        if len(blob) < _HEADER.size + T * D * 4 + 4:
            raise TruncatedError(f"file of {len(blob)} bytes, header implies {_HEADER.size + T * D * 4 + 4}")
    body = split_crc(blob, FEATURE_MAGIC)
    if len(body) < _HEADER.size:
        raise TruncatedError("truncated header")
    _, version, code, T, D, rate = _HEADER.unpack_from(body)
    if version != FEATURE_VERSION:
        raise VersionError(f"unsupported feature file version {version}")
    kinds = {v: k for k, v in KIND_CODES.items()}
    if code not in kinds:
        raise FormatError(f"unknown kind code {code}")
    if len(body) - _HEADER.size != T * D * 4:
        raise TruncatedError(f"payload has {len(body) - _HEADER.size} bytes, header implies {T * D * 4}")
    if kinds[code] == "articulatory" and D != 6:
        raise ShapeError(f"articulatory file declares D={D}, expected 6")
    data = np.frombuffer(body, dtype="<f4", offset=_HEADER.size).reshape(T, D).astype(np.float64)
    return FeatureSequence(data, rate, kinds[code])


def write_features(path, f: FeatureSequence) -> None:
    atomic_write_bytes(path, encode_features(f))


def read_features(path) -> FeatureSequence:
    return decode_features(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# corpus


@dataclass(frozen=True)
class Utterance:
    id: str
    eeg: FeatureSequence
    articulatory: FeatureSequence
    mfcc: FeatureSequence
    waveform: Waveform | None = None

    def __post_init__(self):
        seqs = (self.eeg, self.articulatory, self.mfcc)
        if len({s.T for s in seqs}) != 1 or len({s.rate_hz for s in seqs}) != 1:
            raise ShapeError(f"utterance {self.id}: sequences disagree on T or rate")
        if (self.eeg.kind, self.articulatory.kind, self.mfcc.kind) != ("eeg", "articulatory", "mfcc"):
            raise ValueError(f"utterance {self.id}: wrong feature kinds")

    @property
    def T(self) -> int:
        return self.eeg.T


@dataclass(frozen=True)
class Corpus:
    utterances: tuple

    def __post_init__(self):
        utts = tuple(self.utterances)
        ids = [u.id for u in utts]
        if len(set(ids)) != len(ids):
            raise ValueError("utterance ids must be unique")
        object.__setattr__(self, "utterances", utts)
        object.__setattr__(self, "_index", {u.id: u for u in utts})

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    @property
    def ids(self) -> list:
        return [u.id for u in self.utterances]

    def get(self, uid: str) -> Utterance:
        return self._index[uid]

    def select(self, ids) -> list:
        return [self._index[i] for i in ids]

    @property
    def dims(self) -> tuple:
        u = self.utterances[0]
        return u.eeg.D, u.articulatory.D, u.mfcc.D

    @property
    def rate_hz(self) -> float:
        return self.utterances[0].eeg.rate_hz


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_corpus(directory, corpus: Corpus, meta: dict | None = None) -> Path:
    """One FeatureFile per (utterance, stream) plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for u in corpus:
        entry = {"id": u.id, "T": u.T}
        for stream in ("eeg", "articulatory", "mfcc"):
            name = f"{u.id}.{stream}.fmat"
            write_features(directory / name, getattr(u, stream))
            entry[stream] = {"file": name, "sha256": _sha256(directory / name)}
        entries.append(entry)
    eeg_d, art_d, mfcc_d = corpus.dims
    manifest = {
        "format": "nvx-corpus",
        "version": 1,
        "meta": meta or {},
        "eeg_dim": eeg_d,
        "articulatory_dim": art_d,
        "mfcc_dim": mfcc_d,
        "rate_hz": corpus.rate_hz,
        "n_utterances": len(corpus),
        "utterances": entries,
    }
    path = directory / "manifest.json"
    atomic_write_bytes(path, (json.dumps(manifest, indent=2) + "\n").encode("utf-8"))
    return path


def read_corpus(directory) -> Corpus:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    utts = []
    for e in manifest["utterances"]:
        streams = {s: read_features(directory / e[s]["file"]) for s in ("eeg", "articulatory", "mfcc")}
        utts.append(Utterance(e["id"], **streams))
    return Corpus(tuple(utts))


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SynthConfig:
    n_utterances: int = 200
    t_range: tuple = (20, 40)
    eeg_dim: int = 30
    mfcc_dim: int = 13
    rate: int = 100
    noise_std: float = 0.05
    seed: int = 0
    n_latent: int = 6
    with_waveform: bool = False

    def __post_init__(self):
        lo, hi = self.t_range
        if self.n_utterances < 1 or lo < 1 or hi < lo:
            raise ValueError("n_utterances and T range must be positive with min <= max")
        if self.eeg_dim < 1 or self.mfcc_dim not in (13, 128) or self.rate not in (100, 32):
            raise ValueError("invalid eeg_dim / mfcc_dim / rate")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


@dataclass(frozen=True)
class SynthMaps:
    """The fixed random maps shared by every utterance of one corpus."""

    eeg_mix: np.ndarray        # latent -> eeg (n_latent x eeg_dim)
    acoustic_w1: np.ndarray    # latent -> hidden
    acoustic_b1: np.ndarray
    acoustic_w2: np.ndarray    # hidden -> mfcc
    acoustic_b2: np.ndarray

    def acoustic(self, z: np.ndarray) -> np.ndarray:
        return np.tanh(z @ self.acoustic_w1 + self.acoustic_b1) @ self.acoustic_w2 + self.acoustic_b2

    def eeg(self, z: np.ndarray) -> np.ndarray:
        return z @ self.eeg_mix


ACOUSTIC_HIDDEN = 32
# max frequency of latent sinusoids, in cycles per frame
MAX_CYCLES_PER_FRAME = 0.08


def make_maps(cfg: SynthConfig) -> SynthMaps:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 1])))
    k = cfg.n_latent
    return SynthMaps(
        eeg_mix=rng.standard_normal((k, cfg.eeg_dim)) / np.sqrt(k),
        acoustic_w1=rng.standard_normal((k, ACOUSTIC_HIDDEN)) / np.sqrt(k) * 1.5,
        acoustic_b1=rng.uniform(-0.5, 0.5, ACOUSTIC_HIDDEN),
        acoustic_w2=rng.standard_normal((ACOUSTIC_HIDDEN, cfg.mfcc_dim)) / np.sqrt(ACOUSTIC_HIDDEN),
        acoustic_b2=rng.uniform(-0.5, 0.5, cfg.mfcc_dim),
    )


def latent_trajectory(T: int, n_latent: int, rng: np.random.Generator) -> np.ndarray:
    """Sum of three random sinusoids per dimension; per-frame delta <= 3*2*pi*MAX_CYCLES_PER_FRAME."""
    t = np.arange(T)[:, None, None]
    amp = rng.uniform(0.3, 1.0, (1, n_latent, 3))
    freq = rng.uniform(0.01, MAX_CYCLES_PER_FRAME, (1, n_latent, 3))
    phase = rng.uniform(0.0, 2 * np.pi, (1, n_latent, 3))
    return np.sum(amp * np.sin(2 * np.pi * freq * t + phase), axis=2) / np.sqrt(3)


def gen_synthetic_corpus(cfg: SynthConfig) -> Corpus:
    maps = make_maps(cfg)
    seeds = np.random.SeedSequence([cfg.seed, 2]).spawn(cfg.n_utterances)
    mcfg = MfccConfig.for_regime(cfg.mfcc_dim, cfg.rate) if cfg.with_waveform else None
    utts = []
    for i, ss in enumerate(seeds):
        rng = np.random.Generator(np.random.PCG64(ss))
        T = int(rng.integers(cfg.t_range[0], cfg.t_range[1] + 1))
        z = latent_trajectory(T, cfg.n_latent, rng)
        mfcc = maps.acoustic(z) + cfg.noise_std * rng.standard_normal((T, cfg.mfcc_dim))
        eeg = maps.eeg(z) + cfg.noise_std * rng.standard_normal((T, cfg.eeg_dim))
        mseq = FeatureSequence(mfcc, cfg.rate, "mfcc")
        wav = griffin_lim(invert_mfcc(mseq, mcfg), 30) if mcfg is not None else None
        utts.append(
            Utterance(
                id=f"utt{i:04d}",
                eeg=FeatureSequence(eeg, cfg.rate, "eeg"),
                articulatory=FeatureSequence(z, cfg.rate, "articulatory"),
                mfcc=mseq,
                waveform=wav,
            )
        )
    return Corpus(tuple(utts))


def synth_config_dict(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    d["t_range"] = list(cfg.t_range)
    return d


NOISE_FLOOR = 1e-3


def speech_like_audio(duration_s: float = 1.0, seed: int = 0) -> Waveform:
    """Glottal pulse train with a gliding f0 through three formant resonators."""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * AUDIO_RATE_HZ))
    t = np.arange(n) / AUDIO_RATE_HZ
    f0 = 120 + 40 * np.sin(2 * np.pi * 1.3 * t + rng.uniform(0, 2 * np.pi))
    pulses = np.diff(np.floor(np.cumsum(f0) / AUDIO_RATE_HZ), prepend=0.0)
    y = scipy.signal.lfilter([1.0], [1.0, -0.95], pulses) + 0.05 * rng.standard_normal(n)
    for lo, hi, bw in ((500, 800, 90), (1100, 1800, 110), (2300, 2900, 160)):
        r = np.exp(-np.pi * bw / AUDIO_RATE_HZ)
        theta = 2 * np.pi * rng.uniform(lo, hi) / AUDIO_RATE_HZ
        y = scipy.signal.lfilter([1 - r], [1, -2 * r * np.cos(theta), r * r], y)
    y *= 0.5 + 0.5 * np.sin(2 * np.pi * 3 * t) ** 2
    y = 0.5 * y / np.max(np.abs(y))
    # recording noise floor 54 dB below the peak, well above 16-bit quantisation
    y += NOISE_FLOOR * rng.standard_normal(n)
    return Waveform(0.5 * y / np.max(np.abs(y)))


# ---------------------------------------------------------------------------
# learnability oracle


@dataclass
class RidgeFit:
    coef: np.ndarray
    intercept: np.ndarray
    residual: float  # mean squared residual over all target entries
    lam: float = field(default=0.0)

    def predict(self, X):
        return np.asarray(X) @ self.coef + self.intercept


def ridge_oracle(X, Y, lam: float) -> RidgeFit:
    """Closed-form ridge regression with an unpenalised intercept."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] != Y.shape[0]:
        raise ShapeError(f"frame counts differ: {X.shape[0]} vs {Y.shape[0]}")
    if Y.ndim == 1:
        Y = Y[:, None]
    xm, ym = X.mean(0), Y.mean(0)
    Xc, Yc = X - xm, Y - ym
    gram = Xc.T @ Xc + lam * np.eye(X.shape[1])
    if lam == 0 and np.linalg.matrix_rank(gram) < X.shape[1]:
        raise np.linalg.LinAlgError("singular normal equations with lambda = 0")
    coef = np.linalg.solve(gram, Xc.T @ Yc)
    intercept = ym - xm @ coef
    resid = Y - X @ coef - intercept
    return RidgeFit(coef, intercept, float(np.mean(resid**2)), lam)
