"""Corpus splitting, mini-batch training, MCD evaluation and checkpoints."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import Corpus, TruncatedError, VersionError, atomic_write_bytes, split_crc
from .model import (
    DECODER_HIDDEN,
    DROPOUT_RATE,
    ENCODER_HIDDEN,
    backward_batch,
    forward_batch,
    init_attention_model,
    init_baseline_model,
    params_from_tensors,
)
from .reduce import FEATURE_SET_DIMS, Kernel, KpcaModel, kpca_fit, kpca_transform, subsample_frames
from .signal import FeatureSequence, NormStats, ShapeError, mcd
from .tensorgrad import AdamState, adam_step, make_rng, masked_mse, masked_mse_grad

__all__ = [
    "SplitIndex", "TrainConfig", "TrainedModel", "Pipeline", "MetricsReport",
    "split_corpus", "train_model", "evaluate", "save_checkpoint", "load_checkpoint",
]


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitIndex:
    train_ids: tuple
    val_ids: tuple
    test_ids: tuple
    seed: int


def split_sizes(n: int) -> tuple:
    n_train = int(np.floor(0.8 * n + 0.5))
    rest = n - n_train
    n_val = rest // 2
    return n_train, n_val, rest - n_val


def split_corpus(c: Corpus, seed: int) -> SplitIndex:
    """Seeded shuffle, then 80/10/10."""
    n = len(c)
    if n < 10:
        raise ValueError(f"need at least 10 utterances to split, got {n}")
    ids = c.ids
    order = make_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train, n_val, _ = split_sizes(n)
    return SplitIndex(
        tuple(shuffled[:n_train]),
        tuple(shuffled[n_train : n_train + n_val]),
        tuple(shuffled[n_train + n_val :]),
        seed,
    )


# ---------------------------------------------------------------------------
# configuration and trained artefacts


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2500
    batch_size: int = 100
    seed: int = 0
    approach: str = "direct"          # direct | two_step
    feature_set: int = 1
    mfcc_dim: int = 13
    rate: int = 100
    model: str = "attention"          # attention | baseline
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    dropout: float = DROPOUT_RATE
    enc_hidden: int = ENCODER_HIDDEN
    dec_hidden: int = DECODER_HIDDEN
    reduce: bool = True               # KPCA to the feature set's dimension
    kpca_max_frames: int = 1000
    stage2_source: str = "predicted"  # predicted | truth

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.approach not in ("direct", "two_step"):
            raise ValueError(f"approach must be direct or two_step, got {self.approach!r}")
        if self.feature_set not in FEATURE_SET_DIMS:
            raise ValueError(f"feature_set must be 1, 2 or 3, got {self.feature_set}")
        if self.mfcc_dim not in (13, 128) or self.rate not in (100, 32):
            raise ValueError("mfcc_dim must be 13/128 and rate 100/32")
        if self.model not in ("attention", "baseline"):
            raise ValueError(f"model must be attention or baseline, got {self.model!r}")
        if self.stage2_source not in ("predicted", "truth"):
            raise ValueError("stage2_source must be predicted or truth")

    @property
    def eeg_dim(self) -> int:
        return FEATURE_SET_DIMS[self.feature_set]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class TrainedModel:
    """Network plus the z-score maps it was trained under."""

    params: object
    in_stats: NormStats
    out_stats: NormStats
    output_kind: str

    def predict_matrix(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.params.d_in:
            raise ShapeError(f"model expects {self.params.d_in}-dim input, got {x.shape[1]}")
        out = forward_batch(self.params, self.in_stats.apply(x)[None]).prediction[0]
        return self.out_stats.invert(out)

    def predict(self, x: FeatureSequence) -> FeatureSequence:
        return FeatureSequence(self.predict_matrix(x.data), x.rate_hz, self.output_kind)


@dataclass(frozen=True)
class Pipeline:
    cfg: TrainConfig
    models: tuple
    kpca: KpcaModel | None = None

    def reduce_eeg(self, eeg: FeatureSequence) -> FeatureSequence:
        if self.kpca is None:
            return eeg
        return FeatureSequence(kpca_transform(self.kpca, eeg.data), eeg.rate_hz, "eeg")

    @property
    def raw_eeg_dim(self) -> int:
        return self.kpca.input_dim if self.kpca is not None else self.models[0].params.d_in

    def predict(self, eeg: FeatureSequence) -> FeatureSequence:
        if eeg.D != self.raw_eeg_dim:
            raise ShapeError(f"pipeline expects {self.raw_eeg_dim}-dim EEG, got {eeg.D}")
        x = self.reduce_eeg(eeg)
        for m in self.models:
            x = m.predict(x)
        return x


# ---------------------------------------------------------------------------
# batching


def pad_batch(seqs: list) -> tuple:
    """Zero-pad a list of (T_i, D) matrices to (B, T_max, D) with a (B, T_max) frame mask."""
    T = max(s.shape[0] for s in seqs)
    out = np.zeros((len(seqs), T, seqs[0].shape[1]))
    mask = np.zeros((len(seqs), T))
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
        mask[i, : s.shape[0]] = 1.0
    return out, mask


def batch_loss(params, X, Y, mask) -> float:
    return masked_mse(forward_batch(params, X, mask).prediction, Y, mask)


def _init(cfg: TrainConfig, d_in: int, d_out: int, seed: int):
    if cfg.model == "baseline":
        return init_baseline_model(d_in, d_out, seed, enc_hidden=cfg.enc_hidden, strict=False)
    return init_attention_model(d_in, d_out, seed, enc_hidden=cfg.enc_hidden, dec_hidden=cfg.dec_hidden, strict=False)


def fit_network(cfg: TrainConfig, inputs: list, targets: list, val_inputs: list, val_targets: list, seed: int,
                log=None):
    """Train one network on already-normalised sequence lists.

    Returns (params, history); history holds one ``{epoch, train_loss, val_loss}`` per epoch.
    ``train_loss`` is the frame-weighted mean of the dropout-active batch losses.
    """
    if not inputs:
        raise ValueError("empty training split")
    params = _init(cfg, inputs[0].shape[1], targets[0].shape[1], seed)
    kind = params.kind
    tensors = params.tensors()
    state = AdamState.init(tensors, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon)
    order_rng = make_rng(seed + 7919)
    drop_rng = make_rng(seed + 104729)
    val_batch = pad_batch(val_inputs) + (pad_batch(val_targets)[0],) if val_inputs else None
    history = []
    n = len(inputs)
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(n)
        total, weight = 0.0, 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            X, mask = pad_batch([inputs[i] for i in idx])
            Y, _ = pad_batch([targets[i] for i in idx])
            trace = forward_batch(params, X, mask, train_mode=True, rng=drop_rng, dropout_rate=cfg.dropout)
            loss = masked_mse(trace.prediction, Y, mask)
            grads = backward_batch(params, trace, masked_mse_grad(trace.prediction, Y, mask))
            tensors, state = adam_step(tensors, grads, state)
            params = params_from_tensors(kind, tensors)
            total += loss * mask.sum()
            weight += mask.sum()
        entry = {"epoch": epoch, "train_loss": float(total / weight)}
        if val_batch is not None:
            Xv, maskv, Yv = val_batch
            entry["val_loss"] = batch_loss(params, Xv, Yv, maskv)
        history.append(entry)
        if log is not None:
            log(entry)
    return params, history


def _stack(seqs) -> np.ndarray:
    return np.concatenate([s.data if isinstance(s, FeatureSequence) else s for s in seqs])


def fit_kpca(train_eeg: list, cfg: TrainConfig) -> KpcaModel:
    frames = subsample_frames(_stack(train_eeg), cfg.kpca_max_frames, cfg.seed)
    return kpca_fit(frames, "rbf", cfg.eeg_dim)


def _train_stage(cfg, xs, ys, vxs, vys, seed, out_kind, log):
    in_stats, out_stats = NormStats.fit(xs), NormStats.fit(ys)
    params, hist = fit_network(
        cfg,
        [in_stats.apply(x) for x in xs],
        [out_stats.apply(y) for y in ys],
        [in_stats.apply(x) for x in vxs],
        [out_stats.apply(y) for y in vys],
        seed,
        log,
    )
    return TrainedModel(params, in_stats, out_stats, out_kind), hist


def train_model(c: Corpus, split: SplitIndex, cfg: TrainConfig, log=None):
    """Returns (Pipeline, history) where history is a list with one per-epoch list per stage."""
    if not split.train_ids:
        raise ValueError("empty training split")
    eeg_d, _, mfcc_d = c.dims
    if mfcc_d != cfg.mfcc_dim:
        raise ShapeError(f"corpus has {mfcc_d}-dim MFCC, config asks for {cfg.mfcc_dim}")
    if not cfg.reduce and eeg_d != cfg.eeg_dim:
        raise ShapeError(f"feature set {cfg.feature_set} needs {cfg.eeg_dim}-dim EEG without reduction, corpus has {eeg_d}")
    train, val = c.select(split.train_ids), c.select(split.val_ids)
    kpca = fit_kpca([u.eeg for u in train], cfg) if cfg.reduce else None

    def eeg(u):
        return kpca_transform(kpca, u.eeg.data) if kpca is not None else u.eeg.data

    xs, vxs = [eeg(u) for u in train], [eeg(u) for u in val]
    if cfg.approach == "direct":
        m, hist = _train_stage(cfg, xs, [u.mfcc.data for u in train], vxs, [u.mfcc.data for u in val],
                               cfg.seed, "mfcc", log)
        return Pipeline(cfg, (m,), kpca), [hist]
    m1, h1 = _train_stage(cfg, xs, [u.articulatory.data for u in train], vxs,
                          [u.articulatory.data for u in val], cfg.seed, "articulatory", log)
    if cfg.stage2_source == "predicted":
        zs = [m1.predict_matrix(x) for x in xs]
        vzs = [m1.predict_matrix(x) for x in vxs]
    else:
        zs = [u.articulatory.data for u in train]
        vzs = [u.articulatory.data for u in val]
    m2, h2 = _train_stage(cfg, zs, [u.mfcc.data for u in train], vzs, [u.mfcc.data for u in val],
                          cfg.seed + 1, "mfcc", log)
    return Pipeline(cfg, (m1, m2), kpca), [h1, h2]


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsReport:
    config: dict
    per_utterance: list
    average_mcd: float
    baseline_mean_predictor_mcd: float
    paper_reference: dict | None = None

    def to_json(self) -> str:
        doc = {
            "config": self.config,
            "per_utterance": self.per_utterance,
            "average_mcd": self.average_mcd,
            "baseline_mean_predictor_mcd": self.baseline_mean_predictor_mcd,
        }
        if self.paper_reference is not None:
            doc["paper_reference"] = self.paper_reference
        return json.dumps(doc, indent=2) + "\n"


def _mean(xs) -> float:
    return float(np.mean(np.asarray(xs, dtype=np.float64)))


def evaluate(pipeline, c: Corpus, split: SplitIndex, cfg: TrainConfig | None = None, predictor=None) -> MetricsReport:
    """MCD on the test split after z-scoring both operands with ground-truth test statistics.

    ``predictor`` (eeg FeatureSequence -> mfcc FeatureSequence) overrides the pipeline.
    """
    if not split.test_ids:
        raise ValueError("empty test split")
    cfg = cfg or pipeline.cfg
    test = c.select(split.test_ids)
    train = c.select(split.train_ids)
    predict = predictor or pipeline.predict
    stats = NormStats.fit([u.mfcc for u in test])
    train_mean = _stack([u.mfcc for u in train]).mean(axis=0)
    rows, floor = [], []
    for u in test:
        truth = stats.apply(u.mfcc.data)
        pred = predict(u.eeg)
        if pred.data.shape != u.mfcc.data.shape:
            raise ShapeError(f"prediction {pred.data.shape} vs truth {u.mfcc.data.shape} for {u.id}")
        rows.append({"id": u.id, "mcd": mcd(stats.apply(pred.data), truth)})
        floor.append(mcd(stats.apply(np.broadcast_to(train_mean, u.mfcc.data.shape)), truth))
    return MetricsReport(
        config=cfg.to_dict(),
        per_utterance=rows,
        average_mcd=_mean([r["mcd"] for r in rows]),
        baseline_mean_predictor_mcd=_mean(floor),
    )


# Average MCD values reported for the attention-regression experiments.
# ref = earlier one-to-one GRU regressor, first/second = direct/two-step.
PAPER_TABLES = {
    "subject1": {1: {"ref": 0.433, "first": 0.443, "second": 0.45},
                 2: {"ref": 0.435, "first": 0.325, "second": 0.329},
                 3: {"ref": 0.435, "first": 0.45, "second": 0.46}},
    "subject2": {1: {"ref": 0.856, "first": 0.672, "second": 0.70},
                 2: {"ref": 0.847, "first": 0.80, "second": 0.80},
                 3: {"ref": 0.841, "first": 0.647, "second": 0.64}},
    "subject3": {1: {"ref": 0.647, "first": 1.07, "second": 1.071},
                 2: {"ref": 0.650, "first": 0.934, "second": 1.09},
                 3: {"ref": 0.645, "first": 0.96, "second": 0.967}},
    "subject4": {1: {"ref": 1.733, "first": 1.48, "second": 1.7},
                 2: {"ref": 1.736, "first": 1.46, "second": 1.65},
                 3: {"ref": 1.741, "first": 2.07, "second": 2.07}},
    "subject1-mfcc128": {1: {"ref": None, "first": 1.211, "second": 1.14}},
}


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.3f}"


def render_table(cells: dict, paper_ref: str | None = None) -> str:
    """``cells`` maps feature set -> {"floor", "first", "second"} (missing entries show as '-')."""
    header = ["EEG Feature Set", "Average MCD (mean-predictor floor)", "Average MCD 1st Approach", "Average MCD 2nd Approach"]
    ref = PAPER_TABLES[paper_ref] if paper_ref else None
    if ref is not None:
        header += [f"Paper Ref [{paper_ref}]", "Paper 1st", "Paper 2nd"]
    sets = sorted(set(cells) | (set(ref) if ref else set()))
    rows = []
    for fs in sets:
        c = cells.get(fs, {})
        row = [f"Set {fs}", _fmt(c.get("floor")), _fmt(c.get("first")), _fmt(c.get("second"))]
        if ref is not None:
            r = ref.get(fs, {})
            row += [_fmt(r.get("ref")), _fmt(r.get("first")), _fmt(r.get("second"))]
        rows.append(row)
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    line = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    out = [line, "| " + " | ".join(h.ljust(w) for h, w in zip(header, widths)) + " |", line]
    out += ["| " + " | ".join(v.ljust(w) for v, w in zip(r, widths)) + " |" for r in rows]
    out.append(line)
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# checkpoint container

CKPT_MAGIC = b"NVXC"
CKPT_VERSION = 1


def _pipeline_tensors(p: Pipeline) -> tuple:
    tensors, vectors = {}, []
    for i, m in enumerate(p.models):
        for k, v in m.params.tensors().items():
            tensors[f"model{i}.{k}"] = v
        for tag, st in (("in", m.in_stats), ("out", m.out_stats)):
            tensors[f"model{i}.{tag}_stats.mean"] = st.mean
            tensors[f"model{i}.{tag}_stats.std"] = st.std
    if p.kpca is not None:
        k = p.kpca
        tensors["kpca.training_frames"] = k.training_frames
        tensors["kpca.centered_eigenvectors"] = k.centered_eigenvectors
        tensors["kpca.eigenvalues"] = k.eigenvalues
        tensors["kpca.train_kernel_col_means"] = k.train_kernel_col_means
        tensors["kpca.train_kernel_mean"] = np.array([k.train_kernel_mean])
    for name, v in tensors.items():
        if v.ndim == 1:
            vectors.append(name)
    return tensors, vectors


def encode_checkpoint(p: Pipeline, extra: dict | None = None) -> bytes:
    tensors, vectors = _pipeline_tensors(p)
    meta = {
        "train_config": p.cfg.to_dict(),
        "models": [{"kind": m.params.kind, "output_kind": m.output_kind} for m in p.models],
        "kpca": None if p.kpca is None else {"kernel": p.kpca.kernel.name, "gamma": p.kpca.kernel.gamma},
        "vectors": vectors,
        "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = bytearray(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + struct.pack("<I", len(blob)) + blob)
    for name, v in tensors.items():
        mat = np.atleast_2d(np.asarray(v, dtype=np.float64))
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb + struct.pack("<II", *mat.shape)
        out += np.ascontiguousarray(mat, dtype="<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def decode_checkpoint(blob: bytes) -> tuple:
    """Returns (Pipeline, extra metadata)."""
    body = split_crc(blob, CKPT_MAGIC)
    pos = 4
    if len(body) < pos + 8:
        raise TruncatedError("checkpoint header truncated")
    (version,) = struct.unpack_from("<I", body, pos)
    if version != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", body, pos + 4)
    pos += 8
    meta = json.loads(body[pos : pos + n].decode("utf-8"))
    pos += n
    tensors = {}
    while pos < len(body):
        if pos + 4 > len(body):
            raise TruncatedError("tensor record truncated")
        (ln,) = struct.unpack_from("<I", body, pos)
        name = body[pos + 4 : pos + 4 + ln].decode("utf-8")
        pos += 4 + ln
        rows, cols = struct.unpack_from("<II", body, pos)
        pos += 8
        size = rows * cols * 8
        if pos + size > len(body):
            raise TruncatedError(f"tensor {name} truncated")
        mat = np.frombuffer(body, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
        pos += size
        tensors[name] = mat[0] if name in meta["vectors"] else mat
    models = []
    for i, mm in enumerate(meta["models"]):
        pre = f"model{i}."
        sub = {k[len(pre):]: v for k, v in tensors.items() if k.startswith(pre)}
        params = params_from_tensors(mm["kind"], {k: v for k, v in sub.items() if "_stats." not in k})
        models.append(
            TrainedModel(
                params,
                NormStats(sub["in_stats.mean"], sub["in_stats.std"]),
                NormStats(sub["out_stats.mean"], sub["out_stats.std"]),
                mm["output_kind"],
            )
        )
    kpca = None
    if meta["kpca"] is not None:
        kpca = KpcaModel(
            training_frames=tensors["kpca.training_frames"],
            kernel=Kernel(meta["kpca"]["kernel"], meta["kpca"]["gamma"]),
            centered_eigenvectors=tensors["kpca.centered_eigenvectors"],
            eigenvalues=tensors["kpca.eigenvalues"],
            train_kernel_col_means=tensors["kpca.train_kernel_col_means"],
            train_kernel_mean=float(tensors["kpca.train_kernel_mean"][0]),
        )
    return Pipeline(TrainConfig.from_dict(meta["train_config"]), tuple(models), kpca), meta.get("extra", {})


def save_checkpoint(p: Pipeline, path, extra: dict | None = None) -> None:
    atomic_write_bytes(path, encode_checkpoint(p, extra))


def load_checkpoint(path) -> Pipeline:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())[0]
