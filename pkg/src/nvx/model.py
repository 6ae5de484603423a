"""Attention-regression network, the no-attention baseline, and prediction pipelines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal import FeatureSequence, ShapeError
from .tensorgrad import (
    GruParams,
    StackedGru,
    dense_backward,
    dropout_mask,
    glorot_uniform,
    gru_step,
    gru_step_backward,
    gru_weight_grads,
    make_rng,
)

ENCODER_HIDDEN = 256
DECODER_HIDDEN = 128
DROPOUT_RATE = 0.2
OUTPUT_DIMS = (6, 13, 128)


def _check_out(d_out: int, strict: bool):
    if strict and d_out not in OUTPUT_DIMS:
        raise ValueError(f"output dimension must be one of {OUTPUT_DIMS}, got {d_out}")
    if d_out < 1:
        raise ValueError("output dimension must be positive")


def _prefixed(prefix: str, tensors: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in tensors.items()}


def _gru_from(tensors: dict, prefix: str) -> GruParams:
    n = len(prefix) + 1
    return GruParams(**{k[n:]: v for k, v in tensors.items() if k.startswith(prefix + ".")})


@dataclass(frozen=True)
class ModelParams:
    encoder: GruParams
    attention_W: np.ndarray
    decoder: GruParams
    head_W: np.ndarray
    head_b: np.ndarray

    def __post_init__(self):
        E, Dd = self.encoder.hidden_dim, self.decoder.hidden_dim
        if self.attention_W.shape != (E, Dd):
            raise ShapeError(f"attention W must be {E}x{Dd}, got {self.attention_W.shape}")
        if self.decoder.input_dim != E:
            raise ShapeError("decoder input must equal encoder hidden size (it consumes context vectors)")
        if self.head_W.shape[1] != Dd or self.head_b.shape != (self.head_W.shape[0],):
            raise ShapeError("head shapes inconsistent with decoder")

    kind = "attention"

    @property
    def d_in(self) -> int:
        return self.encoder.input_dim

    @property
    def d_out(self) -> int:
        return self.head_W.shape[0]

    def tensors(self) -> dict:
        out = _prefixed("encoder", self.encoder.tensors())
        out["attention.W"] = self.attention_W
        out.update(_prefixed("decoder", self.decoder.tensors()))
        out["head.W"] = self.head_W
        out["head.b"] = self.head_b
        return out

    @classmethod
    def from_tensors(cls, t: dict) -> "ModelParams":
        return cls(_gru_from(t, "encoder"), t["attention.W"], _gru_from(t, "decoder"), t["head.W"], t["head.b"])

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors().values())


@dataclass(frozen=True)
class BaselineParams:
    encoder: GruParams
    head_W: np.ndarray
    head_b: np.ndarray

    kind = "baseline"

    @property
    def d_in(self) -> int:
        return self.encoder.input_dim

    @property
    def d_out(self) -> int:
        return self.head_W.shape[0]

    def tensors(self) -> dict:
        out = _prefixed("encoder", self.encoder.tensors())
        out["head.W"] = self.head_W
        out["head.b"] = self.head_b
        return out

    @classmethod
    def from_tensors(cls, t: dict) -> "BaselineParams":
        return cls(_gru_from(t, "encoder"), t["head.W"], t["head.b"])

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors().values())


def params_from_tensors(kind: str, tensors: dict):
    return {"attention": ModelParams, "baseline": BaselineParams}[kind].from_tensors(tensors)


def init_attention_model(
    d_in: int,
    d_out: int,
    seed: int,
    enc_hidden: int = ENCODER_HIDDEN,
    dec_hidden: int = DECODER_HIDDEN,
    strict: bool = True,
) -> ModelParams:
    """Glorot-uniform weights and zero biases. ``strict`` restricts d_out to 6/13/128."""
    if d_in < 1:
        raise ValueError("d_in must be >= 1")
    _check_out(d_out, strict)
    rng = make_rng(seed)
    encoder = GruParams.init(d_in, enc_hidden, rng)
    attn = glorot_uniform(rng, enc_hidden, dec_hidden)
    decoder = GruParams.init(enc_hidden, dec_hidden, rng)
    head_W = glorot_uniform(rng, d_out, dec_hidden)
    return ModelParams(encoder, attn, decoder, head_W, np.zeros(d_out))


def init_baseline_model(d_in: int, d_out: int, seed: int, enc_hidden: int = ENCODER_HIDDEN, strict: bool = True) -> BaselineParams:
    if d_in < 1:
        raise ValueError("d_in must be >= 1")
    _check_out(d_out, strict)
    rng = make_rng(seed)
    encoder = GruParams.init(d_in, enc_hidden, rng)
    return BaselineParams(encoder, glorot_uniform(rng, d_out, enc_hidden), np.zeros(d_out))


# ---------------------------------------------------------------------------
# batched forward / backward


def _encode(enc: StackedGru, X: np.ndarray):
    B, T, _ = X.shape
    XW = X @ enc.W.T + enc.b
    h = np.zeros((B, enc.hidden_dim))
    states = np.empty((B, T, enc.hidden_dim))
    caches = []
    for t in range(T):
        h, c = gru_step(enc, XW[:, t], h)
        states[:, t] = h
        caches.append(c)
    return states, caches


def _gru_grads(g: StackedGru, X: np.ndarray, caches: list, dxws: list) -> dict:
    Hprev = np.stack([c[0] for c in caches], axis=1)
    RH = np.stack([c[3] for c in caches], axis=1)
    return gru_weight_grads(g, X, np.stack(dxws, axis=1), Hprev, RH)


def _encode_backward(enc: StackedGru, X: np.ndarray, caches: list, dH: np.ndarray) -> dict:
    T = len(caches)
    dh = np.zeros(dH[:, 0].shape)
    dxws = [None] * T
    for t in range(T - 1, -1, -1):
        dxws[t], dh = gru_step_backward(enc, caches[t], dH[:, t] + dh)
    return _gru_grads(enc, X, caches, dxws)


@dataclass
class BatchTrace:
    prediction: np.ndarray       # (B, T, D_out)
    encoder_states: np.ndarray   # (B, T, E)
    decoder_states: np.ndarray | None = None   # (B, T, Dd)
    contexts: np.ndarray | None = None         # (B, T, E), before dropout
    attention: np.ndarray | None = None        # (B, T, T), row k = alpha at decoder step k
    _caches: tuple = ()


def forward_batch(m, X: np.ndarray, mask: np.ndarray | None = None, train_mode: bool = False, rng=None,
                  dropout_rate: float = DROPOUT_RATE) -> BatchTrace:
    """X: (B, T, D_in) zero-padded batch; ``mask`` (B, T) marks real frames.

    Decoder step k attends with the decoder state from step k-1 (zeros at k=1)
    and receives only the (dropout-regularised) context vector as input.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != m.d_in:
        raise ShapeError(f"model expects input width {m.d_in}, got batch of shape {X.shape}")
    B, T, _ = X.shape
    enc = StackedGru.of(m.encoder)
    H, enc_caches = _encode(enc, X)
    if isinstance(m, BaselineParams):
        pred = H @ m.head_W.T + m.head_b
        return BatchTrace(pred, H, _caches=(X, enc, enc_caches))
    dec = StackedGru.of(m.decoder)
    W = m.attention_W
    valid = None if mask is None else np.asarray(mask) > 0
    s = np.zeros((B, dec.hidden_dim))
    S = np.empty((B, T, dec.hidden_dim))
    C = np.empty((B, T, H.shape[2]))
    Cin = np.empty_like(C)
    A = np.empty((B, T, T))
    drops, dec_caches = [], []
    for k in range(T):
        v = s @ W.T
        score = (H @ v[:, :, None])[:, :, 0]
        if valid is not None:
            score = np.where(valid, score, -np.inf)
        e = np.exp(score - score.max(axis=1, keepdims=True))
        alpha = e / e.sum(axis=1, keepdims=True)
        ctx = (alpha[:, None, :] @ H)[:, 0]
        C[:, k], A[:, k] = ctx, alpha
        drop = dropout_mask(ctx.shape, dropout_rate, rng) if train_mode else None
        Cin[:, k] = ctx if drop is None else ctx * drop
        s, gc = gru_step(dec, Cin[:, k] @ dec.W.T + dec.b, s)
        S[:, k] = s
        drops.append(drop)
        dec_caches.append(gc)
    pred = S @ m.head_W.T + m.head_b
    return BatchTrace(pred, H, S, C, A, _caches=(X, enc, enc_caches, dec, dec_caches, drops, Cin))


def backward_batch(m, trace: BatchTrace, dpred: np.ndarray) -> dict:
    """Gradients of a scalar loss w.r.t. every tensor in ``m.tensors()``."""
    grads = {}
    if isinstance(m, BaselineParams):
        X, enc, enc_caches = trace._caches
        dH, grads["head.W"], grads["head.b"] = dense_backward(m.head_W, trace.encoder_states, dpred)
    else:
        X, enc, enc_caches, dec, dec_caches, drops, Cin = trace._caches
        H, A, W = trace.encoder_states, trace.attention, m.attention_W
        dS, grads["head.W"], grads["head.b"] = dense_backward(m.head_W, trace.decoder_states, dpred)
        B, T, E = H.shape
        ds = np.zeros(dS[:, 0].shape)
        dxws = [None] * T
        DC = np.empty((B, T, E))
        DSC = np.empty((B, T, T))
        DV = np.empty((B, T, E))
        for k in range(T - 1, -1, -1):
            dxws[k], ds = gru_step_backward(dec, dec_caches[k], dS[:, k] + ds)
            dctx = dxws[k] @ dec.W
            if drops[k] is not None:
                dctx = dctx * drops[k]
            alpha = A[:, k]
            g = (H @ dctx[:, :, None])[:, :, 0]
            dscore = alpha * (g - np.sum(alpha * g, axis=1, keepdims=True))
            dv = (dscore[:, None, :] @ H)[:, 0]
            ds = ds + dv @ W
            DC[:, k], DSC[:, k], DV[:, k] = dctx, dscore, dv
        Sprev = np.concatenate([np.zeros((B, 1, dS.shape[2])), trace.decoder_states[:, :-1]], axis=1)
        V = Sprev @ W.T
        dH = A.transpose(0, 2, 1) @ DC + DSC.transpose(0, 2, 1) @ V
        grads["attention.W"] = DV.reshape(-1, E).T @ Sprev.reshape(-1, Sprev.shape[2])
        grads.update(_prefixed("decoder", _gru_grads(dec, Cin, dec_caches, dxws)))
    grads.update(_prefixed("encoder", _encode_backward(enc, X, enc_caches, dH)))
    return {k: grads[k] for k in m.tensors()}


# ---------------------------------------------------------------------------
# single-sequence API


@dataclass(frozen=True)
class AttentionTrace:
    weights: np.ndarray  # T x T


@dataclass(frozen=True)
class ForwardTrace:
    encoder_states: np.ndarray
    decoder_states: np.ndarray
    contexts: np.ndarray
    prediction: np.ndarray
    attention: AttentionTrace


def _as_matrix(x) -> np.ndarray:
    return x.data if isinstance(x, FeatureSequence) else np.asarray(x, dtype=np.float64)


def forward(m: ModelParams, x, train_mode: bool = False, rng=None) -> ForwardTrace:
    data = _as_matrix(x)
    if data.ndim != 2 or data.shape[1] != m.d_in:
        raise ShapeError(f"model expects {m.d_in} input features, got {data.shape}")
    tr = forward_batch(m, data[None], train_mode=train_mode, rng=rng)
    return ForwardTrace(tr.encoder_states[0], tr.decoder_states[0], tr.contexts[0], tr.prediction[0], AttentionTrace(tr.attention[0]))


def forward_baseline(b: BaselineParams, x) -> np.ndarray:
    data = _as_matrix(x)
    if data.ndim != 2 or data.shape[1] != b.d_in:
        raise ShapeError(f"baseline expects {b.d_in} input features, got {data.shape}")
    return forward_batch(b, data[None]).prediction[0]


def _predict(m, x: FeatureSequence, kind: str) -> FeatureSequence:
    if x.D != m.d_in:
        raise ShapeError(f"model expects {m.d_in}-dim input, got {x.kind} with D={x.D}")
    return FeatureSequence(forward_batch(m, x.data[None]).prediction[0], x.rate_hz, kind)


def predict_direct(m, eeg: FeatureSequence) -> FeatureSequence:
    return _predict(m, eeg, "mfcc")


def predict_two_step(m1, m2, eeg: FeatureSequence) -> FeatureSequence:
    if m1.d_out != 6 or m2.d_in != 6:
        raise ShapeError(f"two-step chain needs a 6-dim articulatory interface, got {m1.d_out} -> {m2.d_in}")
    return _predict(m2, _predict(m1, eeg, "articulatory"), "mfcc")
