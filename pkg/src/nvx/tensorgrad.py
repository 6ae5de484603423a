"""Differentiable building blocks with hand-derived backward passes.

Every op works on batched arrays (leading batch axis) in float64. Forward
functions return ``(output, cache)``; the matching ``*_backward`` consumes the
cache and an upstream gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .signal import ShapeError

GRU_NAMES = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; bit streams are identical across platforms for a given seed."""
    return np.random.Generator(np.random.PCG64(seed))


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_out, fan_in))


def sigmoid(x):
    return expit(x)


# ---------------------------------------------------------------------------
# GRU


@dataclass(frozen=True)
class GruParams:
    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    def __post_init__(self):
        H, I = self.W_z.shape
        for n in ("W_r", "W_h"):
            if getattr(self, n).shape != (H, I):
                raise ShapeError(f"{n} must be {H}x{I}")
        for n in ("U_z", "U_r", "U_h"):
            if getattr(self, n).shape != (H, H):
                raise ShapeError(f"{n} must be {H}x{H}")
        for n in ("b_z", "b_r", "b_h"):
            if getattr(self, n).shape != (H,):
                raise ShapeError(f"{n} must have length {H}")

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W_z.shape[0]

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator) -> "GruParams":
        w = {n: glorot_uniform(rng, hidden_dim, input_dim) for n in ("W_z", "W_r", "W_h")}
        u = {n: glorot_uniform(rng, hidden_dim, hidden_dim) for n in ("U_z", "U_r", "U_h")}
        b = {n: np.zeros(hidden_dim) for n in ("b_z", "b_r", "b_h")}
        return cls(**w, **u, **b)

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "GruParams":
        H, I = hidden_dim, input_dim
        return cls(*(np.zeros((H, I)) for _ in range(3)), *(np.zeros((H, H)) for _ in range(3)), *(np.zeros(H) for _ in range(3)))

    def tensors(self) -> dict:
        return {n: getattr(self, n) for n in GRU_NAMES}


def gru_forward(p: GruParams, x: np.ndarray, h_prev: np.ndarray):
    if x.shape[-1] != p.input_dim or h_prev.shape[-1] != p.hidden_dim:
        raise ShapeError(
            f"gru expects input {p.input_dim} / hidden {p.hidden_dim}, got {x.shape[-1]} / {h_prev.shape[-1]}"
        )
    z = sigmoid(x @ p.W_z.T + h_prev @ p.U_z.T + p.b_z)
    r = sigmoid(x @ p.W_r.T + h_prev @ p.U_r.T + p.b_r)
    rh = r * h_prev
    cand = np.tanh(x @ p.W_h.T + rh @ p.U_h.T + p.b_h)
    h = h_prev + z * (cand - h_prev)
    return h, (x, h_prev, z, r, rh, cand)


def gru_backward(p: GruParams, cache, dh: np.ndarray, grads: dict | None = None):
    """Returns (dx, dh_prev, grads); ``grads`` is accumulated in place when given."""
    x, h_prev, z, r, rh, cand = cache
    if grads is None:
        grads = {n: np.zeros_like(v) for n, v in p.tensors().items()}
    da_h = dh * z * (1.0 - cand * cand)
    da_z = dh * (cand - h_prev) * z * (1.0 - z)
    drh = da_h @ p.U_h
    da_r = drh * h_prev * r * (1.0 - r)
    dh_prev = dh * (1.0 - z) + drh * r + da_z @ p.U_z + da_r @ p.U_r
    dx = da_h @ p.W_h + da_z @ p.W_z + da_r @ p.W_r
    x2 = x.reshape(-1, x.shape[-1])
    for gate, da, hin in (("h", da_h, rh), ("z", da_z, h_prev), ("r", da_r, h_prev)):
        da2 = da.reshape(-1, da.shape[-1])
        grads["W_" + gate] += da2.T @ x2
        grads["U_" + gate] += da2.T @ hin.reshape(-1, hin.shape[-1])
        grads["b_" + gate] += da2.sum(axis=0)
    return dx, dh_prev, grads


def gru_cell(p: GruParams, x_t, h_prev) -> np.ndarray:
    return gru_forward(p, np.asarray(x_t, dtype=np.float64), np.asarray(h_prev, dtype=np.float64))[0]


@dataclass(frozen=True)
class StackedGru:
    """Gate weights stacked as [z; r; h] for whole-sequence passes."""

    W: np.ndarray     # (3H, I)
    b: np.ndarray     # (3H,)
    U_zr: np.ndarray  # (2H, H)
    U_h: np.ndarray   # (H, H)

    @classmethod
    def of(cls, p: GruParams) -> "StackedGru":
        return cls(
            np.concatenate([p.W_z, p.W_r, p.W_h]),
            np.concatenate([p.b_z, p.b_r, p.b_h]),
            np.concatenate([p.U_z, p.U_r]),
            p.U_h,
        )

    @property
    def hidden_dim(self) -> int:
        return self.U_h.shape[0]


def gru_step(g: StackedGru, xw: np.ndarray, h_prev: np.ndarray):
    """One step given the input projection ``xw = x W^T + b`` of shape (B, 3H)."""
    H = g.hidden_dim
    zr = sigmoid(xw[:, : 2 * H] + h_prev @ g.U_zr.T)
    z, r = zr[:, :H], zr[:, H:]
    rh = r * h_prev
    cand = np.tanh(xw[:, 2 * H :] + rh @ g.U_h.T)
    return h_prev + z * (cand - h_prev), (h_prev, z, r, rh, cand)


def gru_step_backward(g: StackedGru, cache, dh: np.ndarray):
    """Returns (dxw, dh_prev); weight gradients are formed later from the stacked dxw."""
    h_prev, z, r, rh, cand = cache
    da_h = dh * z * (1.0 - cand * cand)
    da_z = dh * (cand - h_prev) * z * (1.0 - z)
    drh = da_h @ g.U_h
    da_r = drh * h_prev * r * (1.0 - r)
    da_zr = np.concatenate([da_z, da_r], axis=1)
    dh_prev = dh * (1.0 - z) + drh * r + da_zr @ g.U_zr
    return np.concatenate([da_zr, da_h], axis=1), dh_prev


def gru_weight_grads(g: StackedGru, X: np.ndarray, DXW: np.ndarray, Hprev: np.ndarray, RH: np.ndarray) -> dict:
    """Parameter gradients from per-step inputs X, input-projection grads DXW, h_prev and r*h_prev."""
    H = g.hidden_dim
    x2 = X.reshape(-1, X.shape[-1])
    d2 = DXW.reshape(-1, 3 * H)
    dW = d2.T @ x2
    db = d2.sum(axis=0)
    dU_zr = d2[:, : 2 * H].T @ Hprev.reshape(-1, H)
    dU_h = d2[:, 2 * H :].T @ RH.reshape(-1, H)
    return {
        "W_z": dW[:H], "W_r": dW[H : 2 * H], "W_h": dW[2 * H :],
        "U_z": dU_zr[:H], "U_r": dU_zr[H:], "U_h": dU_h,
        "b_z": db[:H], "b_r": db[H : 2 * H], "b_h": db[2 * H :],
    }


# ---------------------------------------------------------------------------
# Luong attention with a bilinear score h_t^T W s


def attention_forward(H: np.ndarray, s: np.ndarray, W: np.ndarray, mask: np.ndarray | None = None):
    """H: (B, T, E) encoder states, s: (B, Dd) previous decoder state, W: (E, Dd).

    Padded encoder steps (``mask == 0``) get zero weight.
    """
    if H.ndim != 3 or s.ndim != 2 or W.shape != (H.shape[2], s.shape[1]) or s.shape[0] != H.shape[0]:
        raise ShapeError(f"attention shapes H{H.shape} s{s.shape} W{W.shape} are inconsistent")
    v = s @ W.T
    score = np.einsum("bte,be->bt", H, v)
    if mask is not None:
        score = np.where(mask > 0, score, -np.inf)
    score = score - score.max(axis=1, keepdims=True)
    e = np.exp(score)
    alpha = e / e.sum(axis=1, keepdims=True)
    context = np.einsum("bt,bte->be", alpha, H)
    return context, alpha, (H, s, W, v, alpha)


def attention_backward(cache, dcontext: np.ndarray, dalpha: np.ndarray | None = None):
    """Returns (dH, ds, dW)."""
    H, s, W, v, alpha = cache
    g = np.einsum("be,bte->bt", dcontext, H)
    if dalpha is not None:
        g = g + dalpha
    dscore = alpha * (g - np.sum(alpha * g, axis=1, keepdims=True))
    dH = alpha[:, :, None] * dcontext[:, None, :] + dscore[:, :, None] * v[:, None, :]
    dv = np.einsum("bt,bte->be", dscore, H)
    return dH, dv @ W, dv.T @ s


def attention_step(H_enc, h_dec_prev, W):
    """Single-sequence form: H_enc (T, E), h_dec_prev (Dd,) -> (context (E,), alpha (T,))."""
    H = np.asarray(H_enc, dtype=np.float64)[None]
    s = np.asarray(h_dec_prev, dtype=np.float64)[None]
    c, a, _ = attention_forward(H, s, np.asarray(W, dtype=np.float64))
    return c[0], a[0]


# ---------------------------------------------------------------------------
# dense, dropout, loss


def dense(Wd, b, x) -> np.ndarray:
    Wd, b, x = (np.asarray(a, dtype=np.float64) for a in (Wd, b, x))
    if Wd.shape[1] != x.shape[-1] or b.shape != (Wd.shape[0],):
        raise ShapeError(f"dense W{Wd.shape} b{b.shape} cannot map input of width {x.shape[-1]}")
    return x @ Wd.T + b


def dense_backward(Wd, x, dy):
    """Returns (dx, dW, db) for y = x W^T + b over any leading axes."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ Wd, dy2.T @ x2, dy2.sum(axis=0)


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate``, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(x, rate: float, train_mode: bool, rng: np.random.Generator | None = None) -> np.ndarray:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if not train_mode or rate == 0.0:
        return x.copy()
    return x * dropout_mask(x.shape, rate, rng)


def _check_mse_args(pred, target, mask):
    pred, target, mask = (np.asarray(a, dtype=np.float64) for a in (pred, target, mask))
    if pred.shape != target.shape or mask.shape != pred.shape[:-1]:
        raise ShapeError(f"pred {pred.shape}, target {target.shape}, mask {mask.shape} disagree")
    n = mask.sum()
    if n <= 0:
        raise ValueError("mask selects no frames")
    return pred, target, mask, n * pred.shape[-1]


def masked_mse(pred, target, mask) -> float:
    """Mean squared error over unmasked frames and every feature coordinate."""
    pred, target, mask, count = _check_mse_args(pred, target, mask)
    diff = (pred - target) * mask[..., None]
    return float(np.sum(diff * diff) / count)


def masked_mse_grad(pred, target, mask) -> np.ndarray:
    pred, target, mask, count = _check_mse_args(pred, target, mask)
    return 2.0 * (pred - target) * mask[..., None] / count


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamState:
    m: dict
    v: dict
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def init(cls, params: dict, **hyper) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            **hyper,
        )


def adam_step(params: dict, grads: dict, state: AdamState):
    """Bias-corrected Adam update; returns fresh (params, state)."""
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise ShapeError("params, grads and optimizer state name different tensors")
    t = state.step_count + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ShapeError(f"shape mismatch for {k}: param {p.shape}, grad {g.shape}")
        m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        new_p[k] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        new_m[k], new_v[k] = m, v
    return new_p, replace(state, m=new_m, v=new_v, step_count=t)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_input: dict = field(default_factory=dict)
    numeric: dict = field(default_factory=dict, repr=False)
    analytic: dict = field(default_factory=dict, repr=False)


def relative_error(a, n):
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(loss_fn, inputs: dict, analytic: dict, eps: float = 1e-6) -> GradCheckResult:
    """Compare ``analytic`` gradients with central differences of ``loss_fn``.

    ``loss_fn`` receives a dict shaped like ``inputs`` and returns a scalar.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in inputs.items()}
    per, numerics = {}, {}
    for name, arr in work.items():
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn(work)
            flat[i] = orig - eps
            down = loss_fn(work)
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * eps)
        per[name] = float(np.max(relative_error(analytic[name], numeric))) if arr.size else 0.0
        numerics[name] = numeric
    return GradCheckResult(max(per.values()) if per else 0.0, per, numerics, {k: np.asarray(analytic[k]) for k in work})
