"""Finite-difference verification suite for every differentiable op."""

from __future__ import annotations

import numpy as np

from .model import backward_batch, forward_batch, init_attention_model, params_from_tensors
from .tensorgrad import (
    GruParams,
    attention_backward,
    attention_forward,
    dense_backward,
    grad_check,
    gru_backward,
    gru_forward,
    make_rng,
    masked_mse,
    masked_mse_grad,
)

TOLERANCES = {
    "dense": 1e-7,
    "masked_mse": 1e-7,
    "gru_cell": 1e-5,
    "attention_step": 1e-5,
    "full_model": 1e-4,
}
FD_STEP = 1e-6


def _perturbed(grads: dict, amount: float) -> dict:
    return {k: v + amount for k, v in grads.items()}


def check_dense(rng, perturb=0.0):
    W, b, x = rng.standard_normal((4, 6)), rng.standard_normal(4), rng.standard_normal((3, 6))
    R = rng.standard_normal((3, 4))

    def loss(d):
        return float(np.sum(R * (d["x"] @ d["W"].T + d["b"])))

    dx, dW, db = dense_backward(W, x, R)
    return grad_check(loss, {"W": W, "b": b, "x": x}, _perturbed({"W": dW, "b": db, "x": dx}, perturb), FD_STEP)


def check_masked_mse(rng, perturb=0.0):
    pred = rng.standard_normal((5, 4))
    target = pred + rng.choice([-1.0, 1.0], (5, 4)) * rng.uniform(0.5, 1.5, (5, 4))
    mask = np.array([1.0, 1.0, 0.0, 1.0, 1.0])

    def loss(d):
        return masked_mse(d["pred"], target, mask)

    return grad_check(loss, {"pred": pred}, _perturbed({"pred": masked_mse_grad(pred, target, mask)}, perturb), FD_STEP)


def check_gru(rng, perturb=0.0, input_dim=4, hidden_dim=5, batch=2):
    p = GruParams(
        *(rng.standard_normal((hidden_dim, input_dim)) * 0.7 for _ in range(3)),
        *(rng.standard_normal((hidden_dim, hidden_dim)) * 0.7 for _ in range(3)),
        *(rng.standard_normal(hidden_dim) * 0.3 for _ in range(3)),
    )
    x, h = rng.standard_normal((batch, input_dim)), rng.standard_normal((batch, hidden_dim)) * 0.8
    R = rng.standard_normal((batch, hidden_dim))
    inputs = dict(p.tensors(), x=x, h_prev=h)

    def loss(d):
        q = GruParams(**{k: d[k] for k in p.tensors()})
        return float(np.sum(R * gru_forward(q, d["x"], d["h_prev"])[0]))

    _, cache = gru_forward(p, x, h)
    dx, dh, grads = gru_backward(p, cache, R)
    analytic = dict(grads, x=dx, h_prev=dh)
    return grad_check(loss, inputs, _perturbed(analytic, perturb), FD_STEP)


def check_attention(rng, perturb=0.0, T=5, enc=6, dec=4, batch=2):
    H = rng.standard_normal((batch, T, enc))
    s = rng.standard_normal((batch, dec))
    W = rng.standard_normal((enc, dec)) * 0.3
    Rc = rng.standard_normal((batch, enc))
    Ra = rng.standard_normal((batch, T))

    def loss(d):
        c, a, _ = attention_forward(d["H"], d["s"], d["W"])
        return float(np.sum(Rc * c) + np.sum(Ra * a))

    _, _, cache = attention_forward(H, s, W)
    dH, ds, dW = attention_backward(cache, Rc, Ra)
    return grad_check(loss, {"H": H, "s": s, "W": W}, _perturbed({"H": dH, "s": ds, "W": dW}, perturb), FD_STEP)


def check_full_model(seed: int, perturb=0.0, T=4, d_in=3, hidden=5, d_out=2):
    """Unrolled encoder/attention/decoder/head under masked MSE, dropout active with a fixed mask."""
    m = init_attention_model(d_in, d_out, seed, enc_hidden=hidden, dec_hidden=hidden, strict=False)
    rng = make_rng(seed + 1)
    X = rng.standard_normal((2, T, d_in))
    Y = rng.standard_normal((2, T, d_out))
    mask = np.ones((2, T))
    mask[1, -1] = 0.0
    X[1, -1] = 0.0
    kind = m.kind

    def run(params):
        return forward_batch(params, X, mask, train_mode=True, rng=make_rng(seed + 2))

    def loss(d):
        return masked_mse(run(params_from_tensors(kind, d)).prediction, Y, mask)

    tr = run(m)
    grads = backward_batch(m, tr, masked_mse_grad(tr.prediction, Y, mask))
    return grad_check(loss, m.tensors(), _perturbed(grads, perturb), FD_STEP)


def run_suite(seed: int = 0, perturb: str | None = None, amount: float = 1e-3) -> dict:
    """Worst relative error per op; ``perturb`` names an op whose analytic gradient is corrupted."""
    rng = np.random.default_rng(seed)
    checks = {
        "dense": lambda p: check_dense(rng, p),
        "masked_mse": lambda p: check_masked_mse(rng, p),
        "gru_cell": lambda p: check_gru(rng, p),
        "attention_step": lambda p: check_attention(rng, p),
        "full_model": lambda p: check_full_model(seed, p),
    }
    out = {}
    for name, fn in checks.items():
        res = fn(amount if perturb == name else 0.0)
        out[name] = {
            "max_rel_error": res.max_rel_error,
            "tolerance": TOLERANCES[name],
            "pass": bool(res.max_rel_error <= TOLERANCES[name]),
        }
    return out
