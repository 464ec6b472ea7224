"""Small differentiable-layer kernel with hand-derived gradients.

Everything runs in float64 on numpy arrays.  Layers operate on batches:
sequences are ``(B, T, C)``, vectors are ``(B, D)``.  Unbatched inputs
(``(T, C)`` / ``(D,)``) are accepted by the forward functions and returned
unbatched.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Params = dict[str, np.ndarray]


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv1d | lstm | dense
    out_channels: int = 0
    kernel_size: int = 1
    hidden_size: int = 0

    def __post_init__(self):
        if self.kind not in ("conv1d", "lstm", "dense"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kernel_size < 1:
            raise ValueError("kernel_size must be >= 1")
        if self.kind in ("conv1d", "dense") and self.out_channels < 1:
            raise ValueError("out_channels must be >= 1")
        if self.kind == "lstm" and self.hidden_size < 1:
            raise ValueError("hidden_size must be >= 1")


def _as_batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected {ndim - 1}-d or {ndim}-d input, got shape {x.shape}")
    return x, False


# --- conv1d -----------------------------------------------------------------

def conv1d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid cross-correlation along time: ``out[t, o] = b[o] + sum_{c,k} x[t+k, c] w[o, c, k]``."""
    xb, squeeze = _as_batch(x, 3)
    c_out, c_in, k = weights.shape
    if xb.shape[2] != c_in or bias.shape != (c_out,):
        raise ShapeError(f"conv1d: input channels {xb.shape[2]} vs weights {weights.shape}, bias {bias.shape}")
    if xb.shape[1] < k:
        raise ShapeError("window shorter than kernel")
    win = sliding_window_view(xb, k, axis=1)  # (B, T', C_in, K)
    out = np.einsum("btck,ock->bto", win, weights, optimize=True) + bias
    return out[0] if squeeze else out


def conv1d_backward(x: np.ndarray, weights: np.ndarray, dout: np.ndarray):
    """Returns ``(dx, dweights, dbias)`` for batched ``x`` of shape ``(B, T, C_in)``."""
    k = weights.shape[2]
    win = sliding_window_view(x, k, axis=1)
    dw = np.einsum("bto,btck->ock", dout, win, optimize=True)
    db = dout.sum(axis=(0, 1))
    dx = np.zeros_like(x)
    t_out = dout.shape[1]
    for j in range(k):
        dx[:, j:j + t_out, :] += dout @ weights[:, :, j]
    return dx, dw, db


# --- LSTM -------------------------------------------------------------------
# Gate layout along the 4H axis: input, forget, cell candidate, output.

def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def lstm_forward(seq: np.ndarray, W: np.ndarray, U: np.ndarray, b: np.ndarray,
                 return_cache: bool = False):
    xb, squeeze = _as_batch(seq, 3)
    bsz, T, D = xb.shape
    H = U.shape[1]
    if W.shape != (4 * H, D) or U.shape != (4 * H, H) or b.shape != (4 * H,):
        raise ShapeError(f"lstm: W {W.shape}, U {U.shape}, b {b.shape} incompatible with D={D}")
    if T < 1:
        raise ShapeError("lstm: empty sequence")
    h = np.zeros((bsz, H))
    c = np.zeros((bsz, H))
    hs = np.empty((bsz, T, H))
    cache = []
    xw = xb @ W.T + b  # (B, T, 4H)
    for t in range(T):
        z = xw[:, t] + h @ U.T
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[:, t] = h
        if return_cache:
            cache.append((i, f, g, o, c_prev, h_prev, tc))
    out = hs[0] if squeeze else hs
    if return_cache:
        return out, (xb, W, U, cache)
    return out


def lstm_backward(dhs: np.ndarray, cache):
    """Backprop through time. ``dhs`` is ``(B, T, H)``; returns ``(dx, dW, dU, db)``."""
    xb, W, U, steps = cache
    bsz, T, _ = xb.shape
    H = U.shape[1]
    dz_all = np.empty((bsz, T, 4 * H))
    dh_next = np.zeros((bsz, H))
    dc_next = np.zeros((bsz, H))
    for t in reversed(range(T)):
        i, f, g, o, c_prev, h_prev, tc = steps[t]
        dh = dhs[:, t] + dh_next
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc * tc)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dz = np.concatenate(
            [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=1
        )
        dz_all[:, t] = dz
        dh_next = dz @ U
        dc_next = dc * f
    dx = dz_all @ W
    dW = np.einsum("btg,btd->gd", dz_all, xb, optimize=True)
    h_prevs = np.stack([s[5] for s in steps], axis=1)
    dU = np.einsum("btg,bth->gh", dz_all, h_prevs, optimize=True)
    db = dz_all.sum(axis=(0, 1))
    return dx, dW, dU, db


# --- dense / activations / loss ---------------------------------------------

def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    xb, squeeze = _as_batch(x, 2)
    if weights.ndim != 2 or xb.shape[1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense: x {xb.shape}, weights {weights.shape}, bias {bias.shape}")
    out = xb @ weights.T + bias
    return out[0] if squeeze else out


def dense_backward(x: np.ndarray, weights: np.ndarray, dout: np.ndarray):
    return dout @ weights, dout.T @ x, dout.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, label):
    """Loss and gradient w.r.t. logits.

    For a batch ``(B, C)`` with integer labels ``(B,)``, returns per-sample
    losses and per-sample gradients (no reduction).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(label)
    C = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= C):
        raise ValueError(f"label out of range [0, {C}): {label}")
    z = logits - np.max(logits, axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    p = np.exp(logp)
    if logits.ndim == 1:
        loss = -logp[labels]
        grad = p.copy()
        grad[labels] -= 1.0
        return float(loss), grad
    rows = np.arange(logits.shape[0])
    loss = -logp[rows, labels]
    grad = p
    grad[rows, labels] -= 1.0
    return loss, grad


# --- optimisation -----------------------------------------------------------

def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float,
             trainable: Iterable[str] | None = None) -> Params:
    """Plain SGD.  Tensors outside ``trainable`` are passed through untouched."""
    if set(params) != set(grads):
        raise ShapeError("params and grads name different tensors")
    train = set(params) if trainable is None else set(trainable)
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        out[name] = p - lr * g if name in train else p
    return out


def gradient_check(closure: Callable[[Params], tuple[float, Params]], params: Mapping[str, np.ndarray],
                   eps: float = 1e-5, max_coords: int = 200, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``closure(params) -> (loss, grads)``.  At most ``max_coords`` coordinates
    per tensor are sampled.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    loss, grads = closure(base)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(base):
        p = base[name]
        flat_idx = np.arange(p.size)
        if p.size > max_coords:
            flat_idx = rng.choice(p.size, size=max_coords, replace=False)
        for idx in flat_idx:
            pos = np.unravel_index(idx, p.shape)
            orig = p[pos]
            p[pos] = orig + eps
            lp, _ = closure(base)
            p[pos] = orig - eps
            lm, _ = closure(base)
            p[pos] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise FloatingPointError("non-finite loss")
            cd = (lp - lm) / (2 * eps)
            a = grads[name][pos]
            err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
            worst = max(worst, err)
    return float(worst)
