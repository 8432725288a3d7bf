"""Minimal trainable transformer: attention/FF blocks with residuals and a
(K+1)-way head, with batched forward pass and manual analytic gradients.

Blocks have no layer norm and no attention scaling; the hypothesis class is
exactly  Att(h) = h + sum_i W_O^i W_V^i h * colsoftmax((W_K^i h)^T W_Q^i h)
followed by  FF(h) = Att(h) + W2 relu(W1 Att(h) + b1 1^T) + b2 1^T,
and per-class logits  f_k = W4_k (W3_k h + b3_k)^T + b4_k.
"""

import io
import json
from dataclasses import dataclass

import numpy as np


class ShapeMismatch(Exception):
    pass


@dataclass
class Budget:
    d_hat: int
    h: int
    m_h: int
    m_V: int
    r: int

    def __post_init__(self):
        for name in ("d_hat", "h", "m_h", "m_V", "r"):
            if getattr(self, name) < 1:
                raise ValueError(f"budget field {name} must be >= 1")


@dataclass
class TransformerModel:
    d_hat0: int
    tau: int
    depth: int
    budget: Budget
    n_classes: int          # K + 1
    params: dict            # name -> ndarray


def init_model(d_hat0, tau, depth, budget, n_id_classes, seed):
    """Fresh model with uniform(-0.1, 0.1) weights and zero biases."""
    rng = np.random.Generator(np.random.Philox(seed))
    d, hh, mh, mv, r = budget.d_hat, budget.h, budget.m_h, budget.m_V, budget.r
    c = n_id_classes + 1

    def w(*shape):
        return rng.uniform(-0.1, 0.1, size=shape)

    params = {"input.W": w(d, d_hat0), "input.b": np.zeros(d)}
    for i in range(depth):
        params[f"blk{i}.WQ"] = w(hh, mh, d)
        params[f"blk{i}.WK"] = w(hh, mh, d)
        params[f"blk{i}.WV"] = w(hh, mv, d)
        params[f"blk{i}.WO"] = w(hh, d, mv)
        params[f"blk{i}.W1"] = w(r, d)
        params[f"blk{i}.b1"] = np.zeros(r)
        params[f"blk{i}.W2"] = w(d, r)
        params[f"blk{i}.b2"] = np.zeros(d)
    params["head.W3"] = w(c, d)
    params["head.b3"] = np.zeros((c, tau))
    params["head.W4"] = w(c, tau)
    params["head.b4"] = np.zeros(c)
    return TransformerModel(d_hat0=d_hat0, tau=tau, depth=depth,
                            budget=budget, n_classes=c, params=params)


def positional_encoding(d_hat0, tau):
    """Fixed sinusoidal encoding, added to the input when tau > 1."""
    pe = np.zeros((d_hat0, tau))
    pos = np.arange(tau, dtype=float)
    for i in range(d_hat0):
        freq = 1.0 / (10000.0 ** (2 * (i // 2) / d_hat0))
        pe[i] = np.sin(pos * freq) if i % 2 == 0 else np.cos(pos * freq)
    return pe


def _colsoftmax4(p):
    """Softmax over axis 2 of an (n, heads, tau, tau) score tensor."""
    shifted = p - p.max(axis=2, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=2, keepdims=True)


def forward_trunk(model, x):
    """Run the input map and all blocks on a batch x of shape (n, d0, tau).

    Returns (hidden, cache) with hidden of shape (n, d_hat, tau).
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 3 or x.shape[1:] != (model.d_hat0, model.tau):
        raise ShapeMismatch(
            f"expected (n, {model.d_hat0}, {model.tau}), got {x.shape}")
    p = model.params
    xpe = x if model.tau == 1 else x + positional_encoding(model.d_hat0, model.tau)
    h = np.einsum("ab,nbt->nat", p["input.W"], xpe) + p["input.b"][None, :, None]
    layers = []
    for i in range(model.depth):
        wq, wk = p[f"blk{i}.WQ"], p[f"blk{i}.WK"]
        wv, wo = p[f"blk{i}.WV"], p[f"blk{i}.WO"]
        w1, b1 = p[f"blk{i}.W1"], p[f"blk{i}.b1"]
        w2, b2 = p[f"blk{i}.W2"], p[f"blk{i}.b2"]
        k_ = np.einsum("hmd,ndt->nhmt", wk, h)
        q_ = np.einsum("hmd,ndt->nhmt", wq, h)
        v_ = np.einsum("hvd,ndt->nhvt", wv, h)
        scores = np.einsum("nhmt,nhms->nhts", k_, q_)
        s = _colsoftmax4(scores)
        av = np.einsum("nhvt,nhts->nhvs", v_, s)
        att = h + np.einsum("hdv,nhvs->nds", wo, av)
        z = np.einsum("rd,ndt->nrt", w1, att) + b1[None, :, None]
        relu = np.maximum(z, 0.0)
        h_next = att + np.einsum("dr,nrt->ndt", w2, relu) + b2[None, :, None]
        layers.append((h, k_, q_, v_, s, av, att, z, relu))
        h = h_next
    return h, {"xpe": xpe, "layers": layers, "hidden": h}


def head_forward(model, hidden):
    """Classifier logits for a batch of hidden states (n, d_hat, tau)."""
    p = model.params
    g = np.einsum("kd,ndt->nkt", p["head.W3"], hidden) + p["head.b3"][None]
    logits = (p["head.W4"][None] * g).sum(axis=2) + p["head.b4"][None]
    return logits, g


def head_backward(model, hidden, g, dlogits):
    """Gradients of the classifier head; also returns d(hidden)."""
    p = model.params
    grads = {
        "head.b4": dlogits.sum(axis=0),
        "head.W4": np.einsum("nk,nkt->kt", dlogits, g),
    }
    dg = dlogits[:, :, None] * p["head.W4"][None]
    grads["head.b3"] = dg.sum(axis=0)
    grads["head.W3"] = np.einsum("nkt,ndt->kd", dg, hidden)
    dhidden = np.einsum("kd,nkt->ndt", p["head.W3"], dg)
    return grads, dhidden


def trunk_backward(model, cache, dhidden):
    """Gradients of the input map and all blocks given d(hidden)."""
    p = model.params
    grads = {}
    dh = dhidden
    for i in reversed(range(model.depth)):
        h_in, k_, q_, v_, s, av, att, z, relu = cache["layers"][i]
        w1, w2 = p[f"blk{i}.W1"], p[f"blk{i}.W2"]
        wq, wk = p[f"blk{i}.WQ"], p[f"blk{i}.WK"]
        wv, wo = p[f"blk{i}.WV"], p[f"blk{i}.WO"]
        dout = dh
        grads[f"blk{i}.b2"] = dout.sum(axis=(0, 2))
        grads[f"blk{i}.W2"] = np.einsum("ndt,nrt->dr", dout, relu)
        drelu = np.einsum("dr,ndt->nrt", w2, dout) * (z > 0)
        grads[f"blk{i}.W1"] = np.einsum("nrt,ndt->rd", drelu, att)
        grads[f"blk{i}.b1"] = drelu.sum(axis=(0, 2))
        datt = dout + np.einsum("rd,nrt->ndt", w1, drelu)
        grads[f"blk{i}.WO"] = np.einsum("nds,nhvs->hdv", datt, av)
        dav = np.einsum("hdv,nds->nhvs", wo, datt)
        dv_ = np.einsum("nhvs,nhts->nhvt", dav, s)
        ds = np.einsum("nhvt,nhvs->nhts", v_, dav)
        dscores = s * (ds - (s * ds).sum(axis=2, keepdims=True))
        dk_ = np.einsum("nhms,nhts->nhmt", q_, dscores)
        dq_ = np.einsum("nhmt,nhts->nhms", k_, dscores)
        grads[f"blk{i}.WK"] = np.einsum("nhmt,ndt->hmd", dk_, h_in)
        grads[f"blk{i}.WQ"] = np.einsum("nhmt,ndt->hmd", dq_, h_in)
        grads[f"blk{i}.WV"] = np.einsum("nhvt,ndt->hvd", dv_, h_in)
        dh = (datt
              + np.einsum("hmd,nhmt->ndt", wk, dk_)
              + np.einsum("hmd,nhmt->ndt", wq, dq_)
              + np.einsum("hvd,nhvt->ndt", wv, dv_))
    grads["input.W"] = np.einsum("nat,nbt->ab", dh, cache["xpe"])
    grads["input.b"] = dh.sum(axis=(0, 2))
    return grads


def forward(model, x):
    """Single-sample forward: x (d0, tau) -> (hidden (d_hat, tau), logits (K+1,))."""
    hidden, _ = forward_trunk(model, np.asarray(x, dtype=float)[None])
    logits, _ = head_forward(model, hidden)
    return hidden[0], logits[0]


def backward(model, x, dlogits):
    """Full analytic gradient for a batch x and upstream d(logits)."""
    hidden, cache = forward_trunk(model, x)
    logits, g = head_forward(model, hidden)
    head_grads, dhidden = head_backward(model, hidden, g, dlogits)
    grads = trunk_backward(model, cache, dhidden)
    grads.update(head_grads)
    return grads


def classify_max(logits):
    """Label in {1..K+1}; lowest index wins ties."""
    return int(np.argmax(logits)) + 1


def classify_scored(logits, score_fn, lambda_thr):
    """Score-based rule: K+1 when the score is below lambda, else argmax."""
    if score_fn(logits) < lambda_thr:
        return len(logits)
    return classify_max(logits)


def sgd_step(model, grads, lr, weight_decay=0.0):
    for name, p in model.params.items():
        p -= lr * (grads[name] + weight_decay * p)
    return model


@dataclass
class AdamWState:
    m: dict
    v: dict
    t: int = 0


def adamw_init(model):
    return AdamWState(m={k: np.zeros_like(v) for k, v in model.params.items()},
                      v={k: np.zeros_like(v) for k, v in model.params.items()})


def adamw_step(model, grads, state, lr=1e-4, beta1=0.9, beta2=0.999,
               eps=1e-8, weight_decay=5e-2):
    """Decoupled weight decay AdamW update, deterministic given state."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in model.params.items():
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p)
    return model


CHECKPOINT_VERSION = 1


def save_model(model, path):
    """Versioned binary checkpoint; round-trips bit-exact."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "d_hat0": model.d_hat0, "tau": model.tau, "depth": model.depth,
        "budget": [model.budget.d_hat, model.budget.h, model.budget.m_h,
                   model.budget.m_V, model.budget.r],
        "n_classes": model.n_classes,
    }
    arrays = {f"param::{k}": v for k, v in model.params.items()}
    arrays["meta"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path):
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        params = {k[len("param::"):]: data[k] for k in data.files
                  if k.startswith("param::")}
    return TransformerModel(d_hat0=meta["d_hat0"], tau=meta["tau"],
                            depth=meta["depth"], budget=Budget(*meta["budget"]),
                            n_classes=meta["n_classes"], params=params)
