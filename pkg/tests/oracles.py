"""Straight-line numpy re-implementation of the model forward pass.

Written with explicit loops over windows and heads, independent of the
Tensor/ops stack, so it can serve as an oracle for the library forward.
"""

import math

import numpy as np


def softmax(a):
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x, g=None, b=None, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + eps)
    if g is not None:
        y = y * g + b
    return y


def gelu(x):
    return 0.5 * x * (1.0 + np.vectorize(math.erf)(x / math.sqrt(2.0)))


def patchify(img, p):
    """``[C, H, W] -> [N, C*p*p]`` with (channel, row, col) feature order."""
    c, h, w = img.shape
    rows = []
    for i in range(h // p):
        for j in range(w // p):
            rows.append(img[:, i * p:(i + 1) * p, j * p:(j + 1) * p].reshape(-1))
    return np.array(rows)


def merge_windows(z, grid):
    """``[N, D] -> [N/4, 4D]`` over 2x2 windows, (row offset, col offset, channel) order."""
    gh, gw = grid
    tok = z.reshape(gh, gw, -1)
    rows = []
    for i in range(gh // 2):
        for j in range(gw // 2):
            rows.append(np.concatenate([tok[2 * i + u, 2 * j + v] for u in range(2) for v in range(2)]))
    return np.array(rows)


def bridge(a_last, P, name, n_cur, normalize=True):
    h_prev, n_prev, _ = a_last.shape
    r = n_prev // n_cur
    dw = P[f"{name}.bridge.dw"]
    pooled = np.zeros((h_prev, n_cur, n_cur))
    for c in range(h_prev):
        for i in range(n_cur):
            for j in range(n_cur):
                pooled[c, i, j] = np.sum(dw[c] * a_last[c, i * r:(i + 1) * r, j * r:(j + 1) * r])
    if normalize:
        pooled = np.stack([(m - m.mean()) / np.sqrt(m.var() + 1e-6) for m in pooled])
    mw, mb = P[f"{name}.bridge.mix_w"], P[f"{name}.bridge.mix_b"]
    out = np.zeros((mw.shape[0], n_cur, n_cur))
    for o in range(mw.shape[0]):
        out[o] = mb[o] + sum(mw[o, c] * pooled[c] for c in range(h_prev))
    return out


def block(z, P, b, kind, heads, prev_scores, a_init=None, ls=None, la_mode="transform"):
    x = layer_norm(z, P[f"{b}.ln1_g"], P[f"{b}.ln1_b"])
    n, d_model = x.shape
    d = d_model // heads
    if kind == "VA":
        q = x @ P[f"{b}.wq"] + P[f"{b}.bq"]
        k = x @ P[f"{b}.wk"] + P[f"{b}.bk"]
        scores = np.stack([q[:, h * d:(h + 1) * d] @ k[:, h * d:(h + 1) * d].T / math.sqrt(d)
                           for h in range(heads)])
        if a_init is not None:
            scores = scores + ls[:, None, None] * a_init
    elif la_mode == "reuse":
        scores = prev_scores
    else:
        tw, tb = P[f"{b}.theta_w"], P[f"{b}.theta_b"]
        pw, pb = P[f"{b}.psi_w"], P[f"{b}.psi_b"]
        scores = np.stack([((prev_scores[h] @ tw + tb).T @ pw + pb).T for h in range(heads)])
    v = x @ P[f"{b}.wv"] + P[f"{b}.bv"]
    heads_out = [softmax(scores[h]) @ v[:, h * d:(h + 1) * d] for h in range(heads)]
    z = z + np.concatenate(heads_out, axis=1) @ P[f"{b}.wo"] + P[f"{b}.bo"]
    y = layer_norm(z, P[f"{b}.ln2_g"], P[f"{b}.ln2_b"])
    z = z + gelu(y @ P[f"{b}.w1"] + P[f"{b}.b1"]) @ P[f"{b}.w2"] + P[f"{b}.b2"]
    return z, scores


def forward(model, images, la_mode="transform"):
    """Logits ``[B, K]`` for mean-pooled models with projection biases."""
    cfg = model.config
    P = model.params.state()
    logits = []
    for img in images:
        z = patchify(img, cfg.patch_size) @ P["embed.w"] + P["embed.b"]
        z = layer_norm(z, P["embed.ln_g"], P["embed.ln_b"])
        last = None
        for m, st in enumerate(cfg.stages):
            name = f"stage{m + 1}"
            a_init = ls = None
            if m > 0:
                z = merge_windows(z, cfg.grid(m - 1)) @ P[f"{name}.down.w"] + P[f"{name}.down.b"]
                z = layer_norm(z, P[f"{name}.down.ln_g"], P[f"{name}.down.ln_b"])
                if cfg.flags.attn_residual:
                    a_init = bridge(last, P, name, cfg.tokens(m), cfg.flags.residual_norm)
                    ls = P[f"{name}.bridge.ls"]
            scores = None
            for li, kind in enumerate(st.layer_kinds(), start=1):
                first = li == 1
                z, scores = block(z, P, f"{name}.block{li}", kind, st.heads, scores,
                                  a_init if first else None, ls, la_mode)
            last = scores
        pooled = layer_norm(z.mean(axis=0), P["head.ln_g"], P["head.ln_b"])
        logits.append(pooled @ P["head.w"] + P["head.b"])
    return np.array(logits)


def set_la_identity(model):
    """Ψ/Θ weights to identity and their biases to zero, in place."""
    values = {}
    for name, t in model.params.items():
        if name.endswith(("theta_w", "psi_w")):
            values[name] = np.eye(t.shape[0])
        elif name.endswith(("theta_b", "psi_b")):
            values[name] = np.zeros(t.shape)
    model.params = model.params.replace(values)
    return model


def perturb(model, seed, scale=0.3):
    """Replace every parameter by a random draw so oracles see non-trivial values."""
    rng = np.random.default_rng(seed)
    values = {}
    for name, t in model.params.items():
        noise = scale * rng.standard_normal(t.shape)
        values[name] = t.data + noise
    model.params = model.params.replace(values)
    return model
