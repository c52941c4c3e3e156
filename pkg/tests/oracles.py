"""Plain-numpy re-implementations used as independent references.

They read weights out of torch modules but compute everything with explicit
loops in float64.
"""

import math

import numpy as np


def W(t):
    return t.detach().double().numpy()


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)


def relu(x):
    return np.maximum(x, 0.0)


def linear(lin, x):
    y = W(lin.weight) @ x
    return y + W(lin.bias) if lin.bias is not None else y


def lstm_step(w_ih, w_hh, b_ih, b_hh, x, h, c):
    g = w_ih @ x + b_ih + w_hh @ h + b_hh
    n = len(h)
    i, f, gg, o = sigmoid(g[:n]), sigmoid(g[n:2 * n]), np.tanh(g[2 * n:3 * n]), sigmoid(g[3 * n:])
    c = f * c + i * gg
    return o * np.tanh(c), c


def encode(seq_encoder, rows):
    lstm = seq_encoder.lstm
    w_ih, w_hh = W(lstm.weight_ih_l0), W(lstm.weight_hh_l0)
    b_ih, b_hh = W(lstm.bias_ih_l0), W(lstm.bias_hh_l0)
    n = lstm.hidden_size
    h, c = np.zeros(n), np.zeros(n)
    for r in np.asarray(rows, dtype=np.float64):
        h, c = lstm_step(w_ih, w_hh, b_ih, b_hh, relu(linear(seq_encoder.embed, r)), h, c)
    return h


def attention_scores(att, x, lanes):
    return np.array([W(att.v.weight)[0] @ np.tanh(W(att.w_hist.weight) @ x + linear(att.w_lane, l))
                     for l in lanes])


def vli(att, x, lanes, m):
    M = len(lanes)
    if M == 1:
        return np.concatenate([lanes[0], np.zeros_like(lanes[0])]), np.zeros(1)
    e = attention_scores(att, x, lanes)
    others = [l for l in range(M) if l != m]
    ex = np.exp(e[others] - e[others].max())
    alpha = np.zeros(M)
    alpha[others] = ex / ex.sum()
    summary = sum(alpha[l] * lanes[l] for l in range(M))
    return np.concatenate([lanes[m], summary]), alpha


def gru_step(cell, x, h):
    w_ih, w_hh = W(cell.weight_ih), W(cell.weight_hh)
    b_ih, b_hh = W(cell.bias_ih), W(cell.bias_hh)
    n = len(h)
    gi, gh = w_ih @ x + b_ih, w_hh @ h + b_hh
    r = sigmoid(gi[:n] + gh[:n])
    z = sigmoid(gi[n:2 * n] + gh[n:2 * n])
    nn_ = np.tanh(gi[2 * n:] + r * gh[2 * n:])
    return (1 - z) * nn_ + z * h


def v2i(gnn, h, pos, rounds=1):
    """Nodes ``h``/``pos`` with index 0 the target; returns sum over others."""
    h = [np.asarray(v, dtype=np.float64) for v in h]
    pos = np.asarray(pos, dtype=np.float64)
    n = len(h)
    for _ in range(rounds):
        new = []
        for i in range(n):
            o = np.zeros(gnn.message.out_features)
            for j in range(n):
                if j != i:
                    o += relu(linear(gnn.message, np.concatenate([pos[j] - pos[i], h[i], h[j]])))
            new.append(gru_step(gnn.update, o, h[i]))
        h = new
    return sum(h[1:], np.zeros_like(h[0]))


def mode_logits(sel, contexts):
    e = np.concatenate([relu(linear(sel.embed, c)) for c in contexts])
    return linear(sel.out, e)


def gaussian_head(head, x):
    mu = linear(head.mu[2], relu(linear(head.mu[0], x)))
    raw = linear(head.sigma[2], relu(linear(head.sigma[0], x)))
    return mu, softplus(raw) + 1e-4


def decode(dec, c, z, start):
    cell = dec.cell
    w_ih, w_hh, b_ih, b_hh = W(cell.weight_ih), W(cell.weight_hh), W(cell.bias_ih), W(cell.bias_hh)
    n = cell.hidden_size
    h, cc = np.zeros(n), np.zeros(n)
    p = np.asarray(start, dtype=np.float64)
    out = []
    for _ in range(dec.horizon):
        e = relu(linear(dec.embed, p / dec.scale))
        h, cc = lstm_step(w_ih, w_hh, b_ih, b_hh, np.concatenate([e, c, z]), h, cc)
        step = linear(dec.out, h) * dec.scale
        p = p + step if dec.residual else step
        out.append(p)
    return np.array(out)


def discriminator(disc, traj, lane_points, lane_enc):
    traj = np.asarray(traj, dtype=np.float64)
    lane_points = np.asarray(lane_points, dtype=np.float64)
    rows = []
    for p in traj:
        d = np.hypot(*(lane_points - p).T)
        rows.append(np.concatenate([p, p - lane_points[int(np.argmin(d))]]))
    y = encode(disc.encoder, rows)
    return float(linear(disc.head, np.concatenate([y, lane_enc]))[0])


def kl_gauss(mu_q, s_q, mu_p, s_p):
    return float(np.sum(np.log(s_p / s_q) + (s_q ** 2 + (mu_q - mu_p) ** 2) / (2 * s_p ** 2) - 0.5))


def bce_elementwise(logits, gt):
    w = np.exp(logits - logits.max())
    w /= w.sum()
    return float(-sum(math.log(w[m]) if m == gt else math.log(1 - w[m]) for m in range(len(w))))
