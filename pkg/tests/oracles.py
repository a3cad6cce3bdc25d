"""Independent reference implementations used as test oracles.

Nothing here imports the package's autodiff or fused ops: loops and
straight-line numpy only, so agreement with the library is evidence rather
than tautology.
"""

import math

import numpy as np


def loop_cosine(a, b):
    out = np.zeros((len(a), len(b)))
    for i in range(len(a)):
        for j in range(len(b)):
            s = 0.0
            for k in range(len(a[i])):
                s += a[i][k] * b[j][k]
            out[i, j] = s
    return out


def loop_affinity(q, keys, beta):
    out = np.zeros((len(q), len(keys)))
    for i in range(len(q)):
        for j in range(len(keys)):
            out[i, j] = math.exp(-beta * (1.0 - float(np.dot(q[i], keys[j]))))
    return out


def loop_cache_logits(q, keys, labels, n_classes, beta):
    out = np.zeros((len(q), n_classes))
    for i in range(len(q)):
        for j in range(len(keys)):
            sim = 0.0
            for k in range(len(q[i])):
                sim += q[i][k] * keys[j][k]
            out[i, labels[j]] += math.exp(-beta * (1.0 - sim))
    return out


def loop_clip_logits(f, w, scale):
    out = np.zeros((len(f), len(w)))
    for i in range(len(f)):
        for j in range(len(w)):
            s = 0.0
            for k in range(len(f[i])):
                s += f[i][k] * w[j][k]
            out[i, j] = scale * s
    return out


def loop_final(clip, cache, alpha):
    out = np.zeros_like(clip)
    for i in range(clip.shape[0]):
        for j in range(clip.shape[1]):
            out[i, j] = alpha * cache[i, j] + clip[i, j]
    return out


def ref_ce(logits, y):
    total = 0.0
    for row, t in zip(logits, y):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[t]
    return total / len(y)


def _rms(h, eps=1e-6):
    return h / np.sqrt(np.mean(h * h, axis=-1, keepdims=True) + eps)


def _positions(length, dim):
    pe = np.zeros((length, dim))
    for pos in range(length):
        for i in range(0, dim, 2):
            angle = pos / (10000.0 ** (i / dim))
            pe[pos, i] = math.sin(angle)
            if i + 1 < dim:
                pe[pos, i + 1] = math.cos(angle)
    return pe


def ref_encode(enc, prompt_vectors, tokens, table=None):
    """Straight-line forward pass of one (prompt, class tokens) sequence."""
    table = enc.token_table if table is None else table
    x = np.concatenate([np.reshape(prompt_vectors, (-1, table.shape[1])), table[list(tokens)]])
    h = x + _positions(x.shape[0], x.shape[1])
    d_e = x.shape[1]
    for blk in enc.blocks:
        z = _rms(h)
        q, k, v = z @ blk.wq, z @ blk.wk, z @ blk.wv
        s = q @ k.T / math.sqrt(d_e)
        s = np.exp(s - s.max(axis=1, keepdims=True))
        att = s / s.sum(axis=1, keepdims=True)
        h = h + att @ v @ blk.wo
        z = _rms(h)
        h = h + np.tanh(z @ blk.ff1) @ blk.ff2
    out = h[-1] @ enc.projection
    return out / np.linalg.norm(out)


def ref_classifier(enc, prompt_vectors, classes, table=None):
    return np.stack([ref_encode(enc, prompt_vectors, c.tokens, table) for c in classes])


def ref_prompt_loss(enc, prompt_vectors, classes, x, y, scale):
    w = ref_classifier(enc, prompt_vectors, classes)
    return ref_ce(scale * (x @ w.T), y)


def ref_cache_key_loss(x, keys, labels, n_classes, alpha, beta, clip, y):
    return ref_ce(alpha * loop_cache_logits(x, keys, labels, n_classes, beta) + clip, y)


def ref_joint_loss(enc, prompt_vectors, keys, labels, n_classes, classes, x, y, alpha, beta, scale):
    w = ref_classifier(enc, prompt_vectors, classes)
    return ref_cache_key_loss(x, keys, labels, n_classes, alpha, beta, scale * (x @ w.T), y)


def central_difference(f, p, h=1e-4):
    """Central-difference gradient of scalar ``f`` at ``p``."""
    p = np.array(p, dtype=np.float64)
    g = np.zeros_like(p)
    flat, gf = p.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(p)
        flat[k] = orig - h
        fm = f(p)
        flat[k] = orig
        gf[k] = (fp - fm) / (2 * h)
    return g


def rel_error(fd, g):
    return float(np.max(np.abs(fd - g) / np.maximum(1.0, np.abs(g))))
