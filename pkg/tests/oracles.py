"""Straight-loop double-precision reference implementations.

Deliberately naive: explicit Python loops over voxels, samples, and classes,
independent of the vectorized code paths under test.
"""

import math

import numpy as np


def softmax(v):
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max())
    return e / e.sum()


def pixel_ce_map(logits, labels):
    C, H, W, Z = logits.shape
    out = np.zeros((H, W, Z))
    for h in range(H):
        for w in range(W):
            for z in range(Z):
                p = softmax(logits[:, h, w, z])
                out[h, w, z] = -math.log(p[labels[h, w, z]])
    return out


def transfer_mask(q1, q2):
    return (np.asarray(q1) > np.asarray(q2)).astype(np.int64)


def kl(p, q):
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def pbc_loss(logits1, logits2, tmask, tau):
    C, H, W, Z = logits1.shape
    s1 = s2 = 0.0
    n21 = n12 = 0
    for h in range(H):
        for w in range(W):
            for z in range(Z):
                p1 = softmax(logits1[:, h, w, z] / tau)
                p2 = softmax(logits2[:, h, w, z] / tau)
                if tmask[h, w, z]:
                    s1 += kl(p1, p2)
                    n21 += 1
                else:
                    s2 += kl(p2, p1)
                    n12 += 1
    return (s1 / n21 if n21 else 0.0), (s2 / n12 if n12 else 0.0)


def downsample_labels(labels, target):
    H, W, Z = labels.shape
    th, tw, tz = target
    sh, sw, sz = H // th, W // tw, Z // tz
    out = np.zeros(target, dtype=labels.dtype)
    for i in range(th):
        for j in range(tw):
            for k in range(tz):
                out[i, j, k] = labels[i * sh, j * sw, k * sz]
    return out


def class_prototypes(fused, labels_f, C):
    B, d_f = fused.shape[0], fused.shape[1]
    protos = np.zeros((B, C, d_f))
    valid = np.zeros((B, C), dtype=bool)
    for b in range(B):
        for c in range(C):
            vecs = []
            for h in range(fused.shape[2]):
                for w in range(fused.shape[3]):
                    for z in range(fused.shape[4]):
                        if labels_f[b, h, w, z] == c:
                            vecs.append(fused[b, :, h, w, z])
            if vecs:
                protos[b, c] = np.mean(vecs, axis=0)
                valid[b, c] = True
    return protos, valid


def relation_matrix(protos, valid):
    B, C, d_f = protos.shape
    n = B * C
    flat = protos.reshape(n, d_f)
    vflat = valid.reshape(n)
    r = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if not (vflat[i] and vflat[j]):
                continue
            ni, nj = np.linalg.norm(flat[i]), np.linalg.norm(flat[j])
            if ni == 0 or nj == 0:
                continue
            r[i, j] = float(flat[i] @ flat[j]) / (ni * nj)
    return r


def relational_distance(r1, r2, valid):
    B, C = valid.shape
    n = B * C
    vflat = valid.reshape(n)
    d = np.zeros((B, C))
    for i in range(n):
        if not vflat[i]:
            continue
        s = 0.0
        for j in range(n):
            if vflat[j]:
                s += (r1[i, j] - r2[i, j]) ** 2
        d[i // C, i % C] = s
    return d


def class_uncertainty_weights(logits1, logits2, eps=1e-12):
    B, C = logits1.shape[0], logits1.shape[1]

    def one(logits):
        w = np.zeros((B, C))
        for b in range(B):
            for h in range(logits.shape[2]):
                for wd in range(logits.shape[3]):
                    for z in range(logits.shape[4]):
                        p = softmax(logits[b, :, h, wd, z])
                        for c in range(C):
                            w[b, c] += -p[c] * math.log(p[c] + eps)
        return w

    return (one(logits1) + one(logits2)) / 2


def frc_loss(d_r, weights):
    total = 0.0
    for b in range(d_r.shape[0]):
        for c in range(d_r.shape[1]):
            total += d_r[b, c] * weights[b, c]
    return total


def dice_loss(logits, labels, eps=1e-5):
    C = logits.shape[0]
    inter = np.zeros(C)
    psum = np.zeros(C)
    ysum = np.zeros(C)
    for h in range(logits.shape[1]):
        for w in range(logits.shape[2]):
            for z in range(logits.shape[3]):
                p = softmax(logits[:, h, w, z])
                for c in range(C):
                    y = 1.0 if labels[h, w, z] == c else 0.0
                    inter[c] += p[c] * y
                    psum[c] += p[c]
                    ysum[c] += y
    dice = (2 * inter + eps) / (psum + ysum + eps)
    return 1 - dice.mean()


def task_loss(logits, labels):
    return pixel_ce_map(logits, labels).mean() + dice_loss(logits, labels)


def refine_consistency_loss(initial, refined):
    C, H, W, Z = initial.shape
    total = 0.0
    for h in range(H):
        for w in range(W):
            for z in range(Z):
                total += kl(softmax(initial[:, h, w, z]), softmax(refined[:, h, w, z]))
    return total / (H * W * Z)


def region_dsc(pred, gt, classes):
    p = np.isin(pred, list(classes))
    g = np.isin(gt, list(classes))
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return 2.0 * (p & g).sum() / denom


def finite_diff_grad(fn, x, eps=1e-6):
    """Central finite differences of a scalar function of an ndarray."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (fn(xp) - fn(xm)) / (2 * eps)
        it.iternext()
    return g
