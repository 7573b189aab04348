"""Scalar-loop reference implementations, deliberately independent of the engine."""

import math

import numpy as np


def matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv2d(x, w, b):
    C_in, H, W = x.shape
    C_out, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((C_out, H, W))
    for o in range(C_out):
        for i in range(H):
            for j in range(W):
                s = b[o]
                for c in range(C_in):
                    for dy in range(k):
                        for dx in range(k):
                            yi, xj = i + dy - p, j + dx - p
                            if 0 <= yi < H and 0 <= xj < W:
                                s += w[o, c, dy, dx] * x[c, yi, xj]
                out[o, i, j] = s
    return out


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def pixel_cross_entropy(logits, labels):
    K, H, W = logits.shape
    total = 0.0
    for i in range(H):
        for j in range(W):
            z = [logits[c, i, j] for c in range(K)]
            denom = sum(math.exp(v) for v in z)
            total += -math.log(math.exp(z[labels[i, j]]) / denom)
    return total / (H * W)


def dice(a, b):
    num = 2.0 * sum(x * y for x, y in zip(a, b))
    den = sum(x * x for x in a) + sum(y * y for y in b)
    return num / den


def masks(E, F):
    """sigmoid(E F) with E (T, C), F (C, P)."""
    T, C = E.shape
    P = F.shape[1]
    out = np.zeros((T, P))
    for i in range(T):
        for j in range(P):
            out[i, j] = sigmoid(sum(E[i, c] * F[c, j] for c in range(C)))
    return out


def project(Wp, bp, Fs):
    """1x1 conv as loops: Wp (C, C_s), Fs (C_s, H, W)."""
    C, Cs = Wp.shape
    _, H, W = Fs.shape
    out = np.zeros((C, H, W))
    for c in range(C):
        for i in range(H):
            for j in range(W):
                out[c, i, j] = bp[c] + sum(Wp[c, s] * Fs[s, i, j] for s in range(Cs))
    return out


def mimic(Ft, proj):
    C, H, W = Ft.shape
    s = 0.0
    for c in range(C):
        for i in range(H):
            for j in range(W):
                s += (Ft[c, i, j] - proj[c, i, j]) ** 2
    return s / (H * W * C)


def weighted_region(M, w, Ft, proj, eps=1e-6):
    """sum_i w_i/(C (sum_j M_ij + eps)) ||M_i * Ft - M_i * proj||^2, M (T, HW)."""
    C, H, W = Ft.shape
    T = M.shape[0]
    total = 0.0
    for t in range(T):
        area = sum(M[t, p] for p in range(H * W))
        sq = 0.0
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    m = M[t, i * W + j]
                    sq += (m * Ft[c, i, j] - m * proj[c, i, j]) ** 2
        total += w[t] / (C * (area + eps)) * sq
    return total


def region(M, Ft, proj, eps=1e-6):
    T = M.shape[0]
    return weighted_region(M, [1.0 / T] * T, Ft, proj, eps)


def softmax(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return [x / s for x in e]


def confusion(pred, labels, K):
    cm = np.zeros((K, K), dtype=np.int64)
    for p, t in zip(pred.reshape(-1), labels.reshape(-1)):
        cm[t, p] += 1
    return cm
