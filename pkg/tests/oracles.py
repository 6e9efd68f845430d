"""Independent reference implementations used as test oracles.

Everything here is written with explicit loops or dense linear algebra and
never calls into the package, so agreement is meaningful.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_loops(x, w, b=None):
    """Same-padded zero-fill convolution, one output element at a time."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    r = k // 2
    out = np.zeros((cout, h, wd))
    for o in range(cout):
        for y in range(h):
            for xx in range(wd):
                acc = 0.0 if b is None else float(b[o])
                for c in range(cin):
                    for dy in range(k):
                        for dx in range(k):
                            yy, xs = y + dy - r, xx + dx - r
                            if 0 <= yy < h and 0 <= xs < wd:
                                acc += x[c, yy, xs] * w[o, c, dy, dx]
                out[o, y, xx] = acc
    return out


def attention_loops(q, k, v):
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    d = q.shape[1]
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        scores = [sum(q[i, t] * k[j, t] for t in range(d)) / math.sqrt(d)
                  for j in range(k.shape[0])]
        m = max(scores)
        e = [math.exp(s - m) for s in scores]
        z = sum(e)
        for j in range(k.shape[0]):
            out[i] += (e[j] / z) * v[j]
    return out


def bce_formula(p, g):
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-6, 1 - 1e-6)
    g = np.asarray(g, dtype=np.float64)
    terms = [-(gi * math.log(pi) + (1 - gi) * math.log(1 - pi))
             for pi, gi in zip(p.ravel(), g.ravel())]
    return sum(terms) / len(terms)


def soft_dice_formula(p, g, eps=1.0):
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-6, 1 - 1e-6).ravel()
    g = np.asarray(g, dtype=np.float64).ravel()
    inter = sum(a * b for a, b in zip(p, g))
    return 1.0 - (2 * inter + eps) / (sum(p) + sum(g) + eps)


def conv_design_matrix(feats, D, k):
    """Matrix A with conv2d(F, tau).ravel() == A @ tau.ravel() for tau of shape D×C×k×k."""
    F = np.asarray(feats, dtype=np.float64)
    C, H, W = F.shape
    r = k // 2
    A = np.zeros((D * H * W, D * C * k * k))
    for d in range(D):
        for y in range(H):
            for x in range(W):
                row = (d * H + y) * W + x
                for c in range(C):
                    for dy in range(k):
                        for dx in range(k):
                            yy, xx = y + dy - r, x + dx - r
                            if 0 <= yy < H and 0 <= xx < W:
                                col = ((d * C + c) * k + dy) * k + dx
                                A[row, col] = F[c, yy, xx]
    return A


def ridge_solve(samples, D, k, lam, weights=None):
    """Minimizer of 1/2 sum w_i ||A_i tau - b_i||^2 + lam/2 ||tau||^2 via normal equations."""
    weights = weights or [1.0] * len(samples)
    n = None
    lhs = rhs = None
    for (F, M), w in zip(samples, weights):
        A = conv_design_matrix(F, D, k)
        b = np.asarray(M, dtype=np.float64).ravel()
        if n is None:
            n = A.shape[1]
            lhs = lam * np.eye(n)
            rhs = np.zeros(n)
        lhs += w * A.T @ A
        rhs += w * A.T @ b
    return np.linalg.solve(lhs, rhs)


def ridge_loss(samples, tau, D, k, lam):
    tau = np.asarray(tau, dtype=np.float64).ravel()
    total = 0.5 * lam * float(tau @ tau)
    for F, M in samples:
        r = conv_design_matrix(F, D, k) @ tau - np.asarray(M, dtype=np.float64).ravel()
        total += 0.5 * float(r @ r)
    return total


def dice_brute(p, g):
    p = np.asarray(p).astype(bool)
    g = np.asarray(g).astype(bool)
    inter = sp = sg = 0
    for a, b in zip(p.ravel(), g.ravel()):
        inter += int(a and b)
        sp += int(a)
        sg += int(b)
    if sp + sg == 0:
        return 1.0
    return 2.0 * inter / (sp + sg)


def boundary_brute(m):
    m = np.asarray(m).astype(bool)
    h, w = m.shape
    pts = []
    for y in range(h):
        for x in range(w):
            if not m[y, x]:
                continue
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < h and 0 <= xx < w) or not m[yy, xx]:
                    pts.append((y, x))
                    break
    return pts


def ahd_brute(p, g):
    bp, bg = boundary_brute(p), boundary_brute(g)
    if not bp and not bg:
        return 0.0
    if not bp or not bg:
        h, w = np.asarray(p).shape
        return math.hypot(h, w)

    def directed(src, dst):
        mins = [min(math.sqrt((a - c) ** 2 + (b - d) ** 2) for c, d in dst) for a, b in src]
        return math.fsum(mins) / len(mins)

    return 0.5 * (directed(bp, bg) + directed(bg, bp))


def random_ridge_problem(seed, lam=0.05, min_ratio=4):
    """Seeded learner problem with C<=4, D<=2, k in {1,3}, <=3 samples, maps <=8x8.

    Shapes are redrawn until every output channel sees at least ``min_ratio``
    observations per unknown, which keeps the design matrix well conditioned.
    """
    r = np.random.default_rng(seed)
    while True:
        C = int(r.integers(1, 5))
        D = int(r.integers(1, 3))
        k = int(r.choice([1, 3]))
        n = int(r.integers(1, 4))
        H, W = int(r.integers(2, 9)), int(r.integers(2, 9))
        if n * H * W >= min_ratio * C * k * k:
            break
    samples = [(r.normal(size=(C, H, W)), r.normal(size=(D, H, W))) for _ in range(n)]
    return C, D, k, lam, samples
