"""Naive loop-nest reference for the adapter logits.

Plain Python floats and explicit loops, written from the formulas alone.
Must not import anything from capsadapter.kernels.
"""
import math

EPS = 1e-12


def dot(u, v):
    return sum(a * b for a, b in zip(u, v))


def softmax(row):
    m = max(row)
    ex = [math.exp(x - m) for x in row]
    z = sum(ex)
    return [e / z for e in ex]


def kl(p, q):
    return sum(pk * math.log((pk + EPS) / (qk + EPS)) for pk, qk in zip(p, q))


def matmul_labels(a, labels, n_classes):
    """a (t x NM) times one-hot labels given as class index per support row."""
    out = []
    for row in a:
        acc = [0.0] * n_classes
        for j, c in enumerate(labels):
            acc[c] += row[j]
        out.append(acc)
    return out


def rescale(x, target):
    flat_x = [v for row in x for v in row]
    flat_t = [v for row in target for v in row]
    lo, hi = min(flat_x), max(flat_x)
    tlo, thi = min(flat_t), max(flat_t)
    if hi == lo:
        return [[tlo for _ in row] for row in x]
    return [[tlo + (v - lo) / (hi - lo) * (thi - tlo) for v in row] for row in x]


def logits(f_test, w, f_img, f_cap, labels, alpha, beta, gamma, delta, tau,
           use_caption=True, use_kl=True):
    n = len(w)
    t = len(f_test)
    zs = [[tau * dot(f, wk) for wk in w] for f in f_test]

    aff = []
    for f in f_test:
        row = []
        for j in range(len(f_img)):
            if use_caption:
                sim = delta * dot(f, f_cap[j]) + (1 - delta) * dot(f, f_img[j])
            else:
                sim = dot(f, f_img[j])
            row.append(math.exp(-beta * (1 - sim)))
        aff.append(row)
    aff_l = matmul_labels(aff, labels, n)

    out = [[zs[i][k] + alpha * aff_l[i][k] for k in range(n)] for i in range(t)]
    if not use_kl:
        return out

    s = [softmax([dot(f, wk) for wk in w]) for f in f_test]
    S = [softmax([dot(g, wk) for wk in w]) for g in f_img]
    m = [[kl(s[i], S[j]) for j in range(len(f_img))] for i in range(t)]
    neg_ml = [[-v for v in row] for row in matmul_labels(m, labels, n)]
    phi = rescale(neg_ml, aff_l)
    return [[out[i][k] + gamma * phi[i][k] for k in range(n)] for i in range(t)]
