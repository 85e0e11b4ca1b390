"""Numerical kernels for zero-shot, TIP-X, M-Adapter and fast-variant logits.

All arithmetic is float64; inputs may be :class:`FeatureMatrix` or arrays.
Returned logits are plain ``(t, N)`` float64 arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DeltaOutOfRange,
    DimMismatch,
    EmptyInput,
    NotNormalized,
    NotStochastic,
    ShapeMismatch,
)
from .features import NORM_TOL, FeatureMatrix, OneHotLabels, build_onehot

KL_EPS = 1e-12
DEFAULT_TAU = 100.0


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 0.1
    beta: float = 1.0
    gamma: float = 0.1
    delta: float = 0.0
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise DeltaOutOfRange(f"delta must lie in [0, 1], got {self.delta}")
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError("alpha, beta and gamma must be nonnegative")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.alpha, self.beta, self.gamma, self.delta)


def _features(m, name: str, check_norm: bool = True) -> np.ndarray:
    arr = m.data if isinstance(m, FeatureMatrix) else np.asarray(m)
    arr = np.atleast_2d(arr).astype(np.float64)
    if arr.ndim != 2:
        raise DimMismatch(f"{name} must be 2-D")
    if check_norm and arr.size:
        norms = np.sqrt(np.einsum("ij,ij->i", arr, arr))
        if np.any(np.abs(norms - 1.0) > NORM_TOL):
            raise NotNormalized(f"{name} rows are not unit-norm")
    return arr


def _same_dim(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape[1] != b.shape[1]:
        raise DimMismatch(f"{what}: dims {a.shape[1]} and {b.shape[1]} differ")


def _labels(labels, n_support: int, n_classes: int) -> OneHotLabels:
    if not isinstance(labels, OneHotLabels):
        labels = build_onehot(labels, n_classes)
    if labels.rows != n_support:
        raise ShapeMismatch(f"{labels.rows} label rows for {n_support} support samples")
    if labels.n_classes != n_classes:
        raise ShapeMismatch(f"labels have {labels.n_classes} classes, classifier has {n_classes}")
    return labels


def zeroshot_logits(f_test, w, tau: float = DEFAULT_TAU) -> np.ndarray:
    f = _features(f_test, "f_test")
    wm = _features(w, "w")
    _same_dim(f, wm, "zeroshot_logits")
    return tau * (f @ wm.T)


def _affinity_from_sim(sim: np.ndarray, beta: float) -> np.ndarray:
    return np.exp(-beta * (1.0 - sim))


def affinity(f_test, f_img, beta: float) -> np.ndarray:
    """``exp(-beta * (1 - f_test . f_img))`` for every test/support pair."""
    f = _features(f_test, "f_test")
    g = _features(f_img, "f_img")
    _same_dim(f, g, "affinity")
    return _affinity_from_sim(f @ g.T, beta)


def _mixed_support(g: np.ndarray, c: np.ndarray, delta: float) -> np.ndarray:
    # f.(d*c + (1-d)*g) == d*f.c + (1-d)*f.g; exact g when delta == 0
    if delta == 0.0:
        return g
    if delta == 1.0:
        return c
    return delta * c + (1.0 - delta) * g


def multimodal_affinity(f_test, f_img, f_cap, beta: float, delta: float) -> np.ndarray:
    """Affinity against a delta-weighted blend of caption and image similarity."""
    if not 0.0 <= delta <= 1.0:
        raise DeltaOutOfRange(f"delta must lie in [0, 1], got {delta}")
    f = _features(f_test, "f_test")
    g = _features(f_img, "f_img")
    c = _features(f_cap, "f_cap")
    if g.shape != c.shape:
        raise ShapeMismatch(f"f_img {g.shape} and f_cap {c.shape} are not row-aligned")
    _same_dim(f, g, "multimodal_affinity")
    return _affinity_from_sim(f @ _mixed_support(g, c, delta).T, beta)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def signatures(features, w) -> np.ndarray:
    """Row-wise softmax of similarities to the class text embeddings."""
    f = _features(features, "features")
    wm = _features(w, "w")
    _same_dim(f, wm, "signatures")
    return softmax_rows(f @ wm.T)


def _check_stochastic(p: np.ndarray, name: str) -> None:
    if p.ndim != 2 or np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise NotStochastic(f"{name} rows must be probability vectors")


def kl_matrix(s, S) -> np.ndarray:
    """``M[i, j] = KL(s_i || S_j)`` with additive smoothing ``KL_EPS``.

    Expanded as ``sum_k s_ik log(s_ik + eps) - s_i . log(S_j + eps)`` so the
    pairwise term is a single matrix product.
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    _check_stochastic(s, "s")
    _check_stochastic(S, "S")
    if s.shape[1] != S.shape[1]:
        raise DimMismatch("signatures cover different class counts")
    self_term = np.einsum("ik,ik->i", s, np.log(s + KL_EPS))
    return self_term[:, None] - s @ np.log(S + KL_EPS).T


def rescale_phi(x, target) -> np.ndarray:
    """Affine map of ``x`` onto the [min, max] range of ``target``.

    A constant ``x`` maps to ``min(target)`` everywhere.
    """
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if target.size == 0 or x.size == 0:
        raise EmptyInput("rescale_phi needs nonempty input and target")
    lo, hi = x.min(), x.max()
    tlo, thi = target.min(), target.max()
    if hi == lo:
        return np.full_like(x, tlo)
    return tlo + (x - lo) * ((thi - tlo) / (hi - lo))


def class_sums(a: np.ndarray, labels: OneHotLabels) -> np.ndarray:
    """``a @ L`` as a segmented sum over the contiguous class blocks."""
    out = np.zeros((a.shape[0], labels.n_classes), dtype=np.float64)
    counts = labels.class_counts()
    present = np.flatnonzero(counts)
    if present.size:
        starts = labels.class_starts()[present]
        out[:, present] = np.add.reduceat(a, starts, axis=1)
    return out


def _prepare(f_test, w, f_img, labels, f_cap=None):
    f = _features(f_test, "f_test")
    wm = _features(w, "w")
    g = _features(f_img, "f_img")
    _same_dim(f, wm, "f_test/w")
    _same_dim(f, g, "f_test/f_img")
    c = None
    if f_cap is not None:
        c = _features(f_cap, "f_cap")
        if c.shape != g.shape:
            raise ShapeMismatch(f"f_img {g.shape} and f_cap {c.shape} are not row-aligned")
    lab = _labels(labels, g.shape[0], wm.shape[0])
    return f, wm, g, c, lab


def _kl_term(f: np.ndarray, wm: np.ndarray, g: np.ndarray, lab: OneHotLabels) -> np.ndarray:
    """``-M @ L``; hyperparameter-free, always built from image signatures."""
    s = softmax_rows(f @ wm.T)
    S = softmax_rows(g @ wm.T)
    return -class_sums(kl_matrix(s, S), lab)


def _combine(zs, aff_l, neg_ml, hp: HyperParams) -> np.ndarray:
    out = zs + hp.alpha * aff_l
    if neg_ml is not None:
        out = out + hp.gamma * rescale_phi(neg_ml, aff_l)
    return out


def tipx_logits(f_test, w, f_img, labels, hp: HyperParams) -> np.ndarray:
    f, wm, g, _, lab = _prepare(f_test, w, f_img, labels)
    zs = hp.tau * (f @ wm.T)
    aff_l = class_sums(_affinity_from_sim(f @ g.T, hp.beta), lab)
    return _combine(zs, aff_l, _kl_term(f, wm, g, lab), hp)


def m_adapter_logits(f_test, w, f_img, f_cap, labels, hp: HyperParams) -> np.ndarray:
    f, wm, g, c, lab = _prepare(f_test, w, f_img, labels, f_cap)
    zs = hp.tau * (f @ wm.T)
    aff_l = class_sums(_affinity_from_sim(f @ _mixed_support(g, c, hp.delta).T, hp.beta), lab)
    return _combine(zs, aff_l, _kl_term(f, wm, g, lab), hp)


def f_variant_logits(f_test, w, f_img, f_cap, labels, hp: HyperParams) -> np.ndarray:
    """Fast variant: zero-shot plus the multimodal affinity term, no KL."""
    f, wm, g, c, lab = _prepare(f_test, w, f_img, labels, f_cap)
    zs = hp.tau * (f @ wm.T)
    aff_l = class_sums(_affinity_from_sim(f @ _mixed_support(g, c, hp.delta).T, hp.beta), lab)
    return _combine(zs, aff_l, None, hp)


def ablation_logits(f_test, w, f_img, f_cap, labels, hp: HyperParams) -> dict[str, np.ndarray]:
    """Logits for each combination of the affinity and KL terms.

    Keys: ``zeroshot``, ``affinity``, ``kl``, ``affinity+kl``.
    """
    f, wm, g, c, lab = _prepare(f_test, w, f_img, labels, f_cap)
    zs = hp.tau * (f @ wm.T)
    aff_l = class_sums(_affinity_from_sim(f @ _mixed_support(g, c, hp.delta).T, hp.beta), lab)
    neg_ml = _kl_term(f, wm, g, lab)
    phi = rescale_phi(neg_ml, aff_l)
    return {
        "zeroshot": zs,
        "affinity": zs + hp.alpha * aff_l,
        "kl": zs + hp.gamma * phi,
        "affinity+kl": zs + hp.alpha * aff_l + hp.gamma * phi,
    }


METHODS = ("zeroshot", "tipx", "m_adapter", "f_variant")


def method_logits(mode: str, f_test, w, f_img, f_cap, labels, hp: HyperParams) -> np.ndarray:
    if mode == "zeroshot":
        return zeroshot_logits(f_test, w, hp.tau)
    if mode == "tipx":
        return tipx_logits(f_test, w, f_img, labels, hp)
    if mode == "m_adapter":
        return m_adapter_logits(f_test, w, f_img, f_cap, labels, hp)
    if mode == "f_variant":
        return f_variant_logits(f_test, w, f_img, f_cap, labels, hp)
    raise ValueError(f"unknown mode {mode!r}; expected one of {METHODS}")
