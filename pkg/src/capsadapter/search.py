"""Exhaustive hyperparameter grid search on a validation split."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .errors import EmptyGrid, InvalidRange, LengthMismatch, OutOfRangeClass
from .features import FeatureMatrix, OneHotLabels, build_onehot, write_json
from .kernels import (
    DEFAULT_TAU,
    HyperParams,
    _features,
    _kl_term,
    _labels,
    _mixed_support,
    _affinity_from_sim,
    class_sums,
    rescale_phi,
)

Spacing = Literal["linear", "log"]


@dataclass(frozen=True)
class GridSpec:
    alpha_range: tuple[float, float] = (0.1, 50.0)
    alpha_points: int = 7
    beta_range: tuple[float, float] = (1.0, 50.0)
    beta_points: int = 7
    gamma_range: tuple[float, float] = (0.1, 30.0)
    gamma_points: int = 7
    delta_points: int = 11
    alpha_spacing: Spacing = "log"
    beta_spacing: Spacing = "linear"
    gamma_spacing: Spacing = "log"
    tau: float = DEFAULT_TAU


@dataclass
class SupportCache:
    """Everything inference needs besides the query features."""

    w: FeatureMatrix
    f_img: FeatureMatrix
    f_cap: FeatureMatrix | None
    labels: OneHotLabels


@dataclass
class SearchResult:
    best: HyperParams
    best_accuracy: float
    evaluations: int
    log: list[tuple[HyperParams, float]] = field(repr=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["alpha", "beta", "gamma", "delta", "accuracy"])
        for hp, acc in self.log:
            writer.writerow([repr(hp.alpha), repr(hp.beta), repr(hp.gamma), repr(hp.delta), f"{acc:.6f}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def write_best(self, path) -> None:
        write_json(path, {
            "alpha": self.best.alpha, "beta": self.best.beta, "gamma": self.best.gamma,
            "delta": self.best.delta, "tau": self.best.tau,
            "accuracy": self.best_accuracy, "evaluations": self.evaluations,
        })


def axis_values(low: float, high: float, points: int, spacing: Spacing = "linear") -> list[float]:
    if points < 1:
        raise InvalidRange(f"an axis needs at least one point, got {points}")
    if low > high:
        raise InvalidRange(f"low {low} exceeds high {high}")
    if points == 1:
        return [float(low)]
    if spacing == "log":
        if low <= 0:
            raise InvalidRange("log-spaced axes need a positive lower bound")
        return [float(v) for v in np.geomspace(low, high, points)]
    if spacing != "linear":
        raise InvalidRange(f"unknown spacing {spacing!r}")
    step = points - 1
    # i/step keeps values such as 0.3 exact on the unit interval
    return [float(low + (high - low) * (i / step)) for i in range(points)]


def make_grid(spec: GridSpec = GridSpec()) -> list[HyperParams]:
    """Cartesian product in alpha-major, then beta, gamma, delta order."""
    alphas = axis_values(*spec.alpha_range, spec.alpha_points, spec.alpha_spacing)
    betas = axis_values(*spec.beta_range, spec.beta_points, spec.beta_spacing)
    gammas = axis_values(*spec.gamma_range, spec.gamma_points, spec.gamma_spacing)
    deltas = axis_values(0.0, 1.0, spec.delta_points, "linear")
    return [HyperParams(a, b, g, d, spec.tau) for a, b, g, d in product(alphas, betas, gammas, deltas)]


def delta_sweep_grid(alpha: float = 0.1, beta: float = 1.0, gamma: float = 0.1,
                     delta_points: int = 11, tau: float = DEFAULT_TAU) -> list[HyperParams]:
    """Fixed alpha/beta/gamma with delta scanned over [0, 1]."""
    return [HyperParams(alpha, beta, gamma, d, tau) for d in axis_values(0.0, 1.0, delta_points)]


def fixed_grid(alpha: float = 0.1, beta: float = 1.0, gamma: float = 0.1, delta: float = 0.1,
               tau: float = DEFAULT_TAU) -> list[HyperParams]:
    return [HyperParams(alpha, beta, gamma, delta, tau)]


class _Precomputed:
    """Hyperparameter-free pieces shared by every grid point."""

    def __init__(self, f: np.ndarray, cache: SupportCache, mode: str):
        w = _features(cache.w, "w")
        g = _features(cache.f_img, "f_img")
        c = _features(cache.f_cap, "f_cap") if cache.f_cap is not None else None
        if mode in ("m_adapter", "f_variant") and c is None:
            raise ValueError(f"mode {mode!r} needs a caption cache")
        self.labels = _labels(cache.labels, g.shape[0], w.shape[0])
        self.mode = mode
        self.sim_zs = f @ w.T
        self.f, self.g, self.c = f, g, c
        self.neg_ml = _kl_term(f, w, g, self.labels) if mode in ("tipx", "m_adapter") else None
        self._aff: dict[tuple[float, float], tuple[np.ndarray, np.ndarray | None]] = {}

    def affinity_terms(self, beta: float, delta: float):
        key = (beta, 0.0 if self.mode == "tipx" else delta)
        if key not in self._aff:
            support = self.g if self.mode == "tipx" else _mixed_support(self.g, self.c, key[1])
            aff_l = class_sums(_affinity_from_sim(self.f @ support.T, beta), self.labels)
            phi = rescale_phi(self.neg_ml, aff_l) if self.neg_ml is not None else None
            self._aff[key] = (aff_l, phi)
        return self._aff[key]

    def logits(self, hp: HyperParams) -> np.ndarray:
        aff_l, phi = self.affinity_terms(hp.beta, hp.delta)
        out = hp.tau * self.sim_zs + hp.alpha * aff_l
        if phi is not None:
            out = out + hp.gamma * phi
        return out


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def search(val_features, val_labels: Sequence[int], cache: SupportCache, grid: Sequence[HyperParams],
           mode: str = "m_adapter", threads: int = 1) -> SearchResult:
    """Evaluate top-1 validation accuracy at every grid point.

    The best point is the earliest in ``grid`` order attaining the maximum.
    Pieces that only depend on (beta, delta) are computed once per pair.
    """
    if len(grid) == 0:
        raise EmptyGrid("grid has no points")
    if mode not in ("tipx", "m_adapter", "f_variant"):
        raise ValueError(f"unknown search mode {mode!r}")
    f = _features(val_features, "val_features")
    y = np.asarray(val_labels, dtype=np.int64)
    if y.size != f.shape[0]:
        raise LengthMismatch(f"{y.size} labels for {f.shape[0]} validation rows")
    n_classes = cache.w.rows if isinstance(cache.w, FeatureMatrix) else np.asarray(cache.w).shape[0]
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise OutOfRangeClass("validation label out of range")
    if not isinstance(cache.labels, OneHotLabels):
        cache.labels = build_onehot(cache.labels, n_classes)
    pre = _Precomputed(f, cache, mode)

    # fill the (beta, delta) table up front so threaded evaluation is read-only
    keys = list(dict.fromkeys((hp.beta, hp.delta) for hp in grid))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda k: pre.affinity_terms(*k), keys))
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accs = list(pool.map(lambda hp: _accuracy(pre.logits(hp), y), grid))
    else:
        accs = [_accuracy(pre.logits(hp), y) for hp in grid]

    best_i = int(np.argmax(accs))
    log = list(zip(grid, accs))
    return SearchResult(best=grid[best_i], best_accuracy=accs[best_i], evaluations=len(grid), log=log)
