"""One-class SVM anomaly detector and the full scaler -> PCA -> SVM pipeline.

The SVM solves the nu-parameterised dual

    min  1/2 sum_ij a_i a_j K(x_i, x_j)
    s.t. 0 <= a_i <= 1/(nu * l),  sum_i a_i = 1

with sequential minimal optimisation on the maximal violating pair, and
scores windows with ``f(x) = sum_i a_i K(s_i, x) - rho``. Negative scores lie
outside the learned frontier and are treated as anomalous.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import (ConfigError, ContaminationError, ConvergenceError,
                     InsufficientDataError, SchemaMismatchError)
from .features import Column, FeatureConfig, FeatureMatrix, ScalerStats, Vocabulary, fit_scaler
from .reduction import PcaModel, fit_pca

MIN_TRAIN_ROWS = 10
TAU = 1e-12


@dataclass(frozen=True)
class SvmConfig:
    nu: float = 0.05
    kernel: str = "rbf"
    gamma: float | str = "scale"
    tol: float = 1e-6
    max_iter: int = 100_000

    def __post_init__(self):
        if not 0 < self.nu <= 1:
            raise ConfigError("nu", "must lie in (0, 1]")
        if self.kernel not in ("rbf", "linear"):
            raise ConfigError("kernel", "must be 'rbf' or 'linear'")
        if self.gamma != "scale" and not (isinstance(self.gamma, (int, float)) and self.gamma > 0):
            raise ConfigError("gamma", "must be 'scale' or a positive number")
        if not self.tol > 0:
            raise ConfigError("tol", "must be > 0")
        if self.max_iter < 1:
            raise ConfigError("max_iter", "must be >= 1")


def scale_gamma(x: np.ndarray) -> float:
    """``1 / (n_features * var(x))`` over every entry; 1.0 for constant data."""
    var = float(np.var(x))
    return 1.0 / (x.shape[1] * var) if var > 0 else 1.0


def kernel_matrix(a: np.ndarray, b: np.ndarray, kernel: str = "rbf", gamma: float = 1.0) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    dot = a @ b.T
    if kernel == "linear":
        return dot
    d2 = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * dot
    return np.exp(-gamma * np.maximum(d2, 0.0))


class SmoResult(NamedTuple):
    alpha: np.ndarray
    rho: float
    iterations: int
    violation: float
    objective: float


def solve_one_class(K: np.ndarray, nu: float, tol: float = 1e-6,
                    max_iter: int = 100_000) -> SmoResult:
    """SMO on the one-class dual for a precomputed kernel matrix.

    Working set: ``i = argmin G`` over coordinates that may grow and
    ``j = argmax G`` over coordinates that may shrink (``G = K a``), lowest
    index on ties. Stops once ``G_j - G_i <= tol``.
    """
    K = np.ascontiguousarray(K, dtype=float)
    l = K.shape[0]
    C = 1.0 / (nu * l)
    alpha = np.zeros(l)
    n_full = min(int(math.floor(nu * l + 1e-9)), l)
    alpha[:n_full] = C
    if n_full < l:
        alpha[n_full] = max(0.0, min(C, 1.0 - n_full * C))
    G = K @ alpha
    diag = np.diag(K).copy()
    inf = np.inf
    gap = 0.0
    for it in range(max_iter):
        gu = np.where(alpha < C, G, inf)
        gl = np.where(alpha > 0, G, -inf)
        i = int(gu.argmin())
        j = int(gl.argmax())
        gap = gl[j] - gu[i]
        if gap <= tol:
            break
        quad = diag[i] + diag[j] - 2.0 * K[i, j]
        step = gap / (quad if quad > TAU else TAU)
        room_i = C - alpha[i]
        delta = min(step, room_i, alpha[j])
        if delta == room_i:
            alpha[i] = C
        else:
            alpha[i] += delta
        if delta == alpha[j]:
            alpha[j] = 0.0
        else:
            alpha[j] -= delta
        G += delta * (K[i] - K[j])
    else:
        raise ConvergenceError(max_iter, float(gap))
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = float(G[free].mean())
    else:
        rho = float(np.median(G[alpha > 0]))
    return SmoResult(alpha, rho, it, float(max(gap, 0.0)), float(0.5 * alpha @ G))


class OneClassSVM:
    """nu one-class SVM on dense rows."""

    def __init__(self, config: SvmConfig = SvmConfig()):
        self.config = config

    def fit(self, x: np.ndarray) -> "OneClassSVM":
        x = np.asarray(x, dtype=float)
        cfg = self.config
        self.gamma_ = scale_gamma(x) if cfg.gamma == "scale" else float(cfg.gamma)
        K = kernel_matrix(x, x, cfg.kernel, self.gamma_)
        res = solve_one_class(K, cfg.nu, cfg.tol, cfg.max_iter)
        sv = res.alpha > 0
        self.n_train_ = x.shape[0]
        self.support_ = np.flatnonzero(sv)
        self.support_vectors_ = x[sv].copy()
        self.dual_coef_ = res.alpha[sv].copy()
        self.rho_ = res.rho
        self.result_ = res
        return self

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        K = kernel_matrix(x, self.support_vectors_, self.config.kernel, self.gamma_)
        return K @ self.dual_coef_ - self.rho_


def schema_fingerprint(columns) -> str:
    names = [c.name if isinstance(c, Column) else str(c) for c in columns]
    return hashlib.sha256("\n".join(names).encode("utf-8")).hexdigest()


@dataclass(frozen=True, eq=False)
class DetectorModel:
    columns: tuple[Column, ...]
    feature_config: FeatureConfig
    vocabulary: Vocabulary | None
    scaler: ScalerStats
    pca: PcaModel
    support_vectors: np.ndarray
    alpha: np.ndarray
    rho: float
    gamma: float
    config: SvmConfig
    metadata: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return schema_fingerprint(self.columns)

    @property
    def n_train(self) -> int:
        return int(self.metadata["n_train"])

    def embed(self, values: np.ndarray) -> np.ndarray:
        return self.pca.transform(self.scaler.transform(values))

    def decision(self, values: np.ndarray) -> np.ndarray:
        K = kernel_matrix(self.embed(values), self.support_vectors, self.config.kernel, self.gamma)
        return K @ self.alpha - self.rho


def train(benign_fm: FeatureMatrix, config: SvmConfig = SvmConfig(),
          pca_variance: float = 0.95, seed: int = 0) -> DetectorModel:
    """Fit scaler, PCA and one-class SVM on benign windows only."""
    if np.any(benign_fm.labels != 0):
        bad = int(np.flatnonzero(benign_fm.labels != 0)[0])
        raise ContaminationError(f"training rows must all be benign; row {bad} is malicious")
    if benign_fm.n_rows < MIN_TRAIN_ROWS:
        raise InsufficientDataError(
            f"training needs at least {MIN_TRAIN_ROWS} rows, got {benign_fm.n_rows}")
    scaler = fit_scaler(benign_fm)
    xs = scaler.transform(benign_fm.values)
    pca = fit_pca(xs, pca_variance)
    z = pca.transform(xs)
    svm = OneClassSVM(config).fit(z)
    vocab = None
    if any(c.kind == "ngram" or c.kind == "unk" for c in benign_fm.columns):
        vocab = Vocabulary.from_columns(benign_fm.columns, benign_fm.config.ngram_n)
    res = svm.result_
    meta = {"seed": int(seed), "n_train": int(benign_fm.n_rows), "n_support": int(svm.support_.size),
            "iterations": int(res.iterations), "kkt_violation": res.violation,
            "objective": res.objective, "pca_k": pca.k, "pca_degenerate": pca.degenerate}
    return DetectorModel(tuple(benign_fm.columns), benign_fm.config, vocab, scaler, pca,
                         svm.support_vectors_, svm.dual_coef_, svm.rho_, svm.gamma_, config, meta)


def check_schema(model: DetectorModel, columns) -> None:
    got = [c.name for c in columns]
    want = [c.name for c in model.columns]
    if got == want:
        return
    missing = [n for n in want if n not in set(got)]
    unexpected = [n for n in got if n not in set(want)]
    reordered = []
    if not missing and not unexpected:
        reordered = [w for w, g in zip(want, got) if w != g][:5]
    raise SchemaMismatchError(missing, unexpected, reordered)


def score(model: DetectorModel, fm: FeatureMatrix) -> np.ndarray:
    """Decision value per row; ``f < 0`` marks an anomalous window."""
    check_schema(model, fm.columns)
    return model.decision(fm.values)
