"""Principal component analysis with variance-target component selection."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import AlignmentError, InsufficientDataError
from .features import Column, FeatureMatrix

# Slack on the cumulative-ratio comparison so that e.g. four components of
# 25% each are recognised as reaching a 100% target despite rounding.
RATIO_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray                # (p,)
    components: np.ndarray          # (k, p), orthonormal rows
    explained_variance: np.ndarray  # (k,)
    explained_ratio: np.ndarray     # (k,)
    spectrum_ratio: np.ndarray      # ratios of every component before truncation
    variance_target: float = 0.95
    degenerate: bool = False

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def p(self) -> int:
        return self.components.shape[1]

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.p:
            raise AlignmentError(f"expected width {self.p}, got {x.shape[-1]}")
        return (x - self.mean) @ self.components.T

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) @ self.components + self.mean


def select_k(ratios: np.ndarray, target: float) -> int:
    """Smallest count whose cumulative explained ratio reaches ``target``."""
    cum = np.cumsum(ratios)
    hit = np.flatnonzero(cum >= target - RATIO_SLACK)
    return int(hit[0]) + 1 if hit.size else len(ratios)


def fit_pca(train: FeatureMatrix | np.ndarray, variance_target: float = 0.95) -> PcaModel:
    """Fit on (already scaled) training rows via SVD of the centered matrix.

    Eigenvalues are those of the sample covariance (``ddof=1``). Each kept
    component is signed so that its largest-magnitude entry is positive.
    A zero-variance matrix yields a single unit component flagged degenerate.
    """
    x = train.values if isinstance(train, FeatureMatrix) else np.asarray(train, dtype=float)
    n, p = x.shape
    if n < 2:
        raise InsufficientDataError(f"PCA needs at least 2 rows, got {n}")
    if not 0 < variance_target <= 1:
        raise ValueError("variance_target must lie in (0, 1]")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    eig = s ** 2 / (n - 1)
    total = eig.sum()
    if not total > 0:
        comp = np.zeros((1, p))
        comp[0, 0] = 1.0
        return PcaModel(mean, comp, np.zeros(1), np.ones(1), np.ones(1), variance_target, True)
    ratios = eig / total
    k = select_k(ratios, variance_target)
    comp = vt[:k].copy()
    lead = np.argmax(np.abs(comp), axis=1)
    comp *= np.where(comp[np.arange(k), lead] < 0, -1.0, 1.0)[:, None]
    return PcaModel(mean, comp, eig[:k].copy(), ratios[:k].copy(), ratios, variance_target)


def project(fm: FeatureMatrix, model: PcaModel) -> FeatureMatrix:
    """Map rows onto the kept components; labels and window ids carry through."""
    z = model.transform(fm.values)
    cols = tuple(Column(f"pc{i + 1}", "pc", "none") for i in range(model.k))
    return replace(fm, values=z, columns=cols)


def check_pca(model: PcaModel, tol: float = 1e-8) -> list[str]:
    """Invariant violations of a fitted model (empty when sound)."""
    problems = []
    c = model.components
    if model.mean.shape != (c.shape[1],):
        problems.append("mean length differs from component width")
    if not np.allclose(c @ c.T, np.eye(c.shape[0]), atol=tol, rtol=0):
        problems.append("components are not orthonormal")
    if np.any(np.diff(model.explained_ratio) > tol):
        problems.append("explained ratios are not descending")
    if not model.degenerate and abs(model.spectrum_ratio.sum() - 1.0) > tol:
        problems.append("explained ratios do not sum to 1")
    if model.explained_variance.shape != (c.shape[0],) or model.explained_ratio.shape != (c.shape[0],):
        problems.append("variance arrays do not match component count")
    elif not model.degenerate and model.k != select_k(model.spectrum_ratio, model.variance_target):
        problems.append("component count is not the minimal one for the variance target")
    return problems
