"""Standardised ridge probes with grouped inner cross-validation over the regularisation strength."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.metrics import r2_score
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import DimensionError

LAMBDA_GRID = tuple(10.0**k for k in range(-4, 5))
RELIABLE_CV_R2 = 0.85


@dataclass(frozen=True)
class ProbeModel:
    """``y = w . ((z - mu) / sigma) + b``; dimensions with zero train variance carry ``w = 0``."""

    mu: np.ndarray
    sigma: np.ndarray
    w: np.ndarray
    b: float
    lam: float
    cv_r2: float
    target: str = ""
    cv_scores: dict = field(default_factory=dict, compare=False)

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    def predict(self, z) -> np.ndarray:
        return probe_predict(self, z)

    def gradient(self) -> np.ndarray:
        """``dy/dz = w / sigma`` (constant)."""
        return self.w / self.sigma


def standardization(Z: np.ndarray) -> tuple:
    """Train mean and std; zero-variance dimensions get ``sigma = 1`` and are flagged inactive."""
    mu = Z.mean(axis=0)
    sigma = Z.std(axis=0)
    active = sigma > 1e-12 * np.maximum(1.0, np.abs(mu))
    return mu, np.where(active, sigma, 1.0), active


def ridge_solve(Zs: np.ndarray, yc: np.ndarray, lam: float, active=None) -> np.ndarray:
    """Closed form ``(Z^T Z + lam I) w = Z^T y`` on the active columns of standardised ``Zs``."""
    d = Zs.shape[1]
    active = np.ones(d, dtype=bool) if active is None else active
    w = np.zeros(d)
    A = Zs[:, active]
    if A.shape[1]:
        w[active] = np.linalg.solve(A.T @ A + lam * np.eye(A.shape[1]), A.T @ yc)
    return w


def _fit_fixed(Z: np.ndarray, y: np.ndarray, lam: float) -> tuple:
    mu, sigma, active = standardization(Z)
    Zs = (Z - mu) / sigma
    b = float(y.mean())
    w = ridge_solve(Zs, y - b, lam, active)
    return mu, sigma, w, b


def fold_assignment(n: int, n_folds: int, groups=None, seed=0) -> np.ndarray:
    """Seeded fold id per row. Rows sharing a group (design) always share a fold."""
    groups = np.arange(n) if groups is None else np.asarray(groups)
    uniq = np.unique(groups)
    if len(uniq) < n_folds:
        raise ValueError(f"{len(uniq)} groups cannot fill {n_folds} folds")
    perm = np.random.default_rng(seed).permutation(len(uniq))
    fold_of_group = np.empty(len(uniq), dtype=np.int64)
    fold_of_group[perm] = np.arange(len(uniq)) % n_folds
    return fold_of_group[np.searchsorted(uniq, groups)]


def cross_val_r2(Z, y, lam: float, folds: np.ndarray) -> float:
    """Out-of-fold R^2 with standardisation refit inside every fold."""
    oof = np.empty_like(y)
    for f in np.unique(folds):
        tr, te = folds != f, folds == f
        mu, sigma, w, b = _fit_fixed(Z[tr], y[tr], lam)
        oof[te] = ((Z[te] - mu) / sigma) @ w + b
    return float(r2_score(y, oof))


def fit_ridge(Z, y, lambda_grid: Sequence[float] = LAMBDA_GRID, n_folds: int = 5, groups=None,
              seed=0, target: str = "") -> ProbeModel:
    """Standardise on the training rows, pick lambda by grouped k-fold CV R^2, refit on all rows."""
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if Z.ndim != 2 or Z.shape[0] != y.shape[0]:
        raise DimensionError(f"latents {Z.shape} and targets {y.shape} do not align")
    n = Z.shape[0]
    if n < max(n_folds, 10):
        raise ValueError(f"need at least {max(n_folds, 10)} rows for {n_folds}-fold probing, got {n}")
    grid = [float(v) for v in lambda_grid]
    if not grid:
        raise ValueError("lambda grid is empty")
    folds = fold_assignment(n, n_folds, groups, seed)
    scores = {lam: cross_val_r2(Z, y, lam, folds) for lam in grid}
    best = max(grid, key=lambda lam: (scores[lam], -grid.index(lam)))
    mu, sigma, w, b = _fit_fixed(Z, y, best)
    return ProbeModel(mu, sigma, w, b, best, scores[best], target, scores)


def probe_predict(model: ProbeModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.dim:
        raise DimensionError(f"probe expects latent dim {model.dim}, got {z.shape[-1]}")
    out = ((z - model.mu) / model.sigma) @ model.w + model.b
    return out if np.ndim(out) else float(out)


class RidgeProbe(RegressorMixin, BaseEstimator):
    """scikit-learn estimator wrapper around :func:`fit_ridge`.

    ``fit(X, y, groups=None)`` stores ``mean_``, ``scale_``, ``coef_``,
    ``intercept_``, ``alpha_`` and ``cv_r2_``.
    """

    def __init__(self, lambda_grid=LAMBDA_GRID, n_folds: int = 5, random_state: int = 0):
        self.lambda_grid = lambda_grid
        self.n_folds = n_folds
        self.random_state = random_state

    def fit(self, X, y, groups=None):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        m = fit_ridge(X, y, self.lambda_grid, self.n_folds, groups, self.random_state)
        self.model_ = m
        self.mean_, self.scale_, self.coef_, self.intercept_ = m.mu, m.sigma, m.w, m.b
        self.alpha_, self.cv_r2_ = m.lam, m.cv_r2
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return np.asarray(probe_predict(self.model_, X))


@dataclass
class ProbeSuite:
    """Probes of one family, all fit on the same latent rows (so they share ``mu``/``sigma``)."""

    family: str
    latent: str
    models: dict
    heldout_r2: dict = field(default_factory=dict)

    @property
    def mu(self) -> np.ndarray:
        return next(iter(self.models.values())).mu

    @property
    def sigma(self) -> np.ndarray:
        return next(iter(self.models.values())).sigma

    @property
    def targets(self) -> list:
        return list(self.models)

    def weight_matrix(self) -> np.ndarray:
        """Rows ``w_k`` in standardised latent units, ``(K, d)``."""
        return np.stack([m.w for m in self.models.values()])

    def predict(self, z) -> dict:
        return {k: probe_predict(m, z) for k, m in self.models.items()}

    def reliable(self, threshold: float = RELIABLE_CV_R2) -> list:
        return [k for k, m in self.models.items() if m.cv_r2 >= threshold]


FAMILIES = {
    # family: (latent column, target names, dedupe by design)
    "context->design": ("z_ctx", ("thickness", "camber"), True),
    "predicted->coeffs": ("z_pred", ("cl", "cd"), False),
    "predicted->alpha": ("z_pred", ("alpha",), False),
    "context->alpha": ("z_ctx", ("alpha",), False),
}


def _target_column(table, name: str) -> np.ndarray:
    if name == "thickness":
        return table.design[:, 0]
    if name == "camber":
        return table.design[:, 1]
    if name == "alpha":
        return table.conditions[:, 0]
    if name in ("cl", "cd"):
        return getattr(table, name)
    raise KeyError(f"unknown probe target {name!r}")


def _rows(table, dedupe: bool, mask: np.ndarray) -> np.ndarray:
    idx = np.flatnonzero(mask)
    if not dedupe:
        return idx
    _, first = np.unique(table.design_id[idx], return_index=True)
    return idx[np.sort(first)]


def fit_suites(table, lambda_grid=LAMBDA_GRID, n_folds: int = 5, seed=0, families=None) -> tuple:
    """Fit every probe family on training rows; score on held-out (val + test) rows.

    ``context->alpha`` is the control probe (conditions never reach the
    context encoder). Returns ``(suites, report_rows)``; each report row is a
    dict with family, target, lambda, cv_r2, heldout_r2 and a reliability flag.
    """
    for col in ("z_ctx", "z_pred", "design", "conditions", "cl", "cd", "split", "design_id"):
        if not hasattr(table, col):
            raise KeyError(f"latent table is missing column {col!r}")
    train_mask = table.mask("train")
    held_mask = table.mask("val", "test")
    suites, report = {}, []
    for fam in families or FAMILIES:
        col, targets, dedupe = FAMILIES[fam]
        tr = _rows(table, dedupe, train_mask)
        he = _rows(table, dedupe, held_mask)
        Z = getattr(table, col)
        models, held = {}, {}
        for tgt in targets:
            y = _target_column(table, tgt)
            m = fit_ridge(Z[tr], y[tr], lambda_grid, n_folds, table.design_id[tr], seed, tgt)
            models[tgt] = m
            held[tgt] = float(r2_score(y[he], probe_predict(m, Z[he]))) if len(he) >= 2 else float("nan")
            report.append({"family": fam, "target": tgt, "lambda": m.lam, "cv_r2": m.cv_r2,
                           "heldout_r2": held[tgt], "reliable": bool(m.cv_r2 >= RELIABLE_CV_R2)})
        suites[fam] = ProbeSuite(fam, col, models, held)
    return suites, report
