"""Per-action predictive models: linear SVM, Platt calibration, AUC and CV."""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from ._dualcd import dual_cd

MODEL_FORMAT_VERSION = 1


class DegenerateLabelsError(ValueError):
    pass


class PlattConvergenceError(RuntimeError):
    def __init__(self, message, last):
        super().__init__(message)
        self.last = last


@dataclass(frozen=True)
class TrainConfig:
    C: float = 0.1
    class_weighting: str = "inverse-frequency"
    cv_folds: int = 5
    tolerance: float = 1e-3
    max_iterations: int = 3000
    kkt_tolerance: float | None = None
    seed: int = 0
    c_grid: tuple = (0.01, 0.1, 1.0, 10.0)

    def __post_init__(self):
        if self.C <= 0 or self.tolerance <= 0 or self.max_iterations < 1:
            raise ValueError("C, tolerance and max_iterations must be positive")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be >= 2")
        if self.class_weighting not in ("none", "inverse-frequency"):
            raise ValueError(f"unknown class weighting {self.class_weighting!r}")
        if any(c <= 0 for c in self.c_grid):
            raise ValueError("c_grid values must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["c_grid"] = list(self.c_grid)
        return d

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float
    alpha: np.ndarray | None = field(default=None, repr=False, compare=False)
    n_iter: int = field(default=0, compare=False)
    gap: float = field(default=0.0, compare=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if not (np.all(np.isfinite(self.weights)) and math.isfinite(self.bias)):
            raise ValueError("non-finite model parameters")


@dataclass(frozen=True)
class PlattCalibration:
    A: float
    B: float


def _as_pm1(y) -> np.ndarray:
    y = np.asarray(y)
    if y.dtype == bool:
        return np.where(y, 1.0, -1.0)
    y = y.astype(float)
    if not np.all(np.isin(y, (-1.0, 1.0))):
        if np.all(np.isin(y, (0.0, 1.0))):
            return np.where(y > 0, 1.0, -1.0)
        raise ValueError("labels must be +/-1, 0/1 or boolean")
    return y


def sample_bounds(y: np.ndarray, C: float, class_weighting: str) -> np.ndarray:
    """Per-example box constraint C_i."""
    if class_weighting == "none":
        return np.full(len(y), float(C))
    n = len(y)
    n_pos = np.sum(y > 0)
    n_neg = n - n_pos
    return np.where(y > 0, C * n / (2.0 * n_pos), C * n / (2.0 * n_neg))


def _augment(X: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.hstack([X, np.ones((X.shape[0], 1))]))


def train_linear_svm(X, y, cfg: TrainConfig = TrainConfig(), C: float | None = None) -> LinearModel:
    """Soft-margin linear SVM by dual coordinate descent.

    The bias is learned as the weight of an appended constant feature, so it
    is regularized together with the other weights.  Coordinates are visited
    in a permutation drawn from ``cfg.seed`` each epoch.  Stops once the
    relative duality gap is below ``cfg.tolerance`` (and, if set, every
    projected gradient below ``cfg.kkt_tolerance``).
    """
    X = np.asarray(X, dtype=float)
    y = _as_pm1(y)
    if X.ndim != 2 or X.shape[0] != len(y):
        raise ValueError("X must be (n, d) with one label per row")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite feature values")
    if np.all(y > 0) or np.all(y < 0):
        raise DegenerateLabelsError("degenerate labels: need both classes")
    C = cfg.C if C is None else C
    upper = sample_bounds(y, C, cfg.class_weighting)
    Xa = _augment(X)
    alpha = np.zeros(len(y))
    w = np.zeros(Xa.shape[1])
    kkt = np.inf if cfg.kkt_tolerance is None else cfg.kkt_tolerance
    epochs, gap, pg = dual_cd(Xa, y, upper, alpha, w, cfg.tolerance, kkt,
                              cfg.max_iterations, cfg.seed)
    if gap > cfg.tolerance or pg > kkt:
        warnings.warn(f"SVM stopped after {epochs} epochs with gap {gap:.2e}, "
                      f"KKT violation {pg:.2e}", RuntimeWarning, stacklevel=2)
    return LinearModel(w[:-1].copy(), float(w[-1]), alpha, int(epochs), float(gap))


def svm_dual_objective(X, y, alpha) -> float:
    """sum(alpha) - 0.5 * ||sum(alpha_i y_i [x_i, 1])||^2."""
    y = _as_pm1(y)
    v = _augment(np.asarray(X, dtype=float)).T @ (np.asarray(alpha) * y)
    return float(np.sum(alpha) - 0.5 * v @ v)


def kkt_residuals(X, y, model: LinearModel, C: float, class_weighting="none") -> np.ndarray:
    """Projected-gradient magnitude per dual variable."""
    y = _as_pm1(y)
    upper = sample_bounds(y, C, class_weighting)
    g = y * (np.asarray(X, dtype=float) @ model.weights + model.bias) - 1.0
    a = model.alpha
    pg = np.where(a <= 0, np.minimum(g, 0), np.where(a >= upper, np.maximum(g, 0), g))
    return np.abs(pg)


def decision_value(m: LinearModel, x) -> np.ndarray | float:
    """f(x) = <w, x> + b for a vector or a row-stacked matrix."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != len(m.weights):
        raise ValueError(f"dimension mismatch: model has {len(m.weights)} weights, "
                         f"input has {x.shape[-1]} features")
    f = x @ m.weights + m.bias
    return float(f) if np.ndim(f) == 0 else f


def sigmoid_probability(f, A: float, B: float):
    """1 / (1 + exp(A f + B)), evaluated without overflow."""
    z = A * np.asarray(f, dtype=float) + B
    out = np.where(z >= 0, np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))),
                   1.0 / (1.0 + np.exp(-np.abs(z))))
    return float(out) if out.ndim == 0 else out


def _platt_objective(f, t, A, B):
    z = A * f + B
    # sum of t*z + log(1 + exp(-z)), stable for both signs
    return float(np.sum(np.where(z >= 0, t * z + np.log1p(np.exp(-z)),
                                 (t - 1.0) * z + np.log1p(np.exp(z)))))


def fit_platt(decision_values, labels, max_iter: int = 100, gtol: float = 1e-8) -> PlattCalibration:
    """Fit the sigmoid P(y=1|f) = 1/(1+exp(A f + B)) by Newton's method.

    Targets are smoothed to (N+ + 1)/(N+ + 2) and 1/(N- + 2).  Iterates until
    the mean-gradient infinity norm drops to ``gtol``.
    """
    f = np.asarray(decision_values, dtype=float)
    y = _as_pm1(labels)
    n_pos = int(np.sum(y > 0))
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("Platt fit needs both classes")
    t = np.where(y > 0, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
    n = len(f)
    A, B = 0.0, math.log((n_neg + 1.0) / (n_pos + 1.0))
    obj = _platt_objective(f, t, A, B)
    for _ in range(max_iter):
        p = sigmoid_probability(f, A, B)
        d1 = t - p
        d2 = p * (1.0 - p)
        gA, gB = float(f @ d1), float(d1.sum())
        if max(abs(gA), abs(gB)) / n <= gtol:
            return PlattCalibration(A, B)
        h11 = float(f * f @ d2) + 1e-12
        h22 = float(d2.sum()) + 1e-12
        h21 = float(f @ d2)
        det = h11 * h22 - h21 * h21
        dA = -(h22 * gA - h21 * gB) / det
        dB = -(-h21 * gA + h11 * gB) / det
        step = 1.0
        decrease = gA * dA + gB * dB
        while step >= 1e-10:
            nA, nB = A + step * dA, B + step * dB
            nobj = _platt_objective(f, t, nA, nB)
            if nobj <= obj + 1e-4 * step * decrease:
                A, B, obj = nA, nB, nobj
                break
            step /= 2.0
        else:
            # no representable decrease left; accept if the gradient is at round-off level
            if max(abs(gA), abs(gB)) / n <= 1e3 * gtol:
                return PlattCalibration(A, B)
            raise PlattConvergenceError("line search failed", PlattCalibration(A, B))
    raise PlattConvergenceError(f"no convergence in {max_iter} iterations",
                                PlattCalibration(A, B))


def auc(scores, labels) -> float:
    """Wilcoxon-Mann-Whitney AUC with ties counted one half, via ranks."""
    s = np.asarray(scores, dtype=float)
    y = _as_pm1(labels)
    pos = y > 0
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("AUC needs both classes")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def stratified_folds(y, k: int, seed: int) -> np.ndarray:
    """Fold id per example; each class is shuffled and dealt round-robin."""
    y = _as_pm1(y)
    rng = np.random.default_rng(seed)
    folds = np.empty(len(y), dtype=int)
    offset = 0
    for cls in (1.0, -1.0):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(len(idx))]
        folds[idx] = (np.arange(len(idx)) + offset) % k
        offset += len(idx)
    return folds


def effective_folds(y, k: int) -> int:
    y = _as_pm1(y)
    minority = int(min(np.sum(y > 0), np.sum(y < 0)))
    if minority < 2:
        raise DegenerateLabelsError("cross-validation needs >= 2 examples of each class")
    if minority < k:
        warnings.warn(f"minority class has {minority} examples; using {minority} folds",
                      RuntimeWarning, stacklevel=3)
        return minority
    return k


def cross_validated_decisions(X, y, cfg: TrainConfig = TrainConfig(), C: float | None = None):
    """Out-of-fold decision values and the mean per-fold AUC."""
    X = np.asarray(X, dtype=float)
    y = _as_pm1(y)
    k = effective_folds(y, cfg.cv_folds)
    folds = stratified_folds(y, k, cfg.seed)
    out = np.empty(len(y))
    aucs = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for fold in range(k):
            test = folds == fold
            m = train_linear_svm(X[~test], y[~test], cfg, C)
            out[test] = decision_value(m, X[test])
            aucs.append(auc(out[test], y[test]))
    return out, float(np.mean(aucs))


def cross_validated_auc(X, y, cfg: TrainConfig = TrainConfig(), C: float | None = None) -> float:
    """Mean held-out AUC over seeded stratified folds."""
    return cross_validated_decisions(X, y, cfg, C)[1]


@dataclass
class CalibratedModel:
    """P(y=1|x) for one action over a subset of catalog columns."""

    action: str
    feature_index: np.ndarray
    linear: LinearModel
    platt: PlattCalibration
    selected_groups: list
    cv_auc: float
    n_features: int
    catalog_fingerprint: str = ""
    C: float = 1.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.feature_index = np.asarray(self.feature_index, dtype=int)
        if not 0.0 <= self.cv_auc <= 1.0:
            raise ValueError("cv_auc outside [0, 1]")
        if not self.selected_groups:
            raise ValueError("a model needs at least one feature group")

    def decision(self, X) -> np.ndarray | float:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.n_features:
            raise ValueError(f"dimension mismatch: model expects {self.n_features} "
                             f"features, input has {X.shape[-1]}")
        return decision_value(self.linear, X[..., self.feature_index])

    def to_json(self) -> str:
        nz = np.flatnonzero(self.linear.weights)
        doc = {
            "format_version": MODEL_FORMAT_VERSION,
            "action": self.action,
            "n_features": self.n_features,
            "catalog_fingerprint": self.catalog_fingerprint,
            "weights": [[int(self.feature_index[i]), float(self.linear.weights[i])] for i in nz],
            "feature_index": [int(i) for i in self.feature_index],
            "bias": self.linear.bias,
            "A": self.platt.A,
            "B": self.platt.B,
            "C": self.C,
            "selected_groups": list(self.selected_groups),
            "cv_auc": self.cv_auc,
            "metadata": self.metadata,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CalibratedModel":
        doc = json.loads(text)
        if doc.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format {doc.get('format_version')!r}")
        index = np.array(doc["feature_index"], dtype=int)
        pos = {c: k for k, c in enumerate(index)}
        w = np.zeros(len(index))
        for col, val in doc["weights"]:
            w[pos[col]] = val
        return cls(doc["action"], index, LinearModel(w, doc["bias"]),
                   PlattCalibration(doc["A"], doc["B"]), doc["selected_groups"],
                   doc["cv_auc"], doc["n_features"], doc["catalog_fingerprint"],
                   doc["C"], doc.get("metadata", {}))


def predict_probability(cm: CalibratedModel, x):
    """P(y=1|x) = 1/(1+exp(A f(x) + B))."""
    return sigmoid_probability(cm.decision(x), cm.platt.A, cm.platt.B)
