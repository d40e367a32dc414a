"""One-vs-rest logistic regression and linear SVM with balanced class weights.

For class c the binary problem is

    min_{w,b}  0.5 * ||w||^2 + C * sum_i m_i * loss(y_i * (w.x_i + b))

with y_i = +1 for examples of class c and -1 otherwise, m_i the weight of
example i's true class, loss(s) = log(1 + exp(-s)) for LR and
max(0, 1 - s) for the SVM. The bias is not penalised.

LR is solved in the primal with L-BFGS. The SVM is solved in the dual:
small problems with a primal-dual interior-point method, larger ones with
SMO using second-order working-set selection. Either way the bias is then
set by exact minimisation of the primal over b for the final w.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.special import expit

from .errors import DimensionMismatchError, NotConvergedError

log = logging.getLogger(__name__)

KINDS = ("lr", "svm")


@dataclass
class LinearModel:
    kind: str
    weights: np.ndarray  # (K, V)
    bias: np.ndarray  # (K,)
    classes: tuple[str, ...]
    reg_strength: float
    feature_space_ref: str = ""
    trajectories: list[list[float]] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] != len(self.classes):
            raise DimensionMismatchError("weight rows must equal class count")
        if self.bias.shape != (len(self.classes),):
            raise DimensionMismatchError("bias length must equal class count")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ValueError("non-finite model parameters")

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    def decision_matrix(self, X) -> np.ndarray:
        """Scores for a batch, shape (n, K)."""
        if X.shape[1] != self.n_features:
            raise DimensionMismatchError(f"input has {X.shape[1]} features, model expects {self.n_features}")
        wt = self.__dict__.get("_wt")
        if wt is None or wt.shape[::-1] != self.weights.shape:
            wt = self.__dict__["_wt"] = np.ascontiguousarray(self.weights.T)
        return np.asarray(X @ wt) + self.bias

    def predict_batch(self, X) -> np.ndarray:
        return argmax_lowest(self.decision_matrix(X))

    def proba_batch(self, X) -> np.ndarray:
        return scores_to_proba(self.decision_matrix(X))


def argmax_lowest(scores: np.ndarray) -> np.ndarray:
    # np.argmax already returns the first maximum, i.e. the lowest class id
    return np.argmax(scores, axis=-1)


def scores_to_proba(scores: np.ndarray) -> np.ndarray:
    """Per-class sigmoid renormalised to sum to one."""
    s = expit(np.asarray(scores, dtype=np.float64))
    total = s.sum(axis=-1, keepdims=True)
    # every sigmoid underflowed: fall back to a softmax of the raw scores
    tiny = (total <= 1e-300).ravel()
    if tiny.any():
        sc = np.atleast_2d(scores)[tiny]
        e = np.exp(sc - sc.max(axis=-1, keepdims=True))
        s2 = np.atleast_2d(s)
        s2[tiny] = e / e.sum(axis=-1, keepdims=True)
        s = s2.reshape(s.shape)
        total = s.sum(axis=-1, keepdims=True)
    return s / total


def _as_matrix(X, n_features: int | None = None) -> sp.csr_matrix:
    if sp.issparse(X):
        return sp.csr_matrix(X, dtype=np.float64)
    if isinstance(X, np.ndarray):
        return sp.csr_matrix(X.astype(np.float64))
    # sequence of SparseVector
    if n_features is None:
        n_features = 1 + max((int(v.indices.max()) for v in X if v.indices.size), default=-1)
    indptr = np.cumsum([0] + [v.indices.size for v in X])
    idx = np.concatenate([v.indices for v in X]) if X else np.zeros(0, dtype=np.int64)
    val = np.concatenate([v.values for v in X]) if X else np.zeros(0)
    return sp.csr_matrix((val, idx, indptr), shape=(len(X), n_features))


def binary_objective(kind: str, w: np.ndarray, b: float, X, ypm: np.ndarray, m: np.ndarray, C: float) -> float:
    """Primal objective of one one-vs-rest problem."""
    s = ypm * (np.asarray(X @ w).ravel() + b)
    if kind == "lr":
        loss = np.logaddexp(0.0, -s)
    else:
        loss = np.maximum(0.0, 1.0 - s)
    return 0.5 * float(w @ w) + C * float(m @ loss)


def _fit_lr(X: sp.csr_matrix, ypm, m, C, tol, max_iter):
    n, v = X.shape
    Xt = X.T.tocsr()
    trajectory: list[float] = []

    def fun(theta):
        w, b = theta[:v], theta[v]
        s = ypm * (X @ w + b)
        f = 0.5 * w @ w + C * m @ np.logaddexp(0.0, -s)
        # d/ds log(1+e^-s) = -sigmoid(-s)
        coef = -C * m * ypm * expit(-s)
        g = np.empty_like(theta)
        g[:v] = w + Xt @ coef
        g[v] = coef.sum()
        return f, g

    theta0 = np.zeros(v + 1)
    trajectory.append(fun(theta0)[0])
    res = minimize(
        fun,
        theta0,
        jac=True,
        method="L-BFGS-B",
        callback=lambda th: trajectory.append(fun(th)[0]),
        options={"maxiter": max_iter, "maxcor": 20, "ftol": 1e-16, "gtol": tol, "maxls": 50},
    )
    f, g = fun(res.x)
    gnorm = float(np.abs(g).max())
    g0 = float(np.abs(fun(theta0)[1]).max())
    # L-BFGS may stop on line-search precision loss; accept when the
    # gradient has shrunk far below its starting size
    if not res.success and gnorm > max(tol, 1e-7 * max(g0, 1.0)):
        raise NotConvergedError(f"logistic regression did not converge: {res.message} (|g|={gnorm:.3g})")
    return res.x[:v], float(res.x[v]), trajectory


def _best_bias(z, ypm, m, C) -> float:
    """Exact minimiser over b of sum_i C m_i max(0, 1 - y_i (z_i + b)).

    Convex piecewise linear in b with breakpoints y_i - z_i; returns the
    midpoint of the optimal interval.
    """
    u = C * m
    bp = ypm - z
    order = np.argsort(bp, kind="stable")
    bp, yy, uu = bp[order], ypm[order], u[order]
    pos_total = uu[yy > 0].sum()
    # slope just right of breakpoint k
    neg_left = np.cumsum(np.where(yy < 0, uu, 0.0))
    pos_left = np.cumsum(np.where(yy > 0, uu, 0.0))
    slope = -(pos_total - pos_left) + neg_left
    k = int(np.argmax(slope >= -1e-12 * max(uu.sum(), 1.0)))
    if slope[k] > 1e-12 * max(uu.sum(), 1.0) or k == bp.size - 1:
        return float(bp[k])
    return float(0.5 * (bp[k] + bp[k + 1]))


class _GramRows:
    """Rows of X X^T, fully precomputed when small, otherwise LRU cached."""

    def __init__(self, X: sp.csr_matrix, budget_bytes: int = 256 * 2**20):
        self.X = X
        n = X.shape[0]
        self.full = None
        self.cache: OrderedDict[int, np.ndarray] = OrderedDict()
        self.capacity = max(2, budget_bytes // max(8 * n, 1))
        if n * n * 8 <= budget_bytes:
            self.full = np.asarray((X @ X.T).todense())

    def __getitem__(self, i: int) -> np.ndarray:
        if self.full is not None:
            return self.full[i]
        row = self.cache.get(i)
        if row is None:
            row = np.asarray((self.X @ self.X[i].T).todense()).ravel()
            self.cache[i] = row
            if len(self.cache) > self.capacity:
                self.cache.popitem(last=False)
        else:
            self.cache.move_to_end(i)
        return row


def _svm_primal(X, ypm, m, C, alpha):
    w = np.asarray(X.T @ (alpha * ypm)).ravel()
    b = _best_bias(np.asarray(X @ w).ravel(), ypm, m, C)
    return w, b, binary_objective("svm", w, b, X, ypm, m, C)


def _svm_ipm(X, ypm, m, C, tol, max_iter):
    """Mehrotra predictor-corrector on the SVM dual with a feasible start.

    Dual: min 0.5 a'Qa - sum(a)  s.t.  y'a = 0, 0 <= a <= C m.
    """
    n = X.shape[0]
    upper = C * m
    Q = np.asarray((X @ X.T).todense()) * np.outer(ypm, ypm)
    pos = ypm > 0
    target = 0.5 * min(upper[pos].sum(), upper[~pos].sum())
    alpha = np.where(pos, upper * target / upper[pos].sum(), upper * target / upper[~pos].sum())
    z = np.ones(n)
    t = np.ones(n)
    nu = 0.0
    trajectory = [0.5 * alpha @ Q @ alpha - alpha.sum()]
    qscale = 1.0 + np.abs(Q).max()
    for _ in range(max_iter):
        s = upper - alpha
        mu = (alpha @ z + s @ t) / (2 * n)
        rd = Q @ alpha - 1.0 + ypm * nu - z + t
        fval = 0.5 * alpha @ Q @ alpha - alpha.sum()
        if 2 * n * mu <= tol * (1.0 + abs(fval)) and np.abs(rd).max() <= tol * qscale:
            return alpha, trajectory
        M = Q + np.diag(z / alpha + t / s)
        try:
            fac = cho_factor(M, check_finite=False)
        except np.linalg.LinAlgError:
            fac = cho_factor(M + 1e-12 * qscale * np.eye(n), check_finite=False)
        my = cho_solve(fac, ypm, check_finite=False)

        def direction(c1, c2):
            rhs = -rd + c1 / alpha - c2 / s
            v = cho_solve(fac, rhs, check_finite=False)
            dnu = (ypm @ v) / (ypm @ my)
            da = v - my * dnu
            dz = (c1 - z * da) / alpha
            dt = (c2 + t * da) / s
            return da, dnu, dz, dt

        def max_step(da, dz, dt):
            ratios = [1.0]
            for x, dx in ((alpha, da), (s, -da), (z, dz), (t, dt)):
                neg = dx < 0
                if neg.any():
                    ratios.append(float((-x[neg] / dx[neg]).min()))
            return min(ratios)

        da, dnu, dz, dt = direction(-alpha * z, -s * t)
        step = max_step(da, dz, dt)
        mu_aff = ((alpha + step * da) @ (z + step * dz) + (s - step * da) @ (t + step * dt)) / (2 * n)
        sigma = (mu_aff / mu) ** 3
        c1 = sigma * mu - alpha * z - da * dz
        c2 = sigma * mu - s * t + da * dt
        da, dnu, dz, dt = direction(c1, c2)
        step = min(1.0, 0.995 * max_step(da, dz, dt))
        alpha = alpha + step * da
        nu += step * dnu
        z = z + step * dz
        t = t + step * dt
        trajectory.append(0.5 * alpha @ Q @ alpha - alpha.sum())
    raise NotConvergedError(f"interior-point SVM solver did not converge in {max_iter} iterations")


def _svm_smo(X, ypm, m, C, tol, max_iter):
    """Second-order SMO; stops on relative duality gap below `tol`."""
    n = X.shape[0]
    upper = C * m
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 0.5 a'Qa - sum(a), Q_ij = y_i y_j x_i.x_j
    gram = _GramRows(X)
    kdiag = np.asarray(X.multiply(X).sum(axis=1)).ravel()
    pos = ypm > 0
    dual = 0.0
    trajectory = [dual]
    check_every = max(50, n // 10)
    for it in range(max_iter):
        yg = -ypm * grad
        up = np.where(pos, alpha < upper, alpha > 0)
        low = np.where(pos, alpha > 0, alpha < upper)
        yg_up = np.where(up, yg, -np.inf)
        i = int(np.argmax(yg_up))
        gmax = yg_up[i]
        if not up.any() or not low.any() or gmax - np.where(low, yg, np.inf).min() < 1e-12:
            return alpha, trajectory
        if it % check_every == check_every - 1:
            primal = _svm_primal(X, ypm, m, C, alpha)[2]
            if primal + dual <= tol * abs(primal):
                return alpha, trajectory
        ki = gram[i]
        cand = low & (yg < gmax)
        diff = gmax - yg
        a_it = np.maximum(kdiag[i] + kdiag - 2.0 * ki, 1e-12)
        j = int(np.argmin(np.where(cand, -(diff * diff) / a_it, np.inf)))
        kj = gram[j]
        step = diff[j] / a_it[j]
        step = min(step,
                   upper[i] - alpha[i] if pos[i] else alpha[i],
                   alpha[j] if pos[j] else upper[j] - alpha[j])
        alpha[i] = min(max(alpha[i] + ypm[i] * step, 0.0), upper[i])
        alpha[j] = min(max(alpha[j] - ypm[j] * step, 0.0), upper[j])
        # along d = y_i e_i - y_j e_j the dual changes by -diff*step + a*step^2/2
        dual += -diff[j] * step + 0.5 * a_it[j] * step * step
        grad += ypm * (step * (ki - kj))
        trajectory.append(dual)
    raise NotConvergedError(f"SMO did not reach relative gap {tol} in {max_iter} iterations")


IPM_MAX_EXAMPLES = 2000


def _fit_svm(X: sp.csr_matrix, ypm, m, C, tol, max_iter, solver="auto"):
    if solver == "auto":
        solver = "ipm" if X.shape[0] <= IPM_MAX_EXAMPLES else "smo"
    if solver == "ipm":
        alpha, trajectory = _svm_ipm(X, ypm, m, C, min(tol, 1e-10), 200)
    elif solver == "smo":
        alpha, trajectory = _svm_smo(X, ypm, m, C, tol, max_iter)
    else:
        raise ValueError(f"unknown SVM solver {solver!r}")
    w, b, _ = _svm_primal(X, ypm, m, C, alpha)
    return w, b, trajectory


def train_linear(
    kind: str,
    X,
    y: Sequence[int],
    C: float,
    weights: Mapping[int, float] | None = None,
    seed: int = 0,
    classes: Sequence[str] | None = None,
    n_features: int | None = None,
    tol: float | None = None,
    max_iter: int | None = None,
    feature_space_ref: str = "",
    solver: str = "auto",
) -> LinearModel:
    """Fit a one-vs-rest linear model.

    `X` is a CSR matrix, a dense array or a sequence of SparseVector. All
    solvers are deterministic, so `seed` only matters for reproducibility
    bookkeeping. `solver` picks the SVM dual method: "ipm", "smo" or
    "auto" (interior point up to IPM_MAX_EXAMPLES rows).

    With two classes the second one-vs-rest problem is the first with
    labels flipped, so its solution is the exact negation.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    if C <= 0:
        raise ValueError("C must be positive")
    X = _as_matrix(X, n_features)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] != y.size:
        raise DimensionMismatchError(f"{X.shape[0]} rows but {y.size} labels")
    k = int(y.max()) + 1 if classes is None else len(classes)
    if k < 2 or np.unique(y).size < 2:
        raise ValueError("at least two classes are required")
    if classes is None:
        classes = [str(c) for c in range(k)]
    m = np.ones(y.size) if weights is None else np.array([weights[int(c)] for c in y], dtype=np.float64)
    if kind == "lr":
        tol = 1e-9 if tol is None else tol
        max_iter = 15000 if max_iter is None else max_iter
    else:
        tol = 1e-8 if tol is None else tol
        max_iter = 500000 if max_iter is None else max_iter
    W = np.zeros((k, X.shape[1]))
    B = np.zeros(k)
    trajectories = []
    for c in range(k):
        if k == 2 and c == 1:
            W[1], B[1] = -W[0], -B[0]
            trajectories.append(trajectories[0])
            continue
        ypm = np.where(y == c, 1.0, -1.0)
        if (ypm > 0).all() or (ypm < 0).all():
            raise ValueError(f"class {c} has no positive or no negative examples")
        if kind == "lr":
            W[c], B[c], traj = _fit_lr(X, ypm, m, C, tol, max_iter)
        else:
            W[c], B[c], traj = _fit_svm(X, ypm, m, C, tol, max_iter, solver)
        trajectories.append(traj)
        log.debug("class %d: %d solver steps, objective %.6g", c, len(traj), traj[-1])
    return LinearModel(kind, W, B, tuple(classes), float(C), feature_space_ref, trajectories)


def objective(model: LinearModel, X, y: Sequence[int], weights: Mapping[int, float] | None = None) -> float:
    """Sum over classes of the one-vs-rest primal objectives."""
    X = _as_matrix(X, model.n_features)
    y = np.asarray(y)
    m = np.ones(y.size) if weights is None else np.array([weights[int(c)] for c in y])
    return sum(
        binary_objective(model.kind, model.weights[c], model.bias[c], X, np.where(y == c, 1.0, -1.0), m,
                         model.reg_strength)
        for c in range(len(model.classes))
    )


def _row(model: LinearModel, x) -> np.ndarray:
    if hasattr(x, "indices") and hasattr(x, "values"):
        if x.indices.size and int(x.indices.max()) >= model.n_features:
            raise DimensionMismatchError("vector column outside model feature range")
        return model.weights[:, x.indices] @ x.values + model.bias
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.n_features,):
        raise DimensionMismatchError(f"expected {model.n_features} features, got {x.shape}")
    return model.weights @ x + model.bias


def decision_scores(model: LinearModel, x) -> np.ndarray:
    """w_c . x + b_c for each class; `x` is a SparseVector or dense vector."""
    return _row(model, x)


def predict_proba(model: LinearModel, x) -> np.ndarray:
    return scores_to_proba(_row(model, x))


def predict(model: LinearModel, x) -> int:
    return int(argmax_lowest(_row(model, x)))
