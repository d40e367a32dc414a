"""Independent reference implementations used by the tests.

Written directly from the formulas with plain Python containers; none of
them import the code under test.
"""

import math
from collections import Counter

import numpy as np


def naive_tfidf(corpus, max_n, docs=None):
    """(token -> column, list of {token: value}) with pooled-length TF and smooth IDF."""
    docs = corpus if docs is None else docs
    df = Counter()
    for doc in corpus:
        df.update({doc[i:i + n] for n in range(1, max_n + 1) for i in range(len(doc) - n + 1)})
    vocab = sorted(df)
    n_docs = len(corpus)
    idf = {t: math.log((1 + n_docs) / (1 + df[t])) + 1 for t in vocab}
    out = []
    for doc in docs:
        grams = [doc[i:i + n] for n in range(1, max_n + 1) for i in range(len(doc) - n + 1)]
        counts = Counter(g for g in grams if g in idf)
        raw = {t: c / len(grams) * idf[t] for t, c in counts.items()}
        norm = math.sqrt(sum(v * v for v in raw.values()))
        out.append({t: v / norm for t, v in raw.items()} if norm else {})
    return set(vocab), out


def cvx_objective(kind, X, y_pm, m, C):
    """Optimal value of one binary problem via cvxpy (unpenalised bias)."""
    import cvxpy as cp

    n, d = X.shape
    w = cp.Variable(d)
    b = cp.Variable()
    s = cp.multiply(y_pm, X @ w + b)
    if kind == "lr":
        loss = cp.sum(cp.multiply(m, cp.logistic(-s)))
    else:
        loss = cp.sum(cp.multiply(m, cp.pos(1 - s)))
    prob = cp.Problem(cp.Minimize(0.5 * cp.sum_squares(w) + C * loss))
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    return float(prob.value)


def binomial_se(p, n):
    return math.sqrt(p * (1 - p) / n)


def epsilon_chain(a, W, b, eps):
    """Epsilon-rule relevance of inputs `a` through one affine unit z = a.W + b, R_out = z."""
    z = float(a @ W + b)
    zs = z + eps * (1.0 if z >= 0 else -1.0)
    return a * W * z / zs
