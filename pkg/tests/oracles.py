"""Independent reference implementations shared by several test modules."""

import numpy as np


def brute_tree(X, y, w, max_depth, min_leaf=1):
    """Exhaustive reference CART as nested tuples: leaf value or (f, thr, left, right)."""

    def node(idx, depth):
        ww, yy = w[idx], y[idx]
        mean = float(np.dot(ww, yy) / ww.sum())
        sse = float(np.dot(ww, (yy - mean) ** 2))
        if depth >= max_depth or len(idx) < 2 * min_leaf or sse <= 1e-13 * float(np.dot(ww, yy * yy)):
            return mean
        best = None
        for f in range(X.shape[1]):
            vals = sorted(set(X[idx, f]))
            for a, b in zip(vals[:-1], vals[1:]):
                thr = 0.5 * (a + b)
                L, R = idx[X[idx, f] <= thr], idx[X[idx, f] > thr]
                if len(L) < min_leaf or len(R) < min_leaf:
                    continue
                s = 0.0
                for part in (L, R):
                    m = np.dot(w[part], y[part]) / w[part].sum()
                    s += float(np.dot(w[part], (y[part] - m) ** 2))
                if best is None or s < best[0] - 1e-12 * sse:
                    best = (s, f, thr, L, R)
        if best is None:
            return mean
        _, f, thr, L, R = best
        return (f, thr, node(L, depth + 1), node(R, depth + 1))

    return node(np.arange(len(y)), 0)


def as_nested(tree, i=0):
    if tree.feature[i] < 0:
        return float(tree.value[i])
    return (int(tree.feature[i]), float(tree.threshold[i]),
            as_nested(tree, tree.left[i]), as_nested(tree, tree.right[i]))


def nested_predict(t, x):
    while isinstance(t, tuple):
        t = t[2] if x[t[0]] <= t[1] else t[3]
    return t


def same_tree(a, b):
    if isinstance(a, tuple) != isinstance(b, tuple):
        return False
    if not isinstance(a, tuple):
        return abs(a - b) <= 1e-9 * max(1.0, abs(a))
    return a[0] == b[0] and a[1] == b[1] and same_tree(a[2], b[2]) and same_tree(a[3], b[3])


def brute_nearest_counts(S, T, n_neighbors):
    """Count, per source row, how many target rows list it among their nearest."""
    counts = np.zeros(len(S), dtype=int)
    for t in T:
        d = [(float(np.sum((s - t) ** 2)), i) for i, s in enumerate(S)]
        for _, i in sorted(d)[:n_neighbors]:
            counts[i] += 1
    return counts


def kmm_grid_minimum(K, kappa, B, eps, step=1e-3):
    """Smallest two-weight KMM objective over a lattice of feasible points."""
    g = np.arange(0, int(round(B / step)) + 1) * step
    w1, w2 = np.meshgrid(g, g, indexing="ij")
    obj = (0.5 * (K[0, 0] * w1**2 + 2 * K[0, 1] * w1 * w2 + K[1, 1] * w2**2)
           - kappa[0] * w1 - kappa[1] * w2)
    feasible = np.abs(w1 + w2 - 2) <= 2 * eps
    return float(obj[feasible].min())
