"""Slow, loop-based reference implementations used only by the tests.

Nothing here imports from the package under test; each function is written
from the defining formula so it can serve as an independent check.
"""
import itertools
import math

import numpy as np


def brute_force_ot(cost):
    """Exact OT cost for a square problem with uniform marginals.

    With n rows and n columns of mass 1/n the optimal coupling is a scaled
    permutation matrix, so enumerating permutations is exact.
    """
    n = len(cost)
    best = min(sum(cost[i][p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
    return best / n


def brute_force_assignment(cost):
    """Minimum-cost matching of min(n, m) pairs by enumeration."""
    n, m = len(cost), len(cost[0])
    if n <= m:
        return min(sum(cost[i][p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
    return min(sum(cost[p[j]][j] for j in range(m)) for p in itertools.permutations(range(n), m))


def matmul_loops(a, b):
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return np.array(out)


def sliding_conv(x, w, b):
    """One width-3 zero-padded conv layer, tap k reading x[t - 1 + k]."""
    T, _ = x.shape
    out = np.zeros((T, w.shape[2]))
    for t in range(T):
        acc = np.array(b, dtype=float)
        for k in range(3):
            src = t - 1 + k
            if 0 <= src < T:
                for d_in in range(x.shape[1]):
                    acc = acc + x[src, d_in] * w[k, d_in]
        out[t] = acc
    return out


def max_pool_windows(level):
    out = []
    for k in range(0, len(level), 2):
        out.append(np.max(level[k:k + 2], axis=0))
    return np.array(out)


def euclid_double_loop(f, g):
    total = 0.0
    for a in f:
        for b in g:
            total += sum((x - y) ** 2 for x, y in zip(a, b))
    return total


def bce(p, y):
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def diou_formula(pred, gt):
    ps, pe = pred
    gs, ge = gt
    inter = max(0.0, min(pe, ge) - max(ps, gs))
    union = (pe - ps) + (ge - gs) - inter
    enc = max(pe, ge) - min(ps, gs)
    if enc == 0:
        return 0.0
    iou = inter / union if union > 0 else 0.0
    dist = (ps + pe) / 2 - (gs + ge) / 2
    return 1 - iou + (dist / enc) ** 2


def iou(a, b):
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def nms_reference(items, thr, top_k):
    """``items``: list of (start, end, class, score).  O(n^2) greedy pass."""
    remaining = sorted(items, key=lambda a: (-a[3], a[0], a[1], a[2]))
    kept = []
    while remaining:
        head = remaining.pop(0)
        kept.append(head)
        remaining = [a for a in remaining if a[2] != head[2] or iou(a[:2], head[:2]) <= thr]
    kept.sort(key=lambda a: (-a[3], a[0], a[1], a[2]))
    return kept[:top_k]


def reference_ap(preds, gts, thr):
    """preds: (video, start, end, score); gts: (video, start, end).

    Walks the ranked list building explicit precision/recall arrays and
    integrates the step curve.
    """
    if not gts:
        return 0.0
    ranked = sorted(preds, key=lambda p: (-p[3], p[1], p[2]))
    used = [False] * len(gts)
    hits = []
    for vid, s, e, _ in ranked:
        best, best_j = -1.0, None
        for j, (gv, gs, ge) in enumerate(gts):
            if gv != vid or used[j]:
                continue
            o = iou((s, e), (gs, ge))
            if o > best:
                best, best_j = o, j
        if best_j is not None and best >= thr:
            used[best_j] = True
            hits.append(1)
        else:
            hits.append(0)
    precisions, recalls = [], []
    tp = 0
    for k, h in enumerate(hits, 1):
        tp += h
        precisions.append(tp / k)
        recalls.append(tp / len(gts))
    ap, prev_r = 0.0, 0.0
    for p, r in zip(precisions, recalls):
        ap += p * (r - prev_r)
        prev_r = r
    return ap


def central_diff(f, x, h=1e-5):
    """Gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))
