"""Pure numpy implementations of the hot kernels.

These are the reference semantics; ``_ckernels`` must agree with them.
"""
import numpy as np

NAME = "python"


def nms(boxes, scores, thr):
    n = boxes.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    b = boxes[order]
    x1, y1 = b[:, 0], b[:, 1]
    x2, y2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    area = (x2 - x1) * (y2 - y1)
    alive = np.ones(n, dtype=bool)
    keep = []
    for i in range(n):
        if not alive[i]:
            continue
        keep.append(order[i])
        rest = np.nonzero(alive[i + 1:])[0] + i + 1
        if rest.size == 0:
            break
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        valid = (iw > 0) & (ih > 0)
        inter = np.where(valid, iw * ih, 0.0)
        ov = np.zeros_like(inter)
        np.divide(inter, area[i] + area[rest] - inter, out=ov, where=valid)
        np.minimum(ov, 1.0, out=ov)
        alive[rest[ov > thr]] = False
    return np.asarray(keep, dtype=np.int64)


def roi_pool(data, r0, r1, c0, c1):
    """Max over bins given precomputed half-open cell ranges ``(N, out)``."""
    C = data.shape[0]
    n, out = r0.shape
    res = np.zeros((n, C, out, out), dtype=np.float32)
    for k in range(n):
        rows = []
        for i in range(out):
            if r1[k, i] > r0[k, i]:
                rows.append(data[:, r0[k, i]:r1[k, i], :].max(axis=1))
            else:
                rows.append(None)
        for i in range(out):
            if rows[i] is None:
                continue
            for j in range(out):
                if c1[k, j] > c0[k, j]:
                    res[k, :, i, j] = rows[i][:, c0[k, j]:c1[k, j]].max(axis=1)
    return res


def histograms(xq_t, idx, feats, w, pos):
    """Weighted 256-bin histograms per feature, split by class.

    Returns ``(F, 2, 256)`` float64; index 0 is the negative class.
    """
    F = feats.shape[0]
    out = np.zeros((F, 2, 256), dtype=np.float64)
    if idx.size == 0:
        return out
    wi = w[idx]
    pi = pos[idx]
    wp = np.where(pi, wi, 0.0)
    wn = np.where(pi, 0.0, wi)
    for k in range(F):
        col = xq_t[feats[k], idx]
        out[k, 1] = np.bincount(col, weights=wp, minlength=256)
        out[k, 0] = np.bincount(col, weights=wn, minlength=256)
    return out


def forest_predict(X, feature, threshold, left, right, value, roots):
    n = X.shape[0]
    total = np.zeros(n, dtype=np.float64)
    rows = np.arange(n)
    for root in roots:
        node = np.full(n, root, dtype=np.int64)
        while True:
            f = feature[node]
            inner = f >= 0
            if not inner.any():
                break
            ri = rows[inner]
            ni = node[inner]
            go_left = X[ri, f[inner]] < threshold[ni]
            node[inner] = np.where(go_left, left[ni], right[ni])
        total += value[node].astype(np.float64)
    return total
