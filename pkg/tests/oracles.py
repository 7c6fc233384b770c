"""Independent brute-force references, written from the definitions only.

None of these import the package's numeric code; they loop over elements
in plain Python so a shared bug is unlikely.
"""
import math

import numpy as np


def iou_xywh(a, b):
    ax2, ay2 = a[0] + a[2], a[1] + a[3]
    bx2, by2 = b[0] + b[2], b[1] + b[3]
    iw = min(ax2, bx2) - max(a[0], b[0])
    ih = min(ay2, by2) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return min(inter / ((ax2 - a[0]) * (ay2 - a[1]) + (bx2 - b[0]) * (by2 - b[1]) - inter), 1.0)


def greedy_nms(boxes, scores, thr):
    """Repeatedly take the best remaining box and drop everything above ``thr``."""
    remaining = list(range(len(scores)))
    kept = []
    while remaining:
        best = remaining[0]
        for i in remaining[1:]:
            if scores[i] > scores[best]:
                best = i
        kept.append(best)
        remaining = [i for i in remaining if i != best and iou_xywh(boxes[best], boxes[i]) <= thr]
    return kept


def conv2d(x, w, b, dilation=1):
    """Same-padded cross-correlation with explicit index arithmetic."""
    C, H, W = x.shape
    O, _, kh, kw = w.shape
    pt, pl = dilation * ((kh - 1) // 2), dilation * ((kw - 1) // 2)
    out = np.zeros((O, H, W), dtype=np.float64)
    for o in range(O):
        for r in range(H):
            for c in range(W):
                acc = float(b[o])
                for i in range(kh):
                    rr = r + i * dilation - pt
                    if rr < 0 or rr >= H:
                        continue
                    for j in range(kw):
                        cc = c + j * dilation - pl
                        if cc < 0 or cc >= W:
                            continue
                        acc += float(np.dot(w[o, :, i, j].astype(np.float64), x[:, rr, cc]))
                out[o, r, c] = acc
    return out


def max_pool(x, k, s):
    C, H, W = x.shape
    Ho, Wo = math.ceil(H / s), math.ceil(W / s)
    pad = (k - 1) // 2
    out = np.full((C, Ho, Wo), -np.inf, dtype=x.dtype)
    for r in range(Ho):
        for c in range(Wo):
            for i in range(k):
                rr = r * s - pad + i
                if not 0 <= rr < H:
                    continue
                for j in range(k):
                    cc = c * s - pad + j
                    if 0 <= cc < W:
                        out[:, r, c] = np.maximum(out[:, r, c], x[:, rr, cc])
    return out


def roi_pool(data, roi, stride, out=7):
    """Bin ``i`` covers cells ``floor(y0 + i h / out)`` .. ``ceil(y0 + (i+1) h / out)``."""
    C, H, W = data.shape
    x0, y0, w, h = (v / stride for v in roi)
    res = np.zeros((C, out, out), dtype=np.float32)
    for i in range(out):
        r0 = min(max(math.floor(y0 + i * h / out), 0), H)
        r1 = min(max(math.ceil(y0 + (i + 1) * h / out), 0), H)
        for j in range(out):
            c0 = min(max(math.floor(x0 + j * w / out), 0), W)
            c1 = min(max(math.ceil(x0 + (j + 1) * w / out), 0), W)
            for ch in range(C):
                vals = [data[ch, r, c] for r in range(r0, r1) for c in range(c0, c1)]
                res[ch, i, j] = max(vals) if vals else 0.0
    return res


def log_average_mr(fppi, mr, lo=1e-2, hi=1.0, n=9):
    """Geometric mean of miss rates sampled at ``n`` log-spaced FPPI points."""
    refs = [10 ** (math.log10(lo) + k * (math.log10(hi) - math.log10(lo)) / (n - 1)) for k in range(n)]
    logs = []
    for r in refs:
        v = max(mr)
        for f, m in zip(fppi, mr):
            if f <= r:
                v = m
        logs.append(math.log(max(v, 1e-10)))
    return math.exp(sum(logs) / n)
