"""Independent scalar reference implementations used to pin expected values.

Everything here is deliberately written with plain Python loops and the math
module so it shares no code path with the vectorized package internals.
"""
import math

import numpy as np


def o_log_diff(a, b, eps):
    h = len(a)
    w = len(a[0])
    return [[math.log(a[y][x] + eps) - math.log(b[y][x] + eps) for x in range(w)]
            for y in range(h)]


def o_clip_ignore(x, alpha, beta):
    mag = abs(x)
    if mag <= beta:
        return 0.0
    sign = 1.0 if x > 0 else (-1.0 if x < 0 else 0.0)
    return min(mag, alpha) * sign


def o_min_max(rows):
    flat = [v for row in rows for v in row]
    lo = min(flat)
    hi = max(flat)
    if hi == lo:
        return [[0.0 for _ in row] for row in rows]
    return [[2.0 * (v - lo) / (hi - lo) - 1.0 for v in row] for row in rows]


def o_filter(i1, i2, alpha, beta, eps):
    diff = o_log_diff(i1, i2, eps)
    clipped = [[o_clip_ignore(v, alpha, beta) for v in row] for row in diff]
    return o_min_max(clipped)


def o_shift(img, dx, dy):
    h = len(img)
    w = len(img[0])
    out = []
    for y in range(h):
        row = []
        for x in range(w):
            sy = min(max(y - dy, 0), h - 1)
            sx = min(max(x - dx, 0), w - 1)
            row.append(img[sy][sx])
        out.append(row)
    return out


def o_content(img, sx, sy, alpha, beta, eps):
    """Content map for pinned shift signs; sx, sy are the signed shifts."""
    x_term = o_filter(img, o_shift(img, sx, 0), alpha, beta, eps)
    y_term = o_filter(img, o_shift(img, 0, sy), alpha, beta, eps)
    h = len(img)
    w = len(img[0])
    return [[0.5 * x_term[y][x] + 0.5 * y_term[y][x] for x in range(w)] for y in range(h)]


def o_polarity_sum(polarities):
    total = 0.0
    for p in polarities:
        total += float(p)
    return total


def o_patch(img, k, y, x):
    """Replicate-padded k x k neighborhood of (y, x), row-major."""
    h = len(img)
    w = len(img[0])
    pad = k // 2
    vals = []
    for wy in range(k):
        for wx in range(k):
            sy = min(max(y - pad + wy, 0), h - 1)
            sx = min(max(x - pad + wx, 0), w - 1)
            vals.append(img[sy][sx])
    return vals


def _o_softmax(vals):
    top = max(vals)
    exps = [math.exp(v - top) for v in vals]
    total = sum(exps)
    return [e / total for e in exps]


def o_forward(image, aux, blocks, patch):
    """Per-pixel scalar forward pass; returns dicts of per-head logits and probs.

    blocks is the ModelParams.blocks() dict; arrays are indexed elementwise.
    """
    h = len(image)
    w = len(image[0])
    d_f = len(blocks["b_image"])
    d_a = blocks["w_query"].shape[1]
    classes = len(blocks["b_decoder"])
    scale = 1.0 / math.sqrt(d_a)

    logits = {"image": [], "aux": [], "fused": []}
    probs = {"image": [], "aux": [], "fused": []}
    for y in range(h):
        for x in range(w):
            p_img = o_patch(image, patch, y, x)
            p_aux = o_patch(aux, patch, y, x)
            f_img = [math.tanh(sum(p_img[i] * blocks["w_image"][i][j] for i in range(len(p_img)))
                               + blocks["b_image"][j]) for j in range(d_f)]
            f_aux = [math.tanh(sum(p_aux[i] * blocks["w_events"][i][j] for i in range(len(p_aux)))
                               + blocks["b_events"][j]) for j in range(d_f)]
            q = [sum(f_img[j] * blocks["w_query"][j][a] for j in range(d_f)) for a in range(d_a)]
            k_img = [sum(f_img[j] * blocks["w_key"][j][a] for j in range(d_f)) for a in range(d_a)]
            k_aux = [sum(f_aux[j] * blocks["w_key"][j][a] for j in range(d_f)) for a in range(d_a)]
            s_img = sum(q[a] * k_img[a] for a in range(d_a)) * scale
            s_aux = sum(q[a] * k_aux[a] for a in range(d_a)) * scale
            w_img, w_aux = _o_softmax([s_img, s_aux])
            fused = [w_img * f_img[j] + w_aux * f_aux[j] for j in range(d_f)]
            for name, feats in (("image", f_img), ("aux", f_aux), ("fused", fused)):
                u = [sum(feats[j] * blocks["w_decoder"][j][c] for j in range(d_f))
                     + blocks["b_decoder"][c] for c in range(classes)]
                logits[name].append(u)
                probs[name].append(_o_softmax(u))
    return logits, probs


def o_confusion(gt, pred, num_classes, ignore=255):
    counts = [[0] * num_classes for _ in range(num_classes)]
    h = len(gt)
    w = len(gt[0])
    for y in range(h):
        for x in range(w):
            g = gt[y][x]
            p = pred[y][x]
            if g == ignore or p == ignore:
                continue
            counts[g][p] += 1
    return counts


def o_miou(counts):
    num_classes = len(counts)
    ious = []
    for c in range(num_classes):
        tp = counts[c][c]
        fn = sum(counts[c]) - tp
        fp = sum(counts[r][c] for r in range(num_classes)) - tp
        denom = tp + fp + fn
        if denom > 0:
            ious.append(tp / denom)
    if not ious:
        raise ZeroDivisionError("no defined classes")
    return sum(ious) / len(ious)


def o_project(u, v, depth, k_src, k_dst, rotation, translation):
    """Scalar pinhole reprojection of pixel (u, v) with the given depth."""
    x = (u - k_src.cx) / k_src.fx * depth
    y = (v - k_src.cy) / k_src.fy * depth
    pt = [x, y, depth]
    out = [sum(rotation[r][c] * pt[c] for c in range(3)) + translation[r] for r in range(3)]
    return (k_dst.fx * out[0] / out[2] + k_dst.cx,
            k_dst.fy * out[1] / out[2] + k_dst.cy,
            out[2])


def fd_gradient(fn, x0, h=1e-5):
    """Central finite differences of fn over the full vector x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    for i in range(x0.size):
        up = x0.copy()
        up[i] += h
        down = x0.copy()
        down[i] -= h
        grad[i] = (fn(up) - fn(down)) / (2.0 * h)
    return grad


def rel_err(a, b):
    """Vector relative error: ||a - b|| / max(||a||, ||b||)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)
