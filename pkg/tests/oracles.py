"""Independent brute-force reference implementations used only by tests.

Everything here is written as explicit per-element loops over numpy
scalars, deliberately avoiding the vectorized/torch code paths of the
package so that agreement is meaningful.
"""

import math

import numpy as np


def bilinear_sample_oracle(grid, x, y, stride):
    """Scalar bilinear sample of an (H, W) or (H, W, C) grid at one image point.

    Cell (i, j) sits at image coordinates ((j+0.5)*stride, (i+0.5)*stride);
    coordinates beyond the outermost cell centers replicate the border.
    """
    h, w = grid.shape[0], grid.shape[1]
    gx = min(max(x / stride - 0.5, 0.0), w - 1.0)
    gy = min(max(y / stride - 0.5, 0.0), h - 1.0)
    x0, y0 = int(math.floor(gx)), int(math.floor(gy))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = gx - x0, gy - y0
    if grid.ndim == 2:
        top = grid[y0, x0] * (1 - fx) + grid[y0, x1] * fx
        bottom = grid[y1, x0] * (1 - fx) + grid[y1, x1] * fx
        return top * (1 - fy) + bottom * fy
    c = grid.shape[2]
    out = np.zeros(c)
    for ch in range(c):
        top = grid[y0, x0, ch] * (1 - fx) + grid[y0, x1, ch] * fx
        bottom = grid[y1, x0, ch] * (1 - fx) + grid[y1, x1, ch] * fx
        out[ch] = top * (1 - fy) + bottom * fy
    return out


def unit_descriptor_oracle(desc_map, x, y, stride):
    d = bilinear_sample_oracle(desc_map, x, y, stride)
    return d / math.sqrt(float(np.dot(d, d)) + 1e-12)


def greedy_nms_oracle(scores, k, radius):
    """Greedy top-K NMS by explicit scan; returns (rows, cols) lists.

    Ties are broken by flat index (row-major), matching the package rule.
    """
    h, w = scores.shape
    cells = sorted(
        ((i, j) for i in range(h) for j in range(w)),
        key=lambda ij: (-scores[ij[0], ij[1]], ij[0] * w + ij[1]),
    )
    chosen = []
    for i, j in cells:
        if len(chosen) == k:
            break
        ok = True
        for ci, cj in chosen:
            if (ci - i) ** 2 + (cj - j) ** 2 <= radius * radius:
                ok = False
                break
        if ok:
            chosen.append((i, j))
    rows = [c[0] for c in chosen]
    cols = [c[1] for c in chosen]
    return rows, cols


def mutual_nn_oracle(desc_a, desc_b):
    """All-pairs double-argmin matching; ties broken by lowest index."""
    na, nb = len(desc_a), len(desc_b)
    dist = np.zeros((na, nb))
    for i in range(na):
        for j in range(nb):
            diff = desc_a[i] - desc_b[j]
            dist[i, j] = math.sqrt(float(np.dot(diff, diff)))
    matches = []
    for i in range(na):
        j_best, best = 0, dist[i, 0]
        for j in range(1, nb):
            if dist[i, j] < best:
                j_best, best = j, dist[i, j]
        i_best, best_back = 0, dist[0, j_best]
        for i2 in range(1, na):
            if dist[i2, j_best] < best_back:
                i_best, best_back = i2, dist[i2, j_best]
        if i_best == i:
            matches.append((i, j_best, dist[i, j_best]))
    return matches


def count_nc_oracle(points_a, points_b, matrix, target_size, epsilon):
    """Count a-keypoints whose mapped location has some b-keypoint within eps."""
    h, w = target_size
    count = 0
    for p in points_a:
        vec = matrix @ np.array([p[0], p[1], 1.0])
        u, v = vec[0] / vec[2], vec[1] / vec[2]
        if not (0.0 <= u <= w and 0.0 <= v <= h):
            continue
        for q in points_b:
            if math.hypot(u - q[0], v - q[1]) <= epsilon:
                count += 1
                break
    return count


def count_ncm_oracle(match_pairs, points_a, points_b, matrix, target_size, epsilon):
    """Count matches whose endpoints agree with the ground-truth map."""
    h, w = target_size
    count = 0
    flags = []
    for i, j in match_pairs:
        p = points_a[i]
        vec = matrix @ np.array([p[0], p[1], 1.0])
        u, v = vec[0] / vec[2], vec[1] / vec[2]
        ok = (0.0 <= u <= w and 0.0 <= v <= h
              and math.hypot(u - points_b[j][0], v - points_b[j][1]) <= epsilon)
        flags.append(ok)
        if ok:
            count += 1
    return count, flags


def df_loss_oracle(
    desc_map_a, scores_a, desc_map_b, scores_b,
    points_a, points_b, stride, margin, safe_radius,
):
    """Exhaustive-negative score-weighted triplet margin loss.

    For each correspondence c: the positive distance pairs its two sampled
    unit descriptors; the hardest negative is the smallest descriptor
    distance to any other batch point farther than ``safe_radius`` pixels
    in the corresponding image, searched in both directions. Terms with no
    admissible negative are dropped from both sums.
    """
    n = len(points_a)
    da = [unit_descriptor_oracle(desc_map_a, x, y, stride) for x, y in points_a]
    db = [unit_descriptor_oracle(desc_map_b, x, y, stride) for x, y in points_b]
    weights = []
    margins = []
    included = []
    for c in range(n):
        p = math.sqrt(float(np.dot(da[c] - db[c], da[c] - db[c])))
        neg = None
        for q in range(n):
            if q == c:
                continue
            if math.hypot(points_b[q][0] - points_b[c][0],
                          points_b[q][1] - points_b[c][1]) > safe_radius:
                d = math.sqrt(float(np.dot(da[c] - db[q], da[c] - db[q])))
                if neg is None or d < neg:
                    neg = d
            if math.hypot(points_a[q][0] - points_a[c][0],
                          points_a[q][1] - points_a[c][1]) > safe_radius:
                d = math.sqrt(float(np.dot(da[q] - db[c], da[q] - db[c])))
                if neg is None or d < neg:
                    neg = d
        wa = bilinear_sample_oracle(scores_a, points_a[c][0], points_a[c][1], stride)
        wb = bilinear_sample_oracle(scores_b, points_b[c][0], points_b[c][1], stride)
        weights.append(float(wa) * float(wb))
        if neg is None:
            margins.append(0.0)
            included.append(False)
        else:
            margins.append(max(0.0, margin + p * p - neg * neg))
            included.append(True)
    num = sum(w * m for w, m, ok in zip(weights, margins, included) if ok)
    den = sum(w for w, ok in zip(weights, included) if ok)
    if den == 0.0:
        return 0.0
    return num / den
