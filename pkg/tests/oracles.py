"""Independent reference implementations used as test oracles.

None of these import the code under test. They are deliberately slow and
literal: direct loops, pairwise comparisons, closed-form counts.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

# --------------------------------------------------------------------------
# convolution by direct summation


def conv2d_loops(x, w, b, stride, padding):
    n, c, h, wid = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wid + 2 * padding - k) // stride + 1
    y = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            y[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3]))
    if b is not None:
        y += b[None, :, None, None]
    return y


def depthwise_loops(x, w, stride, padding):
    n, c, h, wid = x.shape
    k = w.shape[-1]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wid + 2 * padding - k) // stride + 1
    y = np.zeros((n, c, ho, wo))
    for ch in range(c):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, ch, i * stride : i * stride + k, j * stride : j * stride + k]
                y[:, ch, i, j] = (patch * w[ch, 0]).sum(axis=(1, 2))
    return y


# --------------------------------------------------------------------------
# parameter counts, written from the block descriptions rather than the code


def _half_up(v):
    return int(math.floor(v + 0.5 + 1e-9))


def symbolic_mid(out_ch, ratio):
    return max(1, _half_up(ratio * (out_ch // 2)))


def _se(c):
    h = max(1, c // 4)
    return c * h + h + h * c + c


def _bn(c):
    return 2 * c


def _nonlocal(kind, c, inner):
    proj = inner * c + inner  # 1x1 conv with bias
    restore = c * inner + c
    return (3 if kind == "embedded" else 1) * proj + restore


# block ids in table order: (base, kernel, nonlocal, trailing_bn)
def block_table():
    rows = []
    for nl in (None, "embedded", "gaussian"):
        for base in ("S", "SX"):
            for k in (3, 5, 7):
                rows.append((base, k, nl, False))
    rows += [("R", None, "embedded", True), ("R", None, "embedded", False)]
    rows += [("R", None, "gaussian", True), ("R", None, "gaussian", False)]
    return rows


def symbolic_block_params(block_id, c_in, c_out, stride, ratio):
    base, k, nl, tbn = block_table()[block_id]
    mid = symbolic_mid(c_out, ratio)
    if base == "R":
        return _nonlocal(nl, c_out, mid) + _se(c_out) + (_bn(c_out) if tbn else 0)
    if stride == 1:
        b_in, b_out = c_in // 2, c_out - c_in // 2
        total = 0
    else:
        b_in, b_out = c_in, c_out - c_in
        total = c_in * k * k + _bn(c_in) + c_in * c_in + _bn(c_in)
    if base == "S":
        total += b_in * mid + _bn(mid) + mid * k * k + _bn(mid) + mid * b_out + _bn(b_out)
    else:
        total += b_in * k * k + _bn(b_in) + b_in * mid + _bn(mid)
        total += mid * k * k + _bn(mid) + mid * mid + _bn(mid)
        total += mid * k * k + _bn(mid) + mid * b_out + _bn(b_out)
    if nl:
        total += _nonlocal(nl, b_out, max(1, b_out // 2))
    return total + _se(b_out)


def symbolic_fixed_params(stem, last, tail, classes):
    t_conv, t_se, t_exp = tail
    total = 3 * 3 * 3 * stem + stem + _bn(stem)
    total += t_conv * last + _bn(t_conv)
    total += t_se * t_conv + t_se
    total += _se(t_se)
    total += t_exp * t_se + t_exp
    total += classes * t_exp + classes
    return total


# --------------------------------------------------------------------------
# Pareto machinery


def dominates(a, b):
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def brute_fronts(points):
    """Peel nondominated layers by pairwise comparison."""
    remaining = list(range(len(points)))
    fronts = []
    while remaining:
        front = [i for i in remaining if not any(dominates(points[j], points[i]) for j in remaining if j != i)]
        fronts.append(sorted(front))
        remaining = [i for i in remaining if i not in front]
    return fronts


def brute_crowding(points):
    pts = [tuple(map(float, p)) for p in points]
    n = len(pts)
    if n <= 2:
        return [math.inf] * n
    m = len(pts[0])
    dist = [0.0] * n
    for obj in range(m):
        order = sorted(range(n), key=lambda i: (pts[i][obj], i))
        lo, hi = pts[order[0]][obj], pts[order[-1]][obj]
        dist[order[0]] = math.inf
        dist[order[-1]] = math.inf
        if hi == lo:
            continue
        for pos in range(1, n - 1):
            i = order[pos]
            if dist[i] != math.inf:
                dist[i] += (pts[order[pos + 1]][obj] - pts[order[pos - 1]][obj]) / (hi - lo)
    return dist


def hv_inclusion_exclusion(points, ref):
    """Union volume of the boxes [p, ref] by inclusion-exclusion (small fronts only)."""
    pts = [np.minimum(np.asarray(p, float), ref) for p in points]
    total = 0.0
    for r in range(1, len(pts) + 1):
        for combo in itertools.combinations(pts, r):
            corner = np.max(combo, axis=0)
            total += (-1) ** (r + 1) * float(np.prod(np.maximum(np.asarray(ref) - corner, 0.0)))
    return total


def hv_monte_carlo(points, ref, samples, rng):
    """(estimate, standard error) with uniform draws from [0, ref]."""
    pts = np.asarray(points, float)
    ref = np.asarray(ref, float)
    u = rng.uniform(0.0, 1.0, (samples, len(ref))) * ref
    hit = np.zeros(samples, dtype=bool)
    for p in pts:
        hit |= np.all(u >= p, axis=1)
    vol = float(np.prod(ref))
    frac = hit.mean()
    return vol * frac, vol * math.sqrt(frac * (1 - frac) / samples)


# --------------------------------------------------------------------------
# linear-model attack


def linear_pgd_closed_form(x, w, y, eps):
    """Worst-case point for logit ``w.x`` with label ``y`` in {-1, +1}."""
    return np.clip(x - y * eps * np.sign(w), 0.0, 1.0)


def linear_worst_by_enumeration(x, w, y, eps):
    """Minimise the margin ``y * w.x'`` over all sign corners of the ball."""
    best, arg = math.inf, None
    for signs in itertools.product((-1.0, 1.0), repeat=len(x)):
        cand = np.clip(x + eps * np.asarray(signs), 0.0, 1.0)
        margin = y * float(w @ cand)
        if margin < best - 1e-15:
            best, arg = margin, cand
    return arg, best
