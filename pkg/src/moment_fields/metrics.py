"""Correlation coefficients, image-quality metrics and error maps."""

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from ._backend import USE_NUMBA, njit

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WIN = 11
SSIM_SIGMA = 1.5


class UndefinedCorrelationError(ValueError):
    """A correlation was requested for constant (or too short) input."""


@dataclass(frozen=True)
class CorrelationReport:
    pearson: float
    spearman: float
    kendall: float
    n: int


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ValueError("x and y must have equal length")
    if len(x) < 2:
        raise UndefinedCorrelationError("need at least two samples")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("inputs must be finite")
    return x, y


def pearson(x, y):
    x, y = _pair(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = dx @ dx
    syy = dy @ dy
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def spearman(x, y):
    x, y = _pair(x, y)
    return pearson(rankdata(x), rankdata(y))


# --- Kendall tau-b -----------------------------------------------------------------

def _tau_b(s, nx, ny):
    """``s`` = concordant - discordant; ``nx``/``ny`` = pairs not tied in x / y."""
    if nx == 0 or ny == 0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    return float(np.clip(s / np.sqrt(float(nx) * float(ny)), -1.0, 1.0))


def _tied_pairs(sorted_keys):
    _, counts = np.unique(sorted_keys, return_counts=True, axis=0)
    counts = counts.astype(np.int64)
    return int(np.sum(counts * (counts - 1) // 2))


@njit
def _inversions_loop(a):
    n = a.shape[0]
    src = a.copy()
    dst = np.empty_like(src)
    total = 0
    width = 1
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if src[j] < src[i]:
                    dst[k] = src[j]
                    total += mid - i
                    j += 1
                else:
                    dst[k] = src[i]
                    i += 1
                k += 1
            while i < mid:
                dst[k] = src[i]
                i += 1
                k += 1
            while j < hi:
                dst[k] = src[j]
                j += 1
                k += 1
        src, dst = dst, src
        width *= 2
    return total


def _inversions_numpy(a):
    """Strict inversions by level-wise vectorized merging."""
    n = len(a)
    # dense ranks in [0, n) so block * n + rank orders by block, then value
    a = np.unique(np.asarray(a), return_inverse=True)[1].reshape(-1).astype(np.int64)
    idx = np.arange(n)
    total = 0
    width = 1
    while width < n:
        block = idx // (2 * width)
        right = (idx % (2 * width)) >= width
        key = block * n + a
        left_keys = key[~right]           # sorted: runs are sorted, blocks ascend
        pos = np.searchsorted(left_keys, key[right], side="right")
        end = np.searchsorted(left_keys, (block[right] + 1) * n, side="left")
        total += int(np.sum(end - pos))
        a = np.sort(key) % n
        width *= 2
    return total


_inversions = _inversions_loop if USE_NUMBA else _inversions_numpy


def kendall_tau(x, y):
    """Tau-b in O(n log n): lexsort, then count discordant pairs as merge inversions."""
    x, y = _pair(x, y)
    n = len(x)
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]
    n0 = n * (n - 1) // 2
    n1 = _tied_pairs(xs)
    n3 = _tied_pairs(np.stack([xs, ys], axis=1))
    y_rank = rankdata(ys, method="dense").astype(np.int64) - 1
    n2 = _tied_pairs(np.sort(ys))
    swaps = int(_inversions(y_rank))
    s = n0 - n1 - n2 + n3 - 2 * swaps
    return _tau_b(s, n0 - n1, n0 - n2)


def kendall_tau_brute(x, y):
    """O(n^2) pair enumeration; the reference for the fast path."""
    x, y = _pair(x, y)
    iu = np.triu_indices(len(x), k=1)
    sx = np.sign(x[iu[1]] - x[iu[0]]).astype(np.int64)
    sy = np.sign(y[iu[1]] - y[iu[0]]).astype(np.int64)
    return _tau_b(int(np.sum(sx * sy)), int(np.count_nonzero(sx)), int(np.count_nonzero(sy)))


# --- image metrics -----------------------------------------------------------------

def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak=1.0):
    a, b = _same_shape(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def _gauss_window():
    r = np.arange(SSIM_WIN) - (SSIM_WIN - 1) / 2.0
    g = np.exp(-0.5 * (r / SSIM_SIGMA) ** 2)
    return g / g.sum()


def _filter_valid(img, g):
    from numpy.lib.stride_tricks import sliding_window_view

    rows = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def ssim(a, b, data_range=1.0):
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels."""
    a, b = _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise ValueError(f"images must be at least {SSIM_WIN}x{SSIM_WIN}")
    g = _gauss_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        vx = _filter_valid(x * x, g) - mx * mx
        vy = _filter_valid(y * y, g) - my * my
        cxy = _filter_valid(x * y, g) - mx * my
        smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        vals.append(smap.mean())
    return float(np.mean(vals))


def error_map(rendered, gt):
    """Per-pixel Euclidean norm over channels; plain |difference| for 2D images."""
    rendered, gt = _same_shape(rendered, gt)
    if rendered.ndim == 2:
        return np.abs(rendered - gt)
    return np.linalg.norm(rendered - gt, axis=-1)


def correlate_variance_error(variance, error, mask=None):
    variance, error = _same_shape(variance, error)
    keep = np.ones(variance.shape, bool) if mask is None else np.asarray(mask, bool)
    v, e = variance[keep], error[keep]
    if len(v) < 2:
        raise UndefinedCorrelationError("fewer than two valid pixels")
    return CorrelationReport(pearson(v, e), spearman(v, e), kendall_tau(v, e), len(v))
