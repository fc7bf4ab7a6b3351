"""Ray termination distributions and their moments.

A ray either stops at one of its ordered samples (mass ``w_i``) or passes
through all of them (mass ``residual``).  The rendered pixel value is the
expectation of the stopping sample's feature; the same masses give every
higher raw and central moment.

Two conventions for the residual mass are supported.  With
``include_background=True`` (the default) the residual carries a background
feature so each pixel is a proper probability distribution.  With
``include_background=False`` the raw moments drop the residual term, which
is the truncated integral up to the far plane.  In that mode the missing
mass is treated as feature zero for central moments, so that
``central_moment(2) == raw_moment(2) - raw_moment(1)**2`` in both modes.
"""

from dataclasses import dataclass
from math import comb

import numpy as np

NORMALIZATION_TOL = 1e-9
VARIANCE_CLAMP = 1e-9
BACKGROUND = -1


class MomentPrecisionError(ArithmeticError):
    """Variance came out more negative than round-off can explain."""


@dataclass(frozen=True)
class TerminationDistribution:
    weights: np.ndarray
    features: np.ndarray
    residual: float
    background: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        f = np.asarray(self.features, dtype=np.float64)
        bg = np.atleast_1d(np.asarray(self.background, dtype=np.float64))
        if f.ndim == 1:
            f = f.reshape(len(w), -1) if len(w) else f.reshape(0, bg.size)
        if f.shape[0] != w.shape[0]:
            raise ValueError("weights and features must have equal length")
        if f.shape[1] != bg.shape[0]:
            raise ValueError("background must have one value per feature channel")
        if np.any(w < 0):
            raise ValueError("collision weights must be nonnegative")
        if not 0.0 <= self.residual <= 1.0 + NORMALIZATION_TOL:
            raise ValueError("residual mass must lie in [0, 1]")
        if abs(w.sum() + self.residual - 1.0) > NORMALIZATION_TOL:
            raise ValueError(f"masses sum to {w.sum() + self.residual!r}, not 1")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(bg))):
            raise ValueError("features must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "background", bg)
        object.__setattr__(self, "residual", float(self.residual))

    @property
    def n_channels(self):
        return self.background.shape[0]

    def __len__(self):
        return self.weights.shape[0]


def compositing_weights(alphas):
    """``w_i = a_i * prod_{k<i}(1 - a_k)`` and the leftover transmittance."""
    a = np.asarray(alphas, dtype=np.float64).reshape(-1)
    if np.any((a < 0) | (a > 1)) or not np.all(np.isfinite(a)):
        raise ValueError("opacities must lie in [0, 1]")
    trans = np.concatenate([[1.0], np.cumprod(1.0 - a)])
    return trans[:-1] * a, float(trans[-1])


def weights_from_alphas(alphas, features=None, background=None):
    """Termination distribution of an ordered list of opacities.

    Without features the distribution gets a single zero channel, which is
    enough for weight-only checks.
    """
    w, residual = compositing_weights(alphas)
    if features is None:
        features = np.zeros((len(w), 1))
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        features = features.reshape(len(w), -1)
    if background is None:
        background = np.zeros(features.shape[1])
    return TerminationDistribution(w, features, residual, background)


def raw_moment(dist, j, include_background=True):
    """``E[rho^j]`` per channel."""
    if j < 1:
        raise ValueError("moment order must be >= 1")
    m = dist.weights @ dist.features ** j
    if include_background:
        m = m + dist.residual * dist.background ** j
    return m


def _clamp_variance(v):
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < -VARIANCE_CLAMP):
        raise MomentPrecisionError(f"variance {v.min():.3e} below -{VARIANCE_CLAMP:g}")
    return np.maximum(v, 0.0)


def variance(dist, include_background=True):
    m1 = raw_moment(dist, 1, include_background)
    m2 = raw_moment(dist, 2, include_background)
    return _clamp_variance(m2 - m1 * m1)


def central_moment(dist, k, include_background=True):
    """``E[(rho - E[rho])^k]`` per channel, k >= 2."""
    if k < 2:
        raise ValueError("central moment order must be >= 2")
    m1 = raw_moment(dist, 1, include_background)
    dev = dist.features - m1
    out = dist.weights @ dev ** k
    tail = dist.background if include_background else np.zeros_like(m1)
    out = out + dist.residual * (tail - m1) ** k
    return _clamp_variance(out) if k == 2 else out


def central_from_raw(raw, k):
    """Central moment from raw moments ``raw[0..k-1] = m_1..m_k`` (with m_0 = 1)."""
    raw = [np.asarray(r, dtype=np.float64) for r in raw]
    mean = raw[0]
    total = (-mean) ** k
    for i in range(1, k + 1):
        total = total + comb(k, i) * raw[i - 1] * (-mean) ** (k - i)
    return total


@dataclass(frozen=True)
class MomentSet:
    """Raw moments ``raw[j-1] = E[rho^j]`` for j = 1..J, one row per order."""

    raw: np.ndarray

    def __post_init__(self):
        raw = np.atleast_2d(np.asarray(self.raw, dtype=np.float64))
        if raw.shape[0] < 2:
            raise ValueError("a moment set needs at least the first two moments")
        object.__setattr__(self, "raw", raw)

    @property
    def mean(self):
        return self.raw[0]

    @property
    def second(self):
        return self.raw[1]

    @property
    def variance(self):
        return _clamp_variance(self.raw[1] - self.raw[0] ** 2)

    def central(self, k):
        if k > self.raw.shape[0]:
            raise ValueError(f"order {k} needs raw moments up to {k}")
        return central_from_raw(self.raw[:k], k)


def moment_set(dist, j_max=2, include_background=True):
    return MomentSet(np.stack([raw_moment(dist, j, include_background)
                               for j in range(1, j_max + 1)]))


def sample_termination(dist, rng, size=None):
    """Draw the index of the sample where the ray stops, or ``BACKGROUND``.

    ``rng`` is a numpy Generator or anything with a ``random`` method.
    """
    u = rng.random(size)
    cdf = np.cumsum(dist.weights)
    idx = np.searchsorted(cdf, u, side="right")
    idx = np.where(idx >= len(dist), BACKGROUND, idx)
    return int(idx) if size is None else idx
