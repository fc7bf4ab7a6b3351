"""Voxel-grid radiance field rendered by stratified quadrature.

The field stores unconstrained density values and K feature channels on the
vertices of a regular grid.  Along a ray, samples are drawn one per equal-depth
bin between the near and far planes; each segment contributes opacity
``1 - exp(-sigma * delta)``, and the resulting termination masses weight every
moment of the features.  Sample depth (camera-frame z) is the depth feature.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import _nerf_kernels
from .core import (COLOR_CHANNELS, assemble_render, image_pixels, pixel_rays,
                   split_channels, stream_uniforms)
from .termination import MomentSet, TerminationDistribution, weights_from_alphas

DEFAULT_BINS = 64
CHECKPOINT_MAGIC = b"MFVX"
CHECKPOINT_VERSION = 1


@dataclass
class VoxelField:
    density_raw: np.ndarray
    features: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.density_raw = np.ascontiguousarray(self.density_raw, dtype=np.float64)
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if self.density_raw.ndim != 3 or min(self.density_raw.shape) < 2:
            raise ValueError("density grid must be 3D with at least 2 vertices per axis")
        if self.features.shape[:3] != self.density_raw.shape:
            raise ValueError("feature grid must share the density grid's resolution")
        if np.any(self.hi <= self.lo):
            raise ValueError("bounding box must have positive extent")

    @classmethod
    def initial(cls, resolution=32, n_semantic=0, lo=-1.5, hi=1.5, density=-2.0,
                feature_noise=0.1, seed=0):
        """Faint uniform fog with grey, slightly noisy features."""
        res = (resolution,) * 3 if np.isscalar(resolution) else tuple(resolution)
        rng = np.random.default_rng(seed)
        n_ch = COLOR_CHANNELS + n_semantic
        feats = np.zeros(res + (n_ch,))
        feats[..., :COLOR_CHANNELS] = 0.5
        feats += feature_noise * rng.standard_normal(feats.shape)
        lo = np.full(3, lo) if np.isscalar(lo) else lo
        hi = np.full(3, hi) if np.isscalar(hi) else hi
        return cls(np.full(res, float(density)), feats, lo, hi)

    @property
    def resolution(self):
        return self.density_raw.shape

    @property
    def n_channels(self):
        return self.features.shape[3]

    @property
    def n_semantic(self):
        return self.n_channels - COLOR_CHANNELS

    def params(self):
        return {"density_raw": self.density_raw, "features": self.features}

    def copy(self):
        return VoxelField(self.density_raw.copy(), self.features.copy(), self.lo, self.hi)

    def query(self, points):
        """Density and features at world points (n, 3); zero density outside the box."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        res = np.array(self.resolution)
        u = (points - self.lo) * ((res - 1) / (self.hi - self.lo))
        inside = np.all((u >= 0) & (u <= res - 1), axis=1)
        base = np.minimum(np.floor(np.where(inside[:, None], u, 0.0)), res - 2).astype(int)
        frac = np.where(inside[:, None], u - base, 0.0)
        x = np.zeros(len(points))
        rho = np.zeros((len(points), self.n_channels))
        for corner in np.ndindex(2, 2, 2):
            off = np.array(corner)
            wgt = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=1)
            idx = tuple((base + off).T)
            x += wgt * self.density_raw[idx]
            rho += wgt[:, None] * self.features[idx]
        sigma = np.where(inside, np.logaddexp(0.0, x), 0.0)
        return sigma, np.where(inside[:, None], rho, 0.0)


# --- quadrature primitives ---------------------------------------------------

def stratified_samples(n_bins, z_near, z_far, rng=None, offsets=None):
    """One sample per equal-width bin of [z_near, z_far], ascending.

    ``offsets`` (values in [0, 1)) pin the position inside each bin; otherwise
    they are drawn from ``rng`` (anything with ``random``), or bin midpoints
    are used when both are None.
    """
    if n_bins < 1:
        raise ValueError("need at least one bin")
    if not z_near < z_far:
        raise ValueError("need z_near < z_far")
    if offsets is None:
        offsets = np.full(n_bins, 0.5) if rng is None else rng.random(n_bins)
    offsets = np.asarray(offsets, dtype=np.float64)
    width = (z_far - z_near) / n_bins
    return z_near + (np.arange(n_bins) + offsets) * width


def transmittance_discrete(sigmas, deltas):
    """``T_i = exp(-sum_{k<i} sigma_k delta_k)``; T_1 = 1."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if np.any(sigmas < 0):
        raise ValueError("density must be nonnegative")
    if np.any(deltas <= 0):
        raise ValueError("segment lengths must be positive")
    optical = np.concatenate([[0.0], np.cumsum(sigmas * deltas)])
    return np.exp(-optical[:-1])


def quadrature_alphas(sigmas, deltas):
    sigmas = np.asarray(sigmas, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if np.any(sigmas < 0):
        raise ValueError("density must be nonnegative")
    if np.any(deltas <= 0):
        raise ValueError("segment lengths must be positive")
    return -np.expm1(-sigmas * deltas)


def segment_lengths(t, z_far, inv_dz=1.0):
    """World-space lengths between consecutive sample depths; the last
    segment runs to the far plane."""
    t = np.asarray(t, dtype=np.float64)
    nxt = np.concatenate([t[1:], [z_far]])
    return (nxt - t) * inv_dz


# --- batched rendering -------------------------------------------------------

@dataclass(frozen=True)
class RayBatch:
    """Everything the forward pass consumed, so backward can replay it."""

    origins: np.ndarray
    dirs: np.ndarray
    inv_dz: np.ndarray
    t: np.ndarray
    t_end: np.ndarray
    background: np.ndarray
    grid_shape: tuple

    def __len__(self):
        return self.t.shape[0]


def make_batch(field, camera, px, py, n_bins=DEFAULT_BINS, seed=None, iteration=0,
               view_id=0, background=None):
    """Rays for the given pixels with stratified sample depths.

    ``seed=None`` places samples at bin midpoints (evaluation renders);
    otherwise the jitter comes from the (seed, pixel, iteration) stream so a
    pixel gets the same samples no matter which batch it is rendered in.
    """
    px = np.asarray(px).reshape(-1)
    py = np.asarray(py).reshape(-1)
    origins, dirs, dz = pixel_rays(camera, px, py)
    if seed is None:
        offsets = np.full((len(px), n_bins), 0.5)
    else:
        pixel_id = view_id * camera.n_pixels + py * camera.width + px
        offsets = stream_uniforms(seed, pixel_id, iteration, n_bins)
    width = (camera.z_far - camera.z_near) / n_bins
    t = camera.z_near + (np.arange(n_bins)[None, :] + offsets) * width
    bg = _background(field, camera, background)
    return RayBatch(origins, dirs, 1.0 / dz, t, np.full(len(px), camera.z_far), bg,
                    field.resolution)


def _background(field, camera, background):
    bg = np.zeros(field.n_channels + 1)
    if background is not None:
        background = np.asarray(background, dtype=np.float64).reshape(-1)
        bg[:background.size] = background
    bg[-1] = camera.z_far
    return bg


def render_batch(field, batch, j_max=2, backend=None):
    """Raw moments (R, J, C + 1) and residual transmittance (R,)."""
    forward = _nerf_kernels.forward if backend is None else _nerf_kernels.BACKENDS[backend][0]
    return forward(batch.origins, batch.dirs, batch.inv_dz, batch.t, batch.t_end,
                   field.density_raw, field.features, field.lo, field.hi,
                   batch.background, j_max)


def nerf_backward(field, batch, grad_moments, backend=None):
    """Gradients of ``sum(grad_moments * moments)`` w.r.t. the field parameters.

    ``grad_moments`` has the (R, J, C + 1) layout returned by render_batch and
    may cover any orders up to the forward pass's j_max.
    """
    grad_moments = np.ascontiguousarray(grad_moments, dtype=np.float64)
    if batch.grid_shape != field.resolution:
        raise RuntimeError("ray batch was built for a different field")
    if grad_moments.ndim != 3 or grad_moments.shape[0] != len(batch) \
            or grad_moments.shape[2] != field.n_channels + 1:
        raise RuntimeError("upstream gradient does not match the cached ray batch")
    backward = _nerf_kernels.backward if backend is None else _nerf_kernels.BACKENDS[backend][1]
    g_density, g_feats = backward(batch.origins, batch.dirs, batch.inv_dz, batch.t,
                                  batch.t_end, field.density_raw, field.features,
                                  field.lo, field.hi, batch.background, grad_moments)
    return {"density_raw": g_density, "features": g_feats}


def render_image(field, camera, j_max=2, n_bins=DEFAULT_BINS, seed=None, background=None,
                 chunk=8192):
    px, py = image_pixels(camera)
    raws, residuals = [], []
    for start in range(0, len(px), chunk):
        batch = make_batch(field, camera, px[start:start + chunk], py[start:start + chunk],
                           n_bins, seed=seed, background=background)
        raw, res = render_batch(field, batch, j_max)
        raws.append(raw)
        residuals.append(res)
    return assemble_render(np.concatenate(raws), np.concatenate(residuals),
                           camera.height, camera.width)


def render_pixel_nerf(field, ray, n_bins=DEFAULT_BINS, rng=None, j_max=2, z_near=0.1,
                      z_far=10.0, depth_scale=1.0, background=None):
    """Moments of one ray, grouped as color / depth / semantic MomentSets.

    The ray parameter is measured as depth, i.e. the point at depth ``t`` is
    ``origin + t * depth_scale * direction`` where ``depth_scale`` is
    1 / (camera-z component of the direction); 1.0 for a ray on the
    principal axis.
    """
    t = stratified_samples(n_bins, z_near, z_far, rng)
    origin = np.asarray(ray.origin, dtype=np.float64)
    direction = np.asarray(ray.direction, dtype=np.float64)
    bg = np.zeros(field.n_channels + 1)
    if background is not None:
        bg[:len(background)] = background
    bg[-1] = z_far
    batch = RayBatch(origin[None], direction[None], np.array([float(depth_scale)]),
                     t[None], np.array([z_far]), bg, field.resolution)
    raw, _ = render_batch(field, batch, max(j_max, 2))
    color, semantic, depth = split_channels(raw[0])
    return {"color": MomentSet(color), "depth": MomentSet(depth),
            "semantic": MomentSet(semantic)}


def ray_distribution(field, batch, i):
    """Termination distribution of ray ``i`` of a batch, built from the
    quadrature primitives rather than the render kernel."""
    t = batch.t[i]
    pts = batch.origins[i] + (t * batch.inv_dz[i])[:, None] * batch.dirs[i]
    sigma, rho = field.query(pts)
    alphas = quadrature_alphas(sigma, segment_lengths(t, batch.t_end[i], batch.inv_dz[i]))
    feats = np.concatenate([rho, t[:, None]], axis=1)
    return weights_from_alphas(alphas, feats, batch.background)


# --- checkpoints -------------------------------------------------------------

_HEADER = struct.Struct("<4sI3II6f")


def save_field(field, path):
    """Header (magic, version, resolution, channels, bbox) then float32 data:
    density with x varying fastest, followed by features with the channels of
    each voxel contiguous and voxels again in x-fastest order."""
    rx, ry, rz = field.resolution
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, rx, ry, rz,
                          field.n_channels, *field.lo, *field.hi)
    density = field.density_raw.transpose(2, 1, 0).astype("<f4")
    feats = field.features.transpose(2, 1, 0, 3).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(density.tobytes())
        fh.write(feats.tobytes())


def load_field(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated voxel checkpoint")
    magic, version, rx, ry, rz, n_ch, *box = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a voxel field checkpoint")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    n_vox = rx * ry * rz
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    if data.size != n_vox * (1 + n_ch):
        raise ValueError(f"{path}: payload size does not match header")
    density = data[:n_vox].reshape(rz, ry, rx).transpose(2, 1, 0)
    feats = data[n_vox:].reshape(rz, ry, rx, n_ch).transpose(2, 1, 0, 3)
    return VoxelField(density.astype(np.float64), feats.astype(np.float64),
                      np.array(box[:3]), np.array(box[3:]))


__all__ = [
    "VoxelField", "RayBatch", "TerminationDistribution", "stratified_samples",
    "transmittance_discrete", "quadrature_alphas", "segment_lengths", "make_batch",
    "render_batch", "render_image", "render_pixel_nerf", "nerf_backward",
    "ray_distribution", "save_field", "load_field", "DEFAULT_BINS",
]
