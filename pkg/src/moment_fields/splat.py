"""Gaussian-splatting rasterizer with moment rendering and analytic gradients.

Each Gaussian projects to an image-plane ellipse (local affine approximation
of the pinhole projection plus a 0.3 px^2 low-pass dilation).  Splats are
ordered by camera-frame depth of their means, binned into 16x16 pixel tiles,
and composited front to back.  A pixel's compositing weights define its
termination distribution; the depth feature of a splat is its mean's
camera-frame z.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import _splat_kernels
from ._splat_kernels import ALPHA_MAX, CUTOFF, T_MIN
from .core import COLOR_CHANNELS, assemble_render, image_pixels, world_to_camera
from .termination import TerminationDistribution, compositing_weights

TILE = 16
DILATION = 0.3
CHECKPOINT_MAGIC = b"MFGS"
CHECKPOINT_VERSION = 1


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class Gaussian3D:
    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    opacity_raw: float = 0.0
    feature: np.ndarray = field(default_factory=lambda: np.zeros(COLOR_CHANNELS))

    @property
    def alpha(self):
        return float(sigmoid(self.opacity_raw))

    @property
    def covariance(self):
        return covariance_from_scale_rotation(self.scale, self.rotation)


@dataclass(frozen=True)
class Splat2D:
    mean: np.ndarray
    cov: np.ndarray
    depth: float
    alpha: float
    feature: np.ndarray
    index: int = 0

    @property
    def conic(self):
        return np.linalg.inv(self.cov)


@dataclass
class SplatScene:
    means: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    opacity_raw: np.ndarray
    features: np.ndarray
    background: np.ndarray = None

    def __post_init__(self):
        self.means = np.array(self.means, dtype=np.float64).reshape(-1, 3)
        m = len(self.means)
        self.scales = np.array(self.scales, dtype=np.float64).reshape(m, 3)
        self.quats = np.array(self.quats, dtype=np.float64).reshape(m, 4)
        self.opacity_raw = np.array(self.opacity_raw, dtype=np.float64).reshape(m)
        self.features = np.array(self.features, dtype=np.float64).reshape(m, -1)
        if self.background is None:
            self.background = np.zeros(self.features.shape[1])
        self.background = np.asarray(self.background, dtype=np.float64).reshape(-1)
        if self.background.size != self.features.shape[1]:
            raise ValueError("background needs one value per feature channel")
        if np.any(self.scales <= 0):
            raise ValueError("scales must be positive")

    @classmethod
    def from_gaussians(cls, gaussians, background=None):
        gs = list(gaussians)
        if not gs:
            raise ValueError("need at least one Gaussian")
        return cls(np.stack([g.mean for g in gs]), np.stack([g.scale for g in gs]),
                   np.stack([g.rotation for g in gs]), [g.opacity_raw for g in gs],
                   np.stack([np.atleast_1d(g.feature) for g in gs]), background)

    @classmethod
    def random_init(cls, n, seed=0, half_extent=1.0, scale=0.12, opacity=0.6, n_semantic=0):
        """Gaussians spread uniformly in a cube, random colours, fixed opacity."""
        rng = np.random.default_rng(seed)
        feats = np.zeros((n, COLOR_CHANNELS + n_semantic))
        feats[:, :COLOR_CHANNELS] = rng.random((n, COLOR_CHANNELS))
        return cls(rng.uniform(-half_extent, half_extent, (n, 3)),
                   np.full((n, 3), scale), np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
                   np.full(n, float(logit(opacity))), feats)

    def __len__(self):
        return len(self.means)

    @property
    def n_channels(self):
        return self.features.shape[1]

    def gaussian(self, i):
        return Gaussian3D(self.means[i].copy(), self.scales[i].copy(), self.quats[i].copy(),
                          float(self.opacity_raw[i]), self.features[i].copy())

    def params(self):
        return {"means": self.means, "scales": self.scales, "quats": self.quats,
                "opacity_raw": self.opacity_raw, "features": self.features}

    def copy(self):
        return SplatScene(self.means.copy(), self.scales.copy(), self.quats.copy(),
                          self.opacity_raw.copy(), self.features.copy(),
                          self.background.copy())

    def permuted(self, order):
        order = np.asarray(order)
        return SplatScene(self.means[order], self.scales[order], self.quats[order],
                          self.opacity_raw[order], self.features[order], self.background)


# --- covariance ----------------------------------------------------------------

def quat_to_rotmat(q):
    """Rotation matrices (..., 3, 3) from quaternions (..., 4) in (w, x, y, z) order."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def _rotmat_quat_grad(q_unit, d_rot):
    """Pull a gradient on R back to the (unit) quaternion components."""
    w, x, y, z = np.moveaxis(q_unit, -1, 0)
    d = d_rot
    g_w = 2 * (-z * d[..., 0, 1] + y * d[..., 0, 2] + z * d[..., 1, 0]
               - x * d[..., 1, 2] - y * d[..., 2, 0] + x * d[..., 2, 1])
    g_x = 2 * (y * d[..., 0, 1] + z * d[..., 0, 2] + y * d[..., 1, 0] - w * d[..., 1, 2]
               + z * d[..., 2, 0] + w * d[..., 2, 1]) - 4 * x * (d[..., 1, 1] + d[..., 2, 2])
    g_y = 2 * (x * d[..., 0, 1] + w * d[..., 0, 2] + x * d[..., 1, 0] + z * d[..., 1, 2]
               - w * d[..., 2, 0] + z * d[..., 2, 1]) - 4 * y * (d[..., 0, 0] + d[..., 2, 2])
    g_z = 2 * (-w * d[..., 0, 1] + x * d[..., 0, 2] + w * d[..., 1, 0] + y * d[..., 1, 2]
               + x * d[..., 2, 0] + y * d[..., 2, 1]) - 4 * z * (d[..., 0, 0] + d[..., 1, 1])
    return np.stack([g_w, g_x, g_y, g_z], -1)


def covariance_from_scale_rotation(s, q):
    """``R diag(s^2) R^T`` for positive scales and a unit quaternion."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("scales must be positive")
    rot = quat_to_rotmat(q)
    m = rot * s[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


# --- projection ----------------------------------------------------------------

@dataclass
class Projection:
    """Per-splat projection results plus what backward needs."""

    mean2d: np.ndarray
    cov2d: np.ndarray       # (M, 3): xx, xy, yy, dilation included
    conic: np.ndarray       # (M, 3)
    depth: np.ndarray
    alpha: np.ndarray
    radius: np.ndarray
    valid: np.ndarray
    n_singular: int
    p_cam: np.ndarray
    jac_w: np.ndarray       # (M, 2, 3) projection Jacobian times view rotation
    cov3d: np.ndarray
    rot: np.ndarray
    q_unit: np.ndarray
    q_norm: np.ndarray


def project(scene, camera):
    rot_view = camera.pose.rotation
    q_norm = np.linalg.norm(scene.quats, axis=1)
    q_unit = scene.quats / q_norm[:, None]
    rot = quat_to_rotmat(q_unit)
    lmat = rot * scene.scales[:, None, :]
    cov3d = lmat @ np.swapaxes(lmat, 1, 2)
    p_cam = world_to_camera(camera.pose, scene.means)
    x, y, z = p_cam.T
    valid = z > camera.z_near
    zs = np.where(valid, z, 1.0)
    jac = np.zeros((len(scene), 2, 3))
    jac[:, 0, 0] = camera.fx / zs
    jac[:, 0, 2] = -camera.fx * x / zs ** 2
    jac[:, 1, 1] = camera.fy / zs
    jac[:, 1, 2] = -camera.fy * y / zs ** 2
    jac_w = jac @ rot_view
    c2 = jac_w @ cov3d @ np.swapaxes(jac_w, 1, 2)
    cov2d = np.stack([c2[:, 0, 0] + DILATION, 0.5 * (c2[:, 0, 1] + c2[:, 1, 0]),
                      c2[:, 1, 1] + DILATION], axis=1)
    det = cov2d[:, 0] * cov2d[:, 2] - cov2d[:, 1] ** 2
    singular = valid & ~(det > 0)
    valid &= det > 0
    safe = np.where(valid, det, 1.0)
    conic = np.stack([cov2d[:, 2], -cov2d[:, 1], cov2d[:, 0]], axis=1) / safe[:, None]
    mid = 0.5 * (cov2d[:, 0] + cov2d[:, 2])
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(np.maximum(lam, 0.0))
    mean2d = np.stack([camera.fx * x / zs + camera.cx, camera.fy * y / zs + camera.cy], axis=1)
    return Projection(mean2d, cov2d, conic, z, sigmoid(scene.opacity_raw), radius, valid,
                      int(singular.sum()), p_cam, jac_w, cov3d, rot, q_unit, q_norm)


def project_gaussian(camera, g):
    """Project one Gaussian; None when it is culled."""
    proj = project(SplatScene.from_gaussians([g]), camera)
    if not proj.valid[0]:
        return None
    c = proj.cov2d[0]
    return Splat2D(proj.mean2d[0].copy(), np.array([[c[0], c[1]], [c[1], c[2]]]),
                   float(proj.depth[0]), float(proj.alpha[0]), np.atleast_1d(g.feature).copy())


def sort_splats(splats_or_depths):
    """Indices ordering splats front to back; equal depths keep input order."""
    depths = [getattr(s, "depth", s) for s in splats_or_depths]
    return np.argsort(np.asarray(depths, dtype=np.float64), kind="stable")


# --- tile binning --------------------------------------------------------------

@dataclass
class Frame:
    """A scene projected and binned for one camera (the forward cache)."""

    camera: object
    proj: Projection
    order: np.ndarray
    tile_offsets: np.ndarray
    tile_splats: np.ndarray
    tiles_x: int
    feats: np.ndarray        # (M, C + 1), depth last
    bg: np.ndarray           # (C + 1,)
    n_splats: int

    def pixel_tiles(self, px, py):
        return (np.asarray(py) // TILE) * self.tiles_x + np.asarray(px) // TILE


def prepare(scene, camera):
    if len(scene) == 0:
        raise ValueError("scene has no Gaussians")
    proj = project(scene, camera)
    tiles_x = -(-camera.width // TILE)
    tiles_y = -(-camera.height // TILE)
    # pixel index ranges covered by each 3-sigma box (pixel centres at i + 0.5)
    x0 = np.ceil(proj.mean2d[:, 0] - proj.radius - 0.5)
    x1 = np.floor(proj.mean2d[:, 0] + proj.radius - 0.5)
    y0 = np.ceil(proj.mean2d[:, 1] - proj.radius - 0.5)
    y1 = np.floor(proj.mean2d[:, 1] + proj.radius - 0.5)
    on_screen = (proj.valid & (x1 >= 0) & (x0 <= camera.width - 1)
                 & (y1 >= 0) & (y0 <= camera.height - 1) & (x1 >= x0) & (y1 >= y0))
    candidates = np.nonzero(on_screen)[0]
    order = candidates[np.argsort(proj.depth[candidates], kind="stable")]
    tx0 = np.clip(x0[order], 0, camera.width - 1) // TILE
    tx1 = np.clip(x1[order], 0, camera.width - 1) // TILE
    ty0 = np.clip(y0[order], 0, camera.height - 1) // TILE
    ty1 = np.clip(y1[order], 0, camera.height - 1) // TILE
    tx = np.arange(tiles_x)
    ty = np.arange(tiles_y)
    cover_x = (tx[None, :] >= tx0[:, None]) & (tx[None, :] <= tx1[:, None])
    cover_y = (ty[None, :] >= ty0[:, None]) & (ty[None, :] <= ty1[:, None])
    cover = (cover_y[:, :, None] & cover_x[:, None, :]).reshape(len(order), -1)
    tile_ids, rank = np.nonzero(cover.T)
    tile_splats = order[rank].astype(np.int64)
    counts = np.bincount(tile_ids, minlength=tiles_x * tiles_y)
    tile_offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    feats = np.concatenate([scene.features, proj.depth[:, None]], axis=1)
    bg = np.concatenate([scene.background, [camera.z_far]])
    return Frame(camera, proj, order, tile_offsets, tile_splats, tiles_x,
                 np.ascontiguousarray(feats), bg, len(scene))


# --- rendering -----------------------------------------------------------------

def rasterize(frame, px, py, j_max=2, backend=None):
    """Raw moments (P, J, C + 1), residual transmittance and contributor counts."""
    forward = _splat_kernels.forward if backend is None else _splat_kernels.BACKENDS[backend][0]
    px = np.asarray(px, dtype=np.int64)
    py = np.asarray(py, dtype=np.int64)
    p = frame.proj
    return forward(frame.tile_offsets, frame.tile_splats, p.mean2d, p.conic, p.alpha,
                   frame.feats, frame.bg, px, py, frame.pixel_tiles(px, py), j_max)


def render_image_splat(scene, camera, j_max=2, backend=None):
    frame = prepare(scene, camera)
    px, py = image_pixels(camera)
    raw, residual, _ = rasterize(frame, px, py, j_max, backend)
    return assemble_render(raw, residual, camera.height, camera.width)


def splat_backward(scene, camera, grad_moments, px=None, py=None, frame=None, backend=None):
    """Gradients of ``sum(grad_moments * moments)`` w.r.t. every splat parameter.

    ``grad_moments`` is (P, J, C + 1) for the listed pixels (whole image in
    row-major order when ``px`` is None).  Sorting order is held fixed.
    """
    if frame is None:
        frame = prepare(scene, camera)
    if frame.n_splats != len(scene) or frame.camera is not camera:
        raise RuntimeError("cached frame does not belong to this scene/camera")
    if px is None:
        px, py = image_pixels(camera)
    px = np.asarray(px, dtype=np.int64)
    py = np.asarray(py, dtype=np.int64)
    g = np.ascontiguousarray(grad_moments, dtype=np.float64)
    if g.ndim != 3 or g.shape[0] != len(px) or g.shape[2] != frame.feats.shape[1]:
        raise RuntimeError("upstream gradient does not match the cached frame")
    tiles = frame.pixel_tiles(px, py)
    perm = np.argsort(tiles, kind="stable")
    n_tiles = len(frame.tile_offsets) - 1
    pix_offsets = np.concatenate([[0], np.cumsum(np.bincount(tiles, minlength=n_tiles))])
    backward = (_splat_kernels.backward if backend is None
                else _splat_kernels.BACKENDS[backend][1])
    p = frame.proj
    rows = backward(frame.tile_offsets, frame.tile_splats, p.mean2d, p.conic, p.alpha,
                    frame.feats, frame.bg, px[perm], py[perm], pix_offsets.astype(np.int64),
                    g[perm])
    return _project_backward(scene, camera, p, rows)


def _project_backward(scene, camera, p, rows):
    n_feat = scene.n_channels
    d_mean2d = rows[:, 0:2]
    d_conic = rows[:, 2:5]
    d_alpha = rows[:, 5]
    d_feats = rows[:, _splat_kernels.N_GEOM:_splat_kernels.N_GEOM + n_feat]
    d_depth = rows[:, _splat_kernels.N_GEOM + n_feat]

    cxx, cxy, cyy = p.cov2d.T
    det = np.where(p.valid, cxx * cyy - cxy ** 2, 1.0)
    ga, gb, gc = d_conic.T
    inv_d2 = 1.0 / det ** 2
    g_xx = (-ga * cyy ** 2 + gb * cxy * cyy - gc * cxy ** 2) * inv_d2
    g_xy = (2 * ga * cxy * cyy - gb * (cxx * cyy + cxy ** 2) + 2 * gc * cxx * cxy) * inv_d2
    g_yy = (-ga * cxy ** 2 + gb * cxy * cxx - gc * cxx ** 2) * inv_d2
    g2 = np.zeros((len(scene), 2, 2))
    g2[:, 0, 0] = g_xx
    g2[:, 0, 1] = g2[:, 1, 0] = 0.5 * g_xy
    g2[:, 1, 1] = g_yy

    jw = p.jac_w
    d_cov3d = np.swapaxes(jw, 1, 2) @ g2 @ jw
    d_jw = 2.0 * g2 @ jw @ p.cov3d
    d_jac = d_jw @ camera.pose.rotation.T

    x, y, z = p.p_cam.T
    z = np.where(p.valid, z, 1.0)
    fx, fy = camera.fx, camera.fy
    d_pcam = np.zeros((len(scene), 3))
    d_pcam[:, 0] = d_jac[:, 0, 2] * (-fx / z ** 2) + d_mean2d[:, 0] * fx / z
    d_pcam[:, 1] = d_jac[:, 1, 2] * (-fy / z ** 2) + d_mean2d[:, 1] * fy / z
    d_pcam[:, 2] = (d_jac[:, 0, 0] * (-fx / z ** 2) + d_jac[:, 0, 2] * (2 * fx * x / z ** 3)
                    + d_jac[:, 1, 1] * (-fy / z ** 2) + d_jac[:, 1, 2] * (2 * fy * y / z ** 3)
                    - d_mean2d[:, 0] * fx * x / z ** 2 - d_mean2d[:, 1] * fy * y / z ** 2
                    + d_depth)
    d_means = d_pcam @ camera.pose.rotation

    lmat = p.rot * scene.scales[:, None, :]
    d_l = (d_cov3d + np.swapaxes(d_cov3d, 1, 2)) @ lmat
    d_scales = np.sum(d_l * p.rot, axis=1)
    d_rot = d_l * scene.scales[:, None, :]
    d_qu = _rotmat_quat_grad(p.q_unit, d_rot)
    d_quats = (d_qu - p.q_unit * np.sum(p.q_unit * d_qu, axis=1, keepdims=True)) \
        / p.q_norm[:, None]

    d_opacity = d_alpha * p.alpha * (1.0 - p.alpha)
    grads = {"means": d_means, "scales": d_scales, "quats": d_quats,
             "opacity_raw": d_opacity, "features": d_feats.copy()}
    for v in grads.values():
        v[~p.valid] = 0.0
    return grads


# --- reference compositor ------------------------------------------------------

def composite_pixel(ordered, pixel, background=None, depth_background=None):
    """Termination distribution at continuous pixel coordinate ``pixel``.

    ``ordered`` is a front-to-back sequence of Splat2D.  Straightforward
    per-splat evaluation, kept separate from the tile kernels so the two can
    be checked against each other.  Features get each splat's depth appended
    when ``depth_background`` is given.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    alphas, feats = [], []
    trans = 1.0
    skipped = 0
    for sp in ordered:
        d = pixel - sp.mean
        try:
            maha = float(d @ np.linalg.solve(sp.cov, d))
        except np.linalg.LinAlgError:
            skipped += 1
            continue
        if maha > CUTOFF:
            continue
        a = min(ALPHA_MAX, sp.alpha * np.exp(-0.5 * maha))
        f = np.atleast_1d(sp.feature)
        if depth_background is not None:
            f = np.append(f, sp.depth)
        alphas.append(a)
        feats.append(f)
        trans *= 1.0 - a
        if trans < T_MIN:
            break
    n_ch = (len(np.atleast_1d(ordered[0].feature)) if len(ordered) else 1) \
        + (depth_background is not None)
    bg = np.zeros(n_ch) if background is None else np.asarray(background, dtype=np.float64)
    if depth_background is not None and bg.size < n_ch:
        bg = np.append(bg, depth_background)
    weights, residual = compositing_weights(alphas)
    dist = TerminationDistribution(weights, np.array(feats).reshape(len(weights), n_ch),
                                   residual, bg)
    composite_pixel.last_skipped = skipped
    return dist


def frame_splats(frame, scene):
    """Splat2D list in sorted order for the splats that reached any tile."""
    p = frame.proj
    out = []
    for i in frame.order:
        c = p.cov2d[i]
        out.append(Splat2D(p.mean2d[i].copy(), np.array([[c[0], c[1]], [c[1], c[2]]]),
                           float(p.depth[i]), float(p.alpha[i]), scene.features[i].copy(),
                           int(i)))
    return out


# --- checkpoints ---------------------------------------------------------------

_HEADER = struct.Struct("<4sIII")


def save_scene(scene, path):
    """Header (magic, version, count, channels) then per-splat float32 records:
    mean[3], scale[3], quat[4], opacity_raw, feature[K]."""
    rec = np.concatenate([scene.means, scene.scales, scene.quats, scene.opacity_raw[:, None],
                          scene.features], axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(scene),
                              scene.n_channels))
        fh.write(rec.tobytes())


def load_scene(path, background=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated splat checkpoint")
    magic, version, count, n_ch = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a splat checkpoint")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    width = 11 + n_ch
    if data.size != count * width:
        raise ValueError(f"{path}: payload size does not match header")
    rec = data.reshape(count, width).astype(np.float64)
    return SplatScene(rec[:, 0:3], rec[:, 3:6], rec[:, 6:10], rec[:, 10], rec[:, 11:],
                      background)
