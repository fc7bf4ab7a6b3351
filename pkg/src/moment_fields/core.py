"""Camera geometry, rays and deterministic per-pixel random streams.

Conventions: the camera looks down +z in its own frame with x right and y
down.  Pixel ``(i, j)`` is centred at continuous coordinate ``(i + 0.5, j + 0.5)``.
Depth always means camera-frame z.
"""

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform: ``p_cam = rotation @ p + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.linalg.norm(r.T @ r - np.eye(3)) >= ORTHO_TOL or np.linalg.det(r) <= 0:
            raise ValueError("pose rotation must be a proper orthonormal matrix")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_center(cls, center, rotation=None):
        """Pose for a camera located at ``center`` (world frame)."""
        r = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
        return cls(r, -r @ np.asarray(center, dtype=np.float64))

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    def inverse(self):
        """The camera-to-world transform, itself expressed as a Pose."""
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)


def world_to_camera(pose, p):
    """Map world point(s) ``p`` (..., 3) into the camera frame."""
    p = np.asarray(p, dtype=np.float64)
    return p @ pose.rotation.T + pose.translation


def camera_to_world(pose, p):
    p = np.asarray(p, dtype=np.float64)
    return (p - pose.translation) @ pose.rotation


def look_at(center, target, up=(0.0, 0.0, 1.0)):
    """Pose of a camera at ``center`` whose principal axis passes through ``target``."""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        # looking straight along `up`; any perpendicular will do
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    return Pose.from_center(center, rotation)


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    z_near: float = 0.1
    z_far: float = 10.0
    pose: Pose = field(default_factory=Pose)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.z_near < self.z_far):
            raise ValueError("need 0 < z_near < z_far")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @classmethod
    def centered(cls, width, height, focal, pose=None, z_near=0.1, z_far=10.0):
        """Camera with square pixels and the principal point at the image centre."""
        return cls(focal, focal, width / 2.0, height / 2.0, width, height,
                   z_near, z_far, Pose() if pose is None else pose)

    def with_size(self, width, height):
        """Same field of view at a different resolution."""
        sx, sy = width / self.width, height / self.height
        return Camera(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
                      width, height, self.z_near, self.z_far, self.pose)

    @property
    def n_pixels(self):
        return self.width * self.height


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")

    def at(self, s):
        return self.origin + s * self.direction


def ray_through_pixel(camera, px, py):
    """Ray from the camera centre through the centre of pixel ``(px, py)``."""
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise ValueError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image")
    origins, dirs, _ = pixel_rays(camera, np.array([px]), np.array([py]))
    return Ray(origins[0], dirs[0])


def pixel_rays(camera, px, py):
    """Batched rays for integer pixel arrays.

    Returns world origins (n, 3), unit world directions (n, 3) and the
    camera-frame z component of each direction (n,), which converts between
    ray distance and depth.
    """
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    d_cam = np.stack([(px + 0.5 - camera.cx) / camera.fx,
                      (py + 0.5 - camera.cy) / camera.fy,
                      np.ones_like(px)], axis=-1)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    dirs = d_cam @ camera.pose.rotation
    origins = np.broadcast_to(camera.pose.center, dirs.shape).copy()
    return origins, dirs, d_cam[:, 2].copy()


def image_pixels(camera):
    """Row-major integer pixel coordinates ``(px, py)`` of the whole image."""
    py, px = np.divmod(np.arange(camera.n_pixels), camera.width)
    return px, py


# --- counter-based random streams -------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x):
    x = x + _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * _MIX1
    x = (x ^ (x >> np.uint64(27))) * _MIX2
    return x ^ (x >> np.uint64(31))


def stream_uniforms(seed, pixel, iteration, n):
    """Uniforms in [0, 1) keyed by ``(seed, pixel, iteration, k)``, k < n.

    ``pixel`` may be an integer array; the result then has shape
    ``(len(pixel), n)``.  Any subset of pixels draws exactly the values it would
    draw inside a full-image batch, which is what keeps renders independent
    of batching and thread count.
    """
    with np.errstate(over="ignore"):
        pix = np.atleast_1d(np.asarray(pixel)).astype(np.uint64)
        key = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ _splitmix64(np.uint64(iteration)))
        base = _splitmix64(key ^ _splitmix64(pix))
        ctr = base[:, None] + np.arange(n, dtype=np.uint64)[None, :] * _GOLDEN
        bits = _splitmix64(ctr) >> np.uint64(11)
    out = bits.astype(np.float64) * (1.0 / 9007199254740992.0)
    return out if np.ndim(pixel) else out[0]


class SeededRng:
    """Deterministic random source addressed by (seed, pixel, iteration).

    ``stream`` hands out the per-pixel uniforms used for stratified jitter;
    ``generator`` gives an ordinary numpy Generator for sequential draws such
    as ray selection or initialisation.
    """

    def __init__(self, seed, pixel=0, iteration=0):
        self.seed = int(seed)
        self.pixel = int(pixel)
        self.iteration = int(iteration)
        self._gen = None

    def stream(self, pixel, iteration=0):
        return SeededRng(self.seed, pixel, iteration)

    def uniform(self, n):
        return stream_uniforms(self.seed, self.pixel, self.iteration, n)

    def generator(self):
        if self._gen is None:
            self._gen = np.random.default_rng([self.seed, self.pixel, self.iteration])
        return self._gen

    def random(self, size=None):
        return self.generator().random(size)


# --- image buffers -------------------------------------------------------------

COLOR_CHANNELS = 3


@dataclass(frozen=True)
class MomentImage:
    """Per-pixel raw moments ``raw[j-1, y, x, c] = E[rho^j]``."""

    raw: np.ndarray

    @property
    def height(self):
        return self.raw.shape[1]

    @property
    def width(self):
        return self.raw.shape[2]

    @property
    def channels(self):
        return self.raw.shape[3]

    @property
    def j_max(self):
        return self.raw.shape[0]

    @property
    def mean(self):
        return self.raw[0]

    @property
    def second(self):
        if self.j_max < 2:
            raise ValueError("second moment was not rendered (j_max=1)")
        return self.raw[1]

    @property
    def variance(self):
        from .termination import _clamp_variance

        return _clamp_variance(self.second - self.mean ** 2)

    def central(self, k):
        from .termination import central_from_raw

        return central_from_raw(self.raw[:k], k)


@dataclass(frozen=True)
class RenderResult:
    """Moment images for each channel group plus the leftover transmittance."""

    color: MomentImage
    depth: MomentImage
    semantic: MomentImage
    residual: np.ndarray

    def group(self, name):
        return getattr(self, name)


def split_channels(raw, n_color=COLOR_CHANNELS):
    """Split a (..., C + 1) moment array laid out as color | semantic | depth."""
    return raw[..., :n_color], raw[..., n_color:-1], raw[..., -1:]


def assemble_render(raw, residual, height, width):
    """Build a RenderResult from flat per-pixel moments (H*W, J, C + 1)."""
    j_max = raw.shape[1]
    img = np.transpose(raw.reshape(height, width, j_max, -1), (2, 0, 1, 3))
    color, semantic, depth = split_channels(img)
    return RenderResult(MomentImage(np.ascontiguousarray(color)),
                        MomentImage(np.ascontiguousarray(depth)),
                        MomentImage(np.ascontiguousarray(semantic)),
                        residual.reshape(height, width))
