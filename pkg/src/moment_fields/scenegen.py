"""Procedural sphere scenes with exact ray-traced ground truth."""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import hadamard

from .core import Camera, image_pixels, look_at, pixel_rays
from .nerf import VoxelField
from .splat import SplatScene, logit

N_CLASSES = 8
# rows of a normalised Hadamard matrix: exactly orthonormal, fixed forever
CODEBOOK = hadamard(N_CLASSES).astype(np.float64) / np.sqrt(N_CLASSES)
REGION = 1.0


def class_embedding(cls):
    if not 0 <= cls < N_CLASSES:
        raise ValueError(f"class id must be in [0, {N_CLASSES}), got {cls}")
    return CODEBOOK[cls].copy()


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    color: np.ndarray
    cls: int = 0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        self.radius = float(self.radius)
        self.cls = int(self.cls)
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError("sphere colour must lie in [0, 1]")
        class_embedding(self.cls)

    @property
    def embedding(self):
        return class_embedding(self.cls)


@dataclass
class AnalyticScene:
    spheres: list
    background_color: np.ndarray = field(default_factory=lambda: np.zeros(3))
    seed: int = None

    def __post_init__(self):
        self.background_color = np.asarray(self.background_color, dtype=np.float64).reshape(3)

    @property
    def background_embedding(self):
        return np.zeros(N_CLASSES)

    def background(self, semantic=False):
        """Renderer background features (depth is added by the renderer)."""
        if semantic:
            return np.concatenate([self.background_color, self.background_embedding])
        return self.background_color.copy()

    def to_dict(self):
        return {
            "spheres": [{"center": s.center.tolist(), "radius": s.radius,
                         "color": s.color.tolist(), "class": s.cls} for s in self.spheres],
            "background": {"color": self.background_color.tolist()},
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            spheres = [Sphere(s["center"], s["radius"], s["color"], s.get("class", 0))
                       for s in doc["spheres"]]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed scene description: {exc}") from None
        bg = doc.get("background", {}).get("color", [0.0, 0.0, 0.0])
        return cls(spheres, bg, doc.get("seed"))


def save_scene_json(scene, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(scene.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_scene_json(path):
    with open(path, encoding="utf-8") as fh:
        return AnalyticScene.from_dict(json.load(fh))


def generate_scene(seed, n_spheres=6):
    """Random non-degenerate spheres inside the unit cube, coloured and labelled."""
    if n_spheres < 1:
        raise ValueError("need at least one sphere")
    rng = np.random.default_rng(seed)
    spheres = []
    classes = rng.permutation(N_CLASSES)
    for i in range(n_spheres):
        radius = rng.uniform(0.15, 0.35)
        # rejection keeps centres apart so no sphere swallows another
        for _ in range(1000):
            center = rng.uniform(-REGION + radius, REGION - radius, 3)
            if all(np.linalg.norm(center - s.center) > 0.5 * (radius + s.radius)
                   for s in spheres):
                break
        color = rng.uniform(0.1, 0.95, 3)
        spheres.append(Sphere(center, radius, color, int(classes[i % N_CLASSES])))
    return AnalyticScene(spheres, np.zeros(3), int(seed))


def desk_scene():
    """The fixed benchmark scene: eight spheres with overlapping silhouettes."""
    spheres = [
        ((0.00, 0.00, 0.00), 0.45, (0.85, 0.20, 0.15), 0),
        ((0.55, 0.35, -0.10), 0.30, (0.20, 0.75, 0.25), 1),
        ((-0.50, 0.40, -0.05), 0.28, (0.20, 0.30, 0.90), 2),
        ((0.20, -0.60, -0.15), 0.25, (0.95, 0.85, 0.20), 3),
        ((-0.35, -0.45, 0.20), 0.22, (0.80, 0.25, 0.80), 4),
        ((0.10, 0.20, 0.50), 0.20, (0.20, 0.85, 0.85), 5),
        ((0.60, -0.20, 0.35), 0.18, (0.95, 0.55, 0.10), 1),
        ((-0.70, -0.10, -0.30), 0.20, (0.90, 0.90, 0.90), 6),
    ]
    return AnalyticScene([Sphere(*s) for s in spheres], np.zeros(3), 0)


# --- cameras -------------------------------------------------------------------

DESK_RADIUS = 3.0
DESK_ELEVATION = 0.35
DESK_FOCAL_PER_PIXEL = 1.25   # focal length as a multiple of the image width
DESK_NEAR, DESK_FAR = 0.5, 6.0


def camera_orbit(n_views, radius=DESK_RADIUS, target=(0.0, 0.0, 0.0),
                 elevation=DESK_ELEVATION, width=64, height=64, focal=None,
                 z_near=DESK_NEAR, z_far=DESK_FAR, hemisphere=False, start=0.0):
    """Cameras evenly spaced in azimuth around ``target``, all looking at it.

    With ``hemisphere=True`` the elevations also step from near the horizon
    up towards the pole, which spreads the views over the upper hemisphere.
    """
    if n_views < 1:
        raise ValueError("need at least one view")
    target = np.asarray(target, dtype=np.float64)
    focal = DESK_FOCAL_PER_PIXEL * width if focal is None else focal
    cams = []
    for k in range(n_views):
        az = start + 2.0 * np.pi * k / n_views
        el = elevation
        if hemisphere:
            el = np.arcsin((k + 0.5) / n_views) * 0.9
        center = target + radius * np.array([np.cos(el) * np.cos(az),
                                             np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera.centered(width, height, focal, look_at(center, target),
                                    z_near, z_far))
    return cams


# --- ground truth ----------------------------------------------------------------

def raytrace_ground_truth(scene, camera, px=None, py=None):
    """Colour (H, W, 3), camera-z depth (H, W) and embeddings (H, W, 8).

    Pixels that hit nothing inside [z_near, z_far] get the background: the
    scene's background colour, depth ``z_far`` and a zero embedding.  With
    explicit ``px``/``py`` the arrays are flat over the listed pixels.
    """
    flat = px is not None
    if not flat:
        px, py = image_pixels(camera)
    origins, dirs, dz = pixel_rays(camera, px, py)
    n = len(dz)
    best = np.full(n, np.inf)
    hit_id = np.full(n, -1)
    for i, s in enumerate(scene.spheres):
        oc = origins - s.center
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - s.radius ** 2
        disc = b * b - c
        ok = disc >= 0
        root = np.sqrt(np.where(ok, disc, 0.0))
        for dist in (-b - root, -b + root):
            depth = dist * dz
            take = ok & (depth >= camera.z_near) & (depth <= camera.z_far) & (dist < best)
            best = np.where(take, dist, best)
            hit_id = np.where(take, i, hit_id)
            ok &= ~take
    hit = hit_id >= 0
    colors = np.vstack([np.reshape([s.color for s in scene.spheres], (-1, 3)),
                        scene.background_color])
    embeds = np.vstack([np.reshape([s.embedding for s in scene.spheres], (-1, N_CLASSES)),
                        scene.background_embedding])
    idx = np.where(hit, hit_id, len(scene.spheres))
    color = colors[idx]
    semantic = embeds[idx]
    depth = np.where(hit, best * dz, camera.z_far)
    if flat:
        return color, depth, semantic
    h, w = camera.height, camera.width
    return color.reshape(h, w, 3), depth.reshape(h, w), semantic.reshape(h, w, N_CLASSES)


# --- direct model construction -----------------------------------------------------

def _fibonacci_sphere(n):
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def scene_to_splats(scene, per_sphere=256, opacity=0.95, semantic=False):
    """Cover each sphere's surface with small isotropic Gaussians."""
    means, scales, feats = [], [], []
    for s in scene.spheres:
        pts = s.center + s.radius * _fibonacci_sphere(per_sphere)
        spacing = s.radius * np.sqrt(4.0 * np.pi / per_sphere)
        f = np.concatenate([s.color, s.embedding]) if semantic else s.color
        means.append(pts)
        scales.append(np.full((per_sphere, 3), 0.3 * spacing))
        feats.append(np.tile(f, (per_sphere, 1)))
    n = per_sphere * len(scene.spheres)
    return SplatScene(np.concatenate(means), np.concatenate(scales),
                      np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)), np.full(n, float(logit(opacity))),
                      np.concatenate(feats), scene.background(semantic))


def scene_to_voxels(scene, resolution=48, lo=-1.2, hi=1.2, semantic=False,
                    inside=12.0, outside=-12.0):
    """Voxel grid that is dense inside spheres and carries the nearest sphere's features."""
    axis = np.linspace(lo, hi, resolution)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    sdf = np.stack([np.linalg.norm(grid - s.center, axis=1) - s.radius
                    for s in scene.spheres], axis=1)
    nearest = np.argmin(sdf, axis=1)
    dens = np.where(sdf.min(axis=1) <= 0, inside, outside)
    table = np.array([np.concatenate([s.color, s.embedding]) if semantic else s.color
                      for s in scene.spheres])
    res = (resolution,) * 3
    return VoxelField(dens.reshape(res), table[nearest].reshape(res + (table.shape[1],)),
                      np.full(3, lo), np.full(3, hi))
