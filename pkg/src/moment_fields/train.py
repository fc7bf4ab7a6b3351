"""Training voxel fields and splat scenes on ground-truth views.

Rays are drawn per iteration from one training view.  Three samplers
decide where: ``uniform`` (every pixel equally likely), ``variance`` (grid
cells weighted by the model's own mean colour variance) and ``error`` (cells
weighted by the current squared error against ground truth, which needs the
ground-truth image and so serves as an oracle baseline).
"""

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nerf, splat
from .core import COLOR_CHANNELS, image_pixels
from .metrics import psnr, ssim

SAMPLERS = ("uniform", "variance", "error")
RENDERERS = ("nerf", "splat")

DEFAULT_LR = {
    "nerf": {"density_raw": 0.2, "features": 0.05},
    "splat": {"means": 0.004, "scales": 0.01, "quats": 0.01, "opacity_raw": 0.05,
              "features": 0.03},
}


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 1000
    rays_per_iter: int = 1024
    initial_rays: int = 200
    lr: dict = None
    loss: str = "l2"
    seed: int = 0
    sampler: str = "uniform"
    grid: int = 8
    floor: int = 1
    score_channels: str = "color"
    semantic_weight: float = 0.0
    n_bins: int = 64
    eval_every: int = 100

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.rays_per_iter < 1 or self.initial_rays < 1:
            raise ValueError("ray counts must be positive")
        if self.loss != "l2":
            raise ValueError("only the l2 photometric loss is implemented")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        if self.score_channels not in ("color", "all"):
            raise ValueError("score_channels must be 'color' or 'all'")
        if self.grid < 1 or self.floor < 0 or self.n_bins < 1 or self.eval_every < 1:
            raise ValueError("grid, n_bins and eval_every must be positive, floor >= 0")
        if self.rays_per_iter < self.grid * self.grid * self.floor:
            raise ValueError("rays_per_iter cannot cover the per-cell floor")
        if self.lr is not None and any(v <= 0 for v in self.lr.values()):
            raise ValueError("learning rates must be positive")

    def learning_rates(self, renderer):
        rates = dict(DEFAULT_LR[renderer])
        rates.update(self.lr or {})
        return rates

    def to_dict(self):
        return asdict(self)


# --- renderer adapters ---------------------------------------------------------------

@dataclass
class View:
    """A training or evaluation camera together with its ground truth."""

    camera: object
    color: np.ndarray
    depth: np.ndarray = None
    semantic: np.ndarray = None
    view_id: int = 0


class NerfRenderer:
    name = "nerf"

    def __init__(self, n_bins=nerf.DEFAULT_BINS, background=None):
        self.n_bins = n_bins
        self.background = background

    def forward(self, model, camera, px, py, j_max=1, seed=None, iteration=0, view_id=0):
        batch = nerf.make_batch(model, camera, px, py, self.n_bins, seed, iteration, view_id,
                                self.background)
        raw, _ = nerf.render_batch(model, batch, j_max)
        return raw, batch

    def backward(self, model, ctx, grad):
        return nerf.nerf_backward(model, ctx, grad)

    def render(self, model, camera, j_max=2):
        return nerf.render_image(model, camera, j_max, self.n_bins, background=self.background)


class SplatRenderer:
    name = "splat"

    def forward(self, model, camera, px, py, j_max=1, seed=None, iteration=0, view_id=0):
        frame = splat.prepare(model, camera)
        raw, _, _ = splat.rasterize(frame, px, py, j_max)
        return raw, (frame, camera, np.asarray(px), np.asarray(py))

    def backward(self, model, ctx, grad):
        frame, camera, px, py = ctx
        return splat.splat_backward(model, camera, grad, px, py, frame=frame)

    def render(self, model, camera, j_max=2):
        return splat.render_image_splat(model, camera, j_max)


def make_renderer(name, n_bins=nerf.DEFAULT_BINS, background=None):
    if name == "nerf":
        return NerfRenderer(n_bins, background)
    if name == "splat":
        return SplatRenderer()
    raise ValueError(f"renderer must be one of {RENDERERS}")


def initial_model(renderer, seed=0, n_semantic=0, background=None, resolution=32,
                  n_splats=600, half_extent=1.1):
    """Untrained model: faint grey fog, or random splats in a cube at 60% opacity."""
    if renderer == "nerf":
        return nerf.VoxelField.initial(resolution, n_semantic, -half_extent, half_extent,
                                       seed=seed)
    model = splat.SplatScene.random_init(n_splats, seed, half_extent * 0.9,
                                         n_semantic=n_semantic)
    if background is not None:
        model.background[:len(background)] = background
    return model


# --- loss ---------------------------------------------------------------------------

def loss_and_grad(model, renderer, camera, px, py, gt_color, gt_semantic=None,
                  semantic_weight=0.0, seed=None, iteration=0, view_id=0):
    """Mean squared colour error over the rays, plus an optional semantic term."""
    px = np.asarray(px).reshape(-1)
    py = np.asarray(py).reshape(-1)
    if len(px) == 0:
        raise ValueError("empty ray batch")
    gt_color = np.asarray(gt_color, dtype=np.float64).reshape(len(px), COLOR_CHANNELS)
    raw, ctx = renderer.forward(model, camera, px, py, 1, seed, iteration, view_id)
    grad = np.zeros_like(raw)
    diff = raw[:, 0, :COLOR_CHANNELS] - gt_color
    loss = float(np.mean(diff ** 2))
    grad[:, 0, :COLOR_CHANNELS] = 2.0 * diff / diff.size
    if semantic_weight > 0:
        if gt_semantic is None:
            raise ValueError("semantic_weight > 0 needs semantic ground truth")
        sem = raw[:, 0, COLOR_CHANNELS:-1]
        sdiff = sem - np.asarray(gt_semantic, dtype=np.float64).reshape(sem.shape)
        loss += semantic_weight * float(np.mean(sdiff ** 2))
        grad[:, 0, COLOR_CHANNELS:-1] = semantic_weight * 2.0 * sdiff / sdiff.size
    return loss, renderer.backward(model, ctx, grad)


# --- optimizer -----------------------------------------------------------------------

@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Adam with lazy updates: entries whose gradient is exactly zero are left alone.

    Rays touch a small part of a voxel grid, so untouched entries keep both
    their value and their moment estimates instead of drifting on stale momentum.
    """

    def __init__(self, lr):
        self.lr = dict(lr)
        self.state = OptimState()

    def step(self, params, grads):
        st = self.state
        st.step += 1
        c1 = 1.0 - st.beta1 ** st.step
        c2 = 1.0 - st.beta2 ** st.step
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            m = st.m.setdefault(name, np.zeros_like(p))
            v = st.v.setdefault(name, np.zeros_like(p))
            hit = g != 0
            m[hit] = st.beta1 * m[hit] + (1 - st.beta1) * g[hit]
            v[hit] = st.beta2 * v[hit] + (1 - st.beta2) * g[hit] ** 2
            p[hit] -= self.lr[name] * (m[hit] / c1) / (np.sqrt(v[hit] / c2) + st.eps)


class SplatParams:
    """Optimizer view of a SplatScene with scales in log space."""

    def __init__(self, scene):
        self.scene = scene
        self.log_scales = np.log(scene.scales)

    def params(self):
        p = dict(self.scene.params())
        p["scales"] = self.log_scales
        return p

    def grads(self, g):
        g = dict(g)
        g["scales"] = g["scales"] * self.scene.scales
        return g

    def sync(self):
        self.scene.scales[...] = np.exp(self.log_scales)
        norms = np.linalg.norm(self.scene.quats, axis=1, keepdims=True)
        self.scene.quats /= np.where(norms > 0, norms, 1.0)


# --- active sampling ----------------------------------------------------------------

def allocate_rays_by_score(scores, budget, floor=1):
    """Per-cell ray counts: ``floor`` each plus a largest-remainder share of the rest."""
    scores = np.asarray(scores, dtype=np.float64)
    shape = scores.shape
    scores = scores.reshape(-1)
    n = len(scores)
    if np.any(scores < 0) or not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite and nonnegative")
    surplus = budget - n * floor
    if surplus < 0 or floor < 0:
        raise ValueError(f"budget {budget} cannot give {n} cells {floor} rays each")
    total = scores.sum()
    share = scores / total * surplus if total > 0 else np.full(n, surplus / n)
    base = np.floor(share).astype(np.int64)
    left = surplus - int(base.sum())
    # ties in the remainder go to the higher score, then the lower index
    order = np.lexsort((np.arange(n), -scores, -(share - base)))
    base[order[:left]] += 1
    return (base + floor).reshape(shape)


def grid_cells(height, width, grid):
    """Cell index (row-major over a grid x grid layout) of every pixel, shape (H, W)."""
    rows = np.minimum(np.arange(height) * grid // height, grid - 1)
    cols = np.minimum(np.arange(width) * grid // width, grid - 1)
    return rows[:, None] * grid + cols[None, :]


def _cell_means(values, grid):
    cells = grid_cells(values.shape[0], values.shape[1], grid).reshape(-1)
    sums = np.bincount(cells, weights=values.reshape(-1), minlength=grid * grid)
    counts = np.bincount(cells, minlength=grid * grid)
    return (sums / np.maximum(counts, 1)).reshape(grid, grid)


def pixel_variance(result, channels="color"):
    var = result.color.variance.sum(axis=-1)
    if channels == "all":
        var = var + result.semantic.variance.sum(axis=-1) + result.depth.variance[..., 0]
    return var


def variance_scores(model, renderer, camera, grid=8, channels="color"):
    """Grid of mean per-pixel (channel-summed) colour variance."""
    return _cell_means(pixel_variance(renderer.render(model, camera, 2), channels), grid)


def error_scores(model, renderer, camera, gt_color, grid=8):
    """Grid of mean per-pixel squared colour error against ground truth."""
    err = np.sum((renderer.render(model, camera, 1).color.mean - gt_color) ** 2, axis=-1)
    return _cell_means(err, grid)


def sample_pixels_in_cells(counts, height, width, rng):
    """Uniform pixel draws inside each cell, ``counts[cell]`` of them."""
    grid = counts.shape[0]
    cells = grid_cells(height, width, grid).reshape(-1)
    order = np.argsort(cells, kind="stable")
    starts = np.searchsorted(cells[order], np.arange(grid * grid))
    sizes = np.bincount(cells, minlength=grid * grid)
    counts = counts.reshape(-1)
    cell_of_ray = np.repeat(np.arange(grid * grid), counts)
    picks = order[starts[cell_of_ray] + (rng.random(len(cell_of_ray))
                                         * sizes[cell_of_ray]).astype(np.int64)]
    py, px = np.divmod(picks, width)
    return px, py


# --- training loop ---------------------------------------------------------------------

@dataclass
class LogRow:
    iteration: int
    loss: float
    psnr: float = float("nan")
    ssim: float = float("nan")
    ms: float = float("nan")
    n_rays: int = 0


def evaluate_views(model, renderer, views):
    """Mean PSNR and SSIM of mean colour renders over ``views``."""
    if not views:
        return float("nan"), float("nan")
    ps, ss = [], []
    for v in views:
        img = np.clip(renderer.render(model, v.camera, 1).color.mean, 0.0, 1.0)
        ps.append(psnr(img, v.color))
        ss.append(ssim(img, v.color))
    return float(np.mean(ps)), float(np.mean(ss))


class Trainer:
    """Stateful training loop; views can be added between calls to ``run``."""

    def __init__(self, model, renderer, train_views, config, heldout=()):
        if not train_views:
            raise ValueError("need at least one training view")
        self.model = model
        self.renderer = renderer
        self.views = list(train_views)
        self.heldout = list(heldout)
        self.config = config
        self.iteration = 0
        self.rng = np.random.default_rng([config.seed, 0x7EA1])
        self._queue = []
        self._warm = list(range(len(self.views)))
        self.log = []
        if renderer.name == "splat":
            self._wrap = SplatParams(model)
        else:
            self._wrap = None
        self.optim = Adam(config.learning_rates(renderer.name))

    def add_view(self, view):
        self.views.append(view)
        self._warm.append(len(self.views) - 1)

    def _next_view(self):
        if not self._queue:
            self._queue = list(self.rng.permutation(len(self.views)))
        return self._queue.pop(0)

    def _rays(self, view, n_rays, sampler):
        cam = view.camera
        cfg = self.config
        if sampler == "uniform":
            flat = self.rng.integers(0, cam.n_pixels, n_rays)
            py, px = np.divmod(flat, cam.width)
            return px, py
        if sampler == "variance":
            scores = variance_scores(self.model, self.renderer, cam, cfg.grid,
                                     cfg.score_channels)
        else:
            scores = error_scores(self.model, self.renderer, cam, view.color, cfg.grid)
        counts = allocate_rays_by_score(scores, n_rays, cfg.floor)
        return sample_pixels_in_cells(counts, cam.height, cam.width, self.rng)

    def step(self):
        cfg = self.config
        if self._warm:
            idx = self._warm.pop(0)
            n_rays, sampler = cfg.initial_rays, "uniform"
        else:
            idx = self._next_view()
            n_rays, sampler = cfg.rays_per_iter, cfg.sampler
        view = self.views[idx]
        px, py = self._rays(view, n_rays, sampler)
        gt = view.color[py, px]
        sem = None if view.semantic is None else view.semantic[py, px]
        loss, grads = loss_and_grad(self.model, self.renderer, view.camera, px, py, gt, sem,
                                    cfg.semantic_weight, cfg.seed, self.iteration,
                                    view.view_id)
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss at iteration {self.iteration} (view {view.view_id}); "
                "try smaller learning rates")
        if self._wrap is not None:
            self.optim.step(self._wrap.params(), self._wrap.grads(grads))
            self._wrap.sync()
        else:
            self.optim.step(self.model.params(), grads)
        self.iteration += 1
        return loss, len(px)

    def run(self, n_iters, timing=False):
        start = time.perf_counter()
        if self.iteration == 0 and self.heldout:
            p, s = evaluate_views(self.model, self.renderer, self.heldout)
            self.log.append(LogRow(0, float("nan"), p, s, 0.0 if timing else float("nan")))
        for _ in range(n_iters):
            loss, n_rays = self.step()
            row = LogRow(self.iteration, loss, n_rays=n_rays)
            if self.heldout and (self.iteration % self.config.eval_every == 0):
                row.psnr, row.ssim = evaluate_views(self.model, self.renderer, self.heldout)
            if timing:
                row.ms = (time.perf_counter() - start) * 1e3
            self.log.append(row)
        return self.log


@dataclass
class TrainResult:
    model: object
    log: list
    final_psnr: float
    final_ssim: float


def train(model, renderer, train_views, config, heldout=(), timing=False):
    """Run ``config.iterations`` steps and report held-out quality at the end."""
    trainer = Trainer(model, renderer, train_views, config, heldout)
    trainer.run(config.iterations, timing)
    p, s = evaluate_views(model, renderer, heldout)
    return TrainResult(model, trainer.log, p, s)
