"""Desk-scale experiment protocols on the fixed benchmark scene.

Each function runs one seed of one protocol and returns plain numbers, so
the CLI, the acceptance tests and the benchmark scripts share one code path.
"""

from dataclasses import dataclass

import numpy as np

from .evaluation import correlation_over_views, nbv_loop, variance_error_maps
from .scenegen import camera_orbit, desk_scene, raytrace_ground_truth
from .train import TrainConfig, View, evaluate_views, initial_model, make_renderer, train

DESK_RES = 64


def make_views(scene, cameras, first_id=0):
    return [View(c, *raytrace_ground_truth(scene, c), first_id + i)
            for i, c in enumerate(cameras)]


# --- variance / error correlation -------------------------------------------------

@dataclass
class CorrelationRun:
    seed: int
    report: object
    maps: list
    psnr: float
    model: object


def correlation_experiment(seed, renderer="splat", iterations=1500, n_views=12,
                           res=DESK_RES, scene=None, config=None, group="color"):
    """Train on the even views of an orbit and correlate on the odd ones."""
    scene = desk_scene() if scene is None else scene
    views = make_views(scene, camera_orbit(n_views, width=res, height=res))
    train_views, heldout = views[0::2], views[1::2]
    cfg = config or TrainConfig(iterations=iterations, seed=seed, eval_every=10 ** 9)
    model = initial_model(renderer, seed, background=scene.background())
    rend = make_renderer(renderer, cfg.n_bins, scene.background())
    train(model, rend, train_views, cfg)
    maps = variance_error_maps(model, rend, heldout, group)
    psnr, _ = evaluate_views(model, rend, heldout)
    return CorrelationRun(seed, correlation_over_views(maps), maps, psnr, model)


# --- next-best-view ---------------------------------------------------------------

NBV_POOL = 24
NBV_INITIAL = 5


def nbv_views(scene=None, res=DESK_RES):
    """Initial adjacent views, the remaining candidates, and a held-out ring."""
    scene = desk_scene() if scene is None else scene
    pool = make_views(scene, camera_orbit(NBV_POOL, width=res, height=res, hemisphere=True))
    ring = camera_orbit(12, width=res, height=res, elevation=0.6, start=np.pi / 12)
    heldout = make_views(scene, ring, first_id=NBV_POOL)
    return pool[:NBV_INITIAL], pool[NBV_INITIAL:], heldout


def nbv_experiment(seed, policy, rounds=3, iters_per_round=300, total_iters=1000,
                   res=DESK_RES, scene=None, views=None):
    scene = desk_scene() if scene is None else scene
    initial, candidates, heldout = views or nbv_views(scene, res)
    cfg = TrainConfig(iterations=total_iters, seed=seed, eval_every=10 ** 9)
    model = initial_model("splat", seed, background=scene.background())
    rend = make_renderer("splat")
    return nbv_loop(model, rend, initial, candidates, heldout, cfg, rounds,
                    iters_per_round, total_iters, policy)


# --- active ray sampling -----------------------------------------------------------

ACTIVE_VIEWS = 48


def active_views(scene=None, res=DESK_RES):
    scene = desk_scene() if scene is None else scene
    views = make_views(scene, camera_orbit(ACTIVE_VIEWS, width=res, height=res,
                                           hemisphere=True))
    return views[0::2], views[1::2]


def active_sampling_experiment(seed, sampler, iterations=600, res=DESK_RES, scene=None,
                               views=None):
    """Final held-out PSNR of a voxel field trained with the given ray sampler."""
    scene = desk_scene() if scene is None else scene
    train_views, heldout = views or active_views(scene, res)
    cfg = TrainConfig(iterations=iterations, seed=seed, sampler=sampler, eval_every=10 ** 9)
    model = initial_model("nerf", seed, background=scene.background())
    rend = make_renderer("nerf", cfg.n_bins, scene.background())
    return train(model, rend, train_views, cfg, heldout).final_psnr
