"""Uncertainty-driven evaluation: variance/error correlation and next-best-view."""

import time
from dataclasses import dataclass, field

import numpy as np

from .metrics import correlate_variance_error, error_map
from .train import Trainer, evaluate_views

NBV_CRITERIA = ("color-var", "depth-var")
NBV_POLICIES = ("variance-color", "variance-depth", "random")


def view_uncertainty(result, criterion="color-var"):
    """Mean over pixels of the channel-summed variance of one channel group."""
    if criterion not in NBV_CRITERIA:
        raise ValueError(f"criterion must be one of {NBV_CRITERIA}")
    group = result.color if criterion == "color-var" else result.depth
    return float(np.mean(group.variance.sum(axis=-1)))


def select_from_scores(scores):
    """Index of the largest score; the first one wins ties."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("no candidate views")
    return int(np.argmax(scores))


def select_nbv(model, renderer, candidates, criterion="color-var"):
    if len(candidates) == 0:
        raise ValueError("no candidate views")
    scores = [view_uncertainty(renderer.render(model, cam, 2), criterion)
              for cam in candidates]
    return select_from_scores(scores), scores


@dataclass
class NbvState:
    train_views: list
    candidates: list
    history: list = field(default_factory=list)
    rounds: list = field(default_factory=list)

    def take(self, index):
        view = self.candidates.pop(index)
        self.train_views.append(view)
        self.history.append(view.view_id)
        return view


@dataclass
class NbvRound:
    round: int
    iteration: int
    selected: int
    psnr: float
    ssim: float
    seconds: float = 0.0    # wall-clock since the loop started


def nbv_loop(model, renderer, initial_views, candidate_views, heldout, config, rounds=3,
             iters_per_round=300, total_iters=1000, policy="variance-color"):
    """Greedy view acquisition.

    A view is added after every ``iters_per_round`` iterations, ``rounds``
    times; training then continues to ``total_iters`` and the model is
    evaluated on ``heldout``.  Row r (r < rounds) holds the held-out metrics
    just before the r-th selection; the last row holds the final metrics.
    """
    if policy not in NBV_POLICIES:
        raise ValueError(f"policy must be one of {NBV_POLICIES}")
    ids = {v.view_id for v in initial_views}
    if ids & {v.view_id for v in candidate_views}:
        raise ValueError("initial and candidate views must be disjoint")
    if rounds > len(candidate_views):
        raise ValueError(f"{rounds} rounds but only {len(candidate_views)} candidates")
    if total_iters < iters_per_round * rounds:
        raise ValueError("total_iters is shorter than the selection schedule")
    state = NbvState(list(initial_views), list(candidate_views))
    trainer = Trainer(model, renderer, state.train_views, config)
    rng = np.random.default_rng([config.seed, 0x4EB5])
    start = time.perf_counter()
    for r in range(rounds):
        trainer.run(iters_per_round)
        p, s = evaluate_views(model, renderer, heldout)
        if policy == "random":
            idx = int(rng.integers(len(state.candidates)))
        else:
            criterion = "color-var" if policy == "variance-color" else "depth-var"
            idx, _ = select_nbv(model, renderer, [v.camera for v in state.candidates],
                                criterion)
        view = state.take(idx)
        trainer.add_view(view)
        state.rounds.append(NbvRound(r, trainer.iteration, view.view_id, p, s,
                                     time.perf_counter() - start))
    trainer.run(total_iters - trainer.iteration)
    p, s = evaluate_views(model, renderer, heldout)
    state.rounds.append(NbvRound(rounds, trainer.iteration, -1, p, s,
                                 time.perf_counter() - start))
    return state


@dataclass
class ViewMaps:
    view_id: int
    variance: np.ndarray
    error: np.ndarray
    mean: np.ndarray


def variance_error_maps(model, renderer, views, group="color"):
    """Per-view channel-summed variance and error-map images for one channel group."""
    out = []
    for v in views:
        res = renderer.render(model, v.camera, 2)
        if group == "color":
            mean, var, gt = res.color.mean, res.color.variance.sum(-1), v.color
        elif group == "depth":
            mean, var, gt = res.depth.mean[..., 0], res.depth.variance[..., 0], v.depth
        elif group == "semantic":
            if v.semantic is None or res.semantic.channels == 0:
                raise ValueError("semantic correlation needs semantic channels and ground truth")
            mean, var, gt = res.semantic.mean, res.semantic.variance.sum(-1), v.semantic
        else:
            raise ValueError(f"unknown channel group {group!r}")
        out.append(ViewMaps(v.view_id, var, error_map(mean, gt), mean))
    return out


def correlation_over_views(maps):
    """One report over the pooled pixels of all views."""
    var = np.concatenate([m.variance.reshape(-1) for m in maps])
    err = np.concatenate([m.error.reshape(-1) for m in maps])
    return correlate_variance_error(var, err)
