import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from moment_fields.evaluation import (NbvState, correlation_over_views, nbv_loop,
                                      select_from_scores, select_nbv, variance_error_maps,
                                      view_uncertainty)
from moment_fields.experiments import make_views
from moment_fields.scenegen import camera_orbit, generate_scene
from moment_fields.train import TrainConfig, initial_model, make_renderer


@pytest.fixture(scope="module")
def setup():
    scene = generate_scene(4, 4)
    views = make_views(scene, camera_orbit(8, width=20, height=20, hemisphere=True))
    return scene, views


def small_cfg(seed=0):
    return TrainConfig(iterations=0, rays_per_iter=128, initial_rays=32, seed=seed)


def test_select_examples():
    assert select_from_scores([0.1, 0.5, 0.2]) == 1
    assert select_from_scores([0.3, 0.3, 0.3]) == 0
    assert select_from_scores([7.0]) == 0
    with pytest.raises(ValueError):
        select_from_scores([])


@given(st.lists(st.integers(-1000, 1000), min_size=1, max_size=20))
def test_selection_invariant_under_increasing_transform(scores):
    # integer-valued scores keep the transform strictly increasing in floating point
    scores = np.array(scores, dtype=np.float64)
    assert select_from_scores(np.exp(scores / 500) * 3 + 1) == select_from_scores(scores)


def test_select_nbv_uses_mean_variance(setup):
    scene, views = setup
    model = initial_model("splat", 0, n_splats=80)
    rend = make_renderer("splat")
    idx, scores = select_nbv(model, rend, [v.camera for v in views], "color-var")
    manual = [float(np.mean(rend.render(model, v.camera).color.variance.sum(-1)))
              for v in views]
    assert scores == manual and idx == int(np.argmax(manual))
    with pytest.raises(ValueError):
        select_nbv(model, rend, [], "color-var")
    with pytest.raises(ValueError):
        view_uncertainty(rend.render(model, views[0].camera), "entropy")


def test_state_take_moves_view(setup):
    _, views = setup
    state = NbvState(views[:2], views[2:5])
    taken = state.take(1)
    assert taken is views[3] and state.history == [views[3].view_id]
    ids_train = {v.view_id for v in state.train_views}
    assert not ids_train & {v.view_id for v in state.candidates}


def run_nbv(setup, policy, rounds=2, seed=0):
    scene, views = setup
    model = initial_model("splat", seed, background=scene.background(), n_splats=80)
    return nbv_loop(model, make_renderer("splat"), views[:2], views[2:6], views[6:],
                    small_cfg(seed), rounds, 10, 25, policy)


@pytest.mark.parametrize("policy", ["variance-color", "variance-depth", "random"])
def test_nbv_loop_rounds(setup, policy):
    state = run_nbv(setup, policy)
    assert [r.iteration for r in state.rounds] == [10, 20, 25]
    assert [r.selected for r in state.rounds][-1] == -1
    assert len(state.candidates) == 2 and len(state.train_views) == 4
    assert state.history == [r.selected for r in state.rounds[:-1]]
    assert all(np.isfinite(r.psnr) for r in state.rounds)


def test_nbv_zero_rounds_is_plain_training(setup):
    state = run_nbv(setup, "variance-color", rounds=0)
    assert len(state.rounds) == 1 and state.history == []


def test_nbv_random_policy_is_seeded(setup):
    a = run_nbv(setup, "random", seed=3)
    b = run_nbv(setup, "random", seed=3)
    assert a.history == b.history
    assert [r.psnr for r in a.rounds] == [r.psnr for r in b.rounds]


def test_nbv_loop_validation(setup):
    scene, views = setup
    model = initial_model("splat", 0, n_splats=10)
    rend = make_renderer("splat")
    with pytest.raises(ValueError):
        nbv_loop(model, rend, views[:2], views[1:4], views[6:], small_cfg())
    with pytest.raises(ValueError):
        nbv_loop(model, rend, views[:2], views[2:4], views[6:], small_cfg(), rounds=3)
    with pytest.raises(ValueError):
        nbv_loop(model, rend, views[:2], views[2:6], views[6:], small_cfg(), 2, 10, 5)
    with pytest.raises(ValueError):
        nbv_loop(model, rend, views[:2], views[2:6], views[6:], small_cfg(), policy="best")


def test_variance_error_maps(setup):
    scene, views = setup
    model = initial_model("splat", 1, n_splats=80, n_semantic=8)
    rend = make_renderer("splat")
    color = variance_error_maps(model, rend, views[:2], "color")
    depth = variance_error_maps(model, rend, views[:2], "depth")
    sem = variance_error_maps(model, rend, views[:2], "semantic")
    for maps in (color, depth, sem):
        assert maps[0].variance.shape == maps[0].error.shape == (20, 20)
        assert np.all(maps[0].variance >= 0)
    np.testing.assert_allclose(depth[0].error, np.abs(depth[0].mean - views[0].depth))
    rep = correlation_over_views(color)
    assert rep.n == 800 and -1 <= rep.spearman <= 1
    with pytest.raises(ValueError):
        variance_error_maps(model, rend, views[:1], "normals")
