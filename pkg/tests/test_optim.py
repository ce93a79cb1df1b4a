import json

import numpy as np
import pytest

from heartmesh4d.optim import (
    TERMS,
    Adam,
    FitConfig,
    FitProblem,
    LossWeights,
    NumericalError,
    fit,
    gradcheck,
    laplacian_smoother,
    mse_loss,
    total_loss,
    weighted_total,
)
from heartmesh4d.renderer import RendererConfig, render_loss

from conftest import random_problem


@pytest.fixture(scope="module")
def problem():
    return random_problem()


def test_config_rejects_bad_values():
    for bad in ({"steps": 0}, {"steps": 2.5}, {"learning_rate": 0.0}, {"lambda_dr": -1.0},
                {"optimizer": "sgd"}, {"beta1": 1.0}, {"smoothing": -1.0}, {"mu": 0.0},
                {"supervision": "edges"}):
        with pytest.raises(ValueError):
            FitConfig(**bad)


def test_config_json_round_trip():
    cfg = FitConfig(steps=17, lambda_temp=0.0, smoothing=30.0, window_halfwidth=2.0)
    text = json.dumps(cfg.to_dict())
    assert FitConfig.from_dict(json.loads(text)) == cfg
    with pytest.raises(ValueError, match="unknown"):
        FitConfig.from_dict({"stepz": 3})
    with pytest.raises(ValueError, match="steps"):
        FitConfig.from_dict({"steps": "many"})


def test_config_renderer_view():
    cfg = FitConfig(mu=6.0, band_halfwidth=1.5)
    assert cfg.renderer == RendererConfig(mu=6.0, band_halfwidth=1.5)


def test_mse_examples():
    assert mse_loss(np.ones((2, 3, 3)), np.ones((2, 3, 3)))[0] == 0.0
    loss, grad = mse_loss(np.array([[[3.0, 0, 0]]]), np.zeros((1, 1, 3)))
    assert loss == 3.0
    assert np.array_equal(grad, [[[2.0, 0, 0]]])
    with pytest.raises(ValueError, match="shape"):
        mse_loss(np.zeros((1, 2, 3)), np.zeros((1, 3, 3)))


def test_mse_gradcheck_is_exact(problem):
    res = gradcheck(problem, n_coords=50, terms=("mse",), point=problem.initial_frames() + 0.3)
    assert res["mse"].max_rel_error < 1e-8


def test_all_zero_weights(problem):
    total, grad, breakdown, _ = total_loss(problem.initial_frames(), problem, LossWeights(0, 0, 0, 0, 0))
    assert total == 0.0 and not grad.any()
    assert set(breakdown) == set(TERMS)


def test_dr_only_weights(problem):
    x = problem.initial_frames()
    total, grad, _, _ = total_loss(x, problem, LossWeights(0, 5, 0, 0, 0))
    dr, g = render_loss(x, problem.planes, problem.observations, problem.renderer)
    assert total == 5 * dr and np.array_equal(grad, 5 * g)


def test_reweighting_and_linearity(problem, rng):
    x = problem.initial_frames() + rng.normal(scale=0.2, size=problem.initial_frames().shape)
    w1 = LossWeights()
    w2 = LossWeights(1.0, 2.0, 3.0, 4.0, 5.0)
    _, _, breakdown, grads = total_loss(x, problem, w1)
    fresh, grad2, _, _ = total_loss(x, problem, w2)
    assert abs(weighted_total(breakdown, w2) - fresh) <= 1e-12 * abs(fresh)
    summed = sum(getattr(w2, k) * g for k, g in grads.items())
    assert np.max(np.abs(summed - grad2)) < 1e-12


def test_mse_inactive_without_reference():
    p = random_problem(reference=False)
    _, _, breakdown, _ = total_loss(p.initial_frames(), p)
    assert breakdown["mse"] is None and breakdown["dr"] is not None


def test_temp_inactive_below_four_frames():
    p = random_problem(n_frames=3)
    _, _, breakdown, _ = total_loss(p.initial_frames(), p)
    assert breakdown["temp"] is None


def test_gradcheck_full_problem(problem, rng):
    x = problem.initial_frames() + rng.normal(scale=0.3, size=problem.initial_frames().shape)
    results = gradcheck(problem, n_coords=100, point=x)
    assert set(results) == set(TERMS)
    for r in results.values():
        assert r.n_checked == 100
        assert r.passed(), r


def test_gradcheck_rejects_bad_step(problem):
    with pytest.raises(ValueError, match="step"):
        gradcheck(problem, step=0.0)


def test_adam_first_step_is_lr_sign():
    opt = Adam((3,), lr=0.1)
    out = opt.step(np.zeros(3), np.array([2.0, -5.0, 0.0]))
    assert np.allclose(out, [-0.1, 0.1, 0.0], atol=1e-8)


def test_smoother_keeps_constants_and_damps_noise(problem, rng):
    smooth = laplacian_smoother(problem.edge_list.edges, problem.template.n_vertices, 10.0)
    const = np.ones((2, problem.template.n_vertices, 3))
    assert np.allclose(smooth(const), const, atol=1e-12)
    noise = rng.normal(size=const.shape)
    assert np.linalg.norm(smooth(noise)) < 0.5 * np.linalg.norm(noise)


def test_fit_decreases_loss_and_writes_trace(problem, tmp_path):
    rep = fit(problem, FitConfig(steps=30, learning_rate=0.05))
    assert len(rep.trace) == 30
    assert rep.final_loss < rep.initial_loss
    total = weighted_total(rep.final_terms, FitConfig().weights)
    assert abs(total - rep.final_loss) <= 1e-9 * abs(rep.final_loss)
    rep.write_trace(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "step,total,mse,dr,edge,norm,temp" and len(lines) == 31


def test_fit_with_smoothing_descends(problem):
    rep = fit(problem, FitConfig(steps=20, learning_rate=0.05, smoothing=30.0))
    assert rep.final_loss < rep.initial_loss


def test_fit_is_deterministic_across_threads(problem):
    cfg = FitConfig(steps=8, smoothing=5.0)
    a = fit(problem, cfg, threads=1)
    b = fit(problem, cfg, threads=3)
    assert np.array_equal(a.sequence.frames, b.sequence.frames)
    assert a.trace == b.trace


def test_fit_rejects_mismatched_renderer(problem):
    with pytest.raises(ValueError, match="renderer"):
        fit(problem, FitConfig(steps=1, window_halfwidth=4.0))


def test_non_finite_aborts_with_step_and_term(problem):
    bad = problem.initial_frames()
    bad[0, 0, 0] = np.nan
    p = FitProblem(problem.template, problem.planes, problem.observations, problem.n_frames,
                   problem.renderer, problem.reference, init=bad)
    with pytest.raises(NumericalError) as err:
        fit(p, FitConfig(steps=3))
    assert err.value.step == 0 and err.value.term in TERMS


def test_problem_validates_shapes(problem):
    with pytest.raises(ValueError, match="init"):
        FitProblem(problem.template, problem.planes, problem.observations, problem.n_frames,
                   init=np.zeros((1, 2, 3)))
    with pytest.raises(ValueError, match="n_frames"):
        FitProblem(problem.template, problem.planes, problem.observations, 0)


def test_saturated_coordinates_agree_as_the_step_shrinks():
    # the vertices gradcheck leaves out are still differentiated correctly;
    # the 1e-3 mm stencil is simply too coarse for their tiny gradients
    from heartmesh4d.optim import _dr_saturated, term_functions

    problem = random_problem(seed=11, n_frames=4)
    rng = np.random.default_rng(11)
    x = problem.initial_frames() + rng.normal(scale=0.3, size=problem.initial_frames().shape)
    fn = term_functions(problem, 1)["dr"]
    _, grad = fn(x)
    coords = [
        c for c in zip(*np.nonzero(np.abs(grad) > 1e-10))
        if _dr_saturated(x, c, problem, 1e-3)
    ][:10]
    assert coords
    for c in coords:
        orig = x[c]
        x[c] = orig + 1e-5
        fp = fn(x)[0]
        x[c] = orig - 1e-5
        fm = fn(x)[0]
        x[c] = orig
        assert abs((fp - fm) / 2e-5 - grad[c]) <= 1e-5 * abs(grad[c])
