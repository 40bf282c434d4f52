import math

import numpy as np
import pytest

from loreg import probes, tasks
from loreg.rng import RngStream


def quadratic_problem(d):
    """spec+data whose mean-squared loss is exactly 0.5*|theta|^2."""
    spec = tasks.OptimizeeSpec(tasks.Architecture.POLY_REGRESSION, (d,), 1, tasks.LossKind.MSE)
    data = tasks.Dataset(np.eye(d) * np.sqrt(d / 2.0), np.zeros(d))
    return spec, data


RADII = [0.001, 0.005, 0.01, 0.05, 0.1]


@pytest.mark.parametrize("d", [2, 3])
def test_max_loss_probe_reaches_ball_corners(d):
    spec, data = quadratic_problem(d)
    theta = np.zeros(d)
    for i, eps in enumerate(RADII):
        rep = probes.pga_max_loss(spec, theta, data, eps, rng=RngStream(40 + i))
        assert rep.final_value >= 0.99 * (d * eps ** 2 / 2.0)
        assert rep.gap == rep.final_value - rep.base_value
        assert len(rep.trajectory) == 10


@pytest.mark.parametrize("d", [2, 3])
def test_grad_norm_probe_reaches_ball_corners(d):
    spec, data = quadratic_problem(d)
    theta = np.zeros(d)
    for i, eps in enumerate(RADII):
        rep = probes.pga_max_grad_norm(spec, theta, data, eps, rng=RngStream(50 + i))
        assert rep.final_value >= 0.99 * eps * np.sqrt(d)
        assert rep.base_value == 0.0


def test_gap_nondecreasing_in_radius_on_quadratic():
    spec, data = quadratic_problem(3)
    gaps = [
        probes.pga_max_loss(spec, np.zeros(3), data, eps, rng=RngStream(60 + i)).gap
        for i, eps in enumerate(RADII)
    ]
    assert all(b >= a for a, b in zip(gaps, gaps[1:]))
    assert all(g >= -1e-9 for g in gaps)


def test_constant_surface_has_zero_gap():
    spec = tasks.OptimizeeSpec(tasks.Architecture.POLY_REGRESSION, (2,), 1, tasks.LossKind.MSE)
    data = tasks.Dataset(np.zeros((4, 2)), np.full(4, 1.5))  # loss independent of theta
    for eps in (0.01, 0.1):
        rep = probes.pga_max_loss(spec, np.ones(2), data, eps, rng=RngStream(70))
        assert rep.gap == 0.0
        assert all(v == rep.base_value for v in rep.trajectory)


def test_linear_objective_grad_norm_gap_zero():
    c = np.array([0.3, -0.7])
    rep = probes.pga_max_grad_norm_on_objective(
        lambda th: c, np.zeros(2), 0.05, rng=RngStream(71))
    assert rep.base_value == pytest.approx(np.linalg.norm(c))
    assert rep.gap == 0.0


def test_projection_invariant_all_probes():
    spec, data = quadratic_problem(3)
    theta = RngStream(72).normal((3,))
    for eps in RADII:
        for fn in (probes.pga_max_loss, probes.pga_max_grad_norm):
            rep = fn(spec, theta, data, eps, rng=RngStream(73))
            assert not rep.flagged  # internal assert enforces the ball each step


def test_pga_is_lower_bound_on_grid_search():
    rng = RngStream(74)
    for d in (2, 3):
        spec, data = quadratic_problem(d)
        theta = rng.normal((d,)) * 0.05
        eps = 0.1
        rep = probes.pga_max_loss(spec, theta, data, eps, rng=rng.child(f"d{d}"))
        axes = [np.linspace(theta[i] - eps, theta[i] + eps, 51) for i in range(d)]
        grids = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1)
        grid_max = np.max(0.5 * np.sum(pts * pts, axis=1))
        assert rep.final_value <= grid_max + 1e-9


def test_probe_determinism():
    spec, data = quadratic_problem(2)
    cfg = probes.ProbeConfig(radii=(0.01, 0.05))
    a = probes.probe_sweep(spec, np.zeros(2), data, cfg, probes.StageTag.AT_COMPLETION, RngStream(75))
    b = probes.probe_sweep(spec, np.zeros(2), data, cfg, probes.StageTag.AT_COMPLETION, RngStream(75))
    assert [(r.probe_kind, r.radius, r.base_value, tuple(r.trajectory), r.final_value, r.gap)
            for r in a] == \
           [(r.probe_kind, r.radius, r.base_value, tuple(r.trajectory), r.final_value, r.gap)
            for r in b]


def test_probe_sweep_cardinality():
    spec, data = quadratic_problem(2)
    default = probes.probe_sweep(spec, np.zeros(2), data, probes.ProbeConfig(),
                                 probes.StageTag.AT_CONVERGENCE, RngStream(76))
    assert len(default) == 10
    assert sum(r.probe_kind == probes.ProbeKind.MAX_LOSS for r in default) == 5
    single = probes.probe_sweep(spec, np.zeros(2), data, probes.ProbeConfig(radii=(0.01,)),
                                probes.StageTag.AT_CONVERGENCE, RngStream(77))
    assert len(single) == 2


def test_probe_config_validation():
    with pytest.raises(ValueError):
        probes.ProbeConfig(radii=(0.1, 0.05))
    with pytest.raises(ValueError):
        probes.ProbeConfig(radii=(0.0, 0.1))
    with pytest.raises(ValueError):
        probes.ProbeConfig(steps=0)


def test_flagged_report_on_nonfinite_surface():
    calls = {"n": 0}

    def loss_fn(th):
        calls["n"] += 1
        return math.inf if calls["n"] > 2 else 1.0

    rep = probes.pga_max_loss_on_objective(loss_fn, lambda th: np.ones_like(th),
                                           np.zeros(2), 0.1, rng=RngStream(78))
    assert rep.flagged
    assert len(rep.trajectory) == 10
    assert math.isnan(rep.final_value) and math.isnan(rep.gap)


def brute_force_convergence(history, patience=100):
    h = list(history)
    for t in range(len(h)):
        if t + patience >= len(h):
            return None
        best = min(h[: t + 1])
        if all(h[u] >= best for u in range(t + 1, t + patience + 1)):
            return t
    return None


def test_detect_convergence_cases():
    strictly_down = list(np.linspace(10, 1, 500))
    assert probes.detect_convergence(strictly_down) is None

    constant = [2.0] * 150
    assert probes.detect_convergence(constant) == 0

    down_then_flat = list(np.linspace(5, 1, 251)) + [1.0] * 200
    assert probes.detect_convergence(down_then_flat) == 250
    assert probes.detect_convergence(down_then_flat) == brute_force_convergence(down_then_flat)


def test_detect_convergence_matches_brute_force_on_random_histories():
    rng = RngStream(79)
    for trial in range(20):
        n = int(rng.integers(5, 400))
        walk = np.cumsum(rng.normal((n,))) + 0.02 * np.arange(n)
        patience = int(rng.integers(3, 60))
        assert probes.detect_convergence(walk, patience) == brute_force_convergence(list(walk), patience)
    with pytest.raises(ValueError):
        probes.detect_convergence([])
