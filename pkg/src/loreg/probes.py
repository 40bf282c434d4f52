"""Post-hoc landscape probes at points of convergence.

Two projected-gradient-ascent probes measure how hostile the neighborhood of
a trained optimizee is: one maximizes the validation loss inside an
l-infinity ball (surrogate gap), the other maximizes the gradient norm.
Both follow the same recipe: Gaussian init, sign ascent on the increase over
the base value, elementwise clipping back to the ball, ten steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from . import tasks
from .rng import RngStream


class StepSizeRule(str, Enum):
    EPS_OVER_10 = "eps_over_10"   # max-loss probe default
    EPS = "eps"                   # grad-norm probe default


class StageTag(str, Enum):
    AT_CONVERGENCE = "at_convergence"
    AT_COMPLETION = "at_completion"


class ProbeKind(str, Enum):
    MAX_LOSS = "max_loss"
    GRAD_NORM = "grad_norm"


@dataclass(frozen=True)
class ProbeConfig:
    radii: tuple = (0.001, 0.005, 0.01, 0.05, 0.1)
    steps: int = 10
    init_noise_std: float = 1.0
    # None keeps each probe's own rule (eps/10 for max-loss, eps for grad-norm)
    step_size_rule: StepSizeRule | None = None

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.radii, self.radii[1:])) or any(r <= 0 for r in self.radii):
            raise ValueError("radii must be positive and strictly increasing")
        if self.steps < 1:
            raise ValueError("steps must be positive")


@dataclass
class ProbeReport:
    probe_kind: ProbeKind
    radius: float
    base_value: float
    trajectory: list[float]
    final_value: float
    gap: float
    stage_tag: StageTag
    flagged: bool = False

    def __post_init__(self):
        if not self.flagged:
            expected = self.final_value - self.base_value
            if self.gap != expected:
                raise ValueError("gap must equal final_value - base_value")
            if self.trajectory[-1] != self.final_value:
                raise ValueError("final_value must be the last trajectory entry")


def _step_size(rule: StepSizeRule, eps: float) -> float:
    return eps / 10.0 if rule == StepSizeRule.EPS_OVER_10 else eps


def _pga_ascend(value_fn, ascent_grad_fn, theta_star: np.ndarray, eps: float,
                steps: int, alpha: float, init_noise_std: float, rng: RngStream,
                kind: ProbeKind, stage_tag: StageTag) -> ProbeReport:
    """Shared sign-ascent loop over a generic objective.

    value_fn(theta) -> scalar being maximized; ascent_grad_fn(theta) -> its
    gradient. Records the value after every projected step; the initial
    Gaussian point is evaluated for the ascent but not recorded.
    """
    base = float(value_fn(theta_star))
    lo = theta_star - eps
    hi = theta_star + eps
    pert = theta_star + rng.normal(theta_star.shape, std=init_noise_std)
    trajectory: list[float] = []
    flagged = False
    for t in range(steps):
        if t > 0:
            val = float(value_fn(pert))
            if not math.isfinite(val):
                flagged = True
                break
            trajectory.append(val)
        g = ascent_grad_fn(pert)
        if not np.all(np.isfinite(g)):
            flagged = True
            break
        pert = np.clip(pert + alpha * np.sign(g), lo, hi)
        assert np.max(np.abs(pert - theta_star)) <= eps + 1e-12, "left the perturbation ball"
    if not flagged:
        final = float(value_fn(pert))
        if math.isfinite(final):
            trajectory.append(final)
        else:
            flagged = True
    if flagged:
        trajectory += [math.nan] * (steps - len(trajectory))
        return ProbeReport(kind, eps, base, trajectory, math.nan, math.nan, stage_tag, True)
    return ProbeReport(kind, eps, base, trajectory, trajectory[-1],
                       trajectory[-1] - base, stage_tag)


def pga_max_loss_on_objective(loss_fn, grad_fn, theta_star, eps, *, steps=10,
                              init_noise_std=1.0, rng: RngStream,
                              stage_tag=StageTag.AT_COMPLETION,
                              rule=StepSizeRule.EPS_OVER_10) -> ProbeReport:
    # ascending (loss - base) has the same gradient as the loss itself
    return _pga_ascend(loss_fn, grad_fn, ad.as_tensor(theta_star), eps, steps,
                       _step_size(rule, eps), init_noise_std, rng,
                       ProbeKind.MAX_LOSS, stage_tag)


def pga_max_grad_norm_on_objective(grad_fn, theta_star, eps, *, steps=10,
                                   init_noise_std=1.0, rng: RngStream,
                                   stage_tag=StageTag.AT_COMPLETION,
                                   rule=StepSizeRule.EPS) -> ProbeReport:
    def norm_fn(theta):
        return float(np.linalg.norm(grad_fn(theta)))

    def ascent_grad(theta):
        try:
            return ad.grad_norm_gradient(grad_fn, theta)
        except ad.ZeroGradientError:
            return np.zeros_like(theta)

    return _pga_ascend(norm_fn, ascent_grad, ad.as_tensor(theta_star), eps, steps,
                       _step_size(rule, eps), init_noise_std, rng,
                       ProbeKind.GRAD_NORM, stage_tag)


def _data_objective(spec: tasks.OptimizeeSpec, data: tasks.Dataset):
    loss_fn = lambda th: tasks.loss_value(spec, th, data.inputs, data.labels)
    grad_fn = lambda th: tasks.loss_and_grad(spec, th, data.inputs, data.labels)[1]
    return loss_fn, grad_fn


def pga_max_loss(spec: tasks.OptimizeeSpec, theta_star: np.ndarray, data: tasks.Dataset,
                 eps: float, *, config: ProbeConfig = ProbeConfig(), rng: RngStream,
                 stage_tag=StageTag.AT_COMPLETION) -> ProbeReport:
    """Maximum validation loss within the eps-ball around theta_star."""
    if len(data) == 0:
        raise ValueError("probe data must be nonempty")
    loss_fn, grad_fn = _data_objective(spec, data)
    rule = config.step_size_rule or StepSizeRule.EPS_OVER_10
    return pga_max_loss_on_objective(loss_fn, grad_fn, theta_star, eps, steps=config.steps,
                                     init_noise_std=config.init_noise_std, rng=rng,
                                     stage_tag=stage_tag, rule=rule)


def pga_max_grad_norm(spec: tasks.OptimizeeSpec, theta_star: np.ndarray, data: tasks.Dataset,
                      eps: float, *, config: ProbeConfig = ProbeConfig(), rng: RngStream,
                      stage_tag=StageTag.AT_COMPLETION) -> ProbeReport:
    """Maximum loss-gradient norm within the eps-ball around theta_star."""
    if len(data) == 0:
        raise ValueError("probe data must be nonempty")
    _, grad_fn = _data_objective(spec, data)
    rule = config.step_size_rule or StepSizeRule.EPS
    return pga_max_grad_norm_on_objective(grad_fn, theta_star, eps, steps=config.steps,
                                          init_noise_std=config.init_noise_std, rng=rng,
                                          stage_tag=stage_tag, rule=rule)


def probe_sweep(spec: tasks.OptimizeeSpec, theta_star: np.ndarray, data: tasks.Dataset,
                config: ProbeConfig, stage_tag: StageTag, rng: RngStream) -> list[ProbeReport]:
    """Both probes at every configured radius; per-radius failures are
    flagged in their reports rather than aborting the sweep."""
    reports = []
    for radius in config.radii:
        reports.append(pga_max_loss(spec, theta_star, data, radius, config=config,
                                    rng=rng.child(f"max_loss/{radius!r}"), stage_tag=stage_tag))
        reports.append(pga_max_grad_norm(spec, theta_star, data, radius, config=config,
                                         rng=rng.child(f"grad_norm/{radius!r}"), stage_tag=stage_tag))
    return reports


def detect_convergence(loss_history, patience: int = 100) -> int | None:
    """First step whose best-so-far loss the next `patience` steps never beat;
    None when the budget ends before any such window completes."""
    h = np.asarray(loss_history, dtype=np.float64)
    if h.size == 0:
        raise ValueError("loss history is empty")
    best = np.minimum.accumulate(h)
    for t in range(h.size - patience):
        if best[t + patience] >= best[t]:
            return t
    return None
