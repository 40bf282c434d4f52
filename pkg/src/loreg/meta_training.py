"""Outer-loop training of the learned optimizer.

A meta-step differentiates a truncated window of inner optimization with
respect to the optimizer weights phi. Inner gradients are fed to the
optimizer as constants (first-order meta-gradients), so gradient flow reaches
phi only through the emitted updates and the recurrent state inside the
window. On top of the plain meta-objective this module implements:

  * smoothing regularization: worst-case output discrepancy under an
    l-infinity perturbation of the input state, found by sign-ascent PGA;
  * SAM / GSAM / GAM meta-update rules, realized procedurally as perturbed
    or norm-penalized gradient steps on phi;
  * curriculum training over growing inner-run lengths with eval-driven
    stage advancement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from . import guard, tasks
from .optimizer import CoordinatewiseLSTM, OptState
from .rng import RngStream

GSAM_EPS = 1e-12


class DivergenceError(RuntimeError):
    """Inner optimization produced a non-finite loss or gradient."""


class Regularizer(str, Enum):
    NONE = "none"
    SAM = "sam"
    GSAM = "gsam"
    GAM = "gam"


class LossWeighting(str, Enum):
    FINAL_STEP = "final_step"
    UNIFORM = "uniform"


class BaseOptKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass
class MetaConfig:
    t_unroll: int = 20
    loss_weighting: LossWeighting = LossWeighting.FINAL_STEP
    meta_lr: float = 1e-3
    base_optimizer: BaseOptKind = BaseOptKind.ADAM
    lambda_smooth: float = 1.0
    lambda_reg: float = 0.1
    regularizer: Regularizer = Regularizer.NONE
    rho: float = 0.01
    alpha_gsam: float = 0.1
    smooth_eps: float = 0.01
    smooth_alpha: float | None = None  # defaults to smooth_eps / n_pga
    n_pga: int = 3
    curriculum_train: tuple = (100, 200, 500, 1000)
    curriculum_eval: tuple = (200, 500, 1000)
    lr_min_ratio: float = 0.01
    rho_min_ratio: float = 0.1
    batch_size: int = 128
    max_meta_steps_per_stage: int = 200
    eval_every: int = 5
    eval_optimizees: int = 1
    stage_patience: int = 3
    divergence_abort_fraction: float = 0.5
    resample_perturbation_data: bool = False
    lo_layers: int = 2
    lo_hidden: int = 20
    lo_preprocess: bool = True
    lo_output_scale: float = 0.1
    lo_p: float = 10.0
    lo_theta_conditioning: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.t_unroll < 1:
            raise ValueError("t_unroll must be at least 1")
        if self.meta_lr < 0:
            raise ValueError("meta_lr must be nonnegative")
        if self.curriculum_train and self.curriculum_eval:
            if self.curriculum_train[0] in self.curriculum_eval:
                raise ValueError("eval lengths must exclude the first training length")
        if self.regularizer != Regularizer.NONE and self.rho <= 0:
            raise ValueError("rho must be positive when a regularizer is active")

    @property
    def smooth_step(self) -> float:
        return self.smooth_alpha if self.smooth_alpha is not None else self.smooth_eps / self.n_pga


@dataclass
class SchedulerState:
    """Cosine-annealed learning rate with a proportionally tracked rho."""
    total_steps: int
    lr_max: float
    lr_min: float
    rho_max: float
    rho_min: float
    step_index: int = 0

    def _phase(self) -> float:
        if self.total_steps <= 1:
            return 0.0
        return min(self.step_index, self.total_steps - 1) / (self.total_steps - 1)

    @property
    def lr_t(self) -> float:
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1 + math.cos(math.pi * self._phase()))

    @property
    def rho_t(self) -> float:
        if self.lr_max == self.lr_min:
            return self.rho_max
        frac = (self.lr_t - self.lr_min) / (self.lr_max - self.lr_min)
        return self.rho_min + frac * (self.rho_max - self.rho_min)

    def advance(self):
        self.step_index += 1


class SgdOpt:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, phi: np.ndarray, grad: np.ndarray, lr: float | None = None) -> np.ndarray:
        return phi - (self.lr if lr is None else lr) * grad


class AdamOpt:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, phi: np.ndarray, grad: np.ndarray, lr: float | None = None) -> np.ndarray:
        if self.m is None:
            self.m, self.v = np.zeros_like(phi), np.zeros_like(phi)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return phi - (self.lr if lr is None else lr) * mhat / (np.sqrt(vhat) + self.eps)


def make_base_optimizer(cfg: MetaConfig):
    if cfg.base_optimizer == BaseOptKind.ADAM:
        return AdamOpt(cfg.meta_lr)
    return SgdOpt(cfg.meta_lr)


# --- inner tasks -------------------------------------------------------------

@dataclass
class InnerTask:
    """A concrete optimizee: model spec + data.

    weight_decay regularizes the optimizee's own loss (visible to its
    gradients); meta_l2 penalizes parameter norm only inside the
    meta-objective, so the optimizer must internalize the shrinkage rather
    than read it off the gradients it is fed.
    """
    spec: tasks.OptimizeeSpec
    data: tasks.Dataset
    weight_decay: float = 0.0
    meta_l2: float = 0.0

    @property
    def meta_decay(self) -> float:
        return self.weight_decay + self.meta_l2

    def draw_batches(self, rng: RngStream, count: int, batch_size: int) -> list[np.ndarray]:
        n = len(self.data)
        if batch_size >= n:
            return [np.arange(n) for _ in range(count)]
        return [rng.integers(0, n, (batch_size,)) for _ in range(count)]

    def batch(self, idx: np.ndarray):
        return self.data.inputs[idx], self.data.labels[idx]


class PolyTaskSampler:
    """Fresh cubic-regression task per optimizee."""

    def __init__(self, family: tasks.PolyTaskFamily, weight_decay: float = 0.0,
                 meta_l2: float = 0.0):
        self.family = family
        self.weight_decay = weight_decay
        self.meta_l2 = meta_l2
        self.spec = tasks.poly_spec()

    def sample(self, rng: RngStream) -> InnerTask:
        return InnerTask(self.spec, tasks.sample_poly_task(self.family, rng),
                         self.weight_decay, self.meta_l2)


class FixedDataSampler:
    """Fresh optimizee weights on a fixed dataset (classification tasks)."""

    def __init__(self, spec: tasks.OptimizeeSpec, data: tasks.Dataset,
                 weight_decay: float = 0.0, meta_l2: float = 0.0):
        self.spec = spec
        self.data = data
        self.weight_decay = weight_decay
        self.meta_l2 = meta_l2

    def sample(self, rng: RngStream) -> InnerTask:
        return InnerTask(self.spec, self.data, self.weight_decay, self.meta_l2)


# --- unrolled inner optimization ---------------------------------------------

@dataclass
class UnrollResult:
    tape: ad.Tape
    param_nodes: dict
    loss: ad.Node
    theta_final: np.ndarray
    state_final: OptState
    inner_losses: list[float]
    inner_grads: list[np.ndarray]
    last_entry_state: list  # state nodes/values entering the final step
    last_entry_theta: object  # theta node/values entering the final step
    last_update: ad.Node

    @property
    def last_grads(self) -> np.ndarray:
        return self.inner_grads[-1]


def unroll(lo: CoordinatewiseLSTM, task: InnerTask, theta0: np.ndarray, state0: OptState,
           batches: list[np.ndarray], weighting: LossWeighting = LossWeighting.FINAL_STEP,
           frozen_inner_grads: list[np.ndarray] | None = None) -> UnrollResult:
    """Run T inner steps on a phi-tape and return the window meta-loss.

    Inner gradients enter the optimizer as constants; pass
    `frozen_inner_grads` to replay a recorded gradient sequence (used by
    finite-difference checks of the meta-gradient).
    """
    t_steps = len(batches)
    tape = ad.Tape()
    params = {k: tape.leaf(v) for k, v in lo.params.items()}
    theta: ad.Node | np.ndarray = ad.as_tensor(theta0)
    state_layers: list = state0.layers()
    inner_losses: list[float] = []
    inner_grads: list[np.ndarray] = []
    step_losses: list[ad.Node] = []
    entry_state = state_layers
    entry_theta = theta
    update_node = None

    for t, idx in enumerate(batches):
        x, y = task.batch(idx)
        theta_val = theta.value if isinstance(theta, ad.Node) else theta
        try:
            if frozen_inner_grads is not None:
                grads = ad.as_tensor(frozen_inner_grads[t])
            else:
                loss_t, grads = tasks.loss_and_grad(task.spec, theta_val, x, y, task.weight_decay)
                if not np.isfinite(loss_t) or not np.all(np.isfinite(grads)):
                    raise DivergenceError(f"inner loss diverged at step {t}")
                inner_losses.append(loss_t)
            inner_grads.append(grads)
            entry_state = state_layers
            entry_theta = theta
            update_node, state_layers = lo.forward_on_tape(tape, params, grads, state_layers,
                                                           theta=theta)
            theta = ad.add(update_node, theta) if not isinstance(theta, ad.Node) else ad.add(theta, update_node)
            if weighting == LossWeighting.UNIFORM or t == t_steps - 1:
                step_losses.append(tasks.loss_on_tape(tape, task.spec, theta, x, y, task.meta_decay))
        except ad.NonFiniteError as exc:
            raise DivergenceError(f"inner optimization diverged at step {t}: {exc}") from exc

    if weighting == LossWeighting.UNIFORM:
        total = step_losses[0]
        for extra in step_losses[1:]:
            total = ad.add(total, extra)
        meta_loss = ad.scale(total, 1.0 / t_steps)
    else:
        meta_loss = step_losses[-1]

    state_final = OptState(
        np.stack([h.value if isinstance(h, ad.Node) else h for h, _ in state_layers], axis=1),
        np.stack([c.value if isinstance(c, ad.Node) else c for _, c in state_layers], axis=1),
    )
    return UnrollResult(tape, params, meta_loss, np.array(theta.value), state_final,
                        inner_losses, inner_grads, entry_state, entry_theta, update_node)


# --- smoothing regularization -------------------------------------------------

def _value(x):
    return x.value if isinstance(x, ad.Node) else x


def _pga_worst_input(lo, s: np.ndarray, state_values: list, theta_value, u_base: np.ndarray,
                     eps: float, alpha: float, n_pga: int, rng: RngStream) -> np.ndarray:
    """Sign-ascent PGA for the input state maximizing the output discrepancy."""
    s_pert = s + rng.uniform(-eps, eps, s.shape)
    lo_const = s - eps
    hi_const = s + eps
    for _ in range(n_pga):
        t = ad.Tape()
        x = t.leaf(s_pert)
        u, _ = lo.forward_on_tape(t, dict(lo.params), None, state_values, input_node=x,
                                  theta=theta_value)
        d = ad.sum_sq(ad.sub(u, u_base))
        g = ad.backward(t, d)[x]
        s_pert = np.clip(s_pert + alpha * np.sign(g), lo_const, hi_const)
    return s_pert


def smooth_penalty_node(lo, tape, params, s: np.ndarray, entry_state: list,
                        u_base_node: ad.Node, eps: float, alpha: float,
                        n_pga: int, rng: RngStream, entry_theta=None) -> ad.Node:
    """Worst-case squared output discrepancy as a phi-differentiable node.

    The hidden state (and any theta input) entering the step is held fixed;
    the PGA search runs eagerly, then the found perturbation is re-evaluated
    on the main tape.
    """
    guard.assert_regularizers_allowed("smoothing")
    state_values = [(_value(h), _value(c)) for h, c in entry_state]
    s_pert = _pga_worst_input(lo, s, state_values, _value(entry_theta) if entry_theta is not None else None,
                              u_base_node.value, eps, alpha, n_pga, rng)
    u_pert, _ = lo.forward_on_tape(tape, params, s_pert, entry_state, theta=entry_theta)
    return ad.sum_sq(ad.sub(u_base_node, u_pert))


def smooth_reg(lo, s: np.ndarray, state: OptState, eps: float, n_pga: int,
               rng: RngStream, alpha: float | None = None, theta=None) -> float:
    """Standalone smoothing penalty value for input state s at fixed hidden state."""
    guard.assert_regularizers_allowed("smoothing")
    alpha = eps / n_pga if alpha is None else alpha
    layers = state.layers()
    tape = ad.Tape()
    params = {k: tape.leaf(v) for k, v in lo.params.items()}
    u_base, _ = lo.forward_on_tape(tape, params, s, layers, theta=theta)
    node = smooth_penalty_node(lo, tape, params, ad.as_tensor(s), layers, u_base,
                               eps, alpha, n_pga, rng, entry_theta=theta)
    return float(node.value)


# --- window objective ---------------------------------------------------------

@dataclass
class WindowEval:
    loss: float            # total objective differentiated (task + weighted smoothing)
    grad: np.ndarray
    theta_final: np.ndarray | None
    state_final: OptState | None
    task_loss: float = 0.0
    smooth_term: float = 0.0


def make_window_loss_fn(lo_template: CoordinatewiseLSTM, task: InnerTask, theta0: np.ndarray,
                        state0: OptState, batches: list[np.ndarray], cfg: MetaConfig,
                        smooth_rng_key: tuple[int, int] | None = None):
    """Closure phi -> WindowEval replaying identical data and start state.

    Reconstructing the smoothing rng from its (seed, key) pair on every call
    keeps SAM/GSAM's two passes on identical perturbation draws. With
    resample_perturbation_data, calls after the first (the perturbed passes)
    draw fresh batches instead of replaying.
    """
    calls = {"n": 0}

    def fn(phi: np.ndarray) -> WindowEval:
        lo = lo_template.clone()
        lo.set_flat(phi)
        window = batches
        if cfg.resample_perturbation_data and calls["n"] > 0 and smooth_rng_key is not None:
            redraw = RngStream(*smooth_rng_key).child(f"resample{calls['n']}")
            window = task.draw_batches(redraw, len(batches), cfg.batch_size)
        calls["n"] += 1
        res = unroll(lo, task, theta0, state0, window, cfg.loss_weighting)
        loss_node = res.loss
        task_loss = float(res.loss.value)
        smooth_val = 0.0
        if cfg.lambda_smooth > 0.0 and smooth_rng_key is not None:
            srng = RngStream(*smooth_rng_key)
            smooth_node = smooth_penalty_node(lo, res.tape, res.param_nodes, res.last_grads,
                                              res.last_entry_state, res.last_update,
                                              cfg.smooth_eps, cfg.smooth_step, cfg.n_pga, srng,
                                              entry_theta=res.last_entry_theta)
            smooth_val = float(smooth_node.value)
            loss_node = ad.add(loss_node, ad.scale(smooth_node, cfg.lambda_smooth))
        grads = ad.backward(res.tape, loss_node)
        flat = np.concatenate([
            grads.get(res.param_nodes[k], np.zeros_like(lo.params[k])).reshape(-1)
            for k in lo.param_order()
        ])
        res.tape.release()
        return WindowEval(float(loss_node.value), flat, res.theta_final, res.state_final,
                          task_loss, smooth_val)

    return fn


# --- regularized meta-steps -----------------------------------------------------

def total_meta_loss(meta: float, smooth: float, reg: float,
                    lambda_smooth: float, lambda_reg: float) -> float:
    """Scalar meta objective: task term + weighted smoothing + weighted regularizer."""
    return meta + lambda_smooth * smooth + lambda_reg * reg


def plain_meta_step(phi, window_fn, opt, lr=None):
    ev = window_fn(phi)
    return opt.step(phi, ev.grad, lr), ev, 0.0


def sam_meta_step(phi: np.ndarray, window_fn, rho: float, opt, lr: float | None = None):
    """Ascend to phi + rho*g/|g|, descend with the gradient taken there."""
    guard.assert_regularizers_allowed("SAM")
    base = window_fn(phi)
    gnorm = float(np.linalg.norm(base.grad))
    if gnorm == 0.0:
        return opt.step(phi, base.grad, lr), base, base.loss
    eps_hat = (rho / gnorm) * base.grad
    adv = window_fn(phi + eps_hat)
    return opt.step(phi, adv.grad, lr), base, adv.loss


def decompose_gradient(g: np.ndarray, g_ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split g into components parallel and orthogonal to g_ref."""
    ref_norm = float(np.linalg.norm(g_ref))
    if ref_norm == 0.0:
        return np.zeros_like(g), g.copy()
    unit = g_ref / ref_norm
    parallel = np.dot(g, unit) * unit
    return parallel, g - parallel


def gsam_meta_step(phi: np.ndarray, window_fn, sched: SchedulerState, alpha: float, opt):
    """SAM descent plus an ascent along the component of the base gradient
    orthogonal to the perturbed gradient (surrogate-gap reduction)."""
    guard.assert_regularizers_allowed("GSAM")
    rho_t, lr_t = sched.rho_t, sched.lr_t
    base = window_fn(phi)
    gnorm = float(np.linalg.norm(base.grad))
    if gnorm == 0.0:
        sched.advance()
        return opt.step(phi, base.grad, lr_t), base, 0.0
    phi_adv = phi + (rho_t / (gnorm + GSAM_EPS)) * base.grad
    adv = window_fn(phi_adv)
    if float(np.linalg.norm(adv.grad)) == 0.0:
        direction = adv.grad
    else:
        _, g_orth = decompose_gradient(base.grad, adv.grad)
        direction = adv.grad - alpha * g_orth
    sched.advance()
    return opt.step(phi, direction, lr_t), base, adv.loss - base.loss


def gam_meta_step(phi: np.ndarray, window_fn, rho: float, lambda_reg: float, opt,
                  lr: float | None = None):
    """Descend the base gradient plus the gradient of the worst-case
    neighborhood gradient norm, estimated with forward-difference HVPs."""
    guard.assert_regularizers_allowed("GAM")
    base = window_fn(phi)
    grad_fn = lambda v: window_fn(v).grad
    gnorm = float(np.linalg.norm(base.grad))
    if gnorm == 0.0:
        return opt.step(phi, base.grad, lr), base, 0.0
    f = ad.grad_norm_gradient(grad_fn, phi)
    f_norm = float(np.linalg.norm(f))
    if f_norm == 0.0:
        return opt.step(phi, base.grad, lr), base, 0.0
    phi_adv = phi + (rho / f_norm) * f
    g_adv = grad_fn(phi_adv)
    gn_adv = float(np.linalg.norm(g_adv))
    if gn_adv == 0.0:
        return opt.step(phi, base.grad, lr), base, 0.0
    r = 1e-3 * (1.0 + float(np.linalg.norm(phi_adv)))
    hvp = (grad_fn(phi_adv + (r / gn_adv) * g_adv) - g_adv) / r
    direction = base.grad + lambda_reg * rho * hvp
    return opt.step(phi, direction, lr), base, rho * gn_adv


# --- curriculum training ---------------------------------------------------------

@dataclass
class TrainRecord:
    stage: int
    stage_length: int
    meta_step: int
    meta_loss: float
    smooth_term: float
    reg_term: float
    total_loss: float
    eval_losses: dict = field(default_factory=dict)
    kind: str = "step"

    def as_dict(self) -> dict:
        return {
            "kind": self.kind, "stage": self.stage, "stage_length": self.stage_length,
            "meta_step": self.meta_step, "meta_loss": self.meta_loss,
            "smooth_term": self.smooth_term, "reg_term": self.reg_term,
            "total_loss": self.total_loss,
            "eval_losses": {str(k): v for k, v in self.eval_losses.items()},
        }


def rollout(lo: CoordinatewiseLSTM, task: InnerTask, theta0: np.ndarray,
            steps: int, rng: RngStream, batch_size: int):
    """Plain inner optimization with a frozen optimizer; returns final theta
    and the per-step batch losses."""
    theta = theta0.copy()
    state = lo.initial_state(theta.size)
    losses = []
    for idx in task.draw_batches(rng, steps, batch_size):
        x, y = task.batch(idx)
        try:
            loss, g = tasks.loss_and_grad(task.spec, theta, x, y, task.weight_decay)
            if not np.isfinite(loss):
                raise DivergenceError("rollout diverged")
            losses.append(loss)
            upd, state = lo.step(g, state, theta=theta)
        except ad.NonFiniteError as exc:
            raise DivergenceError(f"rollout diverged: {exc}") from exc
        theta = theta + upd
    return theta, losses


def _evaluate(lo: CoordinatewiseLSTM, sampler, cfg: MetaConfig, rng: RngStream) -> dict:
    """Mean final full-data loss per eval length, on fresh optimizees."""
    out = {}
    for length in cfg.curriculum_eval:
        finals = []
        for k in range(cfg.eval_optimizees):
            erng = rng.child(f"len{length}/opt{k}")
            task = sampler.sample(erng.child("task"))
            theta0 = tasks.init_optimizee(task.spec, erng.child("init"))
            try:
                theta, _ = rollout(lo, task, theta0, length, erng.child("batches"), cfg.batch_size)
                final = tasks.loss_value(task.spec, theta, task.data.inputs, task.data.labels,
                                         task.meta_decay)
            except DivergenceError:
                final = float("inf")
            finals.append(final)
        out[length] = float(np.mean(finals))
    return out


@dataclass
class TrainResult:
    optimizer: CoordinatewiseLSTM       # best-by-eval parameters
    final_optimizer: CoordinatewiseLSTM
    log: list[TrainRecord]

    def __iter__(self):
        # (lo, log) unpacking stays supported
        return iter((self.optimizer, self.log))


def train_meta(cfg: MetaConfig, sampler, rng: RngStream) -> TrainResult:
    """Curriculum meta-training; returns best-by-eval and final optimizers
    plus the training log."""
    lo = CoordinatewiseLSTM(cfg.lo_layers, cfg.lo_hidden, cfg.lo_preprocess,
                            cfg.lo_p, cfg.lo_output_scale, cfg.lo_theta_conditioning,
                            rng=rng.child("lo-init"))
    phi = lo.flat_params()
    opt = make_base_optimizer(cfg)
    sched = SchedulerState(
        total_steps=max(1, cfg.max_meta_steps_per_stage * len(cfg.curriculum_train)),
        lr_max=cfg.meta_lr, lr_min=cfg.meta_lr * cfg.lr_min_ratio,
        rho_max=cfg.rho, rho_min=cfg.rho * cfg.rho_min_ratio,
    )
    log: list[TrainRecord] = []
    best_eval = math.inf
    best_phi = phi.copy()
    global_step = 0

    for stage, stage_len in enumerate(cfg.curriculum_train):
        srng = rng.child(f"stage{stage}")
        windows_per_opt = max(1, math.ceil(stage_len / cfg.t_unroll))
        stage_steps = 0
        optimizee_idx = 0
        diverged = 0
        stage_best = math.inf
        no_improve = 0

        while stage_steps < cfg.max_meta_steps_per_stage:
            trng = srng.child(f"opt{optimizee_idx}")
            task = sampler.sample(trng.child("task"))
            theta = tasks.init_optimizee(task.spec, trng.child("init"))
            state = lo.initial_state(theta.size)
            brng = trng.child("batches")
            try:
                for w in range(windows_per_opt):
                    if stage_steps >= cfg.max_meta_steps_per_stage:
                        break
                    batches = task.draw_batches(brng, cfg.t_unroll, cfg.batch_size)
                    smooth_key = None
                    if cfg.lambda_smooth > 0.0:
                        skey_rng = trng.child(f"smooth{w}")
                        smooth_key = (skey_rng.seed, skey_rng.key)
                    lo.set_flat(phi)
                    window_fn = make_window_loss_fn(lo, task, theta, state, batches, cfg, smooth_key)
                    if cfg.regularizer == Regularizer.SAM:
                        phi, ev, reg_term = sam_meta_step(phi, window_fn, cfg.rho, opt)
                    elif cfg.regularizer == Regularizer.GSAM:
                        phi, ev, reg_term = gsam_meta_step(phi, window_fn, sched, cfg.alpha_gsam, opt)
                    elif cfg.regularizer == Regularizer.GAM:
                        phi, ev, reg_term = gam_meta_step(phi, window_fn, cfg.rho, cfg.lambda_reg,
                                                          opt, sched.lr_t)
                        sched.advance()
                    else:
                        phi, ev, reg_term = plain_meta_step(phi, window_fn, opt)
                    theta, state = ev.theta_final, ev.state_final
                    log.append(TrainRecord(
                        stage, stage_len, global_step, ev.task_loss, ev.smooth_term, reg_term,
                        total_meta_loss(ev.task_loss, ev.smooth_term, reg_term,
                                        cfg.lambda_smooth, cfg.lambda_reg),
                    ))
                    stage_steps += 1
                    global_step += 1
            except DivergenceError:
                diverged += 1
            optimizee_idx += 1
            if optimizee_idx >= 4 and diverged > cfg.divergence_abort_fraction * optimizee_idx:
                raise RuntimeError(
                    f"meta-training stage {stage}: {diverged}/{optimizee_idx} optimizees "
                    f"diverged; aborting (regularizer={cfg.regularizer.value})")

            if optimizee_idx % cfg.eval_every == 0 or stage_steps >= cfg.max_meta_steps_per_stage:
                lo.set_flat(phi)
                eval_losses = _evaluate(lo, sampler, cfg, srng.child(f"eval{optimizee_idx}"))
                log.append(TrainRecord(stage, stage_len, global_step, math.nan, 0.0, 0.0,
                                       math.nan, eval_losses, kind="eval"))
                criterion = eval_losses[max(cfg.curriculum_eval)] if cfg.curriculum_eval else math.inf
                if criterion < best_eval:
                    best_eval = criterion
                    best_phi = phi.copy()
                if criterion < stage_best - 1e-12:
                    stage_best = criterion
                    no_improve = 0
                else:
                    no_improve += 1
                    if no_improve >= cfg.stage_patience:
                        break

    final_lo = lo.clone()
    final_lo.set_flat(phi)
    lo.set_flat(best_phi)
    return TrainResult(lo, final_lo, log)
