"""Experiment orchestration: run matrices, the meta-test protocol, the
L2 early-evidence study, metrics, and report files.

All stochastic choices flow from one seed through named RngStream children,
so a config reproduces its results byte-for-byte (wall-clock columns aside).
Meta-test runs execute inside the regularizer guard: any SAM/GSAM/GAM or
smoothing call during them raises instead of contaminating the protocol.
"""

from __future__ import annotations

import hashlib
import json
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from enum import Enum
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data_io, guard, tasks
from .meta_training import InnerTask, MetaConfig, PolyTaskSampler, train_meta
from .optimizer import CoordinatewiseLSTM, load_lo, save_lo
from .probes import ProbeConfig, ProbeReport, StageTag, detect_convergence, probe_sweep
from .rng import RngStream
from .tasks import Architecture, Dataset, OptimizeeSpec, Split


class ExperimentKind(str, Enum):
    EARLY_EVIDENCE_L2 = "early_evidence_l2"
    CLASSIFICATION_MATRIX = "classification_matrix"
    PROBE_ONLY = "probe_only"


@dataclass
class ExperimentConfig:
    experiment_kind: ExperimentKind = ExperimentKind.CLASSIFICATION_MATRIX
    datasets: tuple = ("blobs",)
    architectures: tuple = ("mlp_sigmoid",)
    regularizers: tuple = ("none",)
    num_runs: int = 10
    seed: int = 0
    output_dir: str = "out"
    data_dir: str | None = None
    num_workers: int = 1
    # meta-test budget
    meta_test_max_steps: int = 1000
    meta_test_patience: int = 100
    batch_size: int = 128
    samples_per_split: int | None = 1000
    blob_input_shape: tuple = (28, 28)
    # early-evidence protocol
    ee_tasks: int = 10
    ee_epochs: int = 5000
    ee_patience: int = 500
    ee_weight_decay: float = 0.1
    ee_sgd_lr: float = 0.05
    ee_points: int = 200
    ee_noise_std: float = 0.25
    ee_coeff_range: tuple = (-5.0, 5.0)
    ee_x_range: tuple = (-1.0, 1.0)
    # probe setup
    probe_radii: tuple = (0.001, 0.005, 0.01, 0.05, 0.1)
    probe_steps: int = 10
    probe_init_noise_std: float = 1.0
    # probe-only inputs
    theta_checkpoints: tuple = ()

    def __post_init__(self):
        if self.num_runs < 1:
            raise ValueError("num_runs must be at least 1")
        self.experiment_kind = ExperimentKind(self.experiment_kind)

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(tuple(self.probe_radii), self.probe_steps, self.probe_init_noise_std)

    def poly_family(self) -> tasks.PolyTaskFamily:
        return tasks.PolyTaskFamily(coeff_range=tuple(self.ee_coeff_range),
                                    noise_std=self.ee_noise_std,
                                    points_per_task=self.ee_points,
                                    x_range=tuple(self.ee_x_range))


def load_config(path) -> tuple[ExperimentConfig, MetaConfig]:
    """Read the JSON config file: {"experiment": {...}, "meta": {...}}."""
    raw = json.loads(Path(path).read_text())
    exp_fields = {f.name for f in fields(ExperimentConfig)}
    meta_fields = {f.name for f in fields(MetaConfig)}
    exp_raw = dict(raw.get("experiment", {}))
    meta_raw = dict(raw.get("meta", {}))
    for section, allowed in (("experiment", exp_fields), ("meta", meta_fields)):
        unknown = set(raw.get(section, {})) - allowed
        if unknown:
            raise ValueError(f"unknown keys in '{section}' config: {sorted(unknown)}")
    exp = ExperimentConfig(**{k: _listify(v) for k, v in exp_raw.items()})
    meta = MetaConfig(**{k: _listify(v) for k, v in meta_raw.items()})
    return exp, meta


def _listify(v):
    return tuple(v) if isinstance(v, list) else v


def effective_config_dict(exp: ExperimentConfig, meta: MetaConfig | None = None) -> dict:
    out = {"experiment": _plain(asdict(exp))}
    if meta is not None:
        out["meta"] = _plain(asdict(meta))
    return out


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


EXECUTION_ONLY_FIELDS = ("num_workers", "output_dir", "data_dir")


def config_hash(exp: ExperimentConfig, meta: MetaConfig | None = None) -> str:
    """Hash of the result-determining configuration; execution-only fields
    (worker count, paths) do not change an experiment's identity."""
    payload = effective_config_dict(exp, meta)
    for key in EXECUTION_ONLY_FIELDS:
        payload["experiment"].pop(key, None)
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# --- records ------------------------------------------------------------------

RESULT_COLUMNS = [
    "run_id", "experiment", "dataset", "architecture", "optimizer", "regularizer",
    "seed", "task_id", "config_hash", "final_train_loss", "metric_kind",
    "metric_convergence", "metric_completion", "param_norm", "convergence_step",
    "diverged", "confusion_convergence", "confusion_completion", "wall_clock_s",
]

PROBE_COLUMNS = (["run_id", "stage", "probe_kind", "radius", "base"]
                 + [f"step_{i}" for i in range(1, 11)] + ["final", "gap", "flagged"])


@dataclass
class RunRecord:
    run_id: str
    experiment: str
    dataset: str
    architecture: str
    optimizer: str
    regularizer: str
    seed: int
    task_id: int
    config_hash: str
    final_train_loss: float
    metric_kind: str
    metric_convergence: float
    metric_completion: float
    param_norm: float
    convergence_step: int
    diverged: bool
    confusion_convergence: str = ""
    confusion_completion: str = ""
    wall_clock_s: float = 0.0

    def __post_init__(self):
        if self.metric_kind == "accuracy" and not self.diverged:
            for v in (self.metric_convergence, self.metric_completion):
                if not (0.0 <= v <= 1.0):
                    raise ValueError(f"accuracy {v} outside [0, 1]")
        if self.metric_kind == "r2" and not self.diverged:
            if self.metric_convergence > 1.0 or self.metric_completion > 1.0:
                raise ValueError("r2 cannot exceed 1")

    def row(self) -> list[str]:
        return [fmt_cell(getattr(self, c)) for c in RESULT_COLUMNS]


def fmt_cell(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def probe_row(run_id: str, report: ProbeReport) -> list[str]:
    steps = list(report.trajectory) + [float("nan")] * (10 - len(report.trajectory))
    cells = ([run_id, report.stage_tag.value, report.probe_kind.value,
              repr(float(report.radius)), repr(float(report.base_value))]
             + [repr(float(s)) for s in steps[:10]]
             + [repr(float(report.final_value)), repr(float(report.gap)),
                "1" if report.flagged else "0"])
    return cells


def confusion_string(confusion: np.ndarray) -> str:
    return "|".join(str(int(v)) for v in confusion.reshape(-1))


def r_squared(predictions, targets) -> float:
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if predictions.shape != targets.shape or targets.size < 2:
        raise ValueError("r_squared needs matching vectors with at least 2 entries")
    ss_tot = float(np.sum((targets - targets.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("target variance is zero")
    ss_res = float(np.sum((targets - predictions) ** 2))
    return 1.0 - ss_res / ss_tot


# --- meta-test protocol ---------------------------------------------------------

@dataclass
class MetaTestResult:
    theta_convergence: np.ndarray
    theta_completion: np.ndarray
    convergence_step: int          # -1 when the budget ended first
    final_train_loss: float
    loss_history: list[float]
    diverged: bool = False


def meta_test_train(lo: CoordinatewiseLSTM, task: InnerTask, theta0: np.ndarray,
                    max_steps: int, patience: int, batch_size: int,
                    rng: RngStream) -> MetaTestResult:
    """Optimize a fresh task with a frozen optimizer; no regularization runs.

    Training continues to the full budget; the parameters at the patience
    stopping point are snapshotted the first time the rule fires.
    """
    with guard.regularizers_forbidden():
        theta = theta0.copy()
        state = lo.initial_state(theta.size)
        history: list[float] = []
        best_loss = np.inf
        best_step = -1
        theta_best = theta.copy()
        theta_conv = None
        conv_step = -1
        for step, idx in enumerate(task.draw_batches(rng, max_steps, batch_size)):
            x, y = task.batch(idx)
            try:
                loss, g = tasks.loss_and_grad(task.spec, theta, x, y, task.weight_decay)
                if not np.isfinite(loss):
                    raise ad.NonFiniteError("meta-test loss diverged")
                upd, state = lo.step(g, state, theta=theta)
            except (ad.NonFiniteError, FloatingPointError):
                return MetaTestResult(theta_best, theta, conv_step,
                                      history[-1] if history else np.nan, history, True)
            history.append(loss)
            if loss < best_loss:
                best_loss = loss
                best_step = step
                theta_best = theta.copy()
            if theta_conv is None and step - best_step >= patience:
                theta_conv = theta_best.copy()
                conv_step = best_step
            theta = theta + upd
        if theta_conv is None:
            theta_conv = theta.copy()  # never converged: completion stands in
        return MetaTestResult(theta_conv, theta, conv_step,
                              history[-1] if history else np.nan, history)


# --- dataset assembly -----------------------------------------------------------

def load_split_datasets(name: str, exp: ExperimentConfig, rng: RngStream
                        ) -> tuple[Dataset, Dataset, Dataset]:
    """Resolve a dataset name to (MetaTrain, MetaTestTrain, MetaTestTest),
    desk-capped per config."""
    root = data_io.data_dir(exp.data_dir)
    if name in ("mnist", "fmnist"):
        if root is None:
            raise FileNotFoundError(
                f"dataset '{name}' needs {data_io.DATA_DIR_ENV} or experiment.data_dir; "
                f"expected files like <dir>/{name}/train-images-idx3-ubyte")
        train, test = data_io.load_idx_dataset(name, root)
    elif name == "cifar10":
        if root is None:
            raise FileNotFoundError(
                f"dataset 'cifar10' needs {data_io.DATA_DIR_ENV} or experiment.data_dir")
        train, test = data_io.load_cifar_dataset(root)
    elif name == "blobs":
        brng = rng.child(f"blobs/{name}")
        n = (exp.samples_per_split or 1000) * 3
        centers = brng.uniform(0.15, 0.85, (10, int(np.prod(exp.blob_input_shape))))
        train = tasks.make_blobs_dataset(10, exp.blob_input_shape, n * 2 // 3,
                                         brng.child("train"), centers=centers)
        test = tasks.make_blobs_dataset(10, exp.blob_input_shape, n // 3,
                                        brng.child("test"), centers=centers)
    else:
        raise ValueError(f"unknown dataset '{name}'")
    a, b, c = tasks.split_dataset(train, test, rng.child(f"split/{name}"))
    cap = exp.samples_per_split
    return a.take(cap), b.take(cap), c.take(cap)


def spec_for(arch_name: str, dataset: Dataset) -> OptimizeeSpec:
    shape = dataset.inputs.shape[1:]
    arch = Architecture(arch_name)
    if arch == Architecture.CNN:
        if len(shape) == 2:
            shape = (1, *shape)
            # image tensors gain an explicit channel axis for conv input
        return tasks.cnn_spec(shape, 10)
    if arch in (Architecture.MLP_SIGMOID, Architecture.MLP_RELU):
        return tasks.mlp_spec(shape, 10, relu=arch == Architecture.MLP_RELU)
    raise ValueError(f"architecture '{arch_name}' is not a classification model")


def _with_channel(spec: OptimizeeSpec, data: Dataset) -> Dataset:
    if spec.architecture == Architecture.CNN and data.inputs.ndim == 3:
        return Dataset(data.inputs[:, None, :, :], data.labels, data.split_tag, data.meta)
    return data


# --- early evidence ---------------------------------------------------------------

@dataclass
class ArmResult:
    theta: np.ndarray
    r2: float
    param_norm: float
    final_train_loss: float
    convergence_step: int
    diverged: bool = False


def poly_task_pair(family: tasks.PolyTaskFamily, rng: RngStream) -> tuple[Dataset, Dataset]:
    """Train and test sets drawn from the same random polynomial."""
    train = tasks.sample_poly_task(family, rng.child("train"), Split.META_TEST_TRAIN)
    coeffs = train.meta["coefficients"]
    n = family.points_per_task
    x = rng.child("test").uniform(*family.x_range, (n,))
    feats = tasks.poly_features(x)
    y = feats @ coeffs
    if family.noise_std > 0:
        y = y + rng.child("test-noise").normal((n,), std=family.noise_std)
    return train, Dataset(feats, y, Split.META_TEST_TEST, dict(train.meta))


def _finish_arm(spec, theta, train: Dataset, test: Dataset, best_step: int,
                final_loss: float, diverged=False) -> ArmResult:
    if diverged:
        return ArmResult(theta, np.nan, np.nan, final_loss, best_step, True)
    preds = tasks.predictions(spec, theta, test.inputs)
    return ArmResult(theta, r_squared(preds, test.labels), float(np.linalg.norm(theta)),
                     final_loss, best_step)


def sgd_arm(spec, train: Dataset, test: Dataset, theta0, lr, epochs, patience,
            weight_decay=0.0) -> ArmResult:
    """Full-batch gradient descent with early stopping on the training objective."""
    theta = theta0.copy()
    best_loss, best_step, theta_best = np.inf, -1, theta.copy()
    loss = np.nan
    for step in range(epochs):
        try:
            loss, g = tasks.loss_and_grad(spec, theta, train.inputs, train.labels, weight_decay)
        except (ad.NonFiniteError, FloatingPointError):
            return _finish_arm(spec, theta_best, train, test, best_step, np.nan, True)
        if not np.isfinite(loss):
            return _finish_arm(spec, theta_best, train, test, best_step, np.nan, True)
        if loss < best_loss:
            best_loss, best_step, theta_best = loss, step, theta.copy()
        if step - best_step >= patience:
            break
        theta = theta - lr * g
    return _finish_arm(spec, theta_best, train, test, best_step, float(best_loss))


def lo_arm(lo: CoordinatewiseLSTM, spec, train: Dataset, test: Dataset, theta0,
           epochs, patience, rng: RngStream) -> ArmResult:
    """Meta-test the frozen optimizer on one task; no regularizer runs."""
    task = InnerTask(spec, train)
    res = meta_test_train(lo, task, theta0, epochs, patience, len(train), rng)
    if res.diverged:
        return _finish_arm(spec, res.theta_convergence, train, test, res.convergence_step,
                           res.final_train_loss, True)
    theta = res.theta_convergence  # early-stopped parameters, like the SGD arms
    best_loss = min(res.loss_history) if res.loss_history else np.nan
    return _finish_arm(spec, theta, train, test, res.convergence_step, float(best_loss))


EE_ARMS = [("sgd", "none"), ("sgd", "l2"), ("lo", "none"), ("lo", "l2")]


def run_early_evidence(exp: ExperimentConfig, meta: MetaConfig, rng: RngStream,
                       out_dir: Path | None = None):
    """Four-arm L2 study on cubic regression: SGD and learned optimizers,
    each with and without L2 during (meta-)training; every arm is evaluated
    on fresh tasks with no regularizer active."""
    family = exp.poly_family()
    chash = config_hash(exp, meta)
    spec = tasks.poly_spec()

    los = {}
    for arm_reg, wd in (("none", 0.0), ("l2", exp.ee_weight_decay)):
        # the L2 arm penalizes parameter norm in the meta-objective only;
        # the optimizee's own gradients stay unregularized
        sampler = PolyTaskSampler(family, meta_l2=wd)
        lo, _ = train_meta(meta, sampler, rng.child(f"meta-train/{arm_reg}"))
        los[arm_reg] = lo
        if out_dir is not None:
            save_lo(lo, Path(out_dir) / f"lo_ee_{arm_reg}.bin")

    records: list[RunRecord] = []
    arm_results: dict[tuple[str, str], list[ArmResult]] = {arm: [] for arm in EE_ARMS}
    for task_id in range(exp.ee_tasks):
        trng = rng.child(f"task{task_id}")
        train, test = poly_task_pair(family, trng)
        theta0 = tasks.init_optimizee(spec, trng.child("init"))
        for optimizer, arm_reg in EE_ARMS:
            t0 = time.monotonic()
            if optimizer == "sgd":
                wd = exp.ee_weight_decay if arm_reg == "l2" else 0.0
                res = sgd_arm(spec, train, test, theta0, exp.ee_sgd_lr,
                              exp.ee_epochs, exp.ee_patience, wd)
            else:
                res = lo_arm(los[arm_reg], spec, train, test, theta0,
                             exp.ee_epochs, exp.ee_patience, trng.child(f"lo/{arm_reg}"))
            arm_results[(optimizer, arm_reg)].append(res)
            records.append(RunRecord(
                run_id=f"ee-cubic-{optimizer}-{arm_reg}-t{task_id:02d}",
                experiment=ExperimentKind.EARLY_EVIDENCE_L2.value,
                dataset="cubic", architecture="poly_regression",
                optimizer=optimizer, regularizer=arm_reg, seed=exp.seed, task_id=task_id,
                config_hash=chash, final_train_loss=res.final_train_loss,
                metric_kind="r2", metric_convergence=res.r2, metric_completion=res.r2,
                param_norm=res.param_norm, convergence_step=res.convergence_step,
                diverged=res.diverged, wall_clock_s=time.monotonic() - t0,
            ))

    def norms(arm):
        return np.array([a.param_norm for a in arm_results[arm] if not a.diverged])

    def r2s(arm):
        return np.array([a.r2 for a in arm_results[arm] if not a.diverged])

    summary = {
        "tasks": exp.ee_tasks,
        "sgd_l2_norm_wins": int(np.sum(norms(("sgd", "l2")) < norms(("sgd", "none")))),
        "lo_l2_norm_wins": int(np.sum(norms(("lo", "l2")) < norms(("lo", "none")))),
        "mean_norms": {f"{o}_{r}": float(np.mean(norms((o, r)))) for o, r in EE_ARMS},
        "mean_r2": {f"{o}_{r}": float(np.mean(r2s((o, r)))) for o, r in EE_ARMS},
        "diverged": {f"{o}_{r}": int(sum(a.diverged for a in arm_results[(o, r)]))
                     for o, r in EE_ARMS},
    }
    return records, summary


# --- classification matrix ---------------------------------------------------------

def run_classification_matrix(exp: ExperimentConfig, rng: RngStream,
                              checkpoints: dict[str, str], out_dir: Path | None = None):
    """Meta-test every (dataset, architecture, regularizer, seed) cell with
    the matching trained optimizer, probing at both training stages."""
    for reg in exp.regularizers:
        if reg not in checkpoints:
            raise FileNotFoundError(
                f"no optimizer checkpoint for regularizer '{reg}'; "
                f"expected a path under the 'checkpoints' mapping")
        if not Path(checkpoints[reg]).exists():
            raise FileNotFoundError(
                f"optimizer checkpoint for '{reg}' missing at {checkpoints[reg]}")
    chash = config_hash(exp)
    jobs = []
    for ds_name in exp.datasets:
        for arch in exp.architectures:
            for reg in exp.regularizers:
                for run_idx in range(exp.num_runs):
                    jobs.append((ds_name, arch, reg, run_idx))

    work = [(exp, rng.seed, chash, checkpoints, job, str(out_dir) if out_dir else None)
            for job in jobs]
    if exp.num_workers > 1:
        with ProcessPoolExecutor(max_workers=exp.num_workers) as pool:
            results = list(pool.map(_matrix_cell, work))
    else:
        results = [_matrix_cell(w) for w in work]

    records = [r for r, _ in results]
    probe_rows = [row for _, rows in results for row in rows]
    records.sort(key=lambda r: r.run_id)
    probe_rows.sort(key=lambda r: (r[0], r[1], r[2], float(r[3])))
    return records, probe_rows


def _matrix_cell(args):
    exp, seed, chash, checkpoints, job, out_dir = args
    ds_name, arch, reg, run_idx = job
    base = RngStream(seed)
    lo = load_lo(checkpoints[reg])
    _, mtt_train, mtt_test = load_split_datasets(ds_name, exp, base.child(f"data/{ds_name}"))
    spec = spec_for(arch, mtt_train)
    train = _with_channel(spec, mtt_train)
    test = _with_channel(spec, mtt_test)
    run_id = f"mx-{ds_name}-{arch}-{reg}-r{run_idx:02d}"
    # init and batch order depend on (dataset, arch, run) but not the
    # regularizer, so arms are compared on identical task realizations
    cell_rng = base.child(f"cell/{ds_name}-{arch}-r{run_idx:02d}")
    rrng = base.child(f"run/{run_id}")
    t0 = time.monotonic()
    theta0 = tasks.init_optimizee(spec, cell_rng.child("init"))
    task = InnerTask(spec, train)
    result = meta_test_train(lo, task, theta0, exp.meta_test_max_steps,
                             exp.meta_test_patience, exp.batch_size, cell_rng.child("steps"))
    acc_conv, conf_conv = tasks.accuracy_and_confusion(spec, result.theta_convergence,
                                                       test.inputs, test.labels)
    acc_comp, conf_comp = tasks.accuracy_and_confusion(spec, result.theta_completion,
                                                       test.inputs, test.labels)
    probe_cfg = exp.probe_config()
    rows = []
    with guard.regularizers_forbidden():
        for stage, theta in ((StageTag.AT_CONVERGENCE, result.theta_convergence),
                             (StageTag.AT_COMPLETION, result.theta_completion)):
            for rep in probe_sweep(spec, theta, test, probe_cfg, stage,
                                   rrng.child(f"probe/{stage.value}")):
                rows.append(probe_row(run_id, rep))
    if out_dir is not None:
        ck = Path(out_dir) / "theta_checkpoints"
        ck.mkdir(parents=True, exist_ok=True)
        np.savez(ck / f"{run_id}.npz", convergence=result.theta_convergence,
                 completion=result.theta_completion)
    record = RunRecord(
        run_id=run_id, experiment=exp.experiment_kind.value, dataset=ds_name,
        architecture=arch, optimizer="lo", regularizer=reg, seed=seed, task_id=run_idx,
        config_hash=chash, final_train_loss=result.final_train_loss, metric_kind="accuracy",
        metric_convergence=acc_conv, metric_completion=acc_comp,
        param_norm=float(np.linalg.norm(result.theta_completion)),
        convergence_step=result.convergence_step, diverged=result.diverged,
        confusion_convergence=confusion_string(conf_conv),
        confusion_completion=confusion_string(conf_comp),
        wall_clock_s=time.monotonic() - t0,
    )
    return record, rows


def run_probe_only(exp: ExperimentConfig, rng: RngStream):
    """Probe saved optimizee checkpoints without retraining anything."""
    rows = []
    for path in exp.theta_checkpoints:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"theta checkpoint missing at {p}")
        blob = np.load(p)
        ds_name = exp.datasets[0]
        _, mtt_train, mtt_test = load_split_datasets(ds_name, exp, rng.child(f"data/{ds_name}"))
        spec = spec_for(exp.architectures[0], mtt_test)
        test = _with_channel(spec, mtt_test)
        run_id = p.stem
        with guard.regularizers_forbidden():
            for stage, key in ((StageTag.AT_CONVERGENCE, "convergence"),
                               (StageTag.AT_COMPLETION, "completion")):
                for rep in probe_sweep(spec, blob[key], test, exp.probe_config(), stage,
                                       rng.child(f"probe/{run_id}/{stage.value}")):
                    rows.append(probe_row(run_id, rep))
    return rows


# --- reports -------------------------------------------------------------------------

def write_csv(path: Path, header: list[str], rows: list[list[str]]):
    lines = [",".join(header)] + [",".join(r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def emit_reports(records: list[RunRecord], probe_rows: list[list[str]], out_dir,
                 config_dict: dict, chash: str) -> dict:
    """results.csv + probes.csv + summary.md + manifest.json under out_dir."""
    if not records:
        raise ValueError("no run records to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results_path = out / "results.csv"
    write_csv(results_path, RESULT_COLUMNS, [r.row() for r in sorted(records, key=lambda r: r.run_id)])
    probes_path = out / "probes.csv"
    write_csv(probes_path, PROBE_COLUMNS, probe_rows)
    summary_path = out / "summary.md"
    summary_path.write_text(summary_markdown(records))
    manifest_path = out / "manifest.json"
    manifest = {
        "config_hash": chash,
        "config": config_dict,
        "records": len(records),
        "probe_rows": len(probe_rows),
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
        },
        "host": platform.node(),
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return {"results": results_path, "probes": probes_path,
            "summary": summary_path, "manifest": manifest_path}


def summary_markdown(records: list[RunRecord]) -> str:
    """Mean +/- std per (dataset, architecture, regularizer) group; the best
    mean within each (dataset, architecture) block is bolded."""
    groups: dict = {}
    for r in records:
        if r.diverged:
            continue
        key = (r.experiment, r.dataset, r.architecture, r.optimizer, r.regularizer)
        groups.setdefault(key, []).append(r.metric_completion)
    lines = ["# Results summary", "",
             "| experiment | dataset | architecture | optimizer | regularizer | n | metric (mean ± std) |",
             "|---|---|---|---|---|---|---|"]
    best: dict = {}
    for key, vals in groups.items():
        block = key[:3]
        mean = float(np.mean(vals))
        if block not in best or mean > best[block][0]:
            best[block] = (mean, key)
    for key in sorted(groups):
        vals = np.array(groups[key])
        mean, std = float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        cell = f"{mean:.4f} ± {std:.4f}"
        if best[key[:3]][1] == key:
            cell = f"**{cell}**"
        lines.append("| " + " | ".join([*key, str(len(vals)), cell]) + " |")
    lines.append("")
    diverged = sum(r.diverged for r in records)
    if diverged:
        lines.append(f"Diverged runs excluded from means: {diverged}")
        lines.append("")
    return "\n".join(lines)


def append_jsonl(path: Path, obj: dict):
    with open(path, "a") as f:
        f.write(json.dumps(obj, sort_keys=True) + "\n")
