"""Optimizee models, synthetic task families, and the three-way data split.

An optimizee is described by an OptimizeeSpec; its parameters live in one
flat vector whose layout is fixed (layer order, then row-major within each
array), so a coordinatewise optimizer can treat every model identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from .rng import RngStream

HIDDEN_UNITS = 20
CNN_CONV1 = (16, 3)   # (kernels, kernel size)
CNN_CONV2 = (32, 5)
CNN_POOL = 2


class Architecture(str, Enum):
    POLY_REGRESSION = "poly_regression"
    MLP_SIGMOID = "mlp_sigmoid"
    MLP_RELU = "mlp_relu"
    CNN = "cnn"


class LossKind(str, Enum):
    MSE = "mse"
    CROSS_ENTROPY = "cross_entropy"


class Split(str, Enum):
    META_TRAIN = "meta_train"
    META_TEST_TRAIN = "meta_test_train"
    META_TEST_TEST = "meta_test_test"


@dataclass(frozen=True)
class OptimizeeSpec:
    architecture: Architecture
    input_shape: tuple
    num_outputs: int
    loss_kind: LossKind

    def __post_init__(self):
        if self.num_outputs < 1:
            raise ValueError("num_outputs must be positive")
        if self.architecture == Architecture.CNN and len(self.input_shape) != 3:
            raise ValueError("CNN input shape must be (channels, height, width)")


def mlp_spec(input_shape, num_classes: int, relu: bool = False) -> OptimizeeSpec:
    arch = Architecture.MLP_RELU if relu else Architecture.MLP_SIGMOID
    return OptimizeeSpec(arch, tuple(input_shape), num_classes, LossKind.CROSS_ENTROPY)


def cnn_spec(input_shape, num_classes: int) -> OptimizeeSpec:
    return OptimizeeSpec(Architecture.CNN, tuple(input_shape), num_classes, LossKind.CROSS_ENTROPY)


def poly_spec() -> OptimizeeSpec:
    return OptimizeeSpec(Architecture.POLY_REGRESSION, (4,), 1, LossKind.MSE)


def _cnn_feature_count(input_shape) -> tuple[int, int, int]:
    c, h, w = input_shape
    f1, k1 = CNN_CONV1
    f2, k2 = CNN_CONV2
    h1, w1 = (h - k1 + 1) // CNN_POOL, (w - k1 + 1) // CNN_POOL
    h2, w2 = h1 - k2 + 1, w1 - k2 + 1
    if h2 < 1 or w2 < 1:
        raise ValueError(f"input {input_shape} too small for the CNN stack")
    return f2 * h2 * w2, h2, w2


def param_layout(spec: OptimizeeSpec) -> list[tuple[str, tuple]]:
    """(name, shape) pairs in flattening order."""
    if spec.architecture == Architecture.POLY_REGRESSION:
        return [("w", (spec.input_shape[0], 1))]
    if spec.architecture in (Architecture.MLP_SIGMOID, Architecture.MLP_RELU):
        d = int(np.prod(spec.input_shape))
        return [
            ("w1", (d, HIDDEN_UNITS)),
            ("b1", (HIDDEN_UNITS,)),
            ("w2", (HIDDEN_UNITS, spec.num_outputs)),
            ("b2", (spec.num_outputs,)),
        ]
    if spec.architecture == Architecture.CNN:
        c = spec.input_shape[0]
        f1, k1 = CNN_CONV1
        f2, k2 = CNN_CONV2
        feat, _, _ = _cnn_feature_count(spec.input_shape)
        return [
            ("k1", (f1, c, k1, k1)),
            ("b1", (f1,)),
            ("k2", (f2, f1, k2, k2)),
            ("b2", (f2,)),
            ("w", (feat, spec.num_outputs)),
            ("b", (spec.num_outputs,)),
        ]
    raise ValueError(f"unknown architecture {spec.architecture}")


def param_count(spec: OptimizeeSpec) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_layout(spec))


def _fans(name: str, shape: tuple) -> tuple[int, int]:
    if len(shape) == 4:  # conv kernels: (out, in, kh, kw)
        rec = int(np.prod(shape[2:]))
        return shape[1] * rec, shape[0] * rec
    if len(shape) == 2:
        return shape[0], shape[1]
    return shape[0], shape[0]


def init_optimizee(spec: OptimizeeSpec, rng: RngStream) -> np.ndarray:
    """Glorot-uniform weights, zero biases, flattened in layout order."""
    parts = []
    for name, shape in param_layout(spec):
        if name.startswith("b"):
            parts.append(np.zeros(int(np.prod(shape))))
        else:
            fan_in, fan_out = _fans(name, shape)
            parts.append(rng.glorot(shape, fan_in, fan_out).reshape(-1))
    return np.concatenate(parts)


def _split_params(theta, layout):
    """Slice the flat parameter node/array into shaped pieces."""
    pieces, off = {}, 0
    for name, shape in layout:
        n = int(np.prod(shape))
        if isinstance(theta, ad.Node):
            pieces[name] = ad.slice_flat(theta, off, off + n, shape)
        else:
            pieces[name] = theta.reshape(-1)[off : off + n].reshape(shape)
        off += n
    return pieces


def forward_on_tape(tape: ad.Tape, spec: OptimizeeSpec, theta, x: np.ndarray) -> ad.Node:
    """Model output (batch, num_outputs); theta may be a Node or a constant."""
    if not isinstance(theta, ad.Node):
        theta = tape.leaf(theta)
    x = ad.as_tensor(x)
    p = _split_params(theta, param_layout(spec))
    if spec.architecture == Architecture.POLY_REGRESSION:
        return ad.matmul(_const_2d(tape, x), p["w"])
    if spec.architecture in (Architecture.MLP_SIGMOID, Architecture.MLP_RELU):
        act = ad.sigmoid if spec.architecture == Architecture.MLP_SIGMOID else ad.relu
        flat = x.reshape(x.shape[0], -1)
        hid = act(ad.add(ad.matmul(tape.leaf(flat), p["w1"]), p["b1"]))
        return ad.add(ad.matmul(hid, p["w2"]), p["b2"])
    if spec.architecture == Architecture.CNN:
        c1 = ad.add(ad.conv2d(tape.leaf(x), p["k1"]), _bias_nchw(p["b1"]))
        pool = ad.maxpool2d(c1, CNN_POOL)
        c2 = ad.add(ad.conv2d(pool, p["k2"]), _bias_nchw(p["b2"]))
        feat, _, _ = _cnn_feature_count(spec.input_shape)
        flat = ad.slice_flat(c2, 0, x.shape[0] * feat, (x.shape[0], feat))
        return ad.add(ad.matmul(flat, p["w"]), p["b"])
    raise ValueError(f"unknown architecture {spec.architecture}")


def _const_2d(tape, x):
    return tape.leaf(x.reshape(x.shape[0], -1))


def _bias_nchw(b):
    # broadcast a per-channel bias over (batch, channel, h, w)
    n = b.value.shape[0] if isinstance(b, ad.Node) else b.shape[0]
    return ad.slice_flat(b, 0, n, (n, 1, 1))


def loss_on_tape(tape: ad.Tape, spec: OptimizeeSpec, theta, x, y,
                 weight_decay: float = 0.0) -> ad.Node:
    """Task loss at theta on batch (x, y), optionally plus weight_decay*|theta|^2."""
    out = forward_on_tape(tape, spec, theta, x)
    if spec.loss_kind == LossKind.CROSS_ENTROPY:
        loss = ad.softmax_xent(out, y)
    else:
        loss = ad.mse(out, np.asarray(y, dtype=np.float64).reshape(out.value.shape))
    if weight_decay > 0.0:
        if not isinstance(theta, ad.Node):
            raise ValueError("weight decay needs theta on the tape")
        loss = ad.add(loss, ad.scale(ad.sum_sq(theta), weight_decay))
    return loss


def loss_and_grad(spec: OptimizeeSpec, theta: np.ndarray, x, y,
                  weight_decay: float = 0.0) -> tuple[float, np.ndarray]:
    tape = ad.Tape()
    node = tape.leaf(theta)
    loss = loss_on_tape(tape, spec, node, x, y, weight_decay)
    grads = ad.backward(tape, loss)
    return float(loss.value), grads[node]


def loss_value(spec: OptimizeeSpec, theta: np.ndarray, x, y, weight_decay: float = 0.0) -> float:
    tape = ad.Tape()
    return float(loss_on_tape(tape, spec, tape.leaf(theta), x, y, weight_decay).value)


def predictions(spec: OptimizeeSpec, theta: np.ndarray, x) -> np.ndarray:
    tape = ad.Tape()
    return forward_on_tape(tape, spec, tape.leaf(theta), x).value


def accuracy_and_confusion(spec: OptimizeeSpec, theta, x, y) -> tuple[float, np.ndarray]:
    pred = predictions(spec, theta, x).argmax(axis=1)
    y = np.asarray(y, dtype=np.int64)
    k = spec.num_outputs
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    return float(np.trace(confusion) / confusion.sum()), confusion


# --- datasets ---------------------------------------------------------------

@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split_tag: Split | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.labels) != len(self.inputs):
            raise ValueError("labels length must match inputs")

    def __len__(self):
        return len(self.inputs)

    def take(self, k: int | None) -> "Dataset":
        if k is None or k >= len(self):
            return self
        return Dataset(self.inputs[:k], self.labels[:k], self.split_tag, dict(self.meta))


def split_dataset(train: Dataset, test: Dataset, rng: RngStream
                  ) -> tuple[Dataset, Dataset, Dataset]:
    """Random disjoint halves of `train` (odd sizes favor the first half),
    plus `test` retagged for meta-test evaluation."""
    n = len(train)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    perm = rng.permutation(n)
    cut = (n + 1) // 2
    first, second = perm[:cut], perm[cut:]
    meta_train = Dataset(train.inputs[first], train.labels[first], Split.META_TRAIN, dict(train.meta))
    meta_test_train = Dataset(train.inputs[second], train.labels[second],
                              Split.META_TEST_TRAIN, dict(train.meta))
    meta_test_test = Dataset(test.inputs, test.labels, Split.META_TEST_TEST, dict(test.meta))
    return meta_train, meta_test_train, meta_test_test


@dataclass(frozen=True)
class PolyTaskFamily:
    """Third-degree polynomial regression tasks with additive noise."""
    degree: int = 3
    coeff_range: tuple = (-2.0, 2.0)
    noise_std: float = 0.25
    points_per_task: int = 200
    x_range: tuple = (-2.0, 2.0)

    def __post_init__(self):
        if self.degree != 3:
            raise ValueError("task family is fixed to cubic polynomials")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.points_per_task < 4 * (self.degree + 1):
            raise ValueError("too few points per task")
        for lo, hi in (self.coeff_range, self.x_range):
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError("ranges must be finite nonempty intervals")


def poly_features(x: np.ndarray) -> np.ndarray:
    return np.stack([np.ones_like(x), x, x ** 2, x ** 3], axis=1)


def sample_poly_task(family: PolyTaskFamily, rng: RngStream,
                     split_tag: Split | None = None) -> Dataset:
    """Features (1, x, x^2, x^3) at uniform x; labels are the noisy polynomial."""
    n = family.points_per_task
    x = rng.uniform(*family.x_range, (n,))
    coeffs = rng.uniform(*family.coeff_range, (family.degree + 1,))
    feats = poly_features(x)
    y = feats @ coeffs
    if family.noise_std > 0:
        y = y + rng.normal((n,), std=family.noise_std)
    return Dataset(feats, y, split_tag, meta={"coefficients": coeffs, "x": x})


def make_blobs_dataset(num_classes: int, input_shape, samples: int, rng: RngStream,
                       noise_std: float = 0.12, split_tag: Split | None = None,
                       centers: np.ndarray | None = None) -> Dataset:
    """Gaussian class blobs in [0,1]^d, shaped like image data; a stand-in
    classification task when no real dataset files are available."""
    dim = int(np.prod(input_shape))
    if centers is None:
        centers = rng.uniform(0.15, 0.85, (num_classes, dim))
    labels = np.arange(samples) % num_classes
    labels = labels[rng.permutation(samples)]
    inputs = centers[labels] + rng.normal((samples, dim), std=noise_std)
    inputs = np.clip(inputs, 0.0, 1.0).reshape((samples, *input_shape))
    return Dataset(inputs, labels.astype(np.int64), split_tag,
                   meta={"centers": centers, "num_classes": num_classes})
