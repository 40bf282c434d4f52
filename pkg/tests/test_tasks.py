import numpy as np
import pytest

from loreg import data_io, tasks
from loreg.rng import RngStream

from oracles import ols_fit, ridge_fit


def r2_of(pred, y):
    ss_res = np.sum((y - pred) ** 2)
    ss_tot = np.sum((y - y.mean()) ** 2)
    return 1.0 - ss_res / ss_tot


def test_poly_task_noiseless_evaluation():
    fam = tasks.PolyTaskFamily(noise_std=0.0, coeff_range=(0.999, 1.001))
    ds = tasks.sample_poly_task(fam, RngStream(0))
    coeffs = ds.meta["coefficients"]
    np.testing.assert_allclose(ds.labels, ds.inputs @ coeffs)
    # pure cubic at x = 2 gives 8
    feats = tasks.poly_features(np.array([2.0]))
    assert feats @ np.array([0.0, 0.0, 0.0, 1.0]) == 8.0


def test_noiseless_task_is_exactly_solvable():
    fam = tasks.PolyTaskFamily(noise_std=0.0)
    ds = tasks.sample_poly_task(fam, RngStream(1))
    w = ols_fit(ds.inputs, ds.labels)
    assert r2_of(ds.inputs @ w, ds.labels) >= 1 - 1e-9


def test_ridge_shrinks_parameter_norm():
    fam = tasks.PolyTaskFamily(noise_std=0.5)
    ds = tasks.sample_poly_task(fam, RngStream(2))
    w_ols = ols_fit(ds.inputs, ds.labels)
    w_ridge = ridge_fit(ds.inputs, ds.labels, weight_decay=0.1)
    assert np.linalg.norm(w_ridge) < np.linalg.norm(w_ols)


def test_poly_family_validation():
    with pytest.raises(ValueError):
        tasks.PolyTaskFamily(degree=2)
    with pytest.raises(ValueError):
        tasks.PolyTaskFamily(points_per_task=10)


def test_param_counts():
    mlp = tasks.mlp_spec((28, 28), 10)
    assert tasks.param_count(mlp) == 784 * 20 + 20 + 20 * 10 + 10 == 15910
    assert tasks.param_count(tasks.poly_spec()) == 4


def test_init_deterministic():
    spec = tasks.mlp_spec((28, 28), 10)
    a = tasks.init_optimizee(spec, RngStream(5))
    b = tasks.init_optimizee(spec, RngStream(5))
    assert np.array_equal(a, b)
    # biases land as zeros in the layout positions
    assert np.all(a[784 * 20 : 784 * 20 + 20] == 0.0)


def test_forward_shapes_and_uniform_logit_loss():
    rng = RngStream(6)
    for spec, x in [
        (tasks.mlp_spec((28, 28), 10), rng.uniform(0, 1, (4, 28, 28))),
        (tasks.mlp_spec((28, 28), 10, relu=True), rng.uniform(0, 1, (4, 28, 28))),
        (tasks.cnn_spec((1, 28, 28), 10), rng.uniform(0, 1, (4, 1, 28, 28))),
        (tasks.poly_spec(), tasks.poly_features(rng.uniform(-2, 2, (4,)))),
    ]:
        theta = tasks.init_optimizee(spec, rng)
        out = tasks.predictions(spec, theta, x)
        assert out.shape == (4, spec.num_outputs)

    # zero parameters give uniform logits: cross entropy equals ln(K)
    spec = tasks.mlp_spec((28, 28), 10)
    loss = tasks.loss_value(spec, np.zeros(tasks.param_count(spec)),
                            rng.uniform(0, 1, (8, 28, 28)), rng.integers(0, 10, (8,)))
    assert abs(loss - np.log(10)) <= 1e-9
    assert loss >= 0.0


def test_cnn_head_size_follows_input_shape():
    layout = dict(tasks.param_layout(tasks.cnn_spec((1, 28, 28), 10)))
    assert layout["w"] == (32 * 9 * 9, 10)
    layout = dict(tasks.param_layout(tasks.cnn_spec((3, 32, 32), 10)))
    assert layout["w"] == (32 * 11 * 11, 10)


def test_accuracy_and_confusion_consistent():
    rng = RngStream(7)
    spec = tasks.mlp_spec((4,), 3)
    theta = tasks.init_optimizee(spec, rng)
    x, y = rng.uniform(0, 1, (30, 4)), rng.integers(0, 3, (30,))
    acc, confusion = tasks.accuracy_and_confusion(spec, theta, x, y)
    assert confusion.sum() == 30
    assert acc == np.trace(confusion) / 30


def test_split_sizes_and_partition():
    rng = RngStream(8)
    for n in [1, 2, 3, 99, 100, 101]:
        train = tasks.Dataset(np.arange(n, dtype=float).reshape(n, 1), np.zeros(n))
        test = tasks.Dataset(np.zeros((5, 1)), np.zeros(5))
        a, b, c = tasks.split_dataset(train, test, rng.child(f"n{n}"))
        assert len(a) == (n + 1) // 2 and len(b) == n // 2
        assert c.split_tag == tasks.Split.META_TEST_TEST
        merged = np.sort(np.concatenate([a.inputs[:, 0], b.inputs[:, 0]]))
        np.testing.assert_array_equal(merged, np.arange(n, dtype=float))
        assert len(np.intersect1d(a.inputs[:, 0], b.inputs[:, 0])) == 0


def test_split_partition_property_random_sizes():
    rng = RngStream(9)
    sizes = list(range(1, 40)) + list(rng.integers(40, 10001, (25,)))
    for n in sizes:
        vals = np.arange(int(n), dtype=float).reshape(-1, 1)
        train = tasks.Dataset(vals, np.zeros(int(n)))
        test = tasks.Dataset(np.zeros((1, 1)), np.zeros(1))
        a, b, _ = tasks.split_dataset(train, test, rng.child(f"s{n}"))
        got = np.sort(np.concatenate([a.inputs[:, 0], b.inputs[:, 0]]))
        np.testing.assert_array_equal(got, vals[:, 0])


def test_split_empty_errors():
    empty = tasks.Dataset(np.zeros((0, 1)), np.zeros(0))
    with pytest.raises(ValueError):
        tasks.split_dataset(empty, empty, RngStream(0))


def test_idx_header_shapes():
    img = np.zeros((2, 28, 28), dtype=np.uint8)
    parsed = data_io.parse_idx(data_io.write_idx(img))
    assert parsed.shape == (2, 28, 28)
    labels = np.arange(5, dtype=np.uint8)
    assert data_io.parse_idx(data_io.write_idx(labels), scale=False).shape == (5,)


def test_idx_round_trip_exact():
    rng = RngStream(10)
    arr = rng.integers(0, 256, (3, 7, 5)).astype(np.uint8)
    back = data_io.parse_idx(data_io.write_idx(arr), scale=False)
    np.testing.assert_array_equal(back, arr.astype(np.float64))
    scaled = data_io.parse_idx(data_io.write_idx(arr))
    np.testing.assert_array_equal(scaled, arr.astype(np.float64) / 255.0)


def test_idx_errors():
    img = data_io.write_idx(np.zeros((2, 3), dtype=np.uint8))
    with pytest.raises(data_io.FormatError):
        data_io.parse_idx(b"\x01\x00\x08\x01\x00\x00\x00\x01a")  # bad magic
    with pytest.raises(data_io.FormatError):
        data_io.parse_idx(img[:-1])  # truncated payload
    bad_type = bytes([0, 0, 0x0D, img[3]]) + img[4:]
    with pytest.raises(data_io.FormatError):
        data_io.parse_idx(bad_type)


def test_cifar_round_trip_and_zero_records():
    blob = bytes(2 * data_io.CIFAR_RECORD)
    ds = data_io.parse_cifar_binary(blob)
    assert ds.inputs.shape == (2, 3, 32, 32)
    assert np.all(ds.inputs == 0.0) and list(ds.labels) == [0, 0]

    rng = RngStream(11)
    imgs = rng.integers(0, 256, (4, 3, 32, 32)).astype(np.uint8)
    labels = rng.integers(0, 10, (4,))
    back = data_io.parse_cifar_binary(data_io.write_cifar_binary(imgs, labels))
    np.testing.assert_array_equal(back.labels, labels)
    np.testing.assert_array_equal(back.inputs, imgs.astype(np.float64) / 255.0)


def test_cifar_errors():
    with pytest.raises(data_io.FormatError):
        data_io.parse_cifar_binary(bytes(3072))
    rec = bytearray(data_io.CIFAR_RECORD)
    rec[0] = 10
    with pytest.raises(data_io.FormatError):
        data_io.parse_cifar_binary(bytes(rec))


def test_blobs_dataset_learnable_shape():
    rng = RngStream(12)
    ds = tasks.make_blobs_dataset(10, (28, 28), 64, rng)
    assert ds.inputs.shape == (64, 28, 28)
    assert ds.labels.min() >= 0 and ds.labels.max() < 10
    assert np.all((ds.inputs >= 0) & (ds.inputs <= 1))


def test_idx_loader_rejects_out_of_range_labels(tmp_path):
    sub = tmp_path / "mnist"
    sub.mkdir()
    imgs = np.zeros((2, 28, 28), dtype=np.uint8)
    bad_labels = np.array([3, 12], dtype=np.uint8)
    (sub / "train-images-idx3-ubyte").write_bytes(data_io.write_idx(imgs))
    (sub / "train-labels-idx1-ubyte").write_bytes(data_io.write_idx(bad_labels))
    (sub / "t10k-images-idx3-ubyte").write_bytes(data_io.write_idx(imgs))
    (sub / "t10k-labels-idx1-ubyte").write_bytes(data_io.write_idx(np.zeros(2, dtype=np.uint8)))
    with pytest.raises(data_io.FormatError):
        data_io.load_idx_dataset("mnist", tmp_path)
