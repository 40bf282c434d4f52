import numpy as np
import pytest

from loreg import autodiff as ad
from loreg import optimizer as lopt
from loreg.rng import RngStream


def small_lo(seed=0, **kw):
    kw.setdefault("num_layers", 2)
    kw.setdefault("hidden_size", 6)
    return lopt.CoordinatewiseLSTM(rng=RngStream(seed), **kw)


def test_preprocess_reference_points():
    p = 10.0
    z = lopt.preprocess(np.array([1.0, 0.0, -np.exp(-5.0)]), p)
    np.testing.assert_allclose(z[0], [np.log(1 + 1e-16) / 10, 1.0])
    np.testing.assert_allclose(z[0], [0.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(z[1], [-1.0, 0.0])
    np.testing.assert_allclose(z[2], [-0.5, -1.0], atol=1e-12)


def test_preprocess_continuous_at_threshold():
    p = 10.0
    t = np.exp(-p)
    hi = lopt.preprocess(np.array([t]), p)[0]
    # evaluate the small-gradient branch formula exactly at the threshold
    lo_branch = np.array([-1.0, np.exp(p) * t])
    assert np.max(np.abs(hi - lo_branch)) <= 1e-6


def test_preprocess_finite_for_extreme_inputs():
    z = lopt.preprocess(np.array([1e300, -1e300, 1e-300, 5e-5]), 10.0)
    assert np.all(np.isfinite(z))


def test_step_shapes_and_state():
    lo = small_lo()
    n = 37
    state = lo.initial_state(n)
    upd, new_state = lo.step(np.linspace(-1, 1, n), state)
    assert upd.shape == (n,)
    assert new_state.h.shape == (n, 2, 6) and new_state.c.shape == (n, 2, 6)
    # zero input state stays zero only until the first step
    assert np.any(new_state.h != 0)


def test_zero_output_projection_gives_zero_update():
    lo = small_lo()
    lo.params["w_out"] = np.zeros_like(lo.params["w_out"])
    state = lo.initial_state(5)
    upd, _ = lo.step(np.ones(5), state)
    np.testing.assert_array_equal(upd, np.zeros(5))


def test_coordinatewise_permutation_equivariance():
    lo = small_lo(3)
    rng = RngStream(4)
    n = 23
    g = rng.normal((n,))
    state = lopt.OptState(rng.normal((n, 2, 6)), rng.normal((n, 2, 6)))
    perm = rng.permutation(n)

    upd, new_state = lo.step(g, state)
    upd_p, new_state_p = lo.step(g[perm], lopt.OptState(state.h[perm], state.c[perm]))
    np.testing.assert_array_equal(upd_p, upd[perm])
    np.testing.assert_array_equal(new_state_p.h, new_state.h[perm])
    np.testing.assert_array_equal(new_state_p.c, new_state.c[perm])


def test_statelessness_across_optimizees():
    # with fresh zero state the update depends only on (phi, g)
    lo = small_lo(5)
    g = RngStream(6).normal((11,))
    a, _ = lo.step(g, lo.initial_state(11))
    b, _ = lo.step(g, lo.initial_state(11))
    np.testing.assert_array_equal(a, b)


def test_step_rejects_bad_inputs():
    lo = small_lo()
    with pytest.raises(ad.ShapeMismatchError):
        lo.step(np.ones(4), lo.initial_state(5))
    with pytest.raises(ad.NonFiniteError):
        lo.step(np.array([1.0, np.nan]), lo.initial_state(2))


def test_tape_path_matches_eager_step():
    lo = small_lo(7)
    rng = RngStream(8)
    n = 9
    g = rng.normal((n,))
    state = lo.initial_state(n)
    eager, _ = lo.step(g, state)

    tape = ad.Tape()
    params = {k: tape.leaf(v) for k, v in lo.params.items()}
    node, _ = lo.forward_on_tape(tape, params, g, state.layers())
    np.testing.assert_array_equal(node.value, eager)

    # differentiable-input path produces the same forward values
    tape2 = ad.Tape()
    params2 = {k: tape2.leaf(v) for k, v in lo.params.items()}
    node2, _ = lo.forward_on_tape(tape2, params2, None, state.layers(),
                                  input_node=tape2.leaf(g))
    np.testing.assert_array_equal(node2.value, eager)


def test_update_differentiable_wrt_input():
    lo = small_lo(9, num_layers=1, hidden_size=4)
    rng = RngStream(10)
    g = rng.normal((6,)) * 0.5
    state = lo.initial_state(6)

    tape = ad.Tape()
    x = tape.leaf(g)
    upd, _ = lo.forward_on_tape(tape, dict(lo.params), None, state.layers(), input_node=x)
    loss = ad.sum_sq(upd)
    grads = ad.backward(tape, loss)
    assert x in grads

    from oracles import assert_close, finite_difference_gradient

    def f(v):
        t = ad.Tape()
        xi = t.leaf(v)
        u, _ = lo.forward_on_tape(t, dict(lo.params), None, state.layers(), input_node=xi)
        return float(ad.sum_sq(u).value)

    fd = finite_difference_gradient(f, g.copy())
    assert_close(grads[x], fd, rel=1e-4, what="d update / d input state")


def test_flat_params_round_trip():
    lo = small_lo(11)
    flat = lo.flat_params()
    assert flat.size == lo.num_params
    lo2 = small_lo(12)
    lo2.set_flat(flat)
    for k in lo.params:
        np.testing.assert_array_equal(lo2.params[k], lo.params[k])


def test_serialize_round_trip_bit_exact():
    lo = small_lo(13)
    lo2 = lopt.deserialize_lo(lopt.serialize_lo(lo))
    for k in lo.params:
        assert lo2.params[k].tobytes() == lo.params[k].tobytes()
    assert (lo2.num_layers, lo2.hidden_size, lo2.p, lo2.output_scale) == \
           (lo.num_layers, lo.hidden_size, lo.p, lo.output_scale)

    g = RngStream(14).normal((8,))
    a, _ = lo.step(g, lo.initial_state(8))
    b, _ = lo2.step(g, lo2.initial_state(8))
    assert a.tobytes() == b.tobytes()


def test_checkpoint_corruption_detected():
    blob = lopt.serialize_lo(small_lo(15))
    with pytest.raises(lopt.CheckpointError):
        lopt.deserialize_lo(blob[:-3])
    with pytest.raises(lopt.CheckpointError):
        lopt.deserialize_lo(b"XXXX" + blob[4:])
    with pytest.raises(lopt.CheckpointError):
        lopt.deserialize_lo(blob[:4] + (99).to_bytes(4, "little") + blob[8:])
    corrupted = bytearray(blob)
    corrupted[-1] ^= 0xFF
    with pytest.raises(lopt.CheckpointError):
        lopt.deserialize_lo(bytes(corrupted))


def test_default_configuration_shapes():
    lo = lopt.CoordinatewiseLSTM(rng=RngStream(16))
    assert lo.num_layers == 2 and lo.hidden_size == 20
    assert lo.input_dim == 2 and lo.output_scale == 0.1 and lo.p == 10.0
    state = lo.initial_state(15910)
    upd, new_state = lo.step(np.zeros(15910), state)
    assert upd.shape == (15910,)
    assert new_state.h.shape == (15910, 2, 20)
