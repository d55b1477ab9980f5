import numpy as np
import pytest

from fedgkd import nn
from fedgkd.nn import ForwardCache, MlpSpec, NonFiniteError, SgdHyper


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((4,))
    with pytest.raises(ValueError):
        MlpSpec((4, 0, 2))
    with pytest.raises(ValueError):
        MlpSpec((4, 3), activation="sigmoid")


def test_param_dim_formula():
    # widths [2,4,4]: 2*4+4 + 4*4+4 = 32
    assert MlpSpec((2, 4, 4)).param_dim == 32
    assert MlpSpec((3, 5, 7, 2)).param_dim == (3 * 5 + 5) + (5 * 7 + 7) + (7 * 2 + 2)


def test_init_deterministic():
    spec = MlpSpec((2, 4, 4))
    a = nn.init_params(spec, seed=42)
    b = nn.init_params(spec, seed=42)
    assert np.array_equal(a, b)
    assert a.shape == (32,)


def test_init_seeds_differ():
    spec = MlpSpec((2, 4, 4))
    a = nn.init_params(spec, seed=1)
    b = nn.init_params(spec, seed=2)
    assert np.any(a != b)


def test_init_biases_zero_weights_bounded():
    spec = MlpSpec((3, 5, 2))
    params = nn.init_params(spec, seed=0)
    for (wsl, bsl, (nin, nout)) in spec.layer_slices():
        assert np.all(params[bsl] == 0.0)
        limit = np.sqrt(6.0 / (nin + nout))
        assert np.all(np.abs(params[wsl]) <= limit)


def test_forward_zero_params_zero_logits():
    spec = MlpSpec((3, 4, 2))
    logits, _ = nn.forward(np.zeros(spec.param_dim), spec, np.random.default_rng(0).normal(size=(5, 3)))
    assert np.array_equal(logits, np.zeros((5, 2)))


def test_forward_single_layer_hand_matmul():
    # single linear layer [2,2]: input (1,0) picks out the weights attached to
    # feature 0, plus the bias
    spec = MlpSpec((2, 2))
    params = np.array([1.0, 2.0, 3.0, 4.0, 0.5, -0.5])  # W=[[1,2],[3,4]], b=[0.5,-0.5]
    logits, _ = nn.forward(params, spec, np.array([[1.0, 0.0]]))
    assert np.allclose(logits, [[1.5, 1.5]], atol=0, rtol=0)
    logits, _ = nn.forward(params, spec, np.array([[0.0, 1.0]]))
    assert np.allclose(logits, [[3.5, 3.5]], atol=0, rtol=0)


def test_forward_batch_rows_independent():
    spec = MlpSpec((2, 6, 3))
    params = nn.init_params(spec, seed=3)
    xs = np.random.default_rng(1).normal(size=(7, 2))
    batch_logits, _ = nn.forward(params, spec, xs)
    for i in range(7):
        row_logits, _ = nn.forward(params, spec, xs[i : i + 1])
        # same rows in the same order; BLAS may reassociate sums across batch shapes
        assert np.allclose(batch_logits[i], row_logits[0], rtol=0, atol=1e-12)


def test_forward_shape_errors():
    spec = MlpSpec((2, 3))
    params = nn.init_params(spec, seed=0)
    with pytest.raises(ValueError, match="expected"):
        nn.forward(params, spec, np.zeros((4, 3)))
    with pytest.raises(ValueError, match="parameter vector"):
        nn.forward(params[:-1], spec, np.zeros((4, 2)))


def test_softmax_symmetry_and_sum():
    out = nn.softmax(np.array([0.0, 0.0]))
    assert np.allclose(out, [0.5, 0.5], atol=1e-15)
    rng = np.random.default_rng(5)
    for _ in range(200):
        z = rng.normal(scale=10, size=rng.integers(2, 9))
        probs = nn.softmax(z)
        assert abs(probs.sum() - 1.0) <= 1e-12
        assert np.all(probs >= 0)


def test_softmax_shift_invariance():
    z = np.array([1.3, -0.2, 4.0])
    assert np.allclose(nn.softmax(z), nn.softmax(z + 123.456), atol=1e-12)
    assert np.argmax(nn.softmax(z)) == np.argmax(nn.softmax(z - 77.7))


def test_softmax_closed_form():
    probs = nn.softmax(np.log(np.array([1.0, 2.0, 3.0])))
    assert np.allclose(probs, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


def test_softmax_rejects_nonfinite():
    with pytest.raises(NonFiniteError):
        nn.softmax(np.array([1.0, np.nan]))
    with pytest.raises(NonFiniteError):
        nn.softmax(np.array([np.inf, 0.0]))


def test_backprop_zero_upstream():
    spec = MlpSpec((2, 5, 3))
    params = nn.init_params(spec, seed=9)
    xs = np.random.default_rng(2).normal(size=(4, 2))
    logits, cache = nn.forward(params, spec, xs)
    grad = nn.backprop(cache, params, spec, np.zeros_like(logits))
    assert np.array_equal(grad, np.zeros_like(params))


def test_backprop_shape_error():
    spec = MlpSpec((2, 3))
    params = nn.init_params(spec, seed=0)
    logits, cache = nn.forward(params, spec, np.zeros((4, 2)))
    with pytest.raises(ValueError):
        nn.backprop(cache, params, spec, np.zeros((3, 3)))


def _ce_loss_and_dlogits(params, spec, xs, ys):
    logits, cache = nn.forward(params, spec, xs)
    probs = nn.softmax(logits)
    n = len(ys)
    loss = -np.mean(np.log(probs[np.arange(n), ys]))
    d = probs.copy()
    d[np.arange(n), ys] -= 1.0
    return loss, d / n, cache


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_backprop_matches_finite_differences(activation):
    # central-difference oracle, step 1e-5, at random points
    spec = MlpSpec((3, 6, 4), activation=activation)
    step = 1e-5
    for point in range(20):
        rng = np.random.default_rng(1000 + point)
        params = 0.5 * rng.standard_normal(spec.param_dim)
        xs = rng.normal(size=(5, 3))
        ys = rng.integers(0, 4, size=5)
        if activation == "relu":
            _, cache = nn.forward(params, spec, xs)
            if min(np.abs(z).min() for z in cache.pre_activations[:-1]) < 10 * step:
                continue  # kink-adjacent draw; the quotient would cross the corner
        _, dlogits, cache = _ce_loss_and_dlogits(params, spec, xs, ys)
        analytic = nn.backprop(cache, params, spec, dlogits)
        numeric = np.empty_like(analytic)
        for j in range(params.size):
            up = params.copy()
            up[j] += step
            down = params.copy()
            down[j] -= step
            numeric[j] = (_ce_loss_and_dlogits(up, spec, xs, ys)[0] - _ce_loss_and_dlogits(down, spec, xs, ys)[0]) / (
                2 * step
            )
        rel = np.abs(analytic - numeric) / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        assert rel.max() < 1e-4


def test_backprop_batch_sum_linearity():
    spec = MlpSpec((2, 4, 3))
    params = nn.init_params(spec, seed=11)
    rng = np.random.default_rng(12)
    xs = rng.normal(size=(6, 2))
    dlogits = rng.normal(size=(6, 3))
    _, cache = nn.forward(params, spec, xs)
    whole = nn.backprop(cache, params, spec, dlogits)
    parts = np.zeros_like(whole)
    for i in range(6):
        _, cache_i = nn.forward(params, spec, xs[i : i + 1])
        parts += nn.backprop(cache_i, params, spec, dlogits[i : i + 1])
    assert np.allclose(whole, parts, atol=1e-12)


def test_sgd_fixed_point():
    hyper = SgdHyper(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
    params = np.array([1.0, -2.0])
    new_params, vel = nn.sgd_step(params, np.zeros(2), None, hyper)
    assert np.array_equal(new_params, params)
    assert np.array_equal(vel, np.zeros(2))


def test_sgd_plain_step():
    hyper = SgdHyper(learning_rate=0.5, momentum=0.0, weight_decay=0.0)
    params = np.array([1.0, 2.0])
    grad = np.array([0.2, -0.4])
    new_params, _ = nn.sgd_step(params, grad, None, hyper)
    assert np.array_equal(new_params, params - 0.5 * grad)


def test_sgd_momentum_recurrence():
    # hand recurrence: v1=1, w1=0.9; v2=1.9, w2=0.71
    hyper = SgdHyper(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
    w = np.array([1.0])
    g = np.array([1.0])
    w, v = nn.sgd_step(w, g, None, hyper)
    assert np.allclose(v, [1.0], atol=0)
    assert np.allclose(w, [0.9], atol=1e-15)
    w, v = nn.sgd_step(w, g, v, hyper)
    assert np.allclose(v, [1.9], atol=1e-15)
    assert np.allclose(w, [0.71], atol=1e-15)


def test_sgd_weight_decay_in_velocity():
    hyper = SgdHyper(learning_rate=1.0, momentum=0.0, weight_decay=0.1)
    w = np.array([2.0])
    new_w, v = nn.sgd_step(w, np.array([0.0]), None, hyper)
    assert np.allclose(v, [0.2], atol=1e-15)
    assert np.allclose(new_w, [1.8], atol=1e-15)


def test_sgd_pure_inputs_untouched():
    hyper = SgdHyper()
    w = np.array([1.0, 2.0])
    g = np.array([0.5, 0.5])
    v = np.array([0.1, 0.1])
    w0, g0, v0 = w.copy(), g.copy(), v.copy()
    nn.sgd_step(w, g, v, hyper)
    assert np.array_equal(w, w0) and np.array_equal(g, g0) and np.array_equal(v, v0)


def test_sgd_hyper_validation():
    with pytest.raises(ValueError):
        SgdHyper(learning_rate=0.0)
    with pytest.raises(ValueError):
        SgdHyper(momentum=1.0)
    with pytest.raises(ValueError):
        SgdHyper(weight_decay=-1e-9)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    spec = MlpSpec((2, 4, 4))
    params = nn.init_params(spec, seed=7)
    path = tmp_path / "model.fgkd"
    nn.save_checkpoint(path, spec, params)
    widths, loaded = nn.load_checkpoint(path)
    assert widths == (2, 4, 4)
    # values exact at f32 precision, and re-saving reproduces identical bytes
    assert np.array_equal(loaded, params.astype(np.float32).astype(np.float64))
    first = path.read_bytes()
    nn.save_checkpoint(path, spec, loaded)
    assert path.read_bytes() == first


def test_checkpoint_header_contents(tmp_path):
    spec = MlpSpec((3, 2))
    params = nn.init_params(spec, seed=1)
    path = tmp_path / "model.fgkd"
    nn.save_checkpoint(path, spec, params)
    blob = path.read_bytes()
    assert blob[:4] == b"FGKD"
    assert int.from_bytes(blob[4:6], "little") == 1
    assert int.from_bytes(blob[6:8], "little") == 2  # layer count
    assert int.from_bytes(blob[8:12], "little") == 3
    assert int.from_bytes(blob[12:16], "little") == 2
    assert len(blob) == 16 + 4 * spec.param_dim


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.fgkd"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        nn.load_checkpoint(path)
    spec = MlpSpec((2, 2))
    nn.save_checkpoint(path, spec, np.zeros(spec.param_dim))
    blob = path.read_bytes()
    path.write_bytes(blob[:-2])  # truncated payload
    with pytest.raises(ValueError, match="bytes"):
        nn.load_checkpoint(path)
