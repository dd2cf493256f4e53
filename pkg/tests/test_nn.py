import numpy as np
import pytest

from skintemp import nn
from skintemp.errors import ShapeMismatchError


def naive_conv2d(x, w, b):
    """Six-nested-loop convolution oracle (stride 1, same zero padding)."""
    n, h, wd, cin = x.shape
    k, _, _, cout = w.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.zeros((n, h, wd, cout))
    for bi in range(n):
        for i in range(h):
            for j in range(wd):
                for co in range(cout):
                    acc = 0.0
                    for ki in range(k):
                        for kj in range(k):
                            for ci in range(cin):
                                acc += xp[bi, i + ki, j + kj, ci] * w[ki, kj, ci, co]
                    out[bi, i, j, co] = acc + b[co]
    return out


def check_layer_gradients(layer, x, rng, samples=60, eps=1e-5, input_tol=1e-4):
    """Finite-difference check of parameter and input gradients for one layer."""
    y = layer.forward(x)
    weights = rng.normal(size=y.shape)

    def loss_fn():
        return float(np.sum(layer.forward(x) * weights))

    def grad_fn():
        nn.zero_grads(layer.params())
        layer.forward(x)
        layer.backward(weights)
        return {p.name: p.grad.copy() for p in layer.params()}

    if layer.params():
        err = nn.finite_difference_check(loss_fn, grad_fn, layer.params(), rng,
                                         eps=eps, samples_per_tensor=samples)
        assert err < 1e-4, f"param gradient error {err}"

    nn.zero_grads(layer.params())
    layer.forward(x)
    grad_x = layer.backward(weights)
    flat = x.reshape(-1)
    for idx in rng.choice(flat.size, size=min(25, flat.size), replace=False):
        old = flat[idx]
        flat[idx] = old + eps
        lp = loss_fn()
        flat[idx] = old - eps
        lm = loss_fn()
        flat[idx] = old
        numeric = (lp - lm) / (2 * eps)
        denom = abs(numeric) + abs(grad_x.reshape(-1)[idx])
        if denom > 1e-8:
            assert abs(numeric - grad_x.reshape(-1)[idx]) / denom < input_tol


# -- forward semantics --


def test_relu_definition():
    layer = nn.ReLU()
    assert np.array_equal(layer.forward(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])


def test_identity_1x1_conv_passthrough():
    rng = np.random.default_rng(0)
    layer = nn.Conv2d(1, 1, 1, rng, "c")
    layer.w.value[:] = 1.0
    layer.b.value[:] = 0.0
    x = rng.uniform(-1, 1, (2, 5, 5, 1))
    assert np.allclose(layer.forward(x), x, atol=1e-15)


def test_conv2d_matches_naive_oracle():
    rng = np.random.default_rng(1)
    layer = nn.Conv2d(1, 1, 3, rng, "c")
    x = rng.normal(size=(1, 5, 5, 1))
    want = naive_conv2d(x, layer.w.value, layer.b.value)
    assert np.abs(layer.forward(x) - want).max() < 1e-12


def test_conv2d_multichannel_matches_naive_oracle():
    rng = np.random.default_rng(2)
    layer = nn.Conv2d(3, 4, 3, rng, "c")
    x = rng.normal(size=(2, 6, 7, 3))
    want = naive_conv2d(x, layer.w.value, layer.b.value)
    assert np.abs(layer.forward(x) - want).max() < 1e-12


def test_shape_error_names_expected_and_actual():
    rng = np.random.default_rng(3)
    layer = nn.Conv2d(3, 4, 3, rng, "c")
    with pytest.raises(ShapeMismatchError, match=r"3.*(4, 6, 6, 2)"):
        layer.forward(np.zeros((4, 6, 6, 2)))


def test_backward_before_forward_is_state_error():
    rng = np.random.default_rng(4)
    with pytest.raises(RuntimeError, match="before forward"):
        nn.Dense(3, 2, rng, "d").backward(np.zeros((1, 2)))


def test_avgpool2d_semantics():
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
    out = nn.AvgPool2d(2).forward(x)
    assert out.shape == (1, 2, 2, 1)
    assert out[0, 0, 0, 0] == pytest.approx((0 + 1 + 4 + 5) / 4)


def test_adaptive_pool_output_grid():
    rng = np.random.default_rng(5)
    out = nn.AdaptiveAvgPool2d(4).forward(rng.normal(size=(2, 37, 37, 3)))
    assert out.shape == (2, 4, 4, 3)
    # windows tile the input: global mean is preserved under equal weighting
    full = nn.AdaptiveAvgPool2d(1).forward(rng.normal(size=(1, 8, 8, 1)))
    assert full.shape == (1, 1, 1, 1)


# -- gradients, every layer kind --


def test_gradients_every_layer_kind():
    rng = np.random.default_rng(6)
    cases = [
        (nn.Conv2d(3, 4, 3, rng, "c33"), rng.normal(size=(2, 8, 8, 3))),
        (nn.Conv2d(4, 5, 1, rng, "c11"), rng.normal(size=(2, 6, 6, 4))),
        (nn.Conv1d(2, 3, 3, rng, "c1d"), rng.normal(size=(2, 12, 2))),
        (nn.Dense(7, 3, rng, "fc"), rng.normal(size=(4, 7))),
        (nn.ReLU(), rng.normal(size=(3, 10)) + 0.05),
        (nn.AvgPool2d(2), rng.normal(size=(2, 7, 7, 3))),
        (nn.AdaptiveAvgPool2d(4), rng.normal(size=(1, 37, 37, 2))),
        (nn.AvgPool1d(3), rng.normal(size=(2, 10, 2))),
        (nn.GlobalAvgPool2d(), rng.normal(size=(2, 4, 4, 3))),
        (nn.Flatten(), rng.normal(size=(2, 3, 3, 2))),
    ]
    for layer, x in cases:
        check_layer_gradients(layer, x, rng)


def test_tiny_network_gradcheck_every_parameter():
    # random tiny network, under 1k params: check every single entry at eps 1e-5
    rng = np.random.default_rng(7)
    net = nn.Sequential(
        [
            nn.Conv2d(2, 3, 3, rng, "c1"),
            nn.ReLU(),
            nn.AvgPool2d(2),
            nn.Flatten(),
            nn.Dense(3 * 3 * 3, 8, rng, "fc1"),
            nn.ReLU(),
            nn.Dense(8, 1, rng, "fc2"),
        ]
    )
    assert sum(p.value.size for p in net.params()) <= 1000
    x = rng.normal(size=(3, 6, 6, 2))
    target = rng.normal(size=(3, 1))

    def loss_fn():
        return nn.mse_loss(net.forward(x), target)[0]

    def grad_fn():
        nn.zero_grads(net.params())
        _, g = nn.mse_loss(net.forward(x), target)
        net.backward(g)
        return {p.name: p.grad.copy() for p in net.params()}

    err = nn.finite_difference_check(loss_fn, grad_fn, net.params(), rng,
                                     eps=1e-5, samples_per_tensor=10**9)
    assert err < 1e-4


# -- loss --


def test_mse_closed_form_gradient():
    loss, grad = nn.mse_loss(np.array([3.0]), np.array([1.0]))
    assert loss == pytest.approx(4.0)
    assert grad[0] == pytest.approx(4.0)  # 2 * (3 - 1) / 1


def test_mse_zero_at_minimum():
    p = np.array([1.0, 2.0, 3.0])
    loss, grad = nn.mse_loss(p, p.copy())
    assert loss == 0.0
    assert np.all(grad == 0.0)


def test_mse_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        nn.mse_loss(np.zeros(3), np.zeros(4))


# -- optimizer --


def test_sgd_zero_lr_no_change():
    rng = np.random.default_rng(8)
    layer = nn.Dense(3, 2, rng, "d")
    before = layer.w.value.copy()
    layer.w.grad[:] = rng.normal(size=layer.w.grad.shape)
    nn.sgd_step(layer.params(), 0.0)
    assert np.array_equal(layer.w.value, before)
    assert np.all(layer.w.grad == 0.0)  # gradients zeroed


def test_sgd_single_step_arithmetic():
    p = nn.Param("p", np.array([1.0]))
    p.grad[:] = 2.0
    nn.sgd_step([p], 0.1)
    assert p.value[0] == pytest.approx(0.8)


def test_sgd_converges_on_quadratic_bowl():
    p = nn.Param("p", np.array([0.0]))
    for _ in range(50):
        p.grad[:] = 2.0 * (p.value - 3.0)  # d/dp (p - 3)^2
        nn.sgd_step([p], 0.4)
    assert abs(p.value[0] - 3.0) < 1e-6


# -- concat gradient splitting (used by the fusion models) --


def test_concat_backward_splits_exactly():
    # two-branch network joined by concatenation: each branch's gradient must
    # equal backpropagating the matching slice of the downstream gradient
    rng = np.random.default_rng(9)
    branch_a = nn.Dense(3, 5, rng, "a")
    branch_b = nn.Dense(2, 4, rng, "b")
    head = nn.Dense(9, 1, rng, "head")
    xa = rng.normal(size=(6, 3))
    xb = rng.normal(size=(6, 2))

    combined = np.concatenate([branch_a.forward(xa), branch_b.forward(xb)], axis=1)
    head.forward(combined)
    grad_combined = head.backward(np.ones((6, 1)))
    ga_in = branch_a.backward(grad_combined[:, :5])
    gb_in = branch_b.backward(grad_combined[:, 5:])

    # oracle: isolated branches driven by the same slices
    iso_a = nn.Dense(3, 5, rng, "ia")
    iso_a.w.value[...] = branch_a.w.value
    iso_a.b.value[...] = branch_a.b.value
    iso_a.forward(xa)
    ga_iso = iso_a.backward(grad_combined[:, :5])
    assert np.array_equal(ga_in, ga_iso)
    assert np.array_equal(branch_a.w.grad, iso_a.w.grad)

    iso_b = nn.Dense(2, 4, rng, "ib")
    iso_b.w.value[...] = branch_b.w.value
    iso_b.b.value[...] = branch_b.b.value
    iso_b.forward(xb)
    gb_iso = iso_b.backward(grad_combined[:, 5:])
    assert np.array_equal(gb_in, gb_iso)
    assert np.array_equal(branch_b.w.grad, iso_b.w.grad)


def test_forward_backward_values_stay_finite():
    rng = np.random.default_rng(21)
    net = nn.Sequential(
        [
            nn.Conv2d(3, 4, 3, rng, "c1"),
            nn.ReLU(),
            nn.AvgPool2d(2),
            nn.Conv2d(4, 6, 3, rng, "c2"),
            nn.ReLU(),
            nn.GlobalAvgPool2d(),
            nn.Dense(6, 1, rng, "fc"),
        ]
    )
    for _ in range(5):
        x = rng.uniform(-1, 1, (4, 12, 12, 3))
        y = net.forward(x)
        assert np.all(np.isfinite(y))
        gx = net.backward(rng.normal(size=y.shape))
        assert np.all(np.isfinite(gx))
        for p in net.params():
            assert np.all(np.isfinite(p.grad)) and np.all(np.isfinite(p.value))
        nn.zero_grads(net.params())


# -- determinism --


def test_training_determinism_bitwise():
    def run():
        rng = np.random.default_rng(10)
        net = nn.Sequential([nn.Dense(4, 6, rng, "a"), nn.ReLU(), nn.Dense(6, 1, rng, "b")])
        data_rng = np.random.default_rng(11)
        x = data_rng.normal(size=(16, 4))
        y = data_rng.normal(size=(16, 1))
        for _ in range(30):
            _, g = nn.mse_loss(net.forward(x), y)
            net.backward(g)
            nn.sgd_step(net.params(), 1e-2)
        return {p.name: p.value.copy() for p in net.params()}

    first, second = run(), run()
    for name in first:
        assert np.array_equal(first[name], second[name])


# -- parameter/gradient buffers and checkpoints --


def test_param_gradient_buffer_shape_matches():
    rng = np.random.default_rng(12)
    for p in nn.Conv2d(2, 3, 3, rng, "c").params():
        assert p.grad.shape == p.value.shape


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    tensors = {
        "layer.w": rng.normal(size=(3, 3, 2, 4)),
        "layer.b": rng.normal(size=(4,)),
        "head.w": rng.normal(size=(10, 1)),
    }
    path = tmp_path / "model.stck"
    nn.save_checkpoint(path, "demo", {"alpha": 1}, 42, tensors, extras={"offset": 1.5})
    header, back = nn.load_checkpoint(path)
    assert header["model_id"] == "demo"
    assert header["seed"] == 42
    assert header["extras"]["offset"] == 1.5
    names = [t["name"] for t in header["tensors"]]
    assert names == sorted(tensors)
    for name, arr in tensors.items():
        assert np.array_equal(back[name], arr)


def test_checkpoint_manifest_offsets_are_byte_accurate(tmp_path):
    rng = np.random.default_rng(14)
    tensors = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(5,))}
    path = tmp_path / "m.stck"
    nn.save_checkpoint(path, "demo", {}, 0, tensors)
    raw = path.read_bytes()
    import json as _json
    import struct as _struct

    header_len = _struct.unpack("<Q", raw[8:16])[0]
    header = _json.loads(raw[16 : 16 + header_len])
    payload = raw[16 + header_len :]
    for entry in header["tensors"]:
        arr = np.frombuffer(payload, dtype="<f8", count=entry["count"], offset=entry["offset"])
        assert np.array_equal(arr.reshape(entry["shape"]), tensors[entry["name"]])


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="gone.stck"):
        nn.load_checkpoint(tmp_path / "gone.stck")
