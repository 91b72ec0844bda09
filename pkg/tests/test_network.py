import math

import numpy as np
import pytest
from oracles import numeric_grad, path_graph_adjacency, rel_err

from gcnn.errors import ConfigError, FormatError, InvalidArgument, NumericalFailure
from gcnn.graph import Graph, build_grid_graph
from gcnn.network import (
    NetworkConfig,
    build_network,
    load_checkpoint,
    parse_architecture,
    save_checkpoint,
    sgd_step,
    softmax_cross_entropy,
    train,
    write_metrics,
)


def path3():
    return Graph(path_graph_adjacency(3))


def small_net(arch="C3 P C4 R F", rows=5, cols=6, m=8, seed=0, **kw):
    cfg = NetworkConfig(architecture=arch, tracked_weights=m, seed=seed, **kw)
    return build_network(cfg, build_grid_graph(rows, cols))


# ------------------------------------------------------------- construction


def test_parse_architecture():
    assert parse_architecture("C20 P C50 P R F") == [
        ("C", 20), ("P", None), ("C", 50), ("P", None), ("R", None), ("F", None),
    ]
    assert parse_architecture("C3PRF16F") == [("C", 3), ("P", None), ("R", None), ("F", 16), ("F", None)]
    for bad in ["", "X", "C", "C0 F"]:
        with pytest.raises(ConfigError):
            parse_architecture(bad)


def test_default_architecture_layers():
    net = build_network(NetworkConfig(), build_grid_graph(28, 28))
    assert [layer.kind for layer in net.layers] == ["conv", "pool", "conv", "pool", "relu", "fc"]
    conv0, pool0, conv1, pool1, _, fc = net.layers
    assert (conv0.in_ch, conv0.out_ch, conv0.basis.n, conv0.interp.m) == (1, 20, 784, 60)
    assert (conv1.in_ch, conv1.out_ch, conv1.basis.n) == (20, 50, pool0.hierarchy.coarse_n)
    assert conv1.interp.m == min(60, pool0.hierarchy.coarse_n)
    assert fc.fan_in == 50 * pool1.hierarchy.coarse_n and fc.fan_out == 10


def test_fc_only_is_logistic_regression():
    net = build_network(NetworkConfig(architecture="F"), build_grid_graph(3, 3))
    assert [layer.kind for layer in net.layers] == ["fc"]
    assert net.param_count() == 9 * 10 + 10


def test_parameter_count_on_path():
    net = build_network(NetworkConfig(architecture="C1 F", tracked_weights=3), path3())
    assert net.param_count() == 1 * 1 * 3 + 1 + 3 * 10 + 10


def test_relu_after_conv_switch():
    net = small_net("C2 P C2 P F", relu_after_conv=True)
    assert [layer.kind for layer in net.layers] == ["conv", "relu", "pool", "conv", "relu", "pool", "fc"]


def test_config_errors():
    g = build_grid_graph(4, 4)
    for arch in ["C2 P", "F C2 F", "F P F"]:
        with pytest.raises(ConfigError):
            build_network(NetworkConfig(architecture=arch), g)
    with pytest.raises(ConfigError):
        build_network(NetworkConfig(architecture="F", gradient="other"), g)
    with pytest.raises(ConfigError):
        build_network(NetworkConfig(architecture="C2 F", tracked_weights=0), g)
    with pytest.raises(ConfigError):
        # three pooling stages collapse a 2x2 grid to one vertex
        build_network(NetworkConfig(architecture="P P P F", pool_levels=1), build_grid_graph(2, 2))


def test_initialisation_is_seeded():
    a, b, c = small_net(seed=3), small_net(seed=3), small_net(seed=4)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
    assert not np.array_equal(a.params["conv0.k_hat"], c.params["conv0.k_hat"])
    assert all(np.all(v == 0) for k, v in a.params.items() if k.endswith(".bias") or k.endswith(".b"))


def test_config_round_trip():
    cfg = NetworkConfig(architecture="C2 F", lr=0.5)
    assert NetworkConfig.from_dict({**cfg.to_dict(), "unknown": 1}) == cfg


# ------------------------------------------------------------- forward


def test_zero_input_gives_uniform_loss():
    net = build_network(NetworkConfig(), build_grid_graph(28, 28))
    loss, probs, _ = net.forward(np.zeros((1, 784)), np.array([3]))
    assert loss == pytest.approx(math.log(10), abs=1e-15)
    np.testing.assert_allclose(probs, 0.1, atol=1e-15)


def test_untrained_loss_near_chance():
    net = small_net()
    rng = np.random.default_rng(0)
    loss, _, _ = net.forward(rng.random((200, 30)), rng.integers(0, 10, 200))
    assert abs(loss - math.log(10)) < 0.3


def test_forward_matches_hand_rolled_oracle():
    net = build_network(NetworkConfig(architecture="C2 R F", tracked_weights=3, n_classes=4), path3())
    rng = np.random.default_rng(5)
    for name in net.params:
        net.params[name] = rng.standard_normal(net.params[name].shape)
    f = rng.standard_normal((2, 3))
    labels = np.array([1, 3])

    # path eigenvectors written out by hand; with M = N the filters are k_hat
    U = np.column_stack([
        np.ones(3) / math.sqrt(3),
        np.array([1.0, 0.0, -1.0]) / math.sqrt(2),
        np.array([-1.0, 2.0, -1.0]) / math.sqrt(6),
    ])
    k_hat = net.params["conv0.k_hat"]
    bias = net.params["conv0.bias"]
    W, b = net.params["fc2.W"], net.params["fc2.b"]
    losses = []
    for s in range(2):
        hidden = []
        for o in range(2):
            y = U @ np.diag(k_hat[0, o]) @ U.T @ f[s] + bias[o]
            hidden.extend(max(v, 0.0) for v in y)
        logits = [sum(hidden[j] * W[j, c] for j in range(6)) + b[c] for c in range(4)]
        top = max(logits)
        log_z = top + math.log(sum(math.exp(z - top) for z in logits))
        losses.append(log_z - logits[labels[s]])
    loss, _, _ = net.forward(f, labels)
    assert loss == pytest.approx(sum(losses) / 2, abs=1e-10)


def test_nonfinite_activation_names_layer():
    net = small_net()
    net.params["conv2.k_hat"][:] = np.inf
    with pytest.raises(NumericalFailure) as info:
        net.forward(np.ones((1, 30)), np.array([0]))
    assert info.value.layer in (2, 3)


def test_forward_rejects_wrong_signal_size():
    with pytest.raises(InvalidArgument):
        small_net().forward(np.zeros((1, 31)))


def test_fused_pool_matches_full_maps():
    for variant in ("proposed", "naive"):
        net = small_net(gradient=variant)
        rng = np.random.default_rng(2)
        x, labels = rng.random((4, 30)), rng.integers(0, 10, 4)
        l1, p1, a1 = net.forward(x, labels)
        l2, p2, a2 = net.forward(x, labels, keep_maps=True)
        assert a1[0][0] is None and a2[0][0].shape == (4, 3, 30)
        assert abs(l1 - l2) < 1e-13
        g1 = net.backward(a1, labels, input_grad=True)
        g2 = net.backward(a2, labels, input_grad=True)
        for name in g1:
            assert rel_err(g1[name], g2[name]) < 1e-12


# ------------------------------------------------------------- softmax


def test_softmax_properties():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((20, 10)) * 10
    labels = rng.integers(0, 10, 20)
    loss, probs, _ = softmax_cross_entropy(logits, labels)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    assert loss >= 0
    _, shifted, _ = softmax_cross_entropy(logits + 123.4, labels)
    np.testing.assert_allclose(shifted, probs, atol=1e-12)


def test_softmax_gradient_finite_differences():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((5, 10))
    labels = rng.integers(0, 10, 5)
    _, _, d = softmax_cross_entropy(logits, labels)
    num = numeric_grad(lambda z: softmax_cross_entropy(z, labels)[0], logits)
    assert rel_err(d, num) < 1e-8


def test_saturated_softmax_has_vanishing_gradients():
    net = build_network(NetworkConfig(architecture="F"), build_grid_graph(2, 2))
    labels = np.array([0, 4, 9])
    # sample s is the indicator of vertex s, so row s of W is its logit vector
    x = np.eye(3, 4)
    net.params["fc0.W"][:] = 0.0
    net.params["fc0.W"][np.arange(3), labels] = 30.0
    _, _, acts = net.forward(x, labels)
    grads = net.backward(acts, labels)
    assert max(np.abs(g).max() for g in grads.values()) < 1e-9


# ------------------------------------------------------------- backward


@pytest.mark.parametrize("arch", ["C3 P C4 R F", "C2 R P F", "C2 P F7 R F"])
def test_end_to_end_gradients_match_finite_differences(arch):
    net = small_net(arch, m=6, seed=1)
    rng = np.random.default_rng(9)
    x, labels = rng.random((3, 30)), rng.integers(0, 10, 3)
    for name in net.params:
        net.params[name] = net.params[name] + 0.1 * rng.standard_normal(net.params[name].shape)
    _, _, acts = net.forward(x, labels)
    grads = net.backward(acts, labels, input_grad=True)

    def loss_with(name):
        def fn(v):
            saved = net.params[name]
            net.params[name] = v
            try:
                return net.forward(x, labels)[0]
            finally:
                net.params[name] = saved
        return fn

    for name, value in net.params.items():
        num = numeric_grad(loss_with(name), value.copy())
        assert rel_err(grads[name], num) < 1e-5, name
    num = numeric_grad(lambda v: net.forward(v, labels)[0], x)
    assert rel_err(grads["input"][:, 0], num) < 1e-5


def test_relu_backward_masks_negative_preactivations():
    net = build_network(NetworkConfig(architecture="R F"), build_grid_graph(2, 3))
    x = np.array([[-1.0, 2.0, -0.5, 3.0, 0.25, -4.0]])
    _, _, acts = net.forward(x, np.array([2]))
    grads = net.backward(acts, np.array([2]), input_grad=True)
    d = grads["input"][0, 0]
    assert np.all(d[x[0] < 0] == 0.0)
    assert np.all(d[x[0] > 0] != 0.0)


def test_backward_rejects_foreign_activations():
    net = small_net()
    with pytest.raises(InvalidArgument):
        net.backward([], np.array([0]))


# ------------------------------------------------------------- optimiser


def test_sgd_plain_step():
    p = {"w": np.array([1.0, -2.0])}
    sgd_step(p, {"w": np.array([0.5, 0.5])}, {}, lr=0.1, momentum=0.0)
    np.testing.assert_allclose(p["w"], [0.95, -2.05])


def test_sgd_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    sgd_step(p, {"w": np.zeros(2)}, {}, lr=0.1, momentum=0.9)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_sgd_momentum_recurrence():
    p, v = {"w": np.array([0.0])}, {}
    g = {"w": np.array([1.0])}
    sgd_step(p, g, v, lr=0.1, momentum=0.9)
    assert v["w"][0] == pytest.approx(-0.1) and p["w"][0] == pytest.approx(-0.1)
    sgd_step(p, g, v, lr=0.1, momentum=0.9)
    assert v["w"][0] == pytest.approx(-0.19) and p["w"][0] == pytest.approx(-0.29)


def test_sgd_rejects_nonfinite_gradient():
    with pytest.raises(NumericalFailure):
        sgd_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])}, {}, 0.1, 0.9)


# ------------------------------------------------------------- training


def tiny_problem(count=10, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((count, 30)), np.arange(count) % 10


def test_overfits_ten_samples(tmp_path):
    x, y = tiny_problem()
    net = small_net("C3 P C4 R F", m=8)
    cfg = NetworkConfig(architecture="C3 P C4 R F", tracked_weights=8, epochs=200, batch_size=10, lr=0.05)
    result = train(net, x, y, x, y, cfg, checkpoint_path=tmp_path / "best.ckpt")
    assert len(result.history) == 200
    assert net.accuracy(x, y) == 1.0
    assert result.best_accuracy == 1.0
    assert (tmp_path / "best.ckpt").exists()


def test_first_epochs_mostly_decrease_loss():
    rng = np.random.default_rng(1)
    x, y = rng.random((300, 30)), rng.integers(0, 3, 300)
    x[np.arange(300), y] += 2.0
    net = small_net()
    cfg = NetworkConfig(architecture="C3 P C4 R F", tracked_weights=8, epochs=5)
    losses = [m.train_loss for m in train(net, x, y, x, y, cfg).history]
    assert len(losses) == 5
    assert sum(b <= a for a, b in zip(losses, losses[1:])) >= 3
    assert losses[-1] < losses[0]


def test_training_is_deterministic(tmp_path):
    x, y = tiny_problem(40)
    runs = []
    for i in range(2):
        net = small_net()
        cfg = NetworkConfig(architecture="C3 P C4 R F", tracked_weights=8, epochs=3, batch_size=8)
        hist = train(net, x, y, x, y, cfg, record_time=False).history
        write_metrics(tmp_path / f"m{i}.csv", hist)
        runs.append((tmp_path / f"m{i}.csv").read_bytes())
    assert runs[0] == runs[1]
    assert runs[0].splitlines()[0] == b"epoch,train_loss,test_accuracy,seconds"


def test_training_failure_is_reported():
    x, y = tiny_problem()
    net = small_net()
    cfg = NetworkConfig(architecture="C3 P C4 R F", tracked_weights=8, epochs=3, lr=1e300)
    result = train(net, x * 1e200, y, x, y, cfg)
    assert result.failure is not None
    assert len(result.history) < 3


# ------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    net = small_net()
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, net.params)
    again = load_checkpoint(path)
    assert set(again) == set(net.params)
    for name in again:
        np.testing.assert_array_equal(again[name], net.params[name])
    other = small_net(seed=5)
    other.load_params(again)
    x = np.random.default_rng(0).random((3, 30))
    np.testing.assert_array_equal(other.forward(x)[1], net.forward(x)[1])


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "one.ckpt"
    save_checkpoint(path, {"a": np.array([[1.0, 2.0, 3.0]])})
    raw = path.read_bytes()
    assert raw[:4] == b"GCNN"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 1 and raw[12:13] == b"a"
    assert int.from_bytes(raw[13:21], "little") == 2
    assert np.frombuffer(raw[37:], dtype="<f8").tolist() == [1.0, 2.0, 3.0]


def test_truncated_checkpoint_reports_offset(tmp_path):
    net = small_net()
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, net.params)
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(FormatError) as info:
        load_checkpoint(path)
    assert 8 <= info.value.offset < len(raw)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_for_other_network_is_rejected(tmp_path):
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, small_net("C2 F").params)
    with pytest.raises(ConfigError):
        small_net().load_params(load_checkpoint(path))
