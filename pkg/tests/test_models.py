import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apartlab.models import (
    ArchConfig,
    PerturbationSet,
    ResidualNet,
    block_input_grads,
    forward_tapped,
    param_count,
)
from apartlab.tensor import Graph, GraphError, ShapeError, finite_diff_check, forward_op


def _net_loss_fn(net, x, y, wrt):
    """Scalar mean loss as a function of one parameter array (or the input)."""

    def f(leaf):
        g = leaf.graph
        P = {k: (leaf if k == wrt else g.leaf(v)) for k, v in net.params.items()}
        h = leaf if wrt == "x" else g.leaf(x)
        return forward_op("mean", [net.loss(_forward_with(net, h, P), y)])

    return f


def _forward_with(net, h, P):
    a = net.arch
    if a.stem:
        h = net._layer(h, P, "stem")
    for i in range(1, a.blocks + 1):
        b = net._affine_relu(h, P, f"block{i}.pre1")
        b = net._layer(b, P, f"block{i}.lin1")
        b = net._affine_relu(b, P, f"block{i}.pre2")
        b = net._layer(b, P, f"block{i}.lin2")
        h = h + b
    h = net._affine_relu(h, P, "head.pre")
    if a.arch == "micro-conv":
        h = forward_op("avgpool", [h])
    return h @ P["head.weight"] + P["head.bias"]


def _perturb_params(net, seed=0):
    # move scale/shift off their init so every branch of the graph is exercised
    rng = np.random.default_rng(seed)
    for k, v in net.params.items():
        net.params[k] = v + 0.1 * rng.normal(size=v.shape)


@pytest.mark.parametrize("arch, shape", [("micro-preact", (3,)), ("micro-conv", (2, 4, 4))])
def test_full_loss_gradients_match_finite_differences(arch, shape):
    net = ResidualNet(ArchConfig(arch, shape, 3, width=4, blocks=2, init_seed=1))
    _perturb_params(net)
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(3,) + shape)
    y = np.array([0, 1, 2])
    worst = 0.0
    for wrt in ["x"] + list(net.params):
        point = x if wrt == "x" else net.params[wrt]
        check = finite_diff_check(_net_loss_fn(net, x, y, wrt), point)
        assert not check.unstable, wrt
        worst = max(worst, check.max_rel_error)
    assert worst < 1e-4


def test_forward_matches_reference_forward(dense_net):
    x = np.random.default_rng(0).uniform(size=(5, 2))
    g = Graph()
    P = {k: g.leaf(v) for k, v in dense_net.params.items()}
    ref = _forward_with(dense_net, g.leaf(x), P).data
    out, _ = dense_net.forward_tapped(x)
    np.testing.assert_array_equal(out.data, ref)


@pytest.mark.parametrize(
    "cfg",
    [
        ArchConfig("micro-preact", (2,), 2, width=32, blocks=3),
        ArchConfig("micro-preact", (16,), 4, width=16, blocks=2, stem=False),
        ArchConfig("micro-conv", (1, 8, 8), 10, width=8, blocks=2),
        ArchConfig("micro-conv", (4, 5, 5), 3, width=4, blocks=1, stem=False, kernel=5),
    ],
)
def test_param_count_closed_form(cfg):
    assert ResidualNet(cfg).n_params == param_count(cfg)


def test_param_count_by_hand():
    # stem 2*32+32, 3 blocks of 4*32 + 2*(32*32+32), head 2*32 + 32*2 + 2
    assert param_count(ArchConfig("micro-preact", (2,), 2, width=32, blocks=3)) == 96 + 3 * 2240 + 130


def test_arch_validation():
    with pytest.raises(ValueError):
        ArchConfig("resnet18")
    with pytest.raises(ValueError):
        ArchConfig("micro-preact", (1, 2, 2))
    with pytest.raises(ValueError):
        ArchConfig("micro-preact", (3,), 2, width=4, stem=False)
    with pytest.raises(ValueError):
        ArchConfig("micro-conv", (1, 4, 4), kernel=2)


def test_taps_give_one_gradient_per_block_input(dense_net):
    x = np.random.default_rng(0).uniform(size=(4, 2))
    g = Graph()
    out, taps = forward_tapped(dense_net, x, graph=g)
    grads = block_input_grads(dense_net, forward_op("mean", [dense_net.loss(out, np.array([0, 1, 0, 1]))]), taps)
    assert [gr.shape for gr in grads] == [(4, 2), (4, 8), (4, 8)]
    assert set(taps.param_grads) == set(dense_net.params)
    assert dense_net.passes == {"forward": 1, "backward": 1}


def test_block_delta_receives_a_gradient(dense_net):
    x = np.random.default_rng(0).uniform(size=(3, 2))
    y = np.array([0, 1, 1])
    g = Graph()
    d = g.leaf(np.zeros((3, 8)), requires_grad=True)
    out, taps = dense_net.forward_tapped(x, PerturbationSet(None, {2: d}), graph=g)
    block_input_grads(dense_net, forward_op("mean", [dense_net.loss(out, y)]), taps)
    assert d.grad.shape == (3, 8)
    assert not np.allclose(d.grad, 0.0)


def test_delta_injection_changes_loss_and_zero_delta_does_not(dense_net):
    x = np.random.default_rng(0).uniform(size=(3, 2))
    base, _ = dense_net.forward_tapped(x)
    zero, _ = dense_net.forward_tapped(x, PerturbationSet(np.zeros((3, 2)), {1: np.zeros((3, 8))}))
    moved, _ = dense_net.forward_tapped(x, PerturbationSet(None, {1: np.ones((3, 8))}))
    np.testing.assert_array_equal(base.data, zero.data)
    assert not np.allclose(base.data, moved.data)


def test_bad_delta_shapes_and_sites_are_rejected(dense_net):
    x = np.zeros((2, 2))
    with pytest.raises(ShapeError):
        dense_net.forward_tapped(x, PerturbationSet(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        dense_net.forward_tapped(x, PerturbationSet(None, {3: np.zeros((2, 8))}))
    with pytest.raises(ShapeError):
        dense_net.forward_tapped(np.zeros((2, 5)))


def test_stemless_net_has_no_block_one_site():
    net = ResidualNet(ArchConfig("micro-preact", (4,), 2, width=4, blocks=3, stem=False))
    assert net.delta_blocks == [2, 3]
    assert ResidualNet(ArchConfig("micro-preact", (4,), 2, width=4, blocks=3)).delta_blocks == [1, 2, 3]


def test_stale_taps_are_rejected(dense_net):
    g = Graph()
    out, taps = dense_net.forward_tapped(np.zeros((1, 2)), graph=g)
    loss = forward_op("mean", [dense_net.loss(out, np.array([0]))])
    g.reset()
    with pytest.raises(GraphError):
        block_input_grads(dense_net, loss, taps)


def test_flat_params_round_trip(dense_net):
    theta = dense_net.flat_params()
    other = ResidualNet(ArchConfig("micro-preact", (2,), 2, width=8, blocks=2, init_seed=99))
    other.set_flat_params(theta)
    assert other.flat_params().tobytes() == theta.tobytes()
    with pytest.raises(ShapeError):
        other.set_flat_params(theta[:-1])


def test_identical_seeds_give_identical_init():
    a = ResidualNet(ArchConfig("micro-conv", (1, 4, 4), 3, width=4, blocks=1, init_seed=5))
    b = ResidualNet(ArchConfig("micro-conv", (1, 4, 4), 3, width=4, blocks=1, init_seed=5))
    assert a.flat_params().tobytes() == b.flat_params().tobytes()


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(2, 5), st.booleans())
def test_param_count_matches_for_any_dense_shape(width, blocks, classes, stem):
    d = 3 if stem else width
    cfg = ArchConfig("micro-preact", (d,), classes, width=width, blocks=blocks, stem=stem)
    assert ResidualNet(cfg).n_params == param_count(cfg)


def _head(net, h):
    pre = np.maximum(h * net.params["head.pre.scale"] + net.params["head.pre.shift"], 0.0)
    return pre @ net.params["head.weight"] + net.params["head.bias"]


def test_disabled_block_reduces_to_the_head():
    net = ResidualNet(ArchConfig("micro-preact", (4,), 3, width=4, blocks=1, stem=False, init_seed=2))
    for k in ("block1.lin1.weight", "block1.lin1.bias", "block1.lin2.weight", "block1.lin2.bias"):
        net.params[k] = np.zeros_like(net.params[k])
    net.params["head.pre.shift"] = np.full(4, 0.5)  # keep every head unit active
    x = np.random.default_rng(0).uniform(size=(5, 4))
    delta = 1e-3 * np.random.default_rng(1).normal(size=x.shape)
    base, _ = net.forward_tapped(x)
    moved, _ = net.forward_tapped(x, PerturbationSet(delta))
    np.testing.assert_allclose(base.data, _head(net, x), atol=1e-14)
    # all units active: the head is affine, so its linearisation is exact
    jac = net.params["head.pre.scale"][:, None] * net.params["head.weight"]
    np.testing.assert_allclose(moved.data - base.data, delta @ jac, atol=1e-14)


def test_taps_start_with_the_model_input_without_a_stem():
    net = ResidualNet(ArchConfig("micro-preact", (4,), 2, width=4, blocks=2, stem=False))
    x = np.random.default_rng(0).uniform(size=(3, 4))
    _, taps = net.forward_tapped(x)
    assert np.array_equal(taps.inputs[0].data, x)
    assert len(taps.inputs) == 3


def test_linear_block_gradient_is_the_weight():
    from conftest import linear_model
    from apartlab.attacks import input_grad

    w = np.array([0.5, -1.5, 2.0])
    _, grad = input_grad(linear_model(w), np.ones((4, 3)), None)
    np.testing.assert_allclose(grad, np.broadcast_to(w / 4, (4, 3)))  # batch mean


def _tail(net, h, first, P):
    """Blocks ``first..n`` and the head, starting from block input ``h``."""
    for i in range(first, net.arch.blocks + 1):
        b = net._affine_relu(h, P, f"block{i}.pre1")
        b = net._layer(b, P, f"block{i}.lin1")
        b = net._affine_relu(b, P, f"block{i}.pre2")
        h = h + net._layer(b, P, f"block{i}.lin2")
    return net._affine_relu(h, P, "head.pre") @ P["head.weight"] + P["head.bias"]


def test_block_input_grads_match_per_block_differences():
    net = ResidualNet(ArchConfig("micro-preact", (3,), 3, width=5, blocks=3, init_seed=6))
    _perturb_params(net, 1)
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(4, 3))
    y = np.array([0, 1, 2, 0])
    g = Graph()
    out, taps = net.forward_tapped(x, graph=g)
    grads = block_input_grads(net, forward_op("mean", [net.loss(out, y)]), taps)
    assert len(grads) == net.arch.blocks + 1

    def loss_from(i, h):
        gg = Graph()
        P = {k: gg.leaf(v) for k, v in net.params.items()}
        return float(forward_op("mean", [net.loss(_tail(net, gg.leaf(h), i, P), y)]).data)

    step = 1e-5
    for i in range(1, net.arch.blocks + 1):
        point = taps.inputs[i].data
        num = np.zeros_like(point)
        for j in np.ndindex(point.shape):
            up, dn = point.copy(), point.copy()
            up[j] += step
            dn[j] -= step
            num[j] = (loss_from(i, up) - loss_from(i, dn)) / (2 * step)
        rel = np.max(np.abs(grads[i] - num) / np.maximum(1.0, np.abs(grads[i])))
        assert rel < 1e-4, i


def test_removing_the_skip_changes_the_output(dense_net):
    x = np.random.default_rng(0).uniform(size=(5, 2))
    g = Graph()
    P = {k: g.leaf(v) for k, v in dense_net.params.items()}
    h = dense_net._layer(g.leaf(x), P, "stem")
    for i in (1, 2):
        b = dense_net._affine_relu(h, P, f"block{i}.pre1")
        b = dense_net._layer(b, P, f"block{i}.lin1")
        b = dense_net._affine_relu(b, P, f"block{i}.pre2")
        h = dense_net._layer(b, P, f"block{i}.lin2")  # no "h +"
    h = dense_net._affine_relu(h, P, "head.pre")
    no_skip = (h @ P["head.weight"] + P["head.bias"]).data
    out, _ = dense_net.forward_tapped(x)
    assert not np.allclose(out.data, no_skip)
