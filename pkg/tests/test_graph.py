import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradutil import assert_gradients, kink_margin
from r2upp.blocks import block_forward
from r2upp.errors import ConfigError, ShapeError
from r2upp.graph import (
    ArchitectureConfig,
    NestedUNet,
    NodeId,
    build_plan,
    count_parameters,
    dump_plan,
    ensemble,
    forward,
    head,
    node_in_channels,
    parameter_table,
    prune,
)
from r2upp.metrics import total_loss
from r2upp.tensor import Parameter, Tensor, concat_channels, maxpool_2x2, trace_ops, upsample_2x

X = NodeId


def small(depth=4, **kw):
    kw.setdefault("filters", tuple(2 + 2 * i for i in range(depth + 1)))
    return ArchitectureConfig(depth=depth, **kw)


def jitter(model, seed=0):
    """Random values for every parameter and running buffer, so nothing is trivially zero."""
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data[...] = rng.normal(scale=0.4, size=p.data.shape)
    for name, b in model.buffers.items():
        b[...] = rng.uniform(0.5, 1.5, size=b.shape) if name.endswith("var") else rng.normal(scale=0.2, size=b.shape)
    return model


# ---------------------------------------------------------------------------
# plan structure
# ---------------------------------------------------------------------------

def test_dense_grid_has_15_nodes():
    plan = build_plan(ArchitectureConfig())
    assert len(plan.nodes) == 15
    assert set(plan.nodes) == {X(m, n) for m in range(5) for n in range(5) if m + n <= 4}


def test_x02_inputs():
    inputs = build_plan(ArchitectureConfig()).inputs[X(0, 2)]
    assert [(e.kind, e.src) for e in inputs] == [("same", X(0, 0)), ("same", X(0, 1)), ("up", X(1, 1))]


def test_x30_input_is_pooled_x20():
    inputs = build_plan(ArchitectureConfig()).inputs[X(3, 0)]
    assert [(e.kind, e.src) for e in inputs] == [("pool", X(2, 0))]
    assert [e.kind for e in build_plan(ArchitectureConfig()).inputs[X(0, 0)]] == ["input"]


@pytest.mark.parametrize("depth", [1, 2, 3, 4])
def test_in_degree_and_topological_order(depth):
    plan = build_plan(small(depth))
    pos = {v: i for i, v in enumerate(plan.nodes)}
    for v in plan.nodes:
        edges = plan.inputs[v]
        for e in edges:
            if e.src is not None:
                assert pos[e.src] < pos[v]
        if v.n > 0:
            assert sum(e.kind == "same" for e in edges) == v.n
            assert sum(e.kind == "up" for e in edges) == 1
            assert edges[-1] == ("up", X(v.m + 1, v.n - 1))
        else:
            assert len(edges) == 1
    assert plan.heads == tuple(X(0, q) for q in range(1, depth + 1))


def test_simple_style_is_u_shape():
    plan = build_plan(small(4, skip_style="simple"))
    assert set(plan.nodes) == {X(m, 0) for m in range(5)} | {X(m, 4 - m) for m in range(4)}
    assert [(e.kind, e.src) for e in plan.inputs[X(1, 3)]] == [("same", X(1, 0)), ("up", X(2, 2))]
    assert plan.heads == (X(0, 4),)


def test_config_validation():
    with pytest.raises(ConfigError):
        ArchitectureConfig(depth=4, filters=(1, 2, 3))
    with pytest.raises(ConfigError):
        ArchitectureConfig(filters=(32, 64, 0, 256, 512))
    with pytest.raises(ConfigError):
        ArchitectureConfig(skip_style="sparse")


def test_config_dict_round_trip():
    cfg = small(3, block_kind="plain", t=3, num_classes=2, deep_supervision=False)
    assert ArchitectureConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ArchitectureConfig.from_dict({**cfg.to_dict(), "bogus": 1})


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_heads_at_patch_size_96():
    model = NestedUNet(small(4), seed=1)
    res = model.forward(np.random.default_rng(0).uniform(size=(2, 1, 96, 96)))
    assert sorted(res.heads) == [1, 2, 3, 4]
    for q in range(1, 5):
        assert res.heads[q].shape == (2, 1, 96, 96)


def test_node_shapes_follow_level():
    cfg = small(3, filters=(3, 5, 7, 9))
    model = NestedUNet(cfg, seed=2)
    res = model.forward(np.zeros((1, 1, 32, 24)))
    for v, a in res.nodes.items():
        assert a.shape == (1, cfg.filters[v.m], 32 >> v.m, 24 >> v.m)


def test_indivisible_input_fails_before_compute():
    model = NestedUNet(small(3), seed=0)
    with trace_ops() as ops, pytest.raises(ShapeError, match="divisible"):
        model.forward(np.zeros((1, 1, 20, 16)))
    assert ops == []
    with pytest.raises(ShapeError, match="channels"):
        model.forward(np.zeros((1, 2, 16, 16)))


def test_batch_equivariance():
    model = jitter(NestedUNet(small(3), seed=3), 3)
    x = np.random.default_rng(1).uniform(size=(4, 1, 16, 16))
    perm = np.array([2, 0, 3, 1])
    a = model.forward(x).heads
    b = model.forward(x[perm]).heads
    for q in a:
        np.testing.assert_array_equal(a[q].data[perm], b[q].data)


@pytest.mark.parametrize("kind", ["rrcl", "plain"])
@pytest.mark.parametrize("train", [False, True])
def test_two_level_hand_wired(kind, train):
    model = jitter(NestedUNet(small(1, filters=(3, 4), block_kind=kind), seed=4), 4)
    twin = jitter(NestedUNet(small(1, filters=(3, 4), block_kind=kind), seed=4), 4)
    x = np.random.default_rng(2).uniform(size=(1, 1, 16, 16))

    def blk(v, inp):
        return block_forward(inp, twin.block_params[v], twin.block_buffers[v], twin.specs[v], train)

    x00 = blk(X(0, 0), Tensor(x))
    x10 = blk(X(1, 0), maxpool_2x2(x00)[0])
    up = twin.up_params[X(0, 1)]
    x01 = blk(X(0, 1), concat_channels([x00, upsample_2x(x10, up["w"], up["b"])]))
    expected = head(x01, twin.head_params[1]).data

    got = model.forward(x, train=train).heads[1].data
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-10)


def test_head_zero_weights_give_half(rng):
    params = {"w": Tensor(np.zeros((1, 4, 1, 1))), "b": Tensor(np.zeros(1))}
    out = head(Tensor(rng.normal(size=(2, 4, 5, 5))), params, 1)
    assert out.shape == (2, 1, 5, 5)
    assert np.all(out.data == 0.5)


def test_head_gradients(rng):
    x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    params = {"w": Parameter("w", rng.normal(size=(2, 3, 1, 1))), "b": Parameter("b", rng.normal(size=2))}
    y = rng.uniform(size=(2, 2, 4, 4))
    from r2upp.tensor import _result

    def loss():
        h = head(x, params, 2)
        return _result(np.array((h.data * y).sum()), [h], lambda g: [g * y], "wsum")

    assert_gradients(loss, [("x", x), ("w", params["w"]), ("b", params["b"])])


def test_ensemble_examples(rng):
    a = rng.uniform(size=(1, 1, 3, 3))
    np.testing.assert_array_equal(ensemble([Tensor(a), Tensor(a)]).data, a)
    m = ensemble([Tensor(np.full((1, 1, 2, 2), 0.2)), Tensor(np.full((1, 1, 2, 2), 0.6))]).data
    np.testing.assert_allclose(m, 0.4, rtol=0, atol=1e-15)
    hs = [rng.uniform(size=(2, 1, 4, 4)) for _ in range(4)]
    np.testing.assert_allclose(ensemble([Tensor(h) for h in hs]).data, sum(hs) / 4, rtol=0, atol=1e-15)
    with pytest.raises(ShapeError):
        ensemble([])


# ---------------------------------------------------------------------------
# pruning
# ---------------------------------------------------------------------------

def test_prune_q1_nodes():
    sub = prune(build_plan(ArchitectureConfig()), 1)
    assert set(sub.nodes) == {X(0, 0), X(1, 0), X(0, 1)}
    assert sub.heads == (X(0, 1),)


def test_prune_full_depth_keeps_all_nodes():
    plan = build_plan(ArchitectureConfig())
    sub = prune(plan, 4)
    assert sub.nodes == plan.nodes and sub.heads == (X(0, 4),)


def test_prune_is_prefix_and_rejects_bad_q():
    plan = build_plan(ArchitectureConfig())
    for q in range(1, 5):
        sub = prune(plan, q)
        assert plan.nodes[: len(sub.nodes)] == sub.nodes
        assert set(sub.nodes) == {v for v in plan.nodes if v.m + v.n <= q}
    for q in (0, 5):
        with pytest.raises(ConfigError):
            prune(plan, q)
    with pytest.raises(ConfigError):
        prune(build_plan(small(4, skip_style="simple")), 2)


@pytest.mark.parametrize("train", [False, True])
def test_pruned_forward_equals_full_head(train):
    cfg = small(4)
    x = np.random.default_rng(5).uniform(size=(2, 1, 32, 32))
    full = jitter(NestedUNet(cfg, seed=6), 6).forward(x, train=train)
    for q in range(1, 5):
        model = jitter(NestedUNet(cfg, seed=6), 6)
        sub = forward(prune(model.plan, q), model, x, train=train)
        assert list(sub.heads) == [q]
        np.testing.assert_array_equal(sub.heads[q].data, full.heads[q].data)


def test_depth1_prediction_runs_pruned_subgraph():
    model = NestedUNet(small(4), seed=0)
    x = np.zeros((1, 1, 16, 16))
    with trace_ops() as ops:
        model.predict(x, 1)
    # three blocks, one pool, one up, one concat, one head
    assert ops.count("maxpool_2x2") == 1 and ops.count("upsample_2x") == 1
    with trace_ops() as all_ops:
        model.predict(x, "ensemble")
    assert all_ops.count("maxpool_2x2") == 4 and all_ops.count("upsample_2x") == 10


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(
    st.integers(1, 4),
    st.sampled_from(["plain", "rrcl"]),
    st.sampled_from(["dense", "simple"]),
    st.integers(1, 3),
    st.integers(1, 2),
    st.integers(1, 2),
)
def test_count_matches_instantiated_model(depth, kind, style, t, classes, in_ch):
    cfg = ArchitectureConfig(
        depth=depth,
        filters=tuple(2 + i for i in range(depth + 1)),
        block_kind=kind,
        skip_style=style,
        t=t,
        num_classes=classes,
        in_channels=in_ch,
    )
    assert NestedUNet(cfg).num_parameters() == count_parameters(cfg)
    assert sum(c for _, c in parameter_table(cfg)) == count_parameters(cfg)


def test_count_t_invariant_from_two():
    base = dict(block_kind="rrcl", skip_style="dense")
    assert count_parameters(ArchitectureConfig(t=2, **base)) == count_parameters(ArchitectureConfig(t=3, **base))
    assert count_parameters(ArchitectureConfig(t=1, **base)) < count_parameters(ArchitectureConfig(t=2, **base))


def test_node_in_channels():
    cfg = ArchitectureConfig()
    plan = build_plan(cfg)
    assert node_in_channels(cfg, plan, X(0, 0)) == 1
    assert node_in_channels(cfg, plan, X(2, 0)) == 64
    assert node_in_channels(cfg, plan, X(0, 3)) == 4 * 32
    assert node_in_channels(cfg, plan, X(1, 2)) == 3 * 64


# ---------------------------------------------------------------------------
# graph dump
# ---------------------------------------------------------------------------

def test_dump_plan_golden():
    text = dump_plan(build_plan(small(2)))
    assert text == (
        "X(0,0) <- [input]\n"
        "X(1,0) <- [pool X(0,0)]\n"
        "X(0,1) <- [X(0,0), up X(1,0)] head\n"
        "X(2,0) <- [pool X(1,0)]\n"
        "X(1,1) <- [X(1,0), up X(2,0)]\n"
        "X(0,2) <- [X(0,0), X(0,1), up X(1,1)] head\n"
    )
    assert len(dump_plan(build_plan(ArchitectureConfig())).splitlines()) == 15


# ---------------------------------------------------------------------------
# end-to-end gradient check
# ---------------------------------------------------------------------------

def smooth_instance(cfg, margin=1e-4):
    """First seed whose forward pass keeps every relu input and pool gap >= margin away from a kink."""
    for seed in range(7, 40):
        model = jitter(NestedUNet(cfg, seed=seed), seed)
        rng = np.random.default_rng(seed + 1)
        x = Tensor(rng.uniform(size=(1, 1, 16, 16)), requires_grad=True)
        y = (rng.uniform(size=(1, 1, 16, 16)) > 0.5).astype(float)
        if kink_margin(lambda: model.forward(x, train=True)) >= margin:
            return model, x, y
    raise AssertionError("no kink-free instance found")


@pytest.mark.parametrize("kind", ["rrcl", "plain"])
def test_end_to_end_gradients(kind):
    cfg = ArchitectureConfig(depth=2, filters=(4, 8, 12), block_kind=kind, t=2)
    model, x, y = smooth_instance(cfg)

    def loss():
        res = model.forward(x, train=True)
        return total_loss(y, [res.heads[q] for q in sorted(res.heads)], [1.0, 1.0])

    # train-mode forward moves running buffers; they do not enter the loss
    named = [("input", x)] + [(p.name, p) for p in model.parameters()]
    report = assert_gradients(loss, named, max_entries=8)
    assert len(report) == len(named)
