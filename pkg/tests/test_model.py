import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from colnet.errors import ConfigError, ConsistencyError, ShapeError
from colnet.model import (
    FNN, HIGHWAY, PER_LAYER, backward, candidate_hidden, forward, forward_rows,
    highway_gate, init_for_graph, init_params, layer_forward, load_params, param_count, pool,
    relational_context, replay_rows, save_params,
)
from colnet.numerics import relu, softmax
from colnet.relgraph import MULTILABEL, RelGraph, SplitMask

from conftest import random_graph


def path_graph(n, m=2, seed=0):
    """Directed path 0 -> 1 -> ... -> n-1 under one relation."""
    rng = np.random.default_rng(seed)
    edges = np.array([[k, k + 1, 0] for k in range(n - 1)])
    Y = np.eye(2)[np.arange(n) % 2]
    return RelGraph([f"p{k}" for k in range(n)], rng.normal(size=(n, m)), ["next"], edges,
                    ["a", "b"], Y, np.ones(n, dtype=bool))


def with_features(g, X):
    return RelGraph(g.node_ids, X, g.relations, g.edges, g.label_names, g.Y, g.labeled,
                    g.head_kind)


# --- pooling ---------------------------------------------------------------------


def test_context_two_point_mean():
    g = RelGraph(["a", "b", "c"], np.zeros((3, 1)), ["r"], np.array([[1, 0, 0], [2, 0, 0]]),
                 ["x"], np.ones((3, 1)), np.ones(3, dtype=bool))
    H = np.array([[9.0, 9.0], [1.0, 3.0], [3.0, 5.0]])
    assert np.array_equal(relational_context(H, g, 0, 0, "mean"), [2.0, 4.0])
    assert np.array_equal(relational_context(H, g, 0, 0, "sum"), [4.0, 8.0])
    assert np.array_equal(relational_context(H, g, 0, 0, "max"), [3.0, 5.0])


@pytest.mark.parametrize("pooling", ["mean", "sum", "max"])
def test_context_single_neighbor_is_identity(pooling):
    g = RelGraph(["a", "b"], np.zeros((2, 1)), ["r"], np.array([[1, 0, 0]]), ["x"],
                 np.ones((2, 1)), np.ones(2, dtype=bool))
    H = np.array([[0.0, 0.0], [-1.5, 2.5]])
    assert np.array_equal(relational_context(H, g, 0, 0, pooling), H[1])
    C, _ = pool(H, g, 0, pooling)
    assert np.array_equal(C[0], H[1])


@pytest.mark.parametrize("pooling", ["mean", "sum", "max"])
def test_context_empty_is_zero(pooling):
    g = RelGraph(["a", "b"], np.zeros((2, 1)), ["r"], np.array([[1, 0, 0]]), ["x"],
                 np.ones((2, 1)), np.ones(2, dtype=bool))
    H = np.array([[-7.0, 3.0], [-1.5, -2.5]])
    assert np.array_equal(relational_context(H, g, 1, 0, pooling), [0.0, 0.0])
    assert np.array_equal(pool(H, g, 0, pooling)[0][1], [0.0, 0.0])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_context_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 10, 2, 1, p=0.4)
    H = rng.normal(size=(10, 4))
    for pooling in ("mean", "sum", "max"):
        for r in range(2):
            C, _ = pool(H, g, r, pooling)
            for i in range(10):
                nb = [s for s, d, rr in g.edges if d == i and rr == r]
                if not nb:
                    expect = np.zeros(4)
                else:
                    stack = [H[j] for j in nb]
                    expect = {"mean": sum(stack) / len(stack), "sum": sum(stack),
                              "max": np.max(stack, axis=0)}[pooling]
                assert np.allclose(C[i], expect, rtol=0, atol=1e-12)
                assert np.allclose(relational_context(H, g, i, r, pooling), expect, atol=1e-12)


# --- layer pieces -----------------------------------------------------------------


def rand_set(rng, k, cols, R):
    return {"W": rng.normal(size=(k, cols)), "b": rng.normal(size=k),
            "V": [rng.normal(size=(k, cols)) for _ in range(R)]}


def test_candidate_without_relations_is_feedforward():
    rng = np.random.default_rng(0)
    p = rand_set(rng, 3, 4, 2)
    p["V"] = [np.zeros((3, 4)), np.zeros((3, 4))]
    h, c = rng.normal(size=4), [rng.normal(size=4), rng.normal(size=4)]
    assert np.allclose(candidate_hidden(h, c, p, 2.0), relu(p["b"] + p["W"] @ h), atol=1e-14)


def test_candidate_bias_only():
    p = {"W": np.zeros((2, 3)), "b": np.array([-1.0, 2.0]), "V": [np.zeros((2, 3))]}
    assert np.array_equal(candidate_hidden(np.ones(3), [np.ones(3)], p, 1.0), [0.0, 2.0])


def test_candidate_matches_scalar_loop():
    rng = np.random.default_rng(1)
    K, C, R, z = 4, 3, 2, 2.0
    p = rand_set(rng, K, C, R)
    h, ctx = rng.normal(size=C), [rng.normal(size=C) for _ in range(R)]
    expect = []
    for k in range(K):
        s = p["b"][k]
        for j in range(C):
            s += p["W"][k, j] * h[j]
            for r in range(R):
                s += p["V"][r][k, j] * ctx[r][j] / z
        expect.append(max(0.0, s))
    assert np.allclose(candidate_hidden(h, ctx, p, z), expect, atol=1e-12)


def test_candidate_shape_errors():
    p = {"W": np.zeros((2, 3)), "b": np.zeros(2), "V": [np.zeros((2, 3))]}
    with pytest.raises(ShapeError):
        candidate_hidden(np.ones(4), [np.ones(3)], p)
    with pytest.raises(ShapeError):
        candidate_hidden(np.ones(3), [np.ones(2)], p)
    with pytest.raises(ShapeError):
        candidate_hidden(np.ones(3), [], p)


def test_gate_zero_params_half():
    p = {"W": np.zeros((3, 3)), "b": np.zeros(3), "V": [np.zeros((3, 3))]}
    a1, a2 = highway_gate(np.ones(3), [np.ones(3)], p)
    assert np.array_equal(a1, [0.5] * 3) and np.array_equal(a2, [0.5] * 3)


def test_gate_strong_carry_bias():
    p = {"W": np.zeros((3, 3)), "b": np.full(3, -5.0), "V": []}
    a1, _ = highway_gate(np.ones(3), [], p)
    assert np.allclose(a1, 1.0 / (1.0 + math.exp(5.0)), atol=1e-15)
    assert np.allclose(a1, 0.00669, atol=1e-5)


@settings(max_examples=30)
@given(st.integers(0, 2**31))
def test_gate_complement_exact(seed):
    rng = np.random.default_rng(seed)
    p = rand_set(rng, 5, 5, 2)
    a1, a2 = highway_gate(rng.normal(size=(7, 5)) * 4, [rng.normal(size=(7, 5))] * 2, p)
    assert np.all(a1 + a2 == 1.0)
    # pre-activations of moderate size stay strictly inside (0, 1) in double precision
    a1, _ = highway_gate(rng.normal(size=(7, 5)) * 0.5, [rng.normal(size=(7, 5)) * 0.5] * 2, p)
    assert np.all((a1 > 0) & (a1 < 1))


def forced_gate(K, R, bias):
    return {"W": np.zeros((K, K)), "b": np.full(K, bias), "V": [np.zeros((K, K))] * R}


def test_layer_forced_transform_and_carry():
    rng = np.random.default_rng(2)
    g = random_graph(rng, 6, 2, 1)
    H = rng.normal(size=(6, 4))
    layer = rand_set(rng, 4, 4, 2)
    cand = layer_forward(H, g, layer, None, 2.0)
    assert np.array_equal(layer_forward(H, g, layer, forced_gate(4, 2, 1e3), 2.0), cand)
    assert np.array_equal(layer_forward(H, g, layer, forced_gate(4, 2, -1e3), 2.0), H)


def test_layer_highway_width_mismatch():
    rng = np.random.default_rng(3)
    g = random_graph(rng, 4, 1, 1)
    layer, gate = rand_set(rng, 3, 4, 1), rand_set(rng, 3, 4, 1)
    with pytest.raises(ConfigError):
        layer_forward(rng.normal(size=(4, 4)), g, layer, gate)


def test_layer_path_graph_oracle():
    g = path_graph(3, m=2, seed=4)
    rng = np.random.default_rng(5)
    layer, gate = rand_set(rng, 2, 2, 1), rand_set(rng, 2, 2, 1)
    H = g.features
    out = layer_forward(H, g, layer, gate, z=1.0)
    for i in range(3):
        c = H[i - 1] if i > 0 else np.zeros(2)
        h = np.zeros(2)
        for k in range(2):
            s = layer["b"][k] + sum(layer["W"][k, j] * H[i, j] + layer["V"][0][k, j] * c[j]
                                    for j in range(2))
            t = gate["b"][k] + sum(gate["W"][k, j] * H[i, j] + gate["V"][0][k, j] * c[j]
                                   for j in range(2))
            a = 1.0 / (1.0 + math.exp(-t))
            h[k] = a * max(0.0, s) + (1 - a) * H[i, k]
        assert np.allclose(out[i], h, atol=1e-12)


# --- forward -------------------------------------------------------------------------


def test_forward_shapes_and_simplex():
    rng = np.random.default_rng(6)
    g = random_graph(rng, 8, 2, 3)
    params = init_for_graph(g, seed=0, depth=3, width=4)
    probs, cache = forward(g, params)
    assert probs.shape == (8, 3)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    assert np.array_equal(cache.U[0], g.features)
    assert len(cache.H) == params.depth + 2
    assert all(np.all((a > 0) & (a < 1)) for a in cache.gate[2:])
    assert cache.masks == {}


def test_forward_multilabel_independent_probs():
    rng = np.random.default_rng(7)
    g = random_graph(rng, 8, 1, 3, head_kind=MULTILABEL)
    probs, _ = forward(g, init_for_graph(g, seed=1, depth=2, width=3))
    assert np.all((probs > 0) & (probs < 1))


def test_forward_depth_zero_is_linear_head():
    rng = np.random.default_rng(8)
    g = random_graph(rng, 7, 2, 3)
    params = init_for_graph(g, seed=2, depth=0, width=5)
    H1 = layer_forward(g.features, g, params.layer(1), None, params.z, params.pooling)
    expect = softmax(H1 @ params.arrays["out.W"].T + params.arrays["out.b"])
    assert np.array_equal(forward(g, params)[0], expect)


def test_forward_no_relations_matches_stripped_graph():
    rng = np.random.default_rng(9)
    g = random_graph(rng, 7, 2, 3)
    bare = RelGraph(g.node_ids, g.features, [], np.zeros((0, 3)), g.label_names, g.Y,
                    g.labeled)
    p1 = init_for_graph(bare, seed=4, depth=3, width=4)
    p2 = init_for_graph(g.without_edges(), seed=4, depth=3, width=4)
    assert np.array_equal(forward(bare, p1)[0], forward(g.without_edges(), p2)[0])


def test_infer_ignores_rng_and_is_repeatable():
    rng = np.random.default_rng(10)
    g = random_graph(rng, 6, 1, 2)
    params = init_for_graph(g, seed=0, depth=2, width=3)
    a, _ = forward(g, params, "infer", np.random.default_rng(1))
    b, _ = forward(g, params, "infer", np.random.default_rng(2))
    assert np.array_equal(a, b)


def test_train_mode_draws_masks():
    rng = np.random.default_rng(11)
    g = random_graph(rng, 6, 1, 2)
    hw = init_for_graph(g, seed=0, depth=2, width=3)
    _, cache = forward(g, hw, "train", np.random.default_rng(0))
    assert set(cache.masks) == {"post1", "out"}
    fnn = init_for_graph(g, seed=0, depth=2, width=3, column_kind=FNN)
    _, cache = forward(g, fnn, "train", np.random.default_rng(0))
    assert set(cache.masks) == {"post1", "post2", "post3"}
    with pytest.raises(ConfigError):
        forward(g, hw, "train", None)
    with pytest.raises(ConfigError):
        forward(g, hw, "predict")


def test_chain4_long_range(chain4):
    e1, e4 = chain4.index_of("e1"), chain4.index_of("e4")
    X = chain4.features.copy()
    X[e1] += 3.0
    moved = with_features(chain4, X)
    for depth, changes in ((1, True), (0, False)):
        params = init_for_graph(chain4, seed=0, depth=depth, width=6, gate_bias=0.0)
        a, _ = forward(chain4, params)
        b, _ = forward(moved, params)
        assert (not np.array_equal(a[e4], b[e4])) == changes


def test_permutation_equivariance():
    rng = np.random.default_rng(12)
    g = random_graph(rng, 9, 2, 3)
    perm = rng.permutation(9)
    inv = np.argsort(perm)
    gp = RelGraph([g.node_ids[k] for k in perm], g.features[perm], g.relations,
                  np.column_stack([inv[g.edges[:, 0]], inv[g.edges[:, 1]], g.edges[:, 2]]),
                  g.label_names, g.Y[perm], g.labeled[perm])
    for pooling in ("mean", "max"):
        params = init_for_graph(g, seed=3, depth=3, width=4, pooling=pooling)
        a, _ = forward(g, params)
        b, _ = forward(gp, params)
        assert np.allclose(b, a[perm], rtol=0, atol=1e-12)


def test_forward_rows_matches_full_infer():
    rng = np.random.default_rng(13)
    g = random_graph(rng, 10, 2, 3)
    for pooling in ("mean", "sum", "max"):
        params = init_for_graph(g, seed=5, depth=3, width=4, pooling=pooling)
        full, cache = forward(g, params)
        rows = np.array([1, 4, 7])
        part, rc = forward_rows(g, params, rows, cache.U)
        assert np.allclose(part, full[rows], atol=1e-13)
        for l, u in enumerate(replay_rows(params, rc)):
            assert np.allclose(u, cache.U[l][rows], atol=1e-13)


def test_check_graph_mismatch():
    rng = np.random.default_rng(14)
    g = random_graph(rng, 5, 2, 3)
    params = init_for_graph(g, seed=0, depth=1, width=2)
    with pytest.raises(ShapeError):
        forward(g.without_edges(), params)


# --- parameter counts ------------------------------------------------------------------


def test_param_count_shared_constant():
    counts = [param_count(init_params(6, 2, 3, depth=t, width=5)) for t in (2, 10, 30)]
    assert len(set(counts)) == 1


def test_param_count_per_layer_closed_form():
    # input: W, V0 (10x10 each) + b; two hidden sets alike; head 2x10 + 2
    params = init_params(10, 1, 2, depth=2, width=10, column_kind=FNN, sharing=PER_LAYER)
    assert param_count(params) == 210 + 2 * 210 + 22
    assert param_count(params) == sum(a.size for a in params.arrays.values())


def test_highway_doubles_hidden_parameters():
    kw = dict(depth=3, width=4, sharing=PER_LAYER)
    fnn = param_count(init_params(5, 2, 3, column_kind=FNN, **kw))
    hw = param_count(init_params(5, 2, 3, column_kind=HIGHWAY, **kw))
    hidden_set = 4 * 4 * 3 + 4
    assert hw - fnn == 3 * hidden_set
    shared_fnn = param_count(init_params(5, 2, 3, column_kind=FNN, depth=3, width=4))
    shared_hw = param_count(init_params(5, 2, 3, column_kind=HIGHWAY, depth=3, width=4))
    assert shared_hw - shared_fnn == hidden_set


def test_untied_gates_under_sharing():
    p = init_params(5, 1, 2, depth=3, width=4, share_gates=False)
    assert {"gate1.W", "gate2.W", "gate3.W", "hid.W"} <= set(p.arrays)


def test_init_gate_bias_and_zero_biases():
    p = init_params(5, 1, 2, depth=2, width=4)
    assert np.all(p.arrays["gate.b"] == -1.0)
    assert np.all(p.arrays["hid.b"] == 0.0) and np.all(p.arrays["out.b"] == 0.0)
    assert p.z == 1.0
    assert init_params(5, 3, 2).z == 3.0


@pytest.mark.parametrize("kw", [dict(column_kind="lstm"), dict(sharing="tied"),
                                dict(pooling="median"), dict(z=0.0), dict(depth=-1),
                                dict(dropout_in=1.0), dict(head_kind="ranking")])
def test_bad_hyperparameters(kw):
    with pytest.raises(ConfigError):
        init_params(3, 1, 2, **kw)


# --- backward --------------------------------------------------------------------------


def test_backward_matches_finite_differences_spot():
    rng = np.random.default_rng(15)
    g = random_graph(rng, 8, 2, 3)
    split = SplitMask(np.array([0, 0, 0, 1, 2, 0, 0, -1], dtype=np.int8))
    params = init_for_graph(g, seed=1, depth=2, width=3, gate_bias=0.0)
    _, cache = forward(g, params, "train", np.random.default_rng(0))
    grads = backward(g, params, cache, split)
    from colnet.training import masked_loss

    def loss():
        probs, _ = forward(g, params, "train", None, masks=cache.masks)
        return masked_loss(probs, g.Y, split)

    for name in ("in.V1", "hid.W", "gate.V0", "out.b"):
        arr = params.arrays[name]
        idx = tuple(0 for _ in arr.shape)
        old = arr[idx]
        arr[idx] = old + 1e-6
        up = loss()
        arr[idx] = old - 1e-6
        down = loss()
        arr[idx] = old
        assert grads[name][idx] == pytest.approx((up - down) / 2e-6, rel=1e-5, abs=1e-9)


def test_backward_duplicated_graph_block_structure():
    rng = np.random.default_rng(16)
    g = random_graph(rng, 6, 2, 3)
    n = g.N
    dup = RelGraph([f"a{k}" for k in range(n)] + [f"b{k}" for k in range(n)],
                   np.vstack([g.features, g.features]), g.relations,
                   np.vstack([g.edges, g.edges + [n, n, 0]]), g.label_names,
                   np.vstack([g.Y, g.Y]), np.ones(2 * n, dtype=bool))
    roles = np.array([0, 0, 1, 0, 2, 0], dtype=np.int8)
    params = init_for_graph(g, seed=2, depth=3, width=4, dropout_in=0.0, dropout_out=0.0)
    _, c1 = forward(g, params, "train", np.random.default_rng(0))
    _, c2 = forward(dup, params, "train", np.random.default_rng(0))
    g1 = backward(g, params, c1, SplitMask(roles))
    g2 = backward(dup, params, c2, SplitMask(np.concatenate([roles, roles])))
    for k in g1:
        assert np.allclose(g1[k], g2[k], rtol=1e-12, atol=1e-15)


def test_backward_stale_cache():
    rng = np.random.default_rng(17)
    g = random_graph(rng, 6, 1, 2)
    split = SplitMask(np.array([0, 0, 1, 2, 0, 0], dtype=np.int8))
    params = init_for_graph(g, seed=0, depth=1, width=3)
    _, cache = forward(g, params, "train", np.random.default_rng(0))
    params.arrays["out.b"] += 0.1
    with pytest.raises(ConsistencyError):
        backward(g, params, cache, split)


def test_backward_loss_decreases_along_negative_gradient():
    rng = np.random.default_rng(18)
    g = random_graph(rng, 10, 2, 3)
    split = SplitMask(np.array([0] * 6 + [1, 1, 2, 2], dtype=np.int8))
    params = init_for_graph(g, seed=3, depth=2, width=4, dropout_in=0.0, dropout_out=0.0)
    from colnet.training import masked_loss

    probs, cache = forward(g, params, "train", np.random.default_rng(0))
    before = masked_loss(probs, g.Y, split)
    grads = backward(g, params, cache, split)
    for k in params.arrays:
        params.arrays[k] -= 1e-2 * grads[k]
    after = masked_loss(forward(g, params)[0], g.Y, split)
    assert after < before


# --- persistence ----------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    p = init_params(4, 2, 3, seed=9, depth=2, width=3, pooling="max", z=2.5, column_kind=FNN)
    save_params(p, tmp_path / "m.npz")
    q = load_params(tmp_path / "m.npz")
    assert q.hyper() == p.hyper()
    assert all(np.array_equal(p.arrays[k], q.arrays[k]) for k in p.arrays)
    assert set(p.arrays) == set(q.arrays)


def test_checkpoint_kind_mismatch(tmp_path):
    p = init_params(4, 1, 2, column_kind=FNN, depth=1, width=2)
    save_params(p, tmp_path / "m.npz")
    with pytest.raises(ConfigError, match="column kind"):
        load_params(tmp_path / "m.npz", expect_column_kind=HIGHWAY)
    assert load_params(tmp_path / "m.npz", expect_column_kind=FNN).column_kind == FNN


def test_checkpoint_rejects_other_containers(tmp_path):
    from colnet.checkpoint import save_container
    save_container(tmp_path / "x.npz", "sl", {}, {"a": np.zeros(2)})
    with pytest.raises(ConfigError):
        load_params(tmp_path / "x.npz")
    np.savez(tmp_path / "plain.npz", a=np.zeros(2))
    with pytest.raises(ConfigError):
        load_params(tmp_path / "plain.npz")
