"""Model operations against hand-rolled oracles and closed-form cases."""

import math

import numpy as np
import pytest

from disenpoi import autodiff as ad
from disenpoi import model as M
from disenpoi.graphs import build_seq_graph
from disenpoi.model import (ModelDims, ModelParams, bce_loss, contrastive_loss,
                            forward_sample, geo_propagate, ggnn_propagate,
                            load_checkpoint, predict, proxies, save_checkpoint,
                            soft_attention, total_loss)

from oracles import (attention_oracle, geo_from_edges, geo_propagate_oracle,
                     ggnn_oracle, proxies_oracle, random_geo_instance)


def tiny_params(num_pois, D=6, L=2, T=2, seed=0):
    return ModelParams.build(ModelDims(num_pois=num_pois, D=D, L=L, T=T), seed)


def set_param(params, name, value):
    params[name].data = np.array(value, dtype=np.float64)


# ---------------------------------------------------------------------------
# geo propagation
# ---------------------------------------------------------------------------

def test_geo_zero_layers_returns_embeddings():
    graph, _ = random_geo_instance(np.random.default_rng(0))
    params = tiny_params(graph.num_nodes, L=0)
    state = geo_propagate(params, graph, range(graph.num_nodes), layers=0)
    for i in range(graph.num_nodes):
        np.testing.assert_array_equal(state.row(i).data,
                                      params["embedding.X"].data[i:i + 1])


def test_geo_identity_weights_two_node_chain():
    # two nodes joined by a zero-distance edge, unit weights, all-ones rows:
    # message = 1*(h + 1*(h*h)) = 2, self = 1, aggregate = LeakyReLU(3) = 3
    graph = geo_from_edges(2, [(0, 1, 0.0)])
    params = tiny_params(2, D=4, L=1)
    set_param(params, "embedding.X", np.ones((2, 4)))
    set_param(params, "geo.layer0.W1", np.eye(4))
    set_param(params, "geo.layer0.W2", np.eye(4))
    state = geo_propagate(params, graph, [0, 1], layers=1)
    np.testing.assert_allclose(state.row(0).data, 3.0 * np.ones((1, 4)), atol=1e-14)
    np.testing.assert_allclose(state.row(1).data, 3.0 * np.ones((1, 4)), atol=1e-14)


def test_geo_matches_dense_oracle_random_instances():
    rng = np.random.default_rng(101)
    for _ in range(20):
        graph, adj = random_geo_instance(rng)
        layers = int(rng.integers(1, 4))
        params = tiny_params(graph.num_nodes, D=int(rng.integers(2, 8)),
                             L=layers, seed=int(rng.integers(1000)))
        state = geo_propagate(params, graph, range(graph.num_nodes), layers=layers)
        x = params["embedding.X"].data
        w1s = [params[f"geo.layer{l}.W1"].data for l in range(layers)]
        w2s = [params[f"geo.layer{l}.W2"].data for l in range(layers)]
        expected = geo_propagate_oracle(x, w1s, w2s, adj, layers)
        got = np.concatenate([state.row(i).data for i in range(graph.num_nodes)])
        np.testing.assert_allclose(got, expected, atol=1e-10)


def test_geo_isolated_node_uses_self_message_only():
    graph = geo_from_edges(3, [(0, 1, 0.5)])  # node 2 isolated
    params = tiny_params(3, D=4, L=1)
    state = geo_propagate(params, graph, [2], layers=1)
    x2 = params["embedding.X"].data[2:3]
    expected = x2 @ params["geo.layer0.W1"].data
    expected = np.where(expected > 0, expected, 0.01 * expected)
    np.testing.assert_allclose(state.row(2).data, expected, atol=1e-12)


def test_geo_locality_equals_global_restriction():
    rng = np.random.default_rng(55)
    for _ in range(10):
        graph, _ = random_geo_instance(rng, n_max=12)
        layers = int(rng.integers(0, 3))
        params = tiny_params(graph.num_nodes, D=5, L=max(layers, 1),
                             seed=int(rng.integers(1000)))
        full = geo_propagate(params, graph, range(graph.num_nodes), layers=layers)
        subset = sorted(rng.choice(graph.num_nodes,
                                   size=rng.integers(1, graph.num_nodes + 1),
                                   replace=False).tolist())
        local = geo_propagate(params, graph, subset, layers=layers)
        for i in subset:
            np.testing.assert_allclose(local.row(i).data, full.row(i).data,
                                       atol=1e-12)


def test_geo_state_refuses_unrequested_rows():
    graph = geo_from_edges(4, [(0, 1, 0.5), (1, 2, 0.5), (2, 3, 0.5)])
    params = tiny_params(4, L=1)
    state = geo_propagate(params, graph, [0], layers=1)
    with pytest.raises(Exception):
        state.row(3)


def test_geo_kernel_vanishes_at_large_distance():
    # with huge distances the Hadamard pathway's kernel weight underflows,
    # so the result must match a W2-ablated oracle
    rng = np.random.default_rng(77)
    graph = geo_from_edges(4, [(0, 1, 10.0), (1, 2, 10.0), (0, 3, 12.0)],
                           delta_d=20.0)
    adj = {0: [(1, 10.0), (3, 12.0)], 1: [(0, 10.0), (2, 10.0)],
           2: [(1, 10.0)], 3: [(0, 12.0)]}
    params = tiny_params(4, D=5, L=2, seed=3)
    state = geo_propagate(params, graph, range(4))
    x = params["embedding.X"].data
    w1s = [params[f"geo.layer{l}.W1"].data for l in range(2)]
    zero_w2 = [np.zeros((5, 5))] * 2
    expected = geo_propagate_oracle(x, w1s, zero_w2, adj, 2)
    got = np.concatenate([state.row(i).data for i in range(4)])
    np.testing.assert_allclose(got, expected, atol=1e-12)


# ---------------------------------------------------------------------------
# gated sequential propagation
# ---------------------------------------------------------------------------

def test_ggnn_zero_weights_halve_state_each_step():
    params = tiny_params(5, D=4, T=2)
    for name in ("agg_in", "agg_out", "Wz", "Uz", "Wr", "Ur", "Wo", "Uo"):
        set_param(params, f"ggnn.{name}", np.zeros((4, 4)))
    set_param(params, "ggnn.bias", np.zeros((1, 4)))
    sg = build_seq_graph([0, 1, 2])
    h = ggnn_propagate(params, sg, steps=2)
    expected = 0.25 * params["embedding.X"].data[[0, 1, 2]]
    np.testing.assert_allclose(h.data, expected, atol=1e-14)


def test_ggnn_single_node_follows_scalar_recurrence():
    params = tiny_params(3, D=4, T=3)
    sg = build_seq_graph([1])
    got = ggnn_propagate(params, sg, steps=3)

    w = {name: params[f"ggnn.{name}"].data
         for name in ("agg_in", "agg_out", "Wz", "Uz", "Wr", "Ur", "Wo", "Uo")}
    b = params["ggnn.bias"].data[0]
    h = params["embedding.X"].data[1].copy()
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    for _ in range(3):
        a = b  # no neighbors: aggregation is the bias alone
        z = sig(a @ w["Wz"] + h @ w["Uz"])
        r = sig(a @ w["Wr"] + h @ w["Ur"])
        cand = np.tanh(a @ w["Wo"] + (r * h) @ w["Uo"])
        h = (1 - z) * h + z * cand
    np.testing.assert_allclose(got.data, h.reshape(1, -1), atol=1e-12)


def test_ggnn_matches_oracle_random_sessions():
    rng = np.random.default_rng(303)
    for _ in range(20):
        num_pois = int(rng.integers(3, 9))
        ctx = [int(v) for v in rng.integers(0, num_pois,
                                            size=rng.integers(1, 10))]
        steps = int(rng.integers(1, 4))
        params = tiny_params(num_pois, D=int(rng.integers(2, 7)), T=steps,
                             seed=int(rng.integers(1000)))
        sg = build_seq_graph(ctx)
        got = ggnn_propagate(params, sg, steps=steps)
        weights = {name: params[f"ggnn.{name}"].data
                   for name in ("agg_in", "agg_out", "Wz", "Uz",
                                "Wr", "Ur", "Wo", "Uo")}
        weights["bias"] = params["ggnn.bias"].data[0]
        x = params["embedding.X"].data[sg.nodes]
        expected = ggnn_oracle(x, sg.in_mat, sg.out_mat, weights, steps)
        np.testing.assert_allclose(got.data, expected, atol=1e-10)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def test_attention_zero_alpha_annihilates():
    rng = np.random.default_rng(1)
    keys = ad.constant(rng.uniform(-1, 1, (4, 5)))
    query = ad.constant(rng.uniform(-1, 1, (1, 5)))
    out = soft_attention(query, keys, ad.constant(np.zeros((5, 1))),
                         ad.constant(rng.uniform(-1, 1, (5, 5))),
                         ad.constant(rng.uniform(-1, 1, (5, 5))))
    np.testing.assert_array_equal(out.data, np.zeros((1, 5)))


def test_attention_single_key_weight_times_key():
    rng = np.random.default_rng(2)
    key = rng.uniform(-1, 1, (1, 4))
    query = rng.uniform(-1, 1, (1, 4))
    alpha = rng.uniform(-1, 1, (4, 1))
    qm = rng.uniform(-1, 1, (4, 4))
    km = rng.uniform(-1, 1, (4, 4))
    out = soft_attention(ad.constant(query), ad.constant(key),
                         ad.constant(alpha), ad.constant(qm), ad.constant(km))
    s = 1 / (1 + np.exp(-(query @ qm + key @ km)))
    w = float((s @ alpha)[0, 0])
    np.testing.assert_allclose(out.data, w * key, atol=1e-12)


def test_attention_matches_oracle_random():
    rng = np.random.default_rng(404)
    for _ in range(30):
        n, d = int(rng.integers(1, 9)), int(rng.integers(2, 7))
        keys = rng.uniform(-1, 1, (n, d))
        query = rng.uniform(-1, 1, (1, d))
        alpha = rng.uniform(-1, 1, (d, 1))
        qm = rng.uniform(-1, 1, (d, d))
        km = rng.uniform(-1, 1, (d, d))
        got = soft_attention(ad.constant(query), ad.constant(keys),
                             ad.constant(alpha), ad.constant(qm),
                             ad.constant(km))
        np.testing.assert_allclose(got.data,
                                   attention_oracle(query, keys, alpha, qm, km),
                                   atol=1e-12)


# ---------------------------------------------------------------------------
# proxies
# ---------------------------------------------------------------------------

def test_proxy_seq_mean():
    graph = geo_from_edges(3, [])
    params = tiny_params(3, D=2)
    set_param(params, "embedding.X", [[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]])
    p_geo, p_seq = proxies(params, [0, 1], graph)
    np.testing.assert_allclose(p_seq.data, [[0.5, 0.5]], atol=1e-15)
    np.testing.assert_allclose(p_geo.data, p_seq.data)  # no neighbors: fallback


def test_proxy_geo_two_neighbors():
    graph = geo_from_edges(3, [(0, 1, 0.1), (0, 2, 0.1)])
    params = tiny_params(3, D=2)
    set_param(params, "embedding.X", [[9.0, 9.0], [2.0, 0.0], [0.0, 2.0]])
    p_geo, _ = proxies(params, [0], graph)
    np.testing.assert_allclose(p_geo.data, [[1.0, 1.0]], atol=1e-15)


def test_proxies_match_enumeration_oracle():
    rng = np.random.default_rng(505)
    for _ in range(25):
        graph, adj = random_geo_instance(rng)
        params = tiny_params(graph.num_nodes, D=4, seed=int(rng.integers(1000)))
        ctx = [int(v) for v in rng.integers(0, graph.num_nodes,
                                            size=rng.integers(1, 8))]
        p_geo, p_seq = proxies(params, ctx, graph)
        exp_geo, exp_seq = proxies_oracle(params["embedding.X"].data, ctx, adj)
        np.testing.assert_allclose(p_geo.data, exp_geo, atol=1e-12)
        np.testing.assert_allclose(p_seq.data, exp_seq, atol=1e-12)


def test_proxies_same_through_geo_state_source():
    rng = np.random.default_rng(606)
    graph, adj = random_geo_instance(rng, n_max=10)
    params = tiny_params(graph.num_nodes, D=4, L=1)
    ctx = [0, 1, 0]
    state = geo_propagate(params, graph, ctx, layers=1)
    direct_geo, direct_seq = proxies(params, ctx, graph)
    via_state_geo, via_state_seq = proxies(params, ctx, graph, x_source=state)
    np.testing.assert_allclose(via_state_geo.data, direct_geo.data, atol=1e-12)
    np.testing.assert_allclose(via_state_seq.data, direct_seq.data, atol=1e-12)


# ---------------------------------------------------------------------------
# contrastive loss
# ---------------------------------------------------------------------------

def test_contrastive_symmetric_scores_give_two_ln_two():
    v = ad.constant([[1.0, 1.0]])
    loss = contrastive_loss(v, v, v, v)  # both margins zero
    assert loss.item() == pytest.approx(2 * math.log(2.0), abs=1e-12)


def test_contrastive_frozen_example():
    e_geo = ad.constant([[1.0, 0.0]])
    p_geo = ad.constant([[1.0, 0.0]])
    p_seq = ad.constant([[0.0, 1.0]])
    e_seq = ad.constant([[0.0, 1.0]])
    loss = contrastive_loss(e_geo, p_geo, e_seq, p_seq)
    expected = 2 * math.log(1 + math.exp(-1.0))
    assert loss.item() == pytest.approx(expected, abs=1e-9)
    assert loss.item() == pytest.approx(0.626523, abs=1e-6)


def test_contrastive_nonincreasing_when_margins_positive():
    rng = np.random.default_rng(11)
    base = [rng.uniform(-1, 1, (1, 4)) for _ in range(4)]
    e_g, p_g, e_s, p_s = base
    # force positive margins: anchor closer to own proxy
    p_g = e_g + 0.01 * p_g
    p_s = e_s + 0.01 * p_s
    values = []
    for t in (1.0, 2.0, 4.0):
        loss = contrastive_loss(ad.constant(t * e_g), ad.constant(t * p_g),
                                ad.constant(t * e_s), ad.constant(t * p_s))
        values.append(loss.item())
    assert values[0] >= values[1] >= values[2]


# ---------------------------------------------------------------------------
# prediction head and loss
# ---------------------------------------------------------------------------

def test_predict_zero_final_layer_gives_half():
    params = tiny_params(3, D=4)
    set_param(params, "mlp.W2", np.zeros((8, 1)))
    set_param(params, "mlp.b2", np.zeros((1, 1)))
    rng = np.random.default_rng(5)
    args = [ad.constant(rng.uniform(-1, 1, (1, 4))) for _ in range(4)]
    y = predict(params, *args)
    assert y.item() == pytest.approx(0.5, abs=1e-15)


def test_predict_logit_two():
    params = tiny_params(3, D=4)
    set_param(params, "mlp.W2", np.zeros((8, 1)))
    set_param(params, "mlp.b2", [[2.0]])
    args = [ad.constant(np.ones((1, 4))) for _ in range(4)]
    y = predict(params, *args)
    assert y.item() == pytest.approx(1 / (1 + math.exp(-2.0)), abs=1e-12)
    assert y.item() == pytest.approx(0.880797, abs=1e-6)


def test_predict_output_strictly_inside_unit_interval():
    rng = np.random.default_rng(6)
    params = tiny_params(3, D=4)
    for _ in range(20):
        args = [ad.constant(rng.uniform(-5, 5, (1, 4))) for _ in range(4)]
        y = predict(params, *args).item()
        assert 0.0 < y < 1.0


def test_bce_values():
    assert bce_loss(1, ad.constant([[0.5]])).item() == pytest.approx(
        math.log(2.0), abs=1e-12)
    assert bce_loss(0, ad.constant([[0.1]])).item() == pytest.approx(
        -math.log(0.9), abs=1e-12)
    # clamping keeps the loss finite at the boundary
    assert bce_loss(1, ad.constant([[1.0]])).item() == pytest.approx(
        -math.log(1 - 1e-7), abs=1e-12)


def _toy_forward_setup(seed=0, num_pois=5, D=4):
    rng = np.random.default_rng(seed)
    edges = [(0, 1, 0.3), (1, 2, 0.6), (2, 3, 0.2), (0, 4, 0.9)]
    graph = geo_from_edges(num_pois, edges)
    params = tiny_params(num_pois, D=D, L=2, T=2, seed=seed)
    context = [0, 1, 2, 1]
    target = 3
    return params, graph, context, target


def test_total_loss_beta_zero_decouples_projection_heads():
    params, graph, context, target = _toy_forward_setup()
    state_nodes = set(context) | {target}
    with ad.Tape() as tape:
        state = geo_propagate(params, graph, state_nodes)
        out = forward_sample(params, context, target, graph, state)
        loss = total_loss(1, out, beta=0.0)
    tape.backward(loss, params=params.tensors())
    np.testing.assert_array_equal(params["proj_geo.W"].grad, 0.0)
    np.testing.assert_array_equal(params["proj_seq.W"].grad, 0.0)
    # CTR pathway still trains
    assert np.abs(params["mlp.W2"].grad).max() > 0


def test_total_loss_value_composition():
    params, graph, context, target = _toy_forward_setup()
    state = geo_propagate(params, graph, set(context) | {target})
    out = forward_sample(params, context, target, graph, state)
    beta = 0.7
    combined = total_loss(0, out, beta).item()
    assert combined == pytest.approx(
        bce_loss(0, out.y_hat).item() + beta * out.l_con.item(), abs=1e-12)


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------

def test_forward_deterministic_bitwise():
    params, graph, context, target = _toy_forward_setup()

    def run():
        state = geo_propagate(params, graph, set(context) | {target})
        return forward_sample(params, context, target, graph, state)

    a, b = run(), run()
    assert a.y_hat.data.tobytes() == b.y_hat.data.tobytes()
    assert a.l_con.data.tobytes() == b.l_con.data.tobytes()


def test_forward_permutation_equivariance():
    params, graph, context, target = _toy_forward_setup(seed=3)
    state = geo_propagate(params, graph, set(context) | {target})
    base = forward_sample(params, context, target, graph, state)

    rng = np.random.default_rng(9)
    perm = rng.permutation(params.dims.num_pois)  # old -> new labels
    edges_new = []
    for i in range(graph.num_nodes):
        for j, d in graph.adjacency(i):
            if i < j:
                edges_new.append((int(perm[i]), int(perm[j]), d))
    graph_p = geo_from_edges(graph.num_nodes, edges_new)
    params_p = tiny_params(params.dims.num_pois, D=params.dims.D, L=2, T=2, seed=3)
    for name, tensor in params.items():
        params_p[name].data = tensor.data.copy()
    x_new = np.empty_like(params["embedding.X"].data)
    x_new[perm] = params["embedding.X"].data
    params_p["embedding.X"].data = x_new

    ctx_p = [int(perm[c]) for c in context]
    tgt_p = int(perm[target])
    state_p = geo_propagate(params_p, graph_p, set(ctx_p) | {tgt_p})
    out_p = forward_sample(params_p, ctx_p, tgt_p, graph_p, state_p)
    assert out_p.y_hat.item() == pytest.approx(base.y_hat.item(), abs=1e-12)
    assert out_p.l_con.item() == pytest.approx(base.l_con.item(), abs=1e-12)


def test_forward_disable_flags_zero_branches():
    params, graph, context, target = _toy_forward_setup()
    state = geo_propagate(params, graph, set(context) | {target})

    no_geo = forward_sample(params, context, target, graph, None,
                            disable_geo=True)
    np.testing.assert_array_equal(no_geo.e_geo.data, 0.0)
    np.testing.assert_array_equal(no_geo.p_geo.data, 0.0)
    np.testing.assert_array_equal(no_geo.h_t.data, 0.0)
    assert 0.0 < no_geo.y_hat.item() < 1.0

    no_seq = forward_sample(params, context, target, graph, state,
                            disable_seq=True)
    np.testing.assert_array_equal(no_seq.e_seq.data, 0.0)
    np.testing.assert_array_equal(no_seq.p_seq.data, 0.0)

    both = forward_sample(params, context, target, graph, None,
                          disable_geo=True, disable_seq=True)
    assert both.l_con.item() == 0.0


def test_end_to_end_gradients_match_finite_differences():
    params, graph, context, target = _toy_forward_setup(seed=1)
    names = [name for name, _ in params.items()]

    def loss_value():
        state = geo_propagate(params, graph, set(context) | {target})
        out = forward_sample(params, context, target, graph, state)
        return total_loss(1, out, beta=0.5).item()

    with ad.Tape() as tape:
        state = geo_propagate(params, graph, set(context) | {target})
        out = forward_sample(params, context, target, graph, state)
        loss = total_loss(1, out, beta=0.5)
    tape.backward(loss, params=params.tensors())
    analytic = {name: params[name].grad.copy() for name in names}

    rng = np.random.default_rng(0)
    h = 1e-5
    for name in names:
        tensor = params[name]
        flat = tensor.data.ravel()
        picks = rng.choice(flat.size, size=min(4, flat.size), replace=False)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + h
            up = loss_value()
            flat[idx] = orig - h
            down = loss_value()
            flat[idx] = orig
            numeric = (up - down) / (2 * h)
            a = analytic[name].ravel()[idx]
            denom = max(abs(a), abs(numeric), 1e-8)
            assert abs(a - numeric) / denom < 1e-3, f"{name}[{idx}]"


# ---------------------------------------------------------------------------
# batched forward equals the per-sample reference
# ---------------------------------------------------------------------------

def _random_samples(rng, num_pois, n):
    from disenpoi.ingest import Sample
    samples = []
    for _ in range(n):
        ctx = [int(v) for v in rng.integers(0, num_pois,
                                            size=rng.integers(1, 7))]
        samples.append(Sample(user_index=0, context=tuple(ctx),
                              target=int(rng.integers(0, num_pois)),
                              label=int(rng.integers(0, 2))))
    return samples


@pytest.mark.parametrize("disable_geo,disable_seq",
                         [(False, False), (True, False), (False, True)])
def test_forward_batch_matches_per_sample(disable_geo, disable_seq):
    rng = np.random.default_rng(71)
    graph, _ = random_geo_instance(rng, n_max=12)
    params = tiny_params(graph.num_nodes, D=5, L=2, T=2, seed=4)
    samples = _random_samples(rng, graph.num_nodes, 9)

    nodes = set()
    for s in samples:
        nodes.update(s.context)
        nodes.add(s.target)
    state = None
    if not disable_geo:
        state = geo_propagate(params, graph, nodes)
    batch_out = M.forward_batch(params, samples, graph, state,
                                disable_geo=disable_geo,
                                disable_seq=disable_seq)
    for i, s in enumerate(samples):
        single = forward_sample(params, list(s.context), s.target, graph,
                                state, disable_geo=disable_geo,
                                disable_seq=disable_seq)
        assert batch_out.y_hat.data[i, 0] == pytest.approx(
            single.y_hat.item(), abs=1e-10)
        assert batch_out.l_con_vec.data[i, 0] == pytest.approx(
            single.l_con.item(), abs=1e-10)
        assert batch_out.l_rec_vec.data[i, 0] == pytest.approx(
            bce_loss(s.label, single.y_hat).item(), abs=1e-10)


def test_forward_batch_gradients_match_per_sample():
    rng = np.random.default_rng(72)
    graph, _ = random_geo_instance(rng, n_max=10)
    params = tiny_params(graph.num_nodes, D=5, L=1, T=2, seed=6)
    samples = _random_samples(rng, graph.num_nodes, 6)
    nodes = set()
    for s in samples:
        nodes.update(s.context)
        nodes.add(s.target)
    beta = 0.4

    with ad.Tape() as tape:
        state = geo_propagate(params, graph, nodes)
        out = M.forward_batch(params, samples, graph, state)
        loss = ad.add(ad.mean_rows(out.l_rec_vec),
                      ad.scalar_mul(beta, ad.mean_rows(out.l_con_vec)))
    tape.backward(loss, params=params.tensors())
    batched = {name: t.grad.copy() for name, t in params.items()}
    params.zero_grads()

    with ad.Tape() as tape:
        state = geo_propagate(params, graph, nodes)
        acc = None
        for s in samples:
            single = forward_sample(params, list(s.context), s.target, graph,
                                    state)
            term = total_loss(s.label, single, beta)
            acc = term if acc is None else ad.add(acc, term)
        loss = ad.scalar_mul(1.0 / len(samples), acc)
    tape.backward(loss, params=params.tensors())
    for name, t in params.items():
        np.testing.assert_allclose(t.grad, batched[name], atol=1e-9,
                                   err_msg=name)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    params = tiny_params(7, D=5, L=2, T=2, seed=12)
    extra = {"delta_d": 1.0, "disable_geo_graph": False, "seed": 12}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, extra)
    loaded, got_extra = load_checkpoint(path)
    assert got_extra == extra
    assert loaded.dims == params.dims
    assert loaded.manifest() == params.manifest()
    for name, tensor in params.items():
        assert loaded[name].data.tobytes() == tensor.data.tobytes()


def test_checkpoint_truncation_detected(tmp_path):
    params = tiny_params(4, D=4)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, {})
    blob = path.read_bytes()
    path.write_bytes(blob[:-16])
    with pytest.raises(Exception):
        load_checkpoint(path)
