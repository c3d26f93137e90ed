import numpy as np
import numpy.testing as npt
import pytest

from coldrec import autodiff as ad
from coldrec.encoder import (NodeTables, aggregate, conv_step, encode_batch,
                             encode_target, final_step, init_gnn_params,
                             reconstruction_loss, train_reconstruction)
from coldrec.errors import DataError, DimensionError, NumericError
from coldrec.graph import Episode, build_episode, load_interactions
from coldrec.seeds import rng_for


def sigmoid_np(x):
    return 1.0 / (1.0 + np.exp(-x))


def matvec_loop(w, x):
    out = np.zeros(w.shape[0])
    for r in range(w.shape[0]):
        acc = 0.0
        for c in range(w.shape[1]):
            acc += w[r, c] * x[c]
        out[r] = acc
    return out


def mean_loop(vectors):
    d = len(vectors[0])
    out = np.zeros(d)
    for v in vectors:
        for j in range(d):
            out[j] += v[j]
    return out / len(vectors)


def t(x, rg=False):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=rg)


def write_graph(tmp_path, lines, name="g.tsv"):
    p = tmp_path / name
    p.write_text("\n".join(lines) + "\n")
    return load_interactions(str(p))


def dense_graph(tmp_path, users=12, items=12, deg=5, seed=0):
    rng = np.random.default_rng(seed)
    lines = [f"u{u}\ti{i}\t{u * 100 + int(i)}"
             for u in range(users) for i in rng.choice(items, size=deg, replace=False)]
    return write_graph(tmp_path, lines)


def test_aggregate_mean():
    out = aggregate([t([1.0, 0.0]), t([0.0, 1.0])], "mean")
    npt.assert_allclose(out.data, [0.5, 0.5])


def test_aggregate_attention_fixed_point():
    v = np.array([0.3, -0.2, 0.9])
    attn = t(np.array([0.5, 1.0, -0.3]))
    out = aggregate([t(v), t(v.copy()), t(v.copy())], "attention", attn=attn)
    npt.assert_allclose(out.data, v, atol=1e-12)


def test_aggregate_lightgcn_two_regular():
    a, b = np.array([1.0, 3.0]), np.array([2.0, -1.0])
    out = aggregate([t(a), t(b)], "lightgcn")
    npt.assert_allclose(out.data, (a + b) / np.sqrt(2.0))


def test_aggregate_empty_errors():
    with pytest.raises(DataError):
        aggregate([], "mean")


def test_conv_step_zero_weights():
    w = t(np.zeros((3, 6)))
    out = conv_step(t([1.0, 2.0, 3.0]), [t([0.5, 0.5, 0.5])], w)
    npt.assert_allclose(out.data, [0.5, 0.5, 0.5])


def test_conv_step_matches_scalar_loop_oracle():
    rng = np.random.default_rng(1)
    d = 5
    w = rng.normal(size=(d, 2 * d))
    self_e = rng.normal(size=d)
    nbrs = [rng.normal(size=d) for _ in range(3)]
    got = conv_step(t(self_e), [t(n) for n in nbrs], t(w))
    expect = sigmoid_np(matvec_loop(w, np.concatenate([self_e, mean_loop(nbrs)])))
    npt.assert_allclose(got.data, expect, atol=1e-12)


def test_final_step_singleton_and_permutation():
    rng = np.random.default_rng(2)
    d = 4
    w = rng.normal(size=(d, d))
    v = rng.normal(size=d)
    got = final_step([t(v)], t(w))
    npt.assert_allclose(got.data, sigmoid_np(matvec_loop(w, v)), atol=1e-12)
    vs = [rng.normal(size=d) for _ in range(4)]
    a = final_step([t(x) for x in vs], t(w))
    b = final_step([t(vs[i]) for i in (2, 0, 3, 1)], t(w))
    npt.assert_allclose(a.data, b.data, atol=1e-12)


def test_final_step_matches_scalar_loop_oracle():
    rng = np.random.default_rng(3)
    d = 6
    w = rng.normal(size=(d, d))
    nbrs = [rng.normal(size=d) for _ in range(3)]
    got = final_step([t(n) for n in nbrs], t(w))
    npt.assert_allclose(got.data, sigmoid_np(matvec_loop(w, mean_loop(nbrs))), atol=1e-12)


def test_reconstruction_loss_anchor_values():
    assert reconstruction_loss(t([1.0, 0.0]), t([1.0, 0.0])).item() == pytest.approx(0.0)
    assert reconstruction_loss(t([1.0, 0.0]), t([0.0, 1.0])).item() == pytest.approx(1.0)
    assert reconstruction_loss(t([1.0, 0.0]), t([-1.0, 0.0])).item() == pytest.approx(2.0)
    with pytest.raises(NumericError):
        reconstruction_loss(t([0.0, 0.0]), t([1.0, 0.0]))


def make_tables(g, d, seed=0, trainable=False):
    rng = np.random.default_rng(seed)
    return NodeTables.from_arrays(rng.normal(size=(g.num_users, d)),
                                  rng.normal(size=(g.num_items, d)), trainable=trainable)


def test_encode_depth1_is_final_step_over_inits(tmp_path):
    g = dense_graph(tmp_path)
    d = 4
    tables = make_tables(g, d)
    params = init_gnn_params(rng_for(0, "p"), d, depth=1)
    ep = build_episode(g, 0, k=3, l=1, seed=5)
    got = encode_target(ep, tables, params)
    inits = [t(tables.item.data[i]) for i in ep.hops[0]]
    expect = final_step(inits, params.final_weight)
    npt.assert_allclose(got.data, expect.data, atol=1e-12)


def test_encode_depth2_chain_hand_evaluated(tmp_path):
    g = write_graph(tmp_path, ["u0\ti0\t0", "u1\ti0\t1"])
    d = 3
    tables = make_tables(g, d, seed=4)
    params = init_gnn_params(rng_for(1, "p"), d, depth=2)
    u0 = g.user_labels.index("u0")
    ep = build_episode(g, u0, k=1, l=2, seed=7)
    i0 = ep.hops[0][0]
    child = ep.hops[1][0]
    w1 = params.conv_weights[0].data
    wf = params.final_weight.data
    h1 = sigmoid_np(matvec_loop(w1, np.concatenate(
        [tables.item.data[i0], tables.user.data[child]])))
    expect = sigmoid_np(matvec_loop(wf, h1))
    got = encode_target(ep, tables, params)
    npt.assert_allclose(got.data, expect, atol=1e-12)


def test_encode_deterministic_and_batch_consistent(tmp_path):
    g = dense_graph(tmp_path)
    d = 4
    tables = make_tables(g, d)
    params = init_gnn_params(rng_for(2, "p"), d, depth=3)
    eps = [build_episode(g, u, k=3, l=3, seed=11) for u in (0, 1, 2)]
    single = [encode_target(ep, tables, params).data for ep in eps]
    batch = encode_batch(eps, tables, params).data
    for row, one in zip(batch, single):
        npt.assert_allclose(row, one, atol=1e-12)
    again = encode_batch([build_episode(g, u, k=3, l=3, seed=11) for u in (0, 1, 2)],
                         tables, params).data
    npt.assert_array_equal(batch, again)


def test_encode_within_hop_permutation_invariant(tmp_path):
    g = dense_graph(tmp_path)
    d = 4
    tables = make_tables(g, d)
    params = init_gnn_params(rng_for(3, "p"), d, depth=3)
    ep = build_episode(g, 1, k=3, l=3, seed=13)
    shuffled = Episode(target=ep.target, side=ep.side, k=ep.k, seed=ep.seed,
                       hops=[list(reversed(h)) for h in ep.hops],
                       children=[dict(reversed(list(c.items()))) for c in ep.children])
    a = encode_target(ep, tables, params)
    b = encode_target(shuffled, tables, params)
    npt.assert_allclose(a.data, b.data, atol=1e-12)


def test_full_pipeline_gradient_passes_grad_check(tmp_path):
    g = dense_graph(tmp_path, users=6, items=6, deg=3)
    d = 3
    tables = make_tables(g, d, trainable=True)
    params = init_gnn_params(rng_for(4, "p"), d, depth=3)
    ep = build_episode(g, 0, k=2, l=3, seed=17)
    truth = ad.Tensor(np.random.default_rng(5).normal(size=d))

    def loss_of(*_):
        h = encode_target(ep, tables, params)
        return reconstruction_loss(h, truth)

    leaves = [params.conv_weights[0], params.conv_weights[1], params.final_weight,
              tables.user, tables.item]
    err = ad.grad_check_multi(lambda *xs: loss_of(), leaves, eps=1e-6)
    assert err < 1e-5


def test_train_reconstruction_loss_decreases(tmp_path):
    g = dense_graph(tmp_path, users=20, items=16, deg=5, seed=2)
    d = 6
    rng = np.random.default_rng(9)
    tables = make_tables(g, d, seed=9)
    # reference embeddings: positive-leaning neighbor means are learnable
    truth = np.vstack([np.abs(tables.item.data[g.neighbors("user", u)]).mean(axis=0)
                       for u in g.users])
    params = init_gnn_params(rng_for(5, "p"), d, depth=2)
    hist = train_reconstruction(g, list(g.users), truth, tables, params,
                                k=3, epochs=25, lr=0.01, seed=1)
    assert hist[-1] < hist[0]


def test_encoder_dimension_error_names_shapes():
    w = t(np.zeros((3, 5)))
    with pytest.raises(DimensionError) as e:
        conv_step(t([1.0, 2.0, 3.0]), [t([1.0, 2.0, 3.0])], w)
    assert "(3, 5)" in str(e.value)
