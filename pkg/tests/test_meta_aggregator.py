import numpy as np
import numpy.testing as npt
import pytest

from coldrec import autodiff as ad
from coldrec.encoder import (NodeTables, conv_step, encode_target, init_gnn_params,
                             reconstruction_loss)
from coldrec.graph import build_episode, load_interactions
from coldrec.meta_aggregator import (encode_with_meta, init_meta_agg_params,
                                     meta_conv_step)
from coldrec.meta_learner import init_meta_learner, meta_embed
from coldrec.seeds import rng_for


def t(x, rg=False):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=rg)


def sigmoid_np(x):
    return 1.0 / (1.0 + np.exp(-x))


def matvec_loop(w, x):
    out = np.zeros(w.shape[0])
    for r in range(w.shape[0]):
        for c in range(w.shape[1]):
            out[r] += w[r, c] * x[c]
    return out


def dense_graph(tmp_path, users=10, items=10, deg=4, seed=0):
    rng = np.random.default_rng(seed)
    lines = [f"u{u}\ti{i}\t{u * 100 + int(i)}"
             for u in range(users) for i in rng.choice(items, size=deg, replace=False)]
    p = tmp_path / "g.tsv"
    p.write_text("\n".join(lines) + "\n")
    return load_interactions(str(p))


def make_tables(g, d, seed=0, trainable=False):
    rng = np.random.default_rng(seed)
    return NodeTables.from_arrays(rng.normal(size=(g.num_users, d)),
                                  rng.normal(size=(g.num_items, d)), trainable=trainable)


def test_zero_meta_reduces_to_basic_conv():
    rng = np.random.default_rng(0)
    d = 4
    w = rng.normal(size=(d, 3 * d))
    self_e, nbr = rng.normal(size=d), rng.normal(size=d)
    with_meta = meta_conv_step(t(np.zeros(d)), t(self_e), [t(nbr)], t(w))
    basic = conv_step(t(self_e), [t(nbr)], t(w[:, d:]))
    npt.assert_allclose(with_meta.data, basic.data, atol=1e-12)


def test_meta_conv_matches_scalar_loop_oracle():
    rng = np.random.default_rng(1)
    d = 4
    w = rng.normal(size=(d, 3 * d))
    meta_v, self_e = rng.normal(size=d), rng.normal(size=d)
    nbrs = [rng.normal(size=d) for _ in range(3)]
    got = meta_conv_step(t(meta_v), t(self_e), [t(n) for n in nbrs], t(w))
    agg = np.zeros(d)
    for n in nbrs:
        agg += n
    agg /= len(nbrs)
    expect = sigmoid_np(matvec_loop(w, np.concatenate([meta_v, self_e, agg])))
    npt.assert_allclose(got.data, expect, atol=1e-12)


def test_meta_conv_permutation_invariant():
    rng = np.random.default_rng(2)
    d = 4
    w = t(rng.normal(size=(d, 3 * d)))
    meta_v, self_e = t(rng.normal(size=d)), t(rng.normal(size=d))
    nbrs = [rng.normal(size=d) for _ in range(4)]
    a = meta_conv_step(meta_v, t(np.array(self_e.data)), [t(n) for n in nbrs], w)
    b = meta_conv_step(meta_v, t(np.array(self_e.data)),
                       [t(nbrs[i]) for i in (3, 1, 0, 2)], w)
    npt.assert_allclose(a.data, b.data, atol=1e-12)


def test_depth1_equals_basic_encoder(tmp_path):
    g = dense_graph(tmp_path)
    d = 4
    tables = make_tables(g, d)
    meta = init_meta_learner(rng_for(0, "m"), d, heads=2)
    agg = init_meta_agg_params(rng_for(1, "a"), d, depth=1, meta=meta)
    basic = init_gnn_params(rng_for(2, "b"), d, depth=1)
    basic.final_weight = agg.final_weight  # same projection
    ep = build_episode(g, 0, k=3, l=1, seed=3)
    npt.assert_allclose(encode_with_meta(ep, tables, agg).data,
                        encode_target(ep, tables, basic).data, atol=1e-12)


def test_encode_with_meta_hand_assembled(tmp_path):
    # 2-level episode: verify the meta embedding enters each interior update
    g = dense_graph(tmp_path, users=6, items=6, deg=3, seed=5)
    d = 4
    tables = make_tables(g, d, seed=6)
    meta = init_meta_learner(rng_for(3, "m"), d, heads=2)
    agg = init_meta_agg_params(rng_for(4, "a"), d, depth=2, meta=meta)
    ep = build_episode(g, 0, k=2, l=2, seed=9)
    got = encode_with_meta(ep, tables, agg)

    h1_rows = []
    for i in ep.hops[0]:
        children = ep.children_of(1, i)
        child_inits = [t(tables.user.data[c]) for c in children]
        m = meta_embed(child_inits, meta)
        h1_rows.append(meta_conv_step(m, t(tables.item.data[i]), child_inits,
                                      agg.conv_weights[0]))
    pooled = np.mean([h.data for h in h1_rows], axis=0)
    expect = sigmoid_np(agg.final_weight.data @ pooled)
    npt.assert_allclose(got.data, expect, atol=1e-12)


def test_meta_embeddings_stable_when_frozen(tmp_path):
    g = dense_graph(tmp_path)
    d = 4
    tables = make_tables(g, d)
    meta = init_meta_learner(rng_for(5, "m"), d, heads=2)
    meta.set_trainable(False)
    agg = init_meta_agg_params(rng_for(6, "a"), d, depth=3, meta=meta)
    ep = build_episode(g, 1, k=3, l=3, seed=4)
    a = encode_with_meta(ep, tables, agg)
    b = encode_with_meta(ep, tables, agg)
    npt.assert_array_equal(a.data, b.data)


def test_gradient_flows_into_meta_learner(tmp_path):
    g = dense_graph(tmp_path, users=6, items=6, deg=3, seed=7)
    d = 4
    tables = make_tables(g, d, seed=8)
    meta = init_meta_learner(rng_for(7, "m"), d, heads=2)
    agg = init_meta_agg_params(rng_for(8, "a"), d, depth=3, meta=meta)
    ep = build_episode(g, 0, k=2, l=3, seed=5)
    truth = t(np.random.default_rng(11).normal(size=d))

    def loss(*_):
        return reconstruction_loss(encode_with_meta(ep, tables, agg), truth)

    leaves = [meta.wq, meta.wk, meta.wv, agg.conv_weights[0], agg.conv_weights[1],
              agg.final_weight]
    err = ad.grad_check_multi(lambda *xs: loss(), leaves, eps=1e-6)
    assert err < 1e-5


def test_conv_weight_shapes_triple_concat():
    meta = init_meta_learner(rng_for(9, "m"), 6, heads=2)
    agg = init_meta_agg_params(rng_for(10, "a"), 6, depth=3, meta=meta)
    for w in agg.conv_weights:
        assert w.shape == (6, 18)
    assert agg.final_weight.shape == (6, 6)
