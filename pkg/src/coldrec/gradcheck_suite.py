"""Finite-difference verification battery over every differentiable piece.

Each entry checks the tape gradient of one primitive or composite loss
against central differences at several random points and reports the worst
relative error. The full battery backs both the `gradcheck` command and the
acceptance gate.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .encoder import NodeTables, encode_target, init_gnn_params, reconstruction_loss
from .graph import Episode
from .ground_truth import bpr_loss
from .meta_aggregator import encode_with_meta, init_meta_agg_params
from .meta_learner import init_meta_learner, meta_embed
from .sampler import SamplerParams, Trajectory, init_sampler_params, reinforce_loss
from .seeds import rng_for


def _toy_episode() -> Episode:
    return Episode(target=0, side="user", k=2, seed=0,
                   hops=[[0, 1], [0, 1, 2]],
                   children=[{0: (0, 1), 1: (1, 2)}])


def gradcheck_battery(seed: int = 0, dim: int = 6, points: int = 10,
                      eps: float = 1e-6) -> dict:
    """Max relative gradient error per op over ``points`` random points."""
    rng = np.random.default_rng(seed)
    results: dict = {}

    def record(name, fn):
        worst = 0.0
        for p in range(points):
            worst = max(worst, fn(np.random.default_rng(seed * 1000 + p)))
        results[name] = worst

    def leaf(r, *shape):
        return ad.Tensor(r.normal(size=shape), requires_grad=True)

    def matmul_check(r):
        other = ad.Tensor(r.normal(size=(dim, 3)))
        return ad.grad_check(lambda x: ad.total(ad.matmul(x, other)), leaf(r, 4, dim), eps)
    record("matmul", matmul_check)
    record("concat", lambda r: ad.grad_check(
        lambda x: ad.total(ad.concat([x, ad.mul(x, x)], axis=1)), leaf(r, 3, dim), eps))

    def add_bias_check(r):
        base = ad.Tensor(r.normal(size=(5, dim)))
        return ad.grad_check(lambda x: ad.total(ad.add(base, x)), leaf(r, dim), eps)
    record("add_bias", add_bias_check)
    record("relu", lambda r: ad.grad_check(
        lambda x: ad.total(ad.relu(ad.add(x, 0.05))), leaf(r, dim), eps))
    record("sigmoid", lambda r: ad.grad_check(
        lambda x: ad.total(ad.sigmoid(x)), leaf(r, dim), eps))

    def softmax_check(r):
        weights = ad.Tensor(r.normal(size=(3, dim)))
        return ad.grad_check(
            lambda x: ad.total(ad.mul(ad.softmax(x, axis=-1), weights)),
            leaf(r, 3, dim), eps)
    record("softmax", softmax_check)
    record("mean", lambda r: ad.grad_check(
        lambda x: ad.mean(ad.mul(x, x)), leaf(r, dim), eps))
    record("segment_mean", lambda r: ad.grad_check(
        lambda x: ad.total(ad.segment_mean(x, [0, 0, 1, 2, 2], 3)), leaf(r, 5, dim), eps))

    def attention_check(r):
        k = ad.Tensor(r.normal(size=(4, dim)))
        v = ad.Tensor(r.normal(size=(4, dim)))
        return ad.grad_check(
            lambda q: ad.total(ad.scaled_dot_attention(q, k, v)), leaf(r, 2, dim), eps)
    record("scaled_dot_attention", attention_check)

    def cosine_check(r):
        other = ad.Tensor(r.normal(size=dim))
        return ad.grad_check(lambda x: ad.cosine(x, other), leaf(r, dim), eps)
    record("cosine", cosine_check)

    def scalar_leaf(r):
        return ad.Tensor(np.array(r.normal()), requires_grad=True)

    def bpr_check(r):
        t = leaf(r, dim)
        return ad.grad_check_multi(
            lambda p, n, v: bpr_loss(p, n, lam=0.1, theta_norm_sq=ad.dot(v, v)),
            [scalar_leaf(r), scalar_leaf(r), t], eps)
    record("bpr_loss", bpr_check)

    def recon_check(r):
        truth = ad.Tensor(r.normal(size=dim))
        return ad.grad_check(
            lambda x: reconstruction_loss(x, truth),
            ad.Tensor(r.normal(size=dim) + 2.0, requires_grad=True), eps)
    record("reconstruction_loss", recon_check)

    def meta_check(r):
        params = init_meta_learner(rng_for(int(r.integers(1 << 30)), "m"), dim, heads=2)
        truth = ad.Tensor(r.normal(size=dim))
        x = ad.Tensor(r.normal(size=(3, dim)), requires_grad=True)
        return ad.grad_check_multi(
            lambda xq, xk, xv, xi: ad.rsub_const(
                1.0, ad.cosine(meta_embed(xi, params), truth)),
            [params.wq, params.wk, params.wv, x], eps)
    record("meta_embed_loss", meta_check)

    def encoder_check(r):
        s = int(r.integers(1 << 30))
        params = init_gnn_params(rng_for(s, "enc"), dim, depth=2)
        tables = NodeTables.from_arrays(r.normal(size=(3, dim)), r.normal(size=(3, dim)),
                                        trainable=True)
        truth = ad.Tensor(r.normal(size=dim))
        ep = _toy_episode()
        leaves = [params.conv_weights[0], params.final_weight, tables.user, tables.item]
        return ad.grad_check_multi(
            lambda *xs: reconstruction_loss(encode_target(ep, tables, params), truth),
            leaves, eps)
    record("encoder_pipeline", encoder_check)

    def meta_agg_check(r):
        s = int(r.integers(1 << 30))
        meta = init_meta_learner(rng_for(s, "m"), dim, heads=2)
        params = init_meta_agg_params(rng_for(s, "a"), dim, depth=2, meta=meta)
        tables = NodeTables.from_arrays(r.normal(size=(3, dim)), r.normal(size=(3, dim)),
                                        trainable=True)
        truth = ad.Tensor(r.normal(size=dim))
        ep = _toy_episode()
        leaves = [params.conv_weights[0], params.final_weight, meta.wq, meta.wk,
                  meta.wv, tables.user, tables.item]
        return ad.grad_check_multi(
            lambda *xs: reconstruction_loss(encode_with_meta(ep, tables, params), truth),
            leaves, eps)
    record("meta_agg_pipeline", meta_agg_check)

    def policy_check(r):
        s = int(r.integers(1 << 30))
        params = init_sampler_params(rng_for(s, "sp"), dim, depth=2, f_max=1)
        states = r.normal(size=(4, params.state_dim))
        actions = (r.random(4) < 0.5).astype(np.float64)
        traj = Trajectory(orders=[2], states=[states], actions=[actions],
                          log_probs=[np.zeros(4)], terminal_order=2, reward=0.7)
        leaves = [params.w1[0], params.b[0], params.w2[0]]
        return ad.grad_check_multi(
            lambda *xs: reinforce_loss([traj], params), leaves, eps)
    record("policy_log_prob", policy_check)

    return results
