import numpy as np
import numpy.testing as npt
import pytest

from coldrec import autodiff as ad
from coldrec.encoder import NodeTables, init_gnn_params, train_reconstruction
from coldrec.graph import build_episode
from coldrec.sampler import (SamplerParams, Trajectory, collect_trajectories,
                             episode_reward, init_sampler_params, policy_prob,
                             reinforce_gradients, reinforce_update, run_sampling,
                             sample_order, state_dim, state_features)
from coldrec.seeds import rng_for
from coldrec.synthetic import planted_synthetic


def test_state_dim_arithmetic():
    assert state_dim(256, 8) == 2570
    assert state_dim(16, 8) == 170


def test_state_features_candidate_equals_target():
    d = 4
    target = np.array([0.5, -1.0, 2.0, 0.25])
    s = state_features(target, target, [], f_max=2)
    assert s.shape == (state_dim(d, 2),)
    assert s[0] == pytest.approx(1.0)
    npt.assert_allclose(s[1:d + 1], target * target)
    npt.assert_allclose(s[d + 1:], np.zeros(2 * (d + 1) + d + 1))


def test_state_features_selected_blocks():
    d = 3
    target = np.array([1.0, 0.0, 0.0])
    cand = np.array([0.0, 1.0, 0.0])
    sel = [np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0])]
    s = state_features(target, cand, sel, f_max=3)
    base = d + 1
    avg = np.mean(sel, axis=0)
    assert s[base] == pytest.approx(float(cand @ avg) / (np.linalg.norm(cand) * np.linalg.norm(avg)))
    npt.assert_allclose(s[base + 1:base + 1 + d], cand * avg)
    blk2 = 2 * base
    assert s[blk2] == pytest.approx(1.0)  # cand == sel[0]
    blk_last = 4 * base
    npt.assert_allclose(s[blk_last:], np.zeros(base))  # padding slot


def make_params(dim=4, depth=3, f_max=2, seed=0):
    return init_sampler_params(rng_for(seed, "sp"), dim, depth, f_max)


def test_policy_prob_zero_weights_is_half():
    p = make_params()
    for w in p.w1:
        w.data[:] = 0.0
    for w in p.w2:
        w.data[:] = 0.0
    s = np.random.default_rng(0).normal(size=p.state_dim)
    assert policy_prob(s, p, 2) == pytest.approx(0.5)


def test_policy_prob_matches_scalar_loop_oracle():
    p = make_params(seed=3)
    rng = np.random.default_rng(1)
    s = rng.normal(size=p.state_dim)
    w1, b, w2 = p.w1[0].data, p.b[0].data, p.w2[0].data
    h = np.zeros(len(b))
    for r in range(len(b)):
        acc = b[r]
        for c in range(len(s)):
            acc += w1[r, c] * s[c]
        h[r] = max(acc, 0.0)
    logit = sum(w2[r] * h[r] for r in range(len(h)))
    expect = 1.0 / (1.0 + np.exp(-logit))
    assert policy_prob(s, p, 2) == pytest.approx(expect, abs=1e-12)
    # complement rule
    assert (1.0 - expect) == pytest.approx(1.0 - policy_prob(s, p, 2))


def test_sample_order_saturated_policies():
    p = make_params(seed=4)
    rng = np.random.default_rng(2)
    states = rng.normal(size=(5, p.state_dim))
    cands = [10, 11, 12, 13, 14]
    p.w1[0].data[:] = 0.0
    p.b[0].data[:] = 1.0
    p.w2[0].data[:] = 50.0  # σ -> 1
    actions, kept, _ = sample_order(cands, states, p, 2, rng_for(0, "draw"))
    assert kept == cands and actions.sum() == 5
    p.w2[0].data[:] = -50.0  # σ -> 0
    actions, kept, _ = sample_order(cands, states, p, 2, rng_for(0, "draw"))
    assert kept == [] and actions.sum() == 0


def test_sample_order_deterministic_under_seed():
    p = make_params(seed=5)
    rng = np.random.default_rng(3)
    states = rng.normal(size=(8, p.state_dim))
    cands = list(range(8))
    a1, k1, l1 = sample_order(cands, states, p, 2, rng_for(7, "draw"))
    a2, k2, l2 = sample_order(cands, states, p, 2, rng_for(7, "draw"))
    npt.assert_array_equal(a1, a2)
    assert k1 == k2
    npt.assert_array_equal(l1, l2)


def synthetic_setup(seed=0, depth=3):
    data = planted_synthetic(seed, num_users=40, num_items=40, dim=8, clusters=4,
                             user_deg=4)
    tables = NodeTables.from_arrays(data.init_user, data.init_item)
    enc = init_gnn_params(rng_for(seed, "enc"), 8, depth=depth)
    return data, tables, enc


def test_run_sampling_keep_all_preserves_episode():
    data, tables, enc = synthetic_setup()
    sp = make_params(dim=8, depth=3, f_max=2, seed=6)
    for w in sp.w2:
        w.data[:] = 100.0
    for w in sp.w1:
        w.data[:] = 0.0
    for b in sp.b:
        b.data[:] = 1.0
    ep = build_episode(data.graph, 0, k=3, l=3, seed=1)
    pruned, traj = run_sampling(ep, tables, sp, rng_for(0, "r"))
    assert pruned.hops == ep.hops
    assert pruned.children == ep.children
    assert traj.terminal_order == 3


def test_run_sampling_drop_all_terminates_at_order2():
    data, tables, enc = synthetic_setup()
    sp = make_params(dim=8, depth=3, f_max=2, seed=7)
    for w in sp.w2:
        w.data[:] = -100.0
    for w in sp.w1:
        w.data[:] = 0.0
    for b in sp.b:
        b.data[:] = 1.0
    ep = build_episode(data.graph, 1, k=3, l=3, seed=2)
    pruned, traj = run_sampling(ep, tables, sp, rng_for(1, "r"))
    assert traj.terminal_order == 2
    assert pruned.depth == 1
    assert pruned.hops[0] == ep.hops[0]  # first hop always kept
    assert len(traj.orders) == 1


def test_run_sampling_prunes_orphans_and_stays_valid():
    data, tables, enc = synthetic_setup()
    sp = make_params(dim=8, depth=3, f_max=2, seed=8)
    saw_orphan_removal = False
    for s in range(25):
        ep = build_episode(data.graph, s % data.graph.num_users, k=3, l=3, seed=s)
        pruned, traj = run_sampling(ep, tables, sp, rng_for(s, "r"))
        # every surviving deep node must still hang off a kept parent
        for m in range(1, pruned.depth):
            union = set()
            for v in pruned.hops[m - 1]:
                union.update(pruned.children_of(m, v))
            assert set(pruned.hops[m]) == union
            for v, cs in pruned.children[m - 1].items():
                assert set(cs) <= set(ep.children_of(m, v))
        if pruned.depth >= 2 and traj.orders:
            kept2 = set(pruned.hops[1])
            # a hop-3 node reachable only through dropped hop-2 parents never appears
            if len(ep.hops) >= 3:
                kept3 = set(pruned.hops[2]) if pruned.depth >= 3 else set()
                for node in ep.hops[2]:
                    parents = [v for v in ep.hops[1]
                               if node in ep.children_of(2, v)]
                    if parents and all(p not in kept2 for p in parents):
                        assert node not in kept3
                        saw_orphan_removal = True
    assert saw_orphan_removal


def test_trajectory_log_probs_match_recorded_policy():
    data, tables, enc = synthetic_setup()
    sp = make_params(dim=8, depth=3, f_max=2, seed=9)
    ep = build_episode(data.graph, 3, k=3, l=3, seed=4)
    _, traj = run_sampling(ep, tables, sp, rng_for(2, "r"))
    for order, states, actions, logp in zip(traj.orders, traj.states, traj.actions,
                                            traj.log_probs):
        for s, a, lp in zip(states, actions, logp):
            p = policy_prob(s, sp, order)
            expect = np.log(p) if a == 1.0 else np.log(1.0 - p)
            assert lp == pytest.approx(expect, abs=1e-10)


def test_episode_reward_keep_all_is_exactly_zero():
    data, tables, enc = synthetic_setup()
    ep = build_episode(data.graph, 5, k=3, l=3, seed=3)
    r = episode_reward(ep, ep, tables, enc, data.truth_user[5])
    assert r == 0.0


def test_episode_reward_bounded():
    data, tables, enc = synthetic_setup()
    sp = make_params(dim=8, depth=3, f_max=2, seed=10)
    for s in range(10):
        ep = build_episode(data.graph, s, k=3, l=3, seed=s)
        pruned, _ = run_sampling(ep, tables, sp, rng_for(s, "rr"))
        r = episode_reward(ep, pruned, tables, enc, data.truth_user[s])
        assert -2.0 <= r <= 2.0


def test_dropping_noise_neighbor_yields_positive_reward():
    # plant noise users, briefly train the encoder on clean targets, then
    # check that pruning all noise users out of an episode helps
    data = planted_synthetic(3, num_users=60, num_items=40, dim=8, clusters=4,
                             user_deg=4, noise_user_frac=0.4)
    tables = NodeTables.from_arrays(data.init_user, data.init_item)
    enc = init_gnn_params(rng_for(11, "enc"), 8, depth=3)
    clean = [u for u in data.graph.users if u not in data.noise_users]
    train_reconstruction(data.graph, clean, data.truth_user, tables, enc,
                         k=3, epochs=20, lr=0.02, seed=5)
    rewards = []
    for t_id in clean[:20]:
        ep = build_episode(data.graph, t_id, k=3, l=3, seed=100 + t_id)
        if not any(n in data.noise_users for n in ep.hops[1]):
            continue
        kept2 = [n for n in ep.hops[1] if n not in data.noise_users]
        if not kept2:
            continue
        kept2_set = set(kept2)
        children1 = {v: tuple(c for c in ep.children_of(1, v) if c in kept2_set)
                     for v in ep.hops[0]}
        kept3 = sorted({c for v in kept2 for c in ep.children_of(2, v)})
        children2 = {v: ep.children_of(2, v) for v in kept2}
        from coldrec.graph import Episode
        pruned = Episode(target=ep.target, side=ep.side, k=ep.k, seed=ep.seed,
                         hops=[ep.hops[0], kept2, kept3],
                         children=[children1, children2])
        rewards.append(episode_reward(ep, pruned, tables, enc, data.truth_user[t_id]))
    assert rewards, "no episodes with planted noise in hop 2"
    assert np.mean(rewards) > 0.0


def test_reinforce_zero_rewards_no_update():
    sp = make_params(seed=12)
    before = {k: v.data.copy() for k, v in sp.named().items()}
    traj = Trajectory(orders=[2], states=[np.random.default_rng(0).normal(size=(3, sp.state_dim))],
                      actions=[np.array([1.0, 0.0, 1.0])],
                      log_probs=[np.zeros(3)], terminal_order=2, reward=0.0)
    reinforce_update([traj], sp, lr=0.5)
    for k, v in sp.named().items():
        npt.assert_array_equal(v.data, before[k])


def test_reinforce_single_action_gradient_hand_checked():
    # one action, reward 1: ascent gradient equals ∇ log σ(w2·relu(W1 s + b))
    sp = SamplerParams(dim=1, depth=2, f_max=0)
    sp.w1.append(ad.parameter(np.array([[0.3, -0.2, 0.5, 0.1]])))
    sp.b.append(ad.parameter(np.array([0.05])))
    sp.w2.append(ad.parameter(np.array([0.0])))  # p = σ(0) = 0.5
    s = np.array([1.0, 0.5, -0.25, 2.0])
    h = max(float((sp.w1[0].data @ s)[0]) + float(sp.b[0].data[0]), 0.0)
    p = 0.5
    traj = Trajectory(orders=[2], states=[s[None, :]], actions=[np.array([1.0])],
                      log_probs=[np.array([np.log(p)])], terminal_order=2, reward=1.0)
    grads = reinforce_gradients([traj], sp)
    # d log σ(x)/d w2 = (1 - p) * h
    npt.assert_allclose(grads["sampler/w2_2"], [(1.0 - p) * h], atol=1e-12)


def test_reinforce_monte_carlo_matches_analytic_gradient():
    # frozen 1-parameter policy: only w2 varies; single state, single action
    sp = SamplerParams(dim=1, depth=2, f_max=0)
    sp.w1.append(ad.parameter(np.array([[1.0, 0.0, 0.0, 0.0]])))
    sp.b.append(ad.parameter(np.array([0.0])))
    sp.w2.append(ad.parameter(np.array([0.4])))
    s = np.array([1.0, 0.0, 0.0, 0.0])  # h = 1, logit = w2
    w2 = 0.4
    p = 1.0 / (1.0 + np.exp(-w2))
    r1, r0 = 2.0, -1.0
    analytic = (r1 - r0) * p * (1.0 - p)  # d/dw2 of p*r1 + (1-p)*r0
    rng = rng_for(99, "mc")
    total = np.zeros(1)
    n = 10000
    for _ in range(n):
        a = 1.0 if rng.random() < p else 0.0
        traj = Trajectory(orders=[2], states=[s[None, :]], actions=[np.array([a])],
                          log_probs=[np.zeros(1)], terminal_order=2,
                          reward=r1 if a == 1.0 else r0)
        total += reinforce_gradients([traj], sp)["sampler/w2_2"]
    estimate = total[0] / n
    assert abs(estimate - analytic) / abs(analytic) < 0.05


def test_collect_trajectories_attaches_single_delayed_reward():
    data, tables, enc = synthetic_setup(seed=4)
    sp = make_params(dim=8, depth=3, f_max=2, seed=13)
    episode, pruned, trajs = collect_trajectories(
        data.graph, 2, data.truth_user[2], tables, enc, sp,
        k=3, side="user", seed=0, epoch=0, m_trajectories=3)
    assert len(trajs) == 3
    for traj in trajs:
        assert isinstance(traj.reward, float)
        assert traj.terminal_order in (2, 3)
        assert len(traj.orders) == len(traj.states) == len(traj.actions)
