import numpy as np
import numpy.testing as npt
import pytest

from coldrec.encoder import NodeTables
from coldrec.errors import ConfigError, StagingError
from coldrec.orchestrator import (STAGES, PipelineState, TrainingSchedule,
                                  load_state, new_state, run_all_stages, run_stage,
                                  save_state, soft_update)
from coldrec.synthetic import planted_synthetic


def test_soft_update_values():
    assert soft_update(np.array(2.0), np.array(1.0), 0.1) == pytest.approx(1.1)
    npt.assert_allclose(soft_update(np.ones(3), np.ones(3), 0.3), np.ones(3))
    # lam -> 0 limit keeps the old parameters
    npt.assert_allclose(soft_update(np.full(2, 9.0), np.zeros(2), 1e-12), np.zeros(2),
                        atol=1e-10)


def test_soft_update_validates():
    with pytest.raises(ConfigError):
        soft_update(np.ones(2), np.ones(2), 0.0)
    with pytest.raises(Exception):
        soft_update(np.ones(2), np.ones(3), 0.5)


def test_schedule_validates_blend():
    with pytest.raises(ConfigError):
        TrainingSchedule(lam_blend=1.5)


def small_setup(seed=0, epochs=None):
    data = planted_synthetic(seed, num_users=30, num_items=30, dim=8, clusters=4,
                             user_deg=4, noise_user_frac=0.2)
    tables = NodeTables.from_arrays(data.init_user, data.init_item)
    sched = TrainingSchedule(dim=8, depth=3, k=3, heads=2, f_max=2,
                             m_trajectories=2, seed=seed,
                             epochs=epochs or {"meta_learner": 3, "meta_agg": 3,
                                               "sampler": 2, "joint": 2})
    targets = [u for u in data.graph.users if u not in data.noise_users]
    state = new_state(sched, "user", targets, data.truth_user, tables)
    return data, state


def test_stage_order_enforced():
    data, state = small_setup()
    with pytest.raises(StagingError):
        run_stage("meta_agg", state, data.graph)
    with pytest.raises(StagingError):
        run_stage("sampler", state, data.graph)
    with pytest.raises(StagingError):
        run_stage("joint", state, data.graph)
    with pytest.raises(StagingError):
        run_stage("bogus", state, data.graph)


def test_sampler_stage_freezes_encoder_and_meta():
    data, state = small_setup(seed=1)
    run_stage("meta_learner", state, data.graph)
    run_stage("meta_agg", state, data.graph)
    before = {k: v.data.copy() for k, v in state.meta.named().items()}
    before.update({k: v.data.copy() for k, v in state.agg.named().items()})
    run_stage("sampler", state, data.graph)
    after = {k: v.data for k, v in state.meta.named().items()}
    after.update({k: v.data for k, v in state.agg.named().items()})
    for k in before:
        npt.assert_array_equal(before[k], after[k])


def test_joint_stage_applies_soft_update_each_epoch(tmp_path):
    # post = lam*new + (1-lam)*pre, and `new` does not depend on lam within
    # one epoch, so (post - pre)/lam must agree across two lam values
    epochs = {"meta_learner": 2, "meta_agg": 2, "sampler": 1, "joint": 1}
    data, state = small_setup(seed=2, epochs=epochs)
    for stage in ("meta_learner", "meta_agg", "sampler"):
        run_stage(stage, state, data.graph)
    from coldrec.orchestrator import save_state
    path = str(tmp_path / "pre_joint.ckpt")
    save_state(state, path)
    deltas = {}
    for lam in (0.1, 0.5):
        st, _ = load_state(path)
        st.schedule.lam_blend = lam
        pre = {k: v.data.copy() for k, v in st.named_tensors().items()}
        run_stage("joint", st, data.graph)
        deltas[lam] = {k: (v.data - pre[k]) / lam for k, v in st.named_tensors().items()}
    moved = 0
    for k in deltas[0.1]:
        npt.assert_allclose(deltas[0.1][k], deltas[0.5][k], atol=1e-9)
        if np.any(np.abs(deltas[0.1][k]) > 0):
            moved += 1
    assert moved > 0


def test_stage_histories_recorded():
    data, state = small_setup(seed=3)
    run_all_stages(state, data.graph)
    assert len(state.history["meta_learner"]) == state.schedule.epochs["meta_learner"]
    assert len(state.history["joint"]) == state.schedule.epochs["joint"]
    for s in STAGES:
        assert state.is_complete(s)


def test_checkpoint_roundtrip_bitwise(tmp_path):
    data, state = small_setup(seed=4, epochs={"meta_learner": 2, "meta_agg": 1,
                                              "sampler": 1, "joint": 1})
    run_stage("meta_learner", state, data.graph)
    run_stage("meta_agg", state, data.graph)
    path = str(tmp_path / "state.ckpt")
    save_state(state, path, fingerprint="fp123")
    restored, fp = load_state(path)
    assert fp == "fp123"
    assert restored.stage_epoch == state.stage_epoch
    assert restored.targets == state.targets
    for k, v in state.named_tensors().items():
        npt.assert_array_equal(restored.named_tensors()[k].data, v.data)
    npt.assert_array_equal(restored.truth, state.truth)
    npt.assert_array_equal(restored.tables.user.data, state.tables.user.data)
    for key, opt in state.opt_state.items():
        for kk, vv in opt.items():
            if kk == "t":
                assert restored.opt_state[key]["t"] == vv
            else:
                npt.assert_array_equal(restored.opt_state[key][kk], vv)


def test_resume_matches_uninterrupted_run(tmp_path):
    epochs = {"meta_learner": 4, "meta_agg": 2, "sampler": 1, "joint": 1}
    # run A: train 2 epochs, checkpoint (canonicalizes), finish
    data, state_a = small_setup(seed=5, epochs=epochs)
    run_stage("meta_learner", state_a, data.graph, max_epochs=2)
    path = str(tmp_path / "mid.ckpt")
    save_state(state_a, path)
    run_stage("meta_learner", state_a, data.graph)
    # run B: restore and finish
    state_b, _ = load_state(path)
    run_stage("meta_learner", state_b, data.graph)
    assert state_b.history["meta_learner"][-1] == pytest.approx(
        state_a.history["meta_learner"][-1], abs=1e-12)
    for k, v in state_a.meta.named().items():
        npt.assert_array_equal(state_b.meta.named()[k].data, v.data)


def test_full_pipeline_improves_reconstruction():
    data, state = small_setup(seed=6, epochs={"meta_learner": 5, "meta_agg": 8,
                                              "sampler": 3, "joint": 3})
    run_all_stages(state, data.graph)
    hist = state.history["meta_agg"]
    assert hist[-1] < hist[0]
