from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from capolab.envs import VecEnv
from capolab.nn import AdamState, NumericError
from capolab.optim import (
    FrameSet,
    PpoConfig,
    TrpoConfig,
    clipped_objective_terms,
    clipped_surrogate_grad,
    clipped_surrogate_loss,
    conjugate_gradient,
    mean_kl,
    ppo_update,
    shuffle_permutation,
    surrogate_gradient,
    trpo_update,
)
from capolab.policy import fisher_vector_product, init_policy_params, make_policy
from capolab.rollout import collect_batch
from oracles import central_difference, dense_fisher


@pytest.fixture(scope="module")
def setup():
    pol = make_policy(4, 2, (8, 8))
    p = init_policy_params(pol, 0, output_gain=0.5)
    b = collect_batch(pol, p, VecEnv("pointmass", 4, 1), 64, np.random.default_rng(0))
    adv = np.random.default_rng(1).standard_normal(b.num_frames)
    return pol, p, FrameSet.from_batch(b, adv)


def test_clip_formula_examples():
    assert -clipped_objective_terms(np.array([1.5]), np.array([1.0]), 0.2)[0] == pytest.approx(1.2)
    assert -clipped_objective_terms(np.array([0.7]), np.array([-1.0]), 0.2)[0] == pytest.approx(-0.8)


def test_identity_ratio(setup):
    pol, p, f = setup
    loss, cf = clipped_surrogate_loss(pol, p, f.observations, f.actions, f.old_log_probs, f.advantages, 0.2)
    assert loss == pytest.approx(-f.advantages.mean(), abs=1e-12) and cf == 0.0


def test_gradient_at_incumbent_is_vanilla_policy_gradient(setup):
    pol, p, f = setup
    _, _, g = clipped_surrogate_grad(pol, p, f.observations, f.actions, f.old_log_probs, f.advantages, 0.2)
    np.testing.assert_allclose(-g, surrogate_gradient(pol, p, f, normalize=False), rtol=1e-10, atol=1e-13)
    fd = central_difference(
        lambda th: clipped_surrogate_loss(pol, th, f.observations, f.actions, f.old_log_probs,
                                          f.advantages, 0.2)[0], p)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_gradient_with_active_clipping(setup):
    pol, p, f = setup
    q = p + np.random.default_rng(3).standard_normal(p.shape) * 0.05
    loss, cf, g = clipped_surrogate_grad(pol, q, f.observations, f.actions, f.old_log_probs,
                                         f.advantages, 0.2, entropy_coef=0.01)
    assert 0.0 < cf < 1.0
    from capolab.policy import dist_at, entropy

    def full(th):
        l, _ = clipped_surrogate_loss(pol, th, f.observations, f.actions, f.old_log_probs, f.advantages, 0.2)
        return l - 0.01 * float(entropy(dist_at(pol, th, f.observations[:1]))[0])

    assert loss == pytest.approx(full(q), rel=1e-12)
    np.testing.assert_allclose(g, central_difference(full, q, h=1e-7), rtol=1e-4, atol=1e-7)


def test_nonfinite_ratio_reports_frame(setup):
    pol, p, f = setup
    old = f.old_log_probs.copy()
    old[5] = -np.inf
    with pytest.raises(NumericError) as info:
        clipped_surrogate_loss(pol, p, f.observations, f.actions, old, f.advantages, 0.2)
    assert info.value.index == 5


def test_shuffle_permutation_is_pure():
    np.testing.assert_array_equal(shuffle_permutation(3, 1, 50), shuffle_permutation(3, 1, 50))
    assert not np.array_equal(shuffle_permutation(3, 1, 50), shuffle_permutation(3, 2, 50))


def test_zero_epochs_is_identity(setup):
    pol, p, f = setup
    res = ppo_update(pol, p, None, f, None, PpoConfig(epochs=0))
    np.testing.assert_array_equal(res.params, p)
    assert res.epochs_run == 0


def test_ppo_determinism_and_seed_diversity(setup):
    pol, p, f = setup
    cfg = PpoConfig(epochs=3, minibatches=4, shuffle_seed=7)
    a = ppo_update(pol, p, AdamState.zeros(len(p)), f, None, cfg)
    b = ppo_update(pol, p, AdamState.zeros(len(p)), f, None, cfg)
    np.testing.assert_array_equal(a.params, b.params)
    np.testing.assert_array_equal(a.adam_state.second_moment, b.adam_state.second_moment)
    c = ppo_update(pol, p, AdamState.zeros(len(p)), f, None, replace(cfg, shuffle_seed=8))
    assert np.linalg.norm(a.params - c.params) > 0
    assert a.epochs_run == 3 and len(a.trace) == 3 and a.adam_state.step_count == 12
    assert a.final_mean_kl == pytest.approx(mean_kl(pol, p, a.params, f.observations))
    assert a.final_mean_kl >= 0


def test_input_state_not_mutated(setup):
    pol, p, f = setup
    p0 = p.copy()
    st0 = AdamState.zeros(len(p))
    ppo_update(pol, p, st0, f, None, PpoConfig(epochs=1, minibatches=2))
    np.testing.assert_array_equal(p, p0)
    assert st0.step_count == 0 and not np.any(st0.first_moment)


def test_early_stop(setup):
    pol, p, f = setup
    res = ppo_update(pol, p, None, f, None, PpoConfig(epochs=20, minibatches=4, lr=3e-3, target_kl=1e-4))
    assert 1 <= res.epochs_run < 20
    assert res.trace[-1]["mean_kl"] > 1e-4
    assert all(t["mean_kl"] <= 1e-4 for t in res.trace[:-1])


def test_lr_anneal_schedule():
    cfg = PpoConfig(lr=1.0, anneal_total_steps=10)
    assert cfg.lr_at(0) == 1.0 and cfg.lr_at(5) == 0.5 and cfg.lr_at(12) == 0.0
    assert PpoConfig(lr=1.0, lr_anneal=False, anneal_total_steps=10).lr_at(5) == 1.0


def test_snapshots_one_per_epoch(setup):
    pol, p, f = setup
    res = ppo_update(pol, p, None, f, None, PpoConfig(epochs=4, minibatches=2), keep_snapshots=True)
    assert len(res.snapshots) == 4
    np.testing.assert_array_equal(res.snapshots[-1], res.params)


def test_cg_examples():
    b = np.array([3.0, -1.0, 2.0])
    np.testing.assert_allclose(conjugate_gradient(lambda v: v, b, 1), b)
    np.testing.assert_allclose(conjugate_gradient(lambda v: np.array([2.0, 4.0]) * v, np.array([2.0, 4.0]), 5),
                               [1.0, 1.0])
    A = np.array([[4.0, 1.0], [1.0, 3.0]])
    np.testing.assert_allclose(conjugate_gradient(lambda v: A @ v, np.array([1.0, 2.0]), 5),
                               [1 / 11, 7 / 11], rtol=1e-12)
    assert not np.any(conjugate_gradient(lambda v: A @ v, np.zeros(2), 5))


@given(seed=st.integers(0, 10_000), n=st.integers(1, 50))
def test_cg_residual_random_spd(seed, n):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((n, n))
    A = M @ M.T + 0.5 * np.eye(n)
    b = rng.standard_normal(n)
    x = conjugate_gradient(lambda v: A @ v, b, 4 * n, tol=1e-12)
    assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) < 1e-8


def test_fvp_linear(setup):
    pol, p, f = setup
    rng = np.random.default_rng(0)
    u, v = rng.standard_normal((2, len(p)))
    lhs = fisher_vector_product(pol, p, f.observations, 2.0 * u - 3.0 * v, 0.1)
    rhs = 2.0 * fisher_vector_product(pol, p, f.observations, u, 0.1) - \
        3.0 * fisher_vector_product(pol, p, f.observations, v, 0.1)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)
    assert not np.any(fisher_vector_product(pol, p, f.observations, np.zeros(len(p))))


def test_trpo_zero_gradient(setup):
    pol, p, f = setup
    res = trpo_update(pol, p, replace(f, advantages=np.zeros(len(f))), None, TrpoConfig())
    np.testing.assert_array_equal(res.params, p)
    assert res.epochs_run == 0


def test_trpo_accepted_step_inside_trust_region(setup):
    pol, p, f = setup
    cfg = TrpoConfig(max_kl=0.01)
    res = trpo_update(pol, p, f, None, cfg)
    assert res.epochs_run == 1
    assert mean_kl(pol, p, res.params, f.observations) <= cfg.max_kl


def test_trpo_direction_matches_dense_solve():
    pol = make_policy(3, 1, (4,))
    p = init_policy_params(pol, 2, output_gain=1.0)
    rng = np.random.default_rng(5)
    obs = rng.standard_normal((40, 3))
    from capolab.policy import dist_at, log_prob, sample_action

    d = dist_at(pol, p, obs)
    acts = sample_action(d, rng)
    frames = FrameSet(obs, acts, log_prob(d, acts), rng.standard_normal(40))
    cfg = TrpoConfig(max_kl=1e-3, damping=0.1, cg_iters=4 * pol.num_params)
    res = trpo_update(pol, p, frames, None, cfg)
    assert res.epochs_run == 1
    F = dense_fisher(pol, p, obs) + cfg.damping * np.eye(pol.num_params)
    x = np.linalg.solve(F, surrogate_gradient(pol, p, frames))
    step = res.params - p
    cos = step @ x / (np.linalg.norm(step) * np.linalg.norm(x))
    assert np.arccos(min(cos, 1.0)) < 1e-3


def test_trpo_rejection_returns_incumbent(setup):
    pol, p, f = setup
    res = trpo_update(pol, p, f, None, TrpoConfig(max_kl=10.0, max_backtracks=1))
    if res.epochs_run == 0:
        np.testing.assert_array_equal(res.params, p)
    else:
        assert mean_kl(pol, p, res.params, f.observations) <= 10.0
