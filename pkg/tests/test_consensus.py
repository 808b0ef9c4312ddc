import numpy as np
import pytest
from hypothesis import given, strategies as st

from capolab import consensus
from capolab.consensus import (
    CapoConfig,
    ExpertFailure,
    aggregate_param_avg,
    allocate_budget,
    best_of_k_select,
    carry_optimizer_state,
    distill_logop,
    expert_shuffle_seed,
    logop_pool,
    run_generation,
    swa_average,
)
from capolab.envs import VecEnv
from capolab.nn import AdamState, NumericError
from capolab.optim import ExpertResult, FrameSet, PpoConfig, mean_kl
from capolab.policy import GaussianDist, dist_at, init_policy_params, kl_diag_gaussian, make_policy
from capolab.rollout import collect_batch
from oracles import grid_logop


def test_logop_equal_variance_is_mean_average():
    q = logop_pool([GaussianDist(np.array([0.0]), np.array([1.0])),
                    GaussianDist(np.array([2.0]), np.array([1.0]))])
    np.testing.assert_allclose(q.mean, [1.0])
    np.testing.assert_allclose(q.std, [1.0])


def test_logop_precision_weighting():
    q = logop_pool([GaussianDist(np.array([0.0]), np.array([1.0])),
                    GaussianDist(np.array([3.0]), np.array([0.5]))])
    assert q.mean[0] == pytest.approx(2.4)
    assert q.var[0] == pytest.approx(0.4)


@given(seed=st.integers(0, 10_000), K=st.integers(2, 4))
def test_logop_matches_grid(seed, K):
    rng = np.random.default_rng(seed)
    means = rng.uniform(-3, 3, K)
    stds = np.exp(rng.uniform(-1, 1, K))
    q = logop_pool([GaussianDist(np.array([m]), np.array([s])) for m, s in zip(means, stds)])
    m, v = grid_logop(means, stds)
    assert q.mean[0] == pytest.approx(m, abs=1e-4)
    assert q.var[0] == pytest.approx(v, rel=1e-4)


def test_logop_batched_states():
    rng = np.random.default_rng(0)
    a = GaussianDist(rng.standard_normal((5, 2)), np.exp(rng.standard_normal((5, 2))))
    b = GaussianDist(rng.standard_normal((5, 2)), np.exp(rng.standard_normal((5, 2))))
    q = logop_pool([a, b])
    for i in range(5):
        qi = logop_pool([a[i], b[i]])
        np.testing.assert_allclose(q.mean[i], qi.mean)
        np.testing.assert_allclose(q.std[i], qi.std)


def test_param_average_example():
    np.testing.assert_allclose(aggregate_param_avg(np.array([0.0]), [np.array([2.0]), np.array([4.0])]), [3.0])
    with pytest.raises(ValueError):
        aggregate_param_avg(np.zeros(2), [np.zeros(3)])


def test_carry_modes():
    inc = AdamState(np.array([1.0]), np.array([2.0]), 5)
    ex = [AdamState(np.array([3.0]), np.array([4.0]), 9), AdamState(np.array([5.0]), np.array([8.0]), 9)]
    s = carry_optimizer_state("incumbent", inc, ex)
    assert s.first_moment[0] == 1.0 and s.step_count == 9
    s = carry_optimizer_state("reset", inc, ex)
    assert s.first_moment[0] == 0.0 and s.second_moment[0] == 0.0 and s.step_count == 9
    s = carry_optimizer_state("best_expert", inc, ex, best_idx=1)
    assert s.first_moment[0] == 5.0 and s.second_moment[0] == 8.0
    s = carry_optimizer_state("average", inc, ex)
    assert s.first_moment[0] == 4.0 and s.second_moment[0] == 6.0
    with pytest.raises(IndexError):
        carry_optimizer_state("best_expert", inc, ex, best_idx=2)
    with pytest.raises(ValueError):
        carry_optimizer_state("nope", inc, ex)


def _result(gain):
    return ExpertResult(np.zeros(1), AdamState.zeros(1), 1, 0.0, gain, [])


def test_best_of_k():
    assert best_of_k_select([_result(0.1), _result(0.3), _result(0.2)])[0] == 1
    assert best_of_k_select([_result(0.5)] * 3)[0] == 0


def test_swa_average():
    np.testing.assert_allclose(swa_average([np.array([1.0, 0.0]), np.array([3.0, 2.0])]), [2.0, 1.0])
    with pytest.raises(ValueError):
        swa_average([])


def test_allocate_budget():
    assert allocate_budget(100_000, 0.1, 4096) == (8192, 22)
    assert allocate_budget(100_000, 0.0, 4096) == (0, 24)
    with pytest.raises(ValueError):
        allocate_budget(4000, 0.0, 4096)


def test_shuffle_seeds_distinct():
    seeds = {expert_shuffle_seed(0, g, k) for g in range(5) for k in range(1, 9)}
    assert len(seeds) == 40
    assert expert_shuffle_seed(3, 2, 1) == expert_shuffle_seed(3, 2, 1)


def test_config_validation():
    for bad in ({"K": 0}, {"aggregation": "x"}, {"carry_mode": "x"}, {"warmup_frac": 1.0}, {"trust_delta": 0.0}):
        with pytest.raises(ValueError):
            CapoConfig(**bad)


@pytest.fixture(scope="module")
def gen_setup():
    pol = make_policy(4, 2, (16, 16))
    p = init_policy_params(pol, 0, output_gain=0.5)
    b = collect_batch(pol, p, VecEnv("pointmass", 4, 3), 128, np.random.default_rng(0))
    adv = np.random.default_rng(1).standard_normal(b.num_frames)
    return pol, p, b, adv


PPO = PpoConfig(epochs=4, minibatches=4, lr=1e-3)


def test_single_expert_equals_plain_ppo(gen_setup):
    pol, p, b, adv = gen_setup
    from capolab.optim import FrameSet, ppo_update

    seed = expert_shuffle_seed(0, 0, 1)
    res, _, _, _ = run_generation(pol, p, None, b, adv, CapoConfig(K=1, aggregation="param_avg"), PPO,
                                  diagnostics=False)
    from dataclasses import replace

    plain = ppo_update(pol, p, None, FrameSet.from_batch(b, adv), None, replace(PPO, shuffle_seed=seed))
    np.testing.assert_array_equal(res.params, plain.params)


def test_identical_seeds_give_no_reduction(gen_setup):
    pol, p, b, adv = gen_setup
    _, rec, _, _ = run_generation(pol, p, None, b, adv, CapoConfig(K=3, aggregation="param_avg"), PPO,
                                  shuffle_seeds=[5, 5, 5])
    assert rec.waste_reduction_ratio == pytest.approx(1.0, rel=1e-9)


def test_param_avg_generation_contracts(gen_setup):
    pol, p, b, adv = gen_setup
    res, rec, _, experts = run_generation(pol, p, None, b, adv, CapoConfig(K=4, aggregation="param_avg"), PPO)
    assert rec.consensus_quad_kl <= rec.mean_expert_quad_kl
    assert rec.waste_reduction_ratio < 1.0
    np.testing.assert_allclose(res.params, np.mean([e.params for e in experts], axis=0))


def test_logop_generation_respects_trust_region(gen_setup):
    pol, p, b, adv = gen_setup
    cfg = CapoConfig(K=4, aggregation="logop", trust_delta=0.04)
    res, _, _, _ = run_generation(pol, p, None, b, adv, cfg, PpoConfig(epochs=10, minibatches=4, lr=3e-3))
    assert res.trust_region_ok
    assert mean_kl(pol, p, res.params, FrameSet.from_batch(b, adv).observations) <= cfg.trust_delta
    assert res.distill_loss_final <= res.distill_loss_init


def test_tight_trust_region_halves_step(gen_setup):
    pol, p, b, adv = gen_setup
    experts = [p + 0.2 * np.random.default_rng(k).standard_normal(p.shape) for k in range(3)]
    cfg = CapoConfig(K=3, trust_delta=1e-4, distill_epochs=5)
    res = distill_logop(p, experts, FrameSet.from_batch(b, adv).observations, cfg, pol)
    assert res.line_search_scale < 1.0
    assert res.consensus_kl <= 1e-4
    assert mean_kl(pol, p, res.params, FrameSet.from_batch(b, adv).observations) == pytest.approx(res.consensus_kl)


def test_pooled_kl_below_mean_expert_kl(gen_setup):
    # per state, the pooled natural parameters are a convex combination
    pol, p, b, adv = gen_setup
    experts = [p + 0.05 * np.random.default_rng(k).standard_normal(p.shape) for k in range(4)]
    ref = dist_at(pol, p, FrameSet.from_batch(b, adv).observations)
    dists = [dist_at(pol, e, FrameSet.from_batch(b, adv).observations) for e in experts]
    pooled = logop_pool(dists)
    kl_pool = kl_diag_gaussian(ref, pooled)
    kl_mean = np.mean([kl_diag_gaussian(ref, d) for d in dists], axis=0)
    assert np.all(kl_pool <= kl_mean + 1e-12)


def test_expert_failure_names_seed(gen_setup, monkeypatch):
    pol, p, b, adv = gen_setup

    def boom(*args, **kwargs):
        raise NumericError("overflow", layer=1)

    monkeypatch.setattr(consensus, "ppo_update", boom)
    with pytest.raises(ExpertFailure) as info:
        run_generation(pol, p, None, b, adv, CapoConfig(K=2), PPO, shuffle_seeds=[11, 12])
    assert info.value.shuffle_seed == 11


def test_threaded_experts_match_serial(gen_setup):
    pol, p, b, adv = gen_setup
    serial, _, _, _ = run_generation(pol, p, None, b, adv, CapoConfig(K=3, workers=1), PPO, diagnostics=False)
    threaded, _, _, _ = run_generation(pol, p, None, b, adv, CapoConfig(K=3, workers=3), PPO, diagnostics=False)
    np.testing.assert_array_equal(serial.params, threaded.params)
