"""Acceptance gate: one test per criterion, each emitting a single PASS/FAIL line.

Training runs are shared between criteria through ``_runs``. Run this file as
a script to print the lines without pytest.
"""
import csv
import functools
import io
import math
import time

import numpy as np

from capolab import kernels, nn
from capolab.consensus import logop_pool
from capolab.fisher import decompose_update, natural_direction
from capolab.harness import load_config, run_seed
from capolab.harness.config import METHODS
from capolab.harness.runner import PROGRESS_COLUMNS, _fmt
from capolab.optim import conjugate_gradient
from capolab.policy import GaussianDist, dist_at, init_policy_params, log_prob_grad, make_policy, sample_action
from capolab.theory import CLAUSES, certify
from oracles import brute_force_gae, central_difference, dense_fisher, grid_logop

try:
    from conftest import ACCEPTANCE_LINES
except ImportError:  # script mode
    ACCEPTANCE_LINES = []

SEEDS = (0, 1, 2)


def report(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@functools.lru_cache(maxsize=None)
def _runs(*overrides, seeds=SEEDS):
    """Full-budget PointMass (unless overridden) runs, one per seed."""
    cfg = load_config(None, overrides).validate()
    return tuple(run_seed(cfg, s) for s in seeds)


def _mean_final(records):
    return float(np.mean([r.final_return for r in records]))


def _final_waste_kl(records):
    return float(np.mean([0.5 * r.diagnostics[-1].consensus.waste_norm_sq for r in records]))


def _generation_diagnostics(records):
    return [d for r in records for d in r.diagnostics if d.extra.get("phase") == "generation"]


# -- property-based -------------------------------------------------------

def test_criterion_01_theorem_certification():
    start = time.perf_counter()
    res = certify(10_000, seed=0, tol=1e-12)
    elapsed = time.perf_counter() - start
    ok = res.ok and elapsed < 10.0
    viol = ",".join(f"{c}={res.violations[c]}" for c in CLAUSES)
    report(1, ok, f"10000 instances, violations {viol}, {elapsed:.2f} s (limit 10 s)")


@functools.lru_cache(maxsize=None)
def _dense_instances():
    # inputs at scale 3 keep the tanh units nonlinear so the exact Fisher is well conditioned
    out = []
    for i in range(100):
        rng = np.random.default_rng(i)
        obs_dim, act_dim, width = int(rng.integers(2, 6)), int(rng.integers(1, 3)), int(rng.integers(2, 6))
        pol = make_policy(obs_dim, act_dim, (width,))
        p = init_policy_params(pol, i, output_gain=1.0)
        states = 3.0 * rng.standard_normal((64, obs_dim))
        F = dense_fisher(pol, p, states)
        actions = sample_action(dist_at(pol, p, states), rng)
        g = log_prob_grad(pol, p, states, actions, rng.standard_normal(64)) / 64
        delta = 0.01 * rng.standard_normal(pol.num_params)
        apply_F = lambda v, F=F: F @ v  # noqa: E731
        d_hat, norm = natural_direction(apply_F, g, cg_iters=10 * pol.num_params, tol=1e-14)
        out.append((pol.num_params, F, g, delta, decompose_update(delta, d_hat, apply_F), norm))
    return out


def test_criterion_02_fisher_pythagoras():
    inst = _dense_instances()
    errs = [abs(delta @ F @ delta - dec.c**2 - dec.waste_norm_sq) / (delta @ F @ delta)
            for _, F, _, delta, dec, _ in inst]
    worst = max(errs)
    report(2, worst < 1e-6 and max(i[0] for i in inst) <= 200,
           f"{len(inst)} instances, max params {max(i[0] for i in inst)}, worst rel err {worst:.2e} (< 1e-6)")


def test_criterion_03_first_order_identity():
    errs = [abs(g @ delta - dec.c * norm) / abs(g @ delta) for _, _, g, delta, dec, norm in _dense_instances()]
    worst = max(errs)
    report(3, worst < 1e-6, f"100 instances, worst rel err {worst:.2e} (< 1e-6)")


def test_criterion_04_logop_closed_form():
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(100):
        means = rng.uniform(-3, 3, 2)
        stds = np.exp(rng.uniform(-1, 1, 2))
        if i < 10:
            stds[1] = stds[0]
        q = logop_pool([GaussianDist(np.array([m]), np.array([s])) for m, s in zip(means, stds)])
        m, v = grid_logop(means, stds)
        worst = max(worst, abs(q.mean[0] - m), abs(q.var[0] - v))
        if i < 10:
            # equal variances: the pool is the mean-of-means distribution
            worst = max(worst, abs(q.mean[0] - means.mean()), abs(q.std[0] - stds[0]))
    report(4, worst < 1e-4, f"100 pairs (10 equal-variance), worst abs err {worst:.2e} (< 1e-4)")


def test_criterion_05_gradient_correctness():
    worst = 0.0
    for i in range(50):
        rng = np.random.default_rng(i)
        depth = int(rng.integers(1, 4))
        spec = nn.MlpSpec(int(rng.integers(1, 6)), tuple(int(h) for h in rng.integers(2, 9, depth)),
                          int(rng.integers(1, 4)))
        p = 0.7 * rng.standard_normal(spec.num_params)
        x = rng.standard_normal((8, spec.input_dim))
        w = rng.standard_normal((8, spec.output_dim))

        def loss_fn(out):
            return float(np.sum(w * out + 0.5 * out**2)), w + out

        _, g = nn.loss_gradient(spec, p, x, loss_fn)
        fd = central_difference(lambda th: loss_fn(nn.mlp_forward(spec, th, x))[0], p, h=1e-6)
        # coordinates below 1e-6 in magnitude are compared absolutely
        rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-6)
        worst = max(worst, float(rel.max()))
    report(5, worst < 1e-4, f"50 nets, worst per-coordinate rel err {worst:.2e} (< 1e-4)")


def test_criterion_06_gae_brute_force():
    worst = 0.0
    for i in range(200):
        rng = np.random.default_rng(i)
        T = int(rng.integers(1, 65))
        r, v, nv = rng.standard_normal((3, T))
        term = rng.random(T) < 0.1
        dones = term | (rng.random(T) < 0.1)
        got = kernels.gae(r[:, None], v[:, None], nv[:, None], term[:, None], dones[:, None], 0.99, 0.95)[:, 0]
        ref = brute_force_gae(r, v, nv, term, dones, 0.99, 0.95)
        worst = max(worst, float(np.max(np.abs(got - ref))))
    report(6, worst < 1e-12, f"200 episodes, worst abs err {worst:.2e} (< 1e-12), backend {kernels.BACKEND}")


def test_criterion_07_conjugate_gradient():
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng(i)
        n = int(rng.integers(1, 51))
        M = rng.standard_normal((n, n))
        A = M @ M.T + 0.1 * np.eye(n)
        b = rng.standard_normal(n)
        x = conjugate_gradient(lambda u: A @ u, b, 10 * n, tol=1e-12)
        worst = max(worst, float(np.linalg.norm(A @ x - b) / np.linalg.norm(b)))
    report(7, worst < 1e-8, f"100 SPD systems, worst rel residual {worst:.2e} (< 1e-8)")


def test_criterion_08_trust_region_contract():
    logop = _runs("method=capo_logop", "capo.K=2")
    delta = load_config(None, ["method=capo_logop"]).capo.trust_delta
    gen_kls = [row["mean_kl"] for r in logop for row in r.rows if row["phase"] == "generation"]
    trpo = _runs("method=trpo", seeds=(0,))
    max_kl = load_config(None, ["method=trpo"]).trpo.max_kl
    acc_kls = [row["mean_kl"] for r in trpo for row in r.rows if row["accepted"]]
    ok = max(gen_kls) <= delta and (not acc_kls or max(acc_kls) <= max_kl)
    report(8, ok, f"CAPO-LogOP {len(gen_kls)} generations max KL {max(gen_kls):.4g} (<= {delta}); "
                  f"TRPO {len(acc_kls)} accepted steps max KL {max(acc_kls, default=0.0):.4g} (<= {max_kl})")


def _progress_bytes(record):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PROGRESS_COLUMNS)
    for row in record.rows:
        w.writerow([_fmt(row.get(c)) for c in PROGRESS_COLUMNS])
    return buf.getvalue().encode()


def test_criterion_09_determinism():
    tiny = ["num_envs=2", "horizon=64", "total_frames=384", "hidden_dims=8,8", "eval_episodes=2",
            "ppo.epochs=2", "ppo.minibatches=4", "value.epochs=2", "capo.K=2", "capo.distill_epochs=3"]
    differing = []
    for method in METHODS:
        cfg = load_config(None, tiny + [f"method={method}"])
        if _progress_bytes(run_seed(cfg, 11)) != _progress_bytes(run_seed(cfg, 11)):
            differing.append(method)
    report(9, not differing, f"{len(METHODS)} methods, byte-identical progress.csv"
                             + (f"; differing: {','.join(differing)}" if differing else ""))


# -- quantitative trends --------------------------------------------------

def test_criterion_10_depth_dilemma():
    e4, e10, e40 = (_runs("method=ppo", f"ppo.epochs={E}") for E in (4, 10, 40))
    w4, w40 = _final_waste_kl(e4), _final_waste_kl(e40)
    r10, r40 = _mean_final(e10), _mean_final(e40)
    ok = w40 >= 3.0 * w4 and r40 < r10
    report(10, ok, f"waste KL E=40/E=4 = {w40 / w4:.1f}x (>= 3x); "
                   f"return E=40 {r40:.3f} vs E=10 {r10:.3f} (need E=40 < E=10)")


def test_criterion_11_compute_matched_depth():
    pm_ppo = _mean_final(_runs("method=ppo", "ppo.epochs=10"))
    pm_kx = _mean_final(_runs("method=ppo_kx", "capo.K=4", "ppo.epochs=10"))
    pd_ppo = _mean_final(_runs("env_id=pendulum", "method=ppo", "ppo.epochs=10"))
    pd_kx = _mean_final(_runs("env_id=pendulum", "method=ppo_kx", "capo.K=4", "ppo.epochs=10"))
    ok = pm_kx <= pm_ppo and pd_kx <= pd_ppo
    report(11, ok, f"PointMass PPO-4x {pm_kx:.3f} vs PPO {pm_ppo:.3f}; "
                   f"Pendulum PPO-4x {pd_kx:.1f} vs PPO {pd_ppo:.1f} (need 4x <= PPO on both)")


def test_criterion_12_waste_reduction():
    diags = _generation_diagnostics(_runs("method=capo_avg", "capo.K=4"))
    ratios = [d.waste_reduction_ratio for d in diags]
    frac = float(np.mean([x < 1.0 for x in ratios if math.isfinite(x)]))
    report(12, frac >= 0.8, f"CAPO-Avg ratio < 1 in {100 * frac:.1f}% of {len(ratios)} generations (>= 80%)")


def test_criterion_13_consensus_contraction():
    diags = _generation_diagnostics(_runs("method=capo_avg", "capo.K=4"))
    bad = sum(d.consensus_quad_kl > d.mean_expert_quad_kl for d in diags)
    report(13, bad == 0 and len(diags) > 0,
           f"CAPO-Avg consensus quad KL <= mean expert quad KL in {len(diags) - bad}/{len(diags)} generations")


def test_criterion_14_width_does_not_degrade():
    r2 = _mean_final(_runs("method=capo_logop", "capo.K=2"))
    r8 = _mean_final(_runs("method=capo_logop", "capo.K=8"))
    # returns are negative, so the 10% allowance is taken on the magnitude
    ok = r8 >= r2 - 0.1 * abs(r2)
    report(14, ok, f"CAPO-LogOP K=8 {r8:.3f} vs K=2 {r2:.3f} (need >= {r2 - 0.1 * abs(r2):.3f}; "
                   f"literal 0.9*R2 = {0.9 * r2:.3f})")


if __name__ == "__main__":
    failed = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_criterion_"):
            try:
                fn()
            except AssertionError:
                failed += 1
    raise SystemExit(1 if failed else 0)
