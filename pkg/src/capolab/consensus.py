"""K-expert fan-out on one batch and aggregation into a single consensus policy."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from capolab import fisher, nn
from capolab.nn import AdamState
from capolab.optim import FrameSet, ppo_update, surrogate_gradient
from capolab.policy import (
    FisherOperator,
    GaussianDist,
    dist_at,
    dist_with_cache,
    kl_diag_gaussian,
    score_gradient,
)

log = logging.getLogger(__name__)

AGGREGATIONS = ("param_avg", "logop")
CARRY_MODES = ("incumbent", "reset", "best_expert", "average")


@dataclass
class CapoConfig:
    K: int = 4
    aggregation: str = "logop"
    carry_mode: str = "incumbent"
    warmup_frac: float = 0.10
    trust_delta: float = 0.04
    distill_epochs: int = 20
    distill_lr: float = 3e-4
    max_halvings: int = 20
    workers: int = 1
    diag_damping: float = 1e-3
    diag_cg_iters: int = 20

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.carry_mode not in CARRY_MODES:
            raise ValueError(f"carry_mode must be one of {CARRY_MODES}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in [0, 1)")
        if self.trust_delta <= 0:
            raise ValueError("trust_delta must be positive")


@dataclass
class ConsensusResult:
    params: np.ndarray
    mean_expert_kl: float
    consensus_kl: float
    distill_steps_used: int = 0
    trust_region_ok: bool = True
    distill_loss_init: float = float("nan")
    distill_loss_final: float = float("nan")
    line_search_scale: float = 1.0


class ExpertFailure(RuntimeError):
    def __init__(self, shuffle_seed, cause):
        super().__init__(f"expert with shuffle seed {shuffle_seed} failed: {cause}")
        self.shuffle_seed = shuffle_seed


def aggregate_param_avg(incumbent, experts):
    """``theta_t + mean_k (theta_k - theta_t)``, i.e. the arithmetic mean of the experts."""
    incumbent = np.asarray(incumbent, dtype=np.float64)
    experts = [np.asarray(e, dtype=np.float64) for e in experts]
    if any(e.shape != incumbent.shape for e in experts):
        raise ValueError("expert parameter vectors differ in length from the incumbent")
    if len(experts) == 1:
        # exact, so K = 1 is bit-identical to plain PPO
        return experts[0].copy()
    return incumbent + np.mean([e - incumbent for e in experts], axis=0)


def logop_pool(dists):
    """Logarithmic opinion pool of diagonal Gaussians (precision-weighted)."""
    if not dists:
        raise ValueError("pool of zero experts")
    prec = np.stack([1.0 / d.var * np.ones_like(d.mean) for d in dists])
    means = np.stack([d.mean for d in dists])
    total = prec.sum(axis=0)
    mean = (prec * means).sum(axis=0) / total
    var = 1.0 / (total / len(dists))
    return GaussianDist(mean, np.sqrt(var))


def _distill_loss_and_grad(policy, params, states, target):
    """Mean over states of KL(target || pi_params) and its gradient."""
    dist, cache = dist_with_cache(policy, params, states)
    n = states.shape[0]
    kl = kl_diag_gaussian(target, dist)
    var = dist.var
    diff = dist.mean - target.mean
    grad_mean = diff / var / n
    grad_ls = np.sum(1.0 - (target.var + diff * diff) / var, axis=0) / n
    return float(np.mean(kl)), score_gradient(policy, params, states, grad_mean, grad_ls, cache)


def distill_logop(incumbent_params, experts, states, cfg, policy):
    """Fit one network to the per-state LogOP of the experts under a KL guard.

    Starts from the parameter average, takes ``cfg.distill_epochs`` full-batch
    Adam steps on mean KL(q || pi), keeps the best iterate, then halves the step
    from the incumbent until mean KL(pi_t || pi) <= ``cfg.trust_delta``.
    """
    incumbent = np.asarray(incumbent_params, dtype=np.float64)
    states = np.atleast_2d(states)
    ref = dist_at(policy, incumbent, states)
    expert_dists = [dist_at(policy, p, states) for p in experts]
    target = logop_pool(expert_dists)
    mean_expert_kl = float(np.mean([np.mean(kl_diag_gaussian(ref, d)) for d in expert_dists]))
    start = aggregate_param_avg(incumbent, experts)

    theta = start.copy()
    adam = AdamState.zeros(theta.shape[0])
    try:
        loss0, grad = _distill_loss_and_grad(policy, theta, states, target)
        best, best_loss = theta.copy(), loss0
        steps = 0
        for _ in range(cfg.distill_epochs):
            if not math.isfinite(best_loss) or not np.all(np.isfinite(grad)):
                raise FloatingPointError("non-finite distillation loss")
            theta, adam = nn.adam_step(adam, theta, grad, cfg.distill_lr)
            steps += 1
            loss, grad = _distill_loss_and_grad(policy, theta, states, target)
            if not math.isfinite(loss):
                raise FloatingPointError("non-finite distillation loss")
            if loss < best_loss:
                best, best_loss = theta.copy(), loss
    except (FloatingPointError, nn.NumericError) as exc:
        log.warning("distillation failed (%s); falling back to parameter average", exc)
        best, loss0, best_loss, steps = start, float("nan"), float("nan"), 0

    direction = best - incumbent
    scale = 1.0
    for _ in range(cfg.max_halvings + 1):
        cand = incumbent + scale * direction
        kl = float(np.mean(kl_diag_gaussian(ref, dist_at(policy, cand, states))))
        if kl <= cfg.trust_delta:
            return ConsensusResult(cand, mean_expert_kl, kl, steps, True, loss0, best_loss, scale)
        scale *= 0.5
    return ConsensusResult(incumbent.copy(), mean_expert_kl, 0.0, steps, True, loss0, best_loss, 0.0)


def carry_optimizer_state(mode, incumbent_adam, expert_adams, best_idx=0):
    """Optimizer state handed to the next generation."""
    if not expert_adams:
        raise ValueError("no expert optimizer states")
    advanced = expert_adams[0].step_count
    if mode == "incumbent":
        return AdamState(incumbent_adam.first_moment.copy(), incumbent_adam.second_moment.copy(), advanced)
    if mode == "reset":
        return AdamState.zeros(len(incumbent_adam), advanced)
    if mode == "best_expert":
        if not 0 <= best_idx < len(expert_adams):
            raise IndexError(f"best_idx {best_idx} out of range for {len(expert_adams)} experts")
        return expert_adams[best_idx].copy()
    if mode == "average":
        return AdamState(
            np.mean([a.first_moment for a in expert_adams], axis=0),
            np.mean([a.second_moment for a in expert_adams], axis=0),
            advanced,
        )
    raise ValueError(f"unknown carry mode {mode!r}")


def best_of_k_select(experts):
    """Index and result of the expert with the highest surrogate (lowest index on ties)."""
    if not experts:
        raise ValueError("no experts to select from")
    gains = [e.surrogate_gain for e in experts]
    idx = int(np.argmax(gains))
    return idx, experts[idx]


def swa_average(trajectory_params):
    """Uniform average of the snapshots taken along one PPO run."""
    if not trajectory_params:
        raise ValueError("no snapshots to average")
    return np.mean(np.stack([np.asarray(p, dtype=np.float64) for p in trajectory_params]), axis=0)


def allocate_budget(total_frames, warmup_frac, frames_per_generation):
    """``(warmup_frames, num_generations)`` with warmup truncated to whole batches."""
    C, B = int(total_frames), int(frames_per_generation)
    warmup = (int(round(warmup_frac * C)) // B) * B
    if B > C - warmup:
        raise ValueError(f"batch of {B} frames exceeds the remaining budget {C - warmup}")
    return warmup, (C - warmup) // B


def expert_shuffle_seed(run_seed, generation, k):
    """Shuffle seed of expert ``k`` (1-based) in ``generation``."""
    return int(np.random.SeedSequence([int(run_seed), int(generation), int(k)]).generate_state(1)[0])


def run_experts(policy, params, adam, frames, ppo_cfg, seeds, workers=1, keep_snapshots=False):
    def one(seed):
        try:
            return ppo_update(policy, params, adam, frames, None,
                              replace(ppo_cfg, shuffle_seed=seed), keep_snapshots)
        except (FloatingPointError, nn.NumericError) as exc:
            raise ExpertFailure(seed, exc) from exc

    if workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, seeds))
    return [one(s) for s in seeds]


def fisher_operator(policy, params, states, damping):
    return FisherOperator(policy, params, states, damping)


def run_generation(policy, incumbent_params, incumbent_adam, batch, advantages, cfg, ppo_cfg,
                   generation=0, run_seed=0, shuffle_seeds=None, diagnostics=True):
    """One CAPO generation: K experts from copies of the incumbent, then aggregate.

    Returns ``(ConsensusResult, DiagnosticsRecord or None, new AdamState, experts)``.
    """
    frames = batch if isinstance(batch, FrameSet) else FrameSet.from_batch(batch, advantages)
    incumbent_params = np.asarray(incumbent_params, dtype=np.float64)
    if shuffle_seeds is None:
        shuffle_seeds = [expert_shuffle_seed(run_seed, generation, k) for k in range(1, cfg.K + 1)]
    experts = run_experts(policy, incumbent_params, incumbent_adam, frames, ppo_cfg, shuffle_seeds,
                          cfg.workers)
    expert_params = [e.params for e in experts]
    obs = frames.observations
    ref = dist_at(policy, incumbent_params, obs)
    if cfg.aggregation == "param_avg" or len(experts) == 1:
        theta = aggregate_param_avg(incumbent_params, expert_params)
        kl = float(np.mean(kl_diag_gaussian(ref, dist_at(policy, theta, obs))))
        mean_expert_kl = float(np.mean([e.final_mean_kl for e in experts]))
        result = ConsensusResult(theta, mean_expert_kl, kl, 0, True)
        if cfg.aggregation == "logop":
            result.trust_region_ok = kl <= cfg.trust_delta
    else:
        result = distill_logop(incumbent_params, expert_params, obs, cfg, policy)
    best_idx, _ = best_of_k_select(experts)
    base_adam = incumbent_adam if incumbent_adam is not None else AdamState.zeros(incumbent_params.shape[0])
    new_adam = carry_optimizer_state(cfg.carry_mode, base_adam, [e.adam_state for e in experts], best_idx)
    record = None
    if diagnostics:
        g = surrogate_gradient(policy, incumbent_params, frames)
        if np.any(g):
            apply_F = fisher_operator(policy, incumbent_params, obs, cfg.diag_damping)
            record = fisher.diagnose(generation, apply_F, g, incumbent_params, expert_params,
                                     result.params, cfg.diag_cg_iters)
            record.extra["consensus_kl"] = result.consensus_kl
            record.extra["mean_expert_kl"] = result.mean_expert_kl
    return result, record, new_adam, experts
