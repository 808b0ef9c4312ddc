"""PPO (clipped surrogate, shuffled minibatch Adam) and TRPO (CG + line search)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from capolab import nn
from capolab.nn import AdamState, NumericError
from capolab.policy import (
    FisherOperator,
    dist_at,
    dist_with_cache,
    fisher_vector_product,
    kl_diag_gaussian,
    log_prob,
    log_prob_grad,
    score_gradient,
)
from capolab.rollout import minibatch_slices, normalize_advantages

__all__ = [
    "PpoConfig",
    "TrpoConfig",
    "ExpertResult",
    "FrameSet",
    "clipped_surrogate_loss",
    "clipped_surrogate_grad",
    "ppo_update",
    "fisher_vector_product",
    "conjugate_gradient",
    "trpo_update",
    "surrogate_gradient",
    "shuffle_permutation",
]


@dataclass
class PpoConfig:
    clip_eps: float = 0.2
    epochs: int = 10
    minibatches: int = 32
    lr: float = 3e-4
    lr_anneal: bool = True
    anneal_total_steps: int = 0
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    target_kl: float = 0.0
    shuffle_seed: int = 0
    adv_norm: str = "minibatch"

    def __post_init__(self):
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.epochs < 0 or self.minibatches < 1:
            raise ValueError("epochs must be >= 0 and minibatches >= 1")
        if self.adv_norm not in ("minibatch", "batch"):
            raise ValueError(f"adv_norm must be 'minibatch' or 'batch', got {self.adv_norm!r}")

    def lr_at(self, step):
        """Linear decay to 0 over ``anneal_total_steps`` global optimizer steps."""
        if not self.lr_anneal or self.anneal_total_steps <= 0:
            return self.lr
        return self.lr * max(0.0, 1.0 - step / self.anneal_total_steps)


@dataclass
class TrpoConfig:
    max_kl: float = 0.01
    damping: float = 0.1
    cg_iters: int = 10
    backtrack_coef: float = 0.8
    max_backtracks: int = 10

    def __post_init__(self):
        if self.max_kl <= 0 or self.damping <= 0:
            raise ValueError("max_kl and damping must be positive")


@dataclass
class ExpertResult:
    params: np.ndarray
    adam_state: AdamState | None
    epochs_run: int
    final_mean_kl: float
    surrogate_gain: float
    trace: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    shuffle_seed: int = 0


@dataclass
class FrameSet:
    """Flat per-frame view of a batch plus its advantages."""

    observations: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray

    @classmethod
    def from_batch(cls, batch, advantages):
        adv = advantages.advantages if hasattr(advantages, "advantages") else advantages
        return cls(
            batch.flat_observations,
            batch.flat_actions,
            batch.flat_old_log_probs,
            np.asarray(adv, dtype=np.float64).reshape(-1),
        )

    def __len__(self):
        return self.observations.shape[0]


def _ratio(policy, params, obs, actions, old_logp):
    dist, cache = dist_with_cache(policy, params, obs)
    logp = log_prob(dist, actions)
    ratio = np.exp(logp - old_logp)
    if not np.all(np.isfinite(ratio)):
        bad = int(np.flatnonzero(~np.isfinite(ratio))[0])
        raise NumericError(f"non-finite importance ratio at frame {bad}", index=bad)
    return dist, ratio, cache


def clipped_surrogate_loss(policy, params, obs, actions, old_logp, advantages, clip_eps):
    """Negative clipped surrogate and the fraction of frames where clipping binds."""
    _, ratio, _ = _ratio(policy, params, obs, actions, old_logp)
    return clipped_objective_terms(ratio, advantages, clip_eps)


def clipped_objective_terms(ratio, advantages, clip_eps):
    surr1 = ratio * advantages
    surr2 = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages
    loss = -float(np.mean(np.minimum(surr1, surr2)))
    clip_fraction = float(np.mean(surr2 < surr1))
    return loss, clip_fraction


def clipped_surrogate_grad(policy, params, obs, actions, old_logp, advantages, clip_eps,
                           entropy_coef=0.0):
    """Loss, clip fraction and flat gradient of ``-L_clip - entropy_coef * H``."""
    dist, ratio, cache = _ratio(policy, params, obs, actions, old_logp)
    m = ratio.shape[0]
    surr1 = ratio * advantages
    surr2 = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages
    unclipped = surr1 <= surr2
    loss = -float(np.mean(np.where(unclipped, surr1, surr2)))
    clip_fraction = float(np.mean(surr2 < surr1))
    # d loss / d log pi_i; the clipped branch has zero gradient.
    dlogp = -(unclipped * advantages * ratio) / m
    z = (actions - dist.mean) / dist.std
    grad_mean = dlogp[:, None] * z / dist.std
    grad_ls = np.sum(dlogp[:, None] * (z * z - 1.0), axis=0)
    if entropy_coef:
        loss -= entropy_coef * float(np.sum(np.log(dist.std)) + 0.5 * dist.action_dim * (np.log(2 * np.pi) + 1))
        grad_ls = grad_ls - entropy_coef
    grad = score_gradient(policy, params, obs, grad_mean, grad_ls, cache)
    return loss, clip_fraction, grad


def shuffle_permutation(shuffle_seed, epoch, n):
    """Minibatch ordering: a pure function of (shuffle_seed, epoch)."""
    return np.random.default_rng([int(shuffle_seed), int(epoch)]).permutation(n)


def _batch_stats(policy, params, frames, ref_dist, clip_eps):
    dist = dist_at(policy, params, frames.observations)
    kl = float(np.mean(kl_diag_gaussian(ref_dist, dist)))
    ratio = np.exp(log_prob(dist, frames.actions) - frames.old_log_probs)
    adv = normalize_advantages(frames.advantages)
    surr = -clipped_objective_terms(ratio, adv, clip_eps)[0]
    return kl, surr


def ppo_update(policy, params_in, adam_in, batch, advantages, cfg, keep_snapshots=False):
    """E epochs of shuffled minibatch Adam on the clipped surrogate.

    ``batch`` may be a :class:`~capolab.rollout.Batch` (with ``advantages`` an
    AdvantageSet or array) or a prepared :class:`FrameSet`.
    """
    frames = batch if isinstance(batch, FrameSet) else FrameSet.from_batch(batch, advantages)
    n = len(frames)
    params = np.array(params_in, dtype=np.float64)
    state = adam_in.copy() if adam_in is not None else AdamState.zeros(params.shape[0])
    ref_dist = dist_at(policy, params, frames.observations)
    slices = minibatch_slices(n, cfg.minibatches)
    batch_adv = normalize_advantages(frames.advantages) if cfg.adv_norm == "batch" else None
    trace, snapshots = [], []
    epochs_run = 0
    kl = 0.0
    for epoch in range(cfg.epochs):
        perm = shuffle_permutation(cfg.shuffle_seed, epoch, n)
        clip_fracs = []
        for sl in slices:
            idx = perm[sl]
            if batch_adv is None:
                adv = normalize_advantages(frames.advantages[idx])
            else:
                adv = batch_adv[idx]
            _, cf, grad = clipped_surrogate_grad(
                policy, params, frames.observations[idx], frames.actions[idx],
                frames.old_log_probs[idx], adv, cfg.clip_eps, cfg.entropy_coef,
            )
            grad, _ = nn.clip_grad_norm(grad, cfg.max_grad_norm)
            params, state = nn.adam_step(state, params, grad, cfg.lr_at(state.step_count))
            clip_fracs.append(cf)
        epochs_run += 1
        kl, surr = _batch_stats(policy, params, frames, ref_dist, cfg.clip_eps)
        trace.append({"epoch": epoch, "mean_kl": kl, "clip_fraction": float(np.mean(clip_fracs)),
                      "surrogate": surr})
        if keep_snapshots:
            snapshots.append(params.copy())
        if cfg.target_kl > 0 and kl > cfg.target_kl:
            break
    surr_gain = trace[-1]["surrogate"] if trace else 0.0
    return ExpertResult(params, state, epochs_run, kl, surr_gain, trace, snapshots, cfg.shuffle_seed)


def conjugate_gradient(apply_A, b, iters, tol=1e-10):
    """Solve ``A x = b`` for symmetric positive definite ``A`` given as a matvec."""
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    b_norm = float(np.sqrt(b @ b))
    if b_norm == 0.0:
        return x
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    for _ in range(int(iters)):
        Ap = apply_A(p)
        pAp = float(p @ Ap)
        if pAp <= 0:
            break
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = float(r @ r)
        if np.sqrt(rr_new) <= tol * b_norm:
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def surrogate_gradient(policy, params, frames, normalize=True):
    """Gradient of mean(ratio * A) at the collecting policy (ratio = 1)."""
    adv = normalize_advantages(frames.advantages) if normalize else frames.advantages
    return log_prob_grad(policy, params, frames.observations, frames.actions, adv / len(frames))


def trpo_update(policy, params_in, batch, advantages, cfg, adam_in=None):
    """Natural-gradient step of KL radius ``cfg.max_kl`` with backtracking.

    A step is accepted only if the exact mean KL is within ``max_kl`` and the
    surrogate improves; otherwise the incumbent is returned with
    ``epochs_run = 0``.
    """
    frames = batch if isinstance(batch, FrameSet) else FrameSet.from_batch(batch, advantages)
    params_in = np.asarray(params_in, dtype=np.float64)
    obs = frames.observations
    adv = normalize_advantages(frames.advantages)
    g = log_prob_grad(policy, params_in, obs, frames.actions, adv / len(frames))
    ref = dist_at(policy, params_in, obs)

    def reject(trace):
        return ExpertResult(params_in.copy(), adam_in, 0, 0.0, 0.0, trace)

    if not np.any(g):
        return reject([{"accepted": False, "reason": "zero gradient"}])

    apply_F = FisherOperator(policy, params_in, obs, cfg.damping)
    x = conjugate_gradient(apply_F, g, cfg.cg_iters)
    shs = float(x @ apply_F(x))
    if not shs > 0:
        return reject([{"accepted": False, "reason": "non-positive curvature"}])
    full_step = np.sqrt(2.0 * cfg.max_kl / shs) * x

    def surrogate(p):
        dist = dist_at(policy, p, obs)
        ratio = np.exp(log_prob(dist, frames.actions) - frames.old_log_probs)
        return float(np.mean(ratio * adv)), dist

    surr0, _ = surrogate(params_in)
    trace = []
    for i in range(cfg.max_backtracks):
        frac = cfg.backtrack_coef**i
        cand = params_in + frac * full_step
        surr, dist = surrogate(cand)
        kl = float(np.mean(kl_diag_gaussian(ref, dist)))
        trace.append({"backtrack": i, "mean_kl": kl, "surrogate": surr - surr0})
        if kl <= cfg.max_kl and surr > surr0:
            return ExpertResult(cand, adam_in, 1, kl, surr - surr0, trace)
    return reject(trace)


def mean_kl(policy, params_a, params_b, obs):
    """Mean over ``obs`` of KL(pi_a || pi_b)."""
    return float(np.mean(kl_diag_gaussian(dist_at(policy, params_a, obs), dist_at(policy, params_b, obs))))
