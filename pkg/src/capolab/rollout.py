"""On-policy batch collection, GAE and value-function fitting."""
from __future__ import annotations

import io
from dataclasses import dataclass, fields

import numpy as np

from capolab import kernels, nn
from capolab.policy import dist_at, log_prob, sample_action


class ContractError(ValueError):
    """A required input (e.g. a bootstrap value) is missing."""


@dataclass
class Batch:
    """Rollout arrays laid out ``(horizon, num_envs, ...)``.

    ``bootstrap_values[t, e]`` is V(s_{t+1}) where the next state is not the
    next row of the same env stream: at truncations (value of the pre-reset
    observation) and at the last row. Elsewhere it is NaN.
    """

    observations: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    rewards: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    final_observations: np.ndarray
    last_observations: np.ndarray
    value_predictions: np.ndarray | None = None
    bootstrap_values: np.ndarray | None = None

    @property
    def horizon(self):
        return self.rewards.shape[0]

    @property
    def num_envs(self):
        return self.rewards.shape[1]

    @property
    def num_frames(self):
        return self.horizon * self.num_envs

    @property
    def flat_observations(self):
        return self.observations.reshape(self.num_frames, -1)

    @property
    def flat_actions(self):
        return self.actions.reshape(self.num_frames, -1)

    @property
    def flat_old_log_probs(self):
        return self.old_log_probs.reshape(self.num_frames)

    def to_bytes(self):
        """Columnar ``.npz`` snapshot of every array field."""
        buf = io.BytesIO()
        arrays = {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}
        np.savez(buf, **arrays)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob):
        with np.load(io.BytesIO(blob)) as data:
            return cls(**{k: data[k] for k in data.files})


@dataclass
class AdvantageSet:
    advantages: np.ndarray
    returns: np.ndarray


def collect_batch(policy, params, vec_env, horizon, rng):
    """Roll the current policy for ``horizon`` steps in every env copy."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    n, spec = vec_env.num_envs, vec_env.spec
    obs = np.empty((horizon, n, spec.obs_dim))
    actions = np.empty((horizon, n, spec.action_dim))
    logps = np.empty((horizon, n))
    rewards = np.empty((horizon, n))
    terminated = np.zeros((horizon, n), dtype=bool)
    truncated = np.zeros((horizon, n), dtype=bool)
    final_obs = np.full((horizon, n, spec.obs_dim), np.nan)
    for t in range(horizon):
        o = vec_env.obs
        if not np.all(np.isfinite(o)):
            raise FloatingPointError(
                f"non-finite observation from {vec_env.env_id} at step {t}: {o}"
            )
        dist = dist_at(policy, params, o)
        a = sample_action(dist, rng)
        obs[t] = o
        actions[t] = a
        logps[t] = log_prob(dist, a)
        _, r, term, trunc, fin = vec_env.step(a)
        rewards[t] = r
        terminated[t] = term
        truncated[t] = trunc
        done = term | trunc
        final_obs[t, done] = fin[done]
    return Batch(obs, actions, logps, rewards, terminated, truncated, final_obs, vec_env.obs.copy())


def attach_values(batch, value_fn):
    """Fill ``value_predictions`` and ``bootstrap_values`` from ``value_fn(obs_2d) -> (n,)``."""
    T, n = batch.horizon, batch.num_envs
    values = np.asarray(value_fn(batch.flat_observations)).reshape(T, n)
    boot = np.full((T, n), np.nan)
    trunc = batch.truncated & ~batch.terminated
    if np.any(trunc):
        boot[trunc] = np.asarray(value_fn(batch.final_observations[trunc])).reshape(-1)
    last_done = batch.terminated[-1] | batch.truncated[-1]
    tail = np.asarray(value_fn(batch.last_observations)).reshape(n)
    boot[-1] = np.where(last_done, boot[-1], tail)
    batch.value_predictions = values
    batch.bootstrap_values = boot
    return batch


def _next_values(batch):
    values = batch.value_predictions
    boot = batch.bootstrap_values
    done = batch.terminated | batch.truncated
    nxt = np.empty_like(values)
    nxt[:-1] = values[1:]
    nxt[-1] = np.nan
    # Streams crossing a truncation or the batch end bootstrap from bootstrap_values.
    need = (batch.truncated & ~batch.terminated).copy()
    need[-1] |= ~done[-1]
    nxt = np.where(need, boot, nxt)
    nxt = np.where(batch.terminated, 0.0, nxt)
    missing = need & ~np.isfinite(nxt)
    if np.any(missing):
        t, e = np.argwhere(missing)[0]
        raise ContractError(f"missing bootstrap value at frame (t={t}, env={e})")
    return nxt


def compute_gae(batch, gamma=0.99, lam=0.95):
    """Generalized advantage estimates over the batch.

    Terminations bootstrap with 0 and truncations with V(final observation);
    either one cuts the exponentially weighted sum.
    """
    if batch.value_predictions is None:
        raise ContractError("batch has no value predictions; call attach_values first")
    nxt = _next_values(batch)
    dones = batch.terminated | batch.truncated
    adv = kernels.gae(batch.rewards, batch.value_predictions, nxt, batch.terminated, dones, gamma, lam)
    return AdvantageSet(adv, adv + batch.value_predictions)


def normalize_advantages(adv, eps=1e-8):
    """Zero mean, unit std (population) within the given slice of advantages."""
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / (adv.std() + eps)


def minibatch_slices(n, num_minibatches):
    """Minibatch boundaries of size ceil(n / M); the last one may be smaller."""
    size = -(-n // num_minibatches)
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


@dataclass
class ValueFitResult:
    params: np.ndarray
    adam_state: nn.AdamState
    loss_before: float
    loss_after: float


def value_loss(spec, params, obs, returns, vf_coef=0.5):
    pred = nn.mlp_forward(spec, params, obs)[:, 0]
    return float(vf_coef * 0.5 * np.mean((pred - returns) ** 2))


def fit_value(spec, params, batch, returns, epochs, minibatches, lr, adam_state=None, seed=0,
              vf_coef=0.5, max_grad_norm=0.5):
    """Minibatch Adam regression of V onto the GAE returns.

    Loss is ``vf_coef * 0.5 * MSE`` with global gradient-norm clipping.
    """
    obs = batch.flat_observations if isinstance(batch, Batch) else np.asarray(batch)
    returns = np.asarray(returns, dtype=np.float64).reshape(-1)
    n = obs.shape[0]
    state = adam_state.copy() if adam_state is not None else nn.AdamState.zeros(spec.num_params)
    params = np.array(params, dtype=np.float64)
    before = value_loss(spec, params, obs, returns, vf_coef)
    for epoch in range(epochs):
        perm = np.random.default_rng([int(seed), epoch]).permutation(n)
        for sl in minibatch_slices(n, minibatches):
            idx = perm[sl]
            target = returns[idx]
            m = idx.shape[0]

            def loss_fn(out, target=target, m=m):
                err = out[:, 0] - target
                g = np.zeros_like(out)
                g[:, 0] = vf_coef * err / m
                return vf_coef * 0.5 * np.mean(err**2), g

            _, grad = nn.loss_gradient(spec, params, obs[idx], loss_fn)
            grad, _ = nn.clip_grad_norm(grad, max_grad_norm)
            lr_now = lr(state.step_count) if callable(lr) else lr
            params, state = nn.adam_step(state, params, grad, lr_now)
    after = value_loss(spec, params, obs, returns, vf_coef)
    return ValueFitResult(params, state, before, after)
