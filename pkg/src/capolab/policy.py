"""Diagonal-Gaussian policy with a state-independent log-std block.

The policy parameter vector is ``[mean-network params..., log_std (action_dim)]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from capolab import nn
from capolab.nn import MlpSpec, ShapeError

LOG_2PI = float(np.log(2.0 * np.pi))


class InvalidFamilyError(ValueError):
    """Natural parameters outside the Gaussian family (eta2 >= 0)."""


@dataclass
class GaussianDist:
    """Per-state diagonal Gaussian; ``mean`` may be ``(d,)`` or a ``(n, d)`` batch."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ValueError("std must be strictly positive")

    @property
    def var(self):
        return self.std**2

    @property
    def action_dim(self):
        return self.mean.shape[-1]

    def __getitem__(self, idx):
        std = self.std if self.std.ndim < self.mean.ndim else self.std[idx]
        return GaussianDist(self.mean[idx], std)


@dataclass
class NaturalParams:
    eta1: np.ndarray
    eta2: np.ndarray


@dataclass(frozen=True)
class GaussianPolicy:
    mean_net: MlpSpec
    log_std_bounds: tuple = (-20.0, 2.0)
    init_log_std: float = 0.0

    @property
    def action_dim(self):
        return self.mean_net.output_dim

    @property
    def obs_dim(self):
        return self.mean_net.input_dim

    @property
    def num_params(self):
        return self.mean_net.num_params + self.action_dim

    def split(self, params):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.num_params,):
            raise ShapeError(f"policy expects {self.num_params} params, got {params.shape}")
        n = self.mean_net.num_params
        return params[:n], params[n:]

    def std_of(self, log_std):
        lo, hi = self.log_std_bounds
        return np.exp(np.clip(log_std, lo, hi))

    def log_std_active(self, log_std):
        """1 where the clip passes gradients through, 0 where it saturates."""
        lo, hi = self.log_std_bounds
        return ((log_std > lo) & (log_std < hi)).astype(np.float64)


def make_policy(obs_dim, action_dim, hidden_dims=(64, 64), log_std_bounds=(-20.0, 2.0)):
    return GaussianPolicy(MlpSpec(obs_dim, tuple(hidden_dims), action_dim), tuple(log_std_bounds))


def init_policy_params(policy, seed, hidden_gain=1.0, output_gain=0.01):
    gains = [hidden_gain] * len(policy.mean_net.hidden_dims) + [output_gain]
    mean_params = nn.orthogonal_init(policy.mean_net, gains, seed)
    return np.concatenate([mean_params, np.full(policy.action_dim, policy.init_log_std)])


def dist_at(policy, params, state):
    """Action distribution at one state or a batch of states."""
    mean_params, log_std = policy.split(params)
    mean = nn.mlp_forward(policy.mean_net, mean_params, state)
    return GaussianDist(mean, policy.std_of(log_std))


def log_prob(dist, action):
    action = np.asarray(action, dtype=np.float64)
    if action.shape[-1] != dist.action_dim:
        raise ShapeError(f"action dim {action.shape[-1]} != {dist.action_dim}")
    z = (action - dist.mean) / dist.std
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(np.log(dist.std) * np.ones_like(z), axis=-1) \
        - 0.5 * dist.action_dim * LOG_2PI


def entropy(dist):
    log_std = np.log(dist.std) * np.ones_like(dist.mean)
    return np.sum(log_std + 0.5 * (LOG_2PI + 1.0), axis=-1)


def kl_diag_gaussian(p, q):
    """KL(p || q) in nats, summed over action dimensions (batched over leading axes)."""
    if p.action_dim != q.action_dim:
        raise ShapeError("distributions have different action dimensions")
    var_p, var_q = p.var, q.var
    terms = np.log(q.std / p.std) + (var_p + (p.mean - q.mean) ** 2) / (2.0 * var_q) - 0.5
    return np.sum(terms * np.ones(np.broadcast(p.mean, q.mean).shape), axis=-1)


def mean_kl_over_states(old_dists, new_dists):
    """Mean per-state KL(old || new); accepts lists of dists or batched dists."""
    if isinstance(old_dists, GaussianDist):
        kls = kl_diag_gaussian(old_dists, new_dists)
        if np.ndim(kls) == 0 or np.size(kls) == 0:
            if np.size(kls) == 0:
                raise ValueError("mean KL over an empty set of states")
            return float(kls)
        return float(np.mean(kls))
    if len(old_dists) != len(new_dists):
        raise ValueError("state lists differ in length")
    if not old_dists:
        raise ValueError("mean KL over an empty set of states")
    return float(np.mean([kl_diag_gaussian(p, q) for p, q in zip(old_dists, new_dists)]))


def to_natural(dist):
    var = dist.var * np.ones_like(dist.mean)
    return NaturalParams(dist.mean / var, -0.5 / var)


def from_natural(eta):
    eta1 = np.asarray(eta.eta1, dtype=np.float64)
    eta2 = np.asarray(eta.eta2, dtype=np.float64)
    if np.any(eta2 >= 0):
        raise InvalidFamilyError("eta2 must be strictly negative")
    var = -0.5 / eta2
    return GaussianDist(eta1 * var, np.sqrt(var))


def sample_action(dist, rng):
    noise = rng.standard_normal(np.shape(dist.mean))
    return dist.mean + dist.std * noise


def dist_with_cache(policy, params, states):
    """Batched distribution plus the forward cache needed by :func:`score_gradient`."""
    mean_params, log_std = policy.split(params)
    cache = nn.forward_cached(policy.mean_net, mean_params, states)
    mean = cache.output
    if not np.all(np.isfinite(mean)):
        nn._locate_nonfinite(cache.activations[1:], "forward")
    return GaussianDist(mean, policy.std_of(log_std)), cache


def score_gradient(policy, params, states, grad_mean, grad_log_std, cache=None):
    """Chain per-frame loss gradients through the policy.

    ``grad_mean`` is dLoss/dmean with shape ``(n, action_dim)``; ``grad_log_std``
    is dLoss/d(clipped log_std) already summed over frames. Returns the flat
    gradient with respect to the full policy parameter vector.
    """
    mean_params, log_std = policy.split(params)
    if cache is None:
        cache = nn.forward_cached(policy.mean_net, mean_params, states)
    g_mean = nn.backward(policy.mean_net, mean_params, cache, grad_mean)
    g_ls = np.asarray(grad_log_std, dtype=np.float64) * policy.log_std_active(log_std)
    return np.concatenate([g_mean, g_ls])


def log_prob_grad(policy, params, states, actions, weights):
    """Gradient of ``sum_i weights_i * log pi(a_i | s_i)`` with respect to the parameters."""
    dist, cache = dist_with_cache(policy, params, states)
    w = np.asarray(weights, dtype=np.float64)[:, None]
    z = (np.asarray(actions) - dist.mean) / dist.std
    grad_mean = w * z / dist.std
    grad_ls = np.sum(w * (z * z - 1.0), axis=0)
    return score_gradient(policy, params, states, grad_mean, grad_ls, cache)


class FisherOperator:
    """``v -> (F + damping I) v`` at fixed ``params`` and ``states``.

    For a Gaussian the Hessian of KL(pi_params || pi_theta) at theta = params is
    exactly the Gauss-Newton matrix ``E_s[J^T diag(1/sigma^2) J]`` on the mean
    block plus ``2 I`` on the (unsaturated) log-std block. The forward
    activations are computed once, so each product costs one tangent pass and
    one reverse pass.
    """

    def __init__(self, policy, params, states, damping=0.0):
        self.policy = policy
        self.damping = float(damping)
        self.mean_params, log_std = policy.split(params)
        self.states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        self.cache = nn.forward_cached(policy.mean_net, self.mean_params, self.states)
        self.layers = nn.unflatten(policy.mean_net, self.mean_params)
        self.inv_var_n = 1.0 / (policy.std_of(log_std) ** 2 * self.states.shape[0])
        self.ls_scale = 2.0 * policy.log_std_active(log_std)

    def _tangent(self, v_mean):
        acts = self.cache.activations
        last = len(self.layers) - 1
        da = None
        for layer, ((W, _), (dW, db)) in enumerate(zip(self.layers, nn.unflatten(self.policy.mean_net, v_mean))):
            dz = acts[layer] @ dW.T + db
            if da is not None:
                dz += da @ W.T
            if layer < last:
                a = acts[layer + 1]
                da = (1.0 - a * a) * dz
            else:
                return dz

    def __call__(self, v):
        policy = self.policy
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (policy.num_params,):
            raise ShapeError(f"vector of shape {v.shape} does not match {policy.num_params} params")
        n_mean = policy.mean_net.num_params
        jv = self._tangent(v[:n_mean])
        fv_mean = nn.backward(policy.mean_net, self.mean_params, self.cache, jv * self.inv_var_n)
        out = np.concatenate([fv_mean, self.ls_scale * v[n_mean:]])
        if self.damping:
            out += self.damping * v
        return out


def fisher_vector_product(policy, params, states, v, damping=0.0):
    """``(F + damping I) v`` for the mean-KL Hessian at ``params`` over ``states``."""
    return FisherOperator(policy, params, states, damping)(v)
