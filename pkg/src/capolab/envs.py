"""Deterministic desk-scale continuous-control tasks.

Two environments are built in:

``pointmass``
    2-D damped point mass driven toward the origin. Internal state ``(p, v)``,
    observation ``(p - goal, v)``, action in ``[-1, 1]^2``.
``pendulum``
    Torque-limited swing-up with ``theta = 0`` upright. Internal state
    ``(theta, theta_dot)``, observation ``(cos, sin, theta_dot)``, torque in
    ``[-2, 2]``.

The dynamics are written once over a leading batch axis; the single-instance
functions and :class:`VecEnv` both call the same code, so stepping one env or
eight at once gives bit-identical trajectories.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HORIZON = 200


@dataclass
class EnvState:
    observation: np.ndarray
    internal_state: np.ndarray
    steps_elapsed: int
    rng: np.random.Generator


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    terminated: bool
    truncated: bool
    final_observation: np.ndarray | None = None


# PointMass -----------------------------------------------------------------

PM_DT = 0.05
PM_DAMPING = 0.95
PM_GOAL = np.zeros(2)


def _pm_reset(rng, n):
    p = np.stack([rng[i].uniform(-1.0, 1.0, size=2) for i in range(n)])
    return np.concatenate([p, np.zeros((n, 2))], axis=1)


def _pm_observe(x):
    return np.concatenate([x[:, :2] - PM_GOAL, x[:, 2:]], axis=1)


def _pm_dynamics(x, a):
    a = np.clip(a, -1.0, 1.0)
    p, v = x[:, :2], x[:, 2:]
    v_next = PM_DAMPING * v + 0.5 * a * PM_DT * 20.0
    p_next = p + v_next * PM_DT
    d = p_next - PM_GOAL
    reward = -np.sum(d * d, axis=1) - 0.01 * np.sum(a * a, axis=1)
    return np.concatenate([p_next, v_next], axis=1), reward


# Pendulum ------------------------------------------------------------------

PEND_G = 10.0
PEND_M = 1.0
PEND_L = 1.0
PEND_DT = 0.05
PEND_MAX_SPEED = 8.0
PEND_MAX_TORQUE = 2.0


def angle_normalize(theta):
    return ((theta + np.pi) % (2.0 * np.pi)) - np.pi


def _pend_reset(rng, n):
    return np.stack(
        [np.array([rng[i].uniform(-np.pi, np.pi), rng[i].uniform(-1.0, 1.0)]) for i in range(n)]
    )


def _pend_observe(x):
    return np.stack([np.cos(x[:, 0]), np.sin(x[:, 0]), x[:, 1]], axis=1)


def _pend_dynamics(x, a):
    u = np.clip(a[:, 0], -PEND_MAX_TORQUE, PEND_MAX_TORQUE)
    th, thdot = x[:, 0], x[:, 1]
    # Cost is charged on the pre-transition state, as in the classic swing-up task.
    reward = -(angle_normalize(th) ** 2 + 0.1 * thdot**2 + 0.001 * u**2)
    acc = 3.0 * PEND_G / (2.0 * PEND_L) * np.sin(th) + 3.0 / (PEND_M * PEND_L**2) * u
    thdot_next = np.clip(thdot + acc * PEND_DT, -PEND_MAX_SPEED, PEND_MAX_SPEED)
    th_next = th + thdot_next * PEND_DT
    return np.stack([th_next, thdot_next], axis=1), reward


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    obs_dim: int
    action_dim: int
    action_low: float
    action_high: float
    horizon: int
    _reset: object
    _observe: object
    _dynamics: object


ENVS = {
    "pointmass": EnvSpec("pointmass", 4, 2, -1.0, 1.0, HORIZON, _pm_reset, _pm_observe, _pm_dynamics),
    "pendulum": EnvSpec(
        "pendulum", 3, 1, -PEND_MAX_TORQUE, PEND_MAX_TORQUE, HORIZON,
        _pend_reset, _pend_observe, _pend_dynamics,
    ),
}


def get_env(env_id):
    try:
        return ENVS[env_id]
    except KeyError:
        raise ValueError(f"unknown env id {env_id!r}; choose from {sorted(ENVS)}") from None


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def reset(env_id, seed):
    spec = get_env(env_id)
    rng = _rng(seed)
    x = spec._reset([rng], 1)
    return EnvState(spec._observe(x)[0], x[0], 0, rng)


def step(env_id, state, action):
    spec = get_env(env_id)
    action = np.asarray(action, dtype=np.float64).reshape(1, spec.action_dim)
    x, r = spec._dynamics(state.internal_state[None, :], action)
    steps = state.steps_elapsed + 1
    obs = spec._observe(x)[0]
    new_state = EnvState(obs, x[0], steps, state.rng)
    return new_state, StepResult(obs, float(r[0]), False, steps >= spec.horizon)


def pointmass_reset(seed):
    return reset("pointmass", seed)


def pointmass_step(state, action):
    return step("pointmass", state, action)


def pendulum_reset(seed):
    return reset("pendulum", seed)


def pendulum_step(state, action):
    return step("pendulum", state, action)


def env_state_from(env_id, internal_state, steps_elapsed=0, seed=0):
    """Build a state at a chosen internal configuration (used for hand-checked steps)."""
    spec = get_env(env_id)
    x = np.asarray(internal_state, dtype=np.float64)
    return EnvState(spec._observe(x[None, :])[0], x.copy(), steps_elapsed, _rng(seed))


class VecEnv:
    """``num_envs`` copies stepped together with auto-reset.

    Env ``i`` draws its reset states from its own generator seeded by
    ``(seed, i)``, so one copy's resets never perturb another's.
    """

    def __init__(self, env_id, num_envs, seed):
        self.spec = get_env(env_id)
        self.num_envs = int(num_envs)
        self.rngs = [np.random.default_rng([int(seed), i]) for i in range(self.num_envs)]
        self.x = self.spec._reset(self.rngs, self.num_envs)
        self.steps = np.zeros(self.num_envs, dtype=np.int64)
        self.obs = self.spec._observe(self.x)

    @property
    def env_id(self):
        return self.spec.env_id

    def step(self, actions):
        """Step all copies; returns ``(obs, rewards, terminated, truncated, final_obs)``.

        ``obs`` already holds reset observations for copies that finished;
        ``final_obs`` holds the pre-reset observation in those rows.
        """
        actions = np.asarray(actions, dtype=np.float64).reshape(self.num_envs, self.spec.action_dim)
        x, rewards = self.spec._dynamics(self.x, actions)
        self.steps = self.steps + 1
        obs = self.spec._observe(x)
        terminated = np.zeros(self.num_envs, dtype=bool)
        truncated = self.steps >= self.spec.horizon
        final_obs = obs.copy()
        for i in np.flatnonzero(truncated | terminated):
            x[i] = self.spec._reset([self.rngs[i]], 1)[0]
            self.steps[i] = 0
        if np.any(truncated | terminated):
            obs = self.spec._observe(x)
        self.x = x
        self.obs = obs
        return obs, rewards, terminated, truncated, final_obs

    def states(self):
        return [
            EnvState(self.obs[i].copy(), self.x[i].copy(), int(self.steps[i]), self.rngs[i])
            for i in range(self.num_envs)
        ]


def vec_env_step(env_id, states, actions):
    """Step a list of single env states together, auto-resetting finished ones.

    Returns ``(new_states, results)``. A finished slot carries the fresh reset
    observation; the pre-reset one is kept in ``StepResult.final_observation``.
    """
    spec = get_env(env_id)
    actions = np.asarray(actions, dtype=np.float64)
    if len(states) != len(actions):
        raise ValueError(f"{len(states)} envs but {len(actions)} actions")
    x = np.stack([s.internal_state for s in states])
    x_next, rewards = spec._dynamics(x, actions.reshape(len(states), spec.action_dim))
    obs = spec._observe(x_next)
    new_states, results = [], []
    for i, s in enumerate(states):
        steps = s.steps_elapsed + 1
        truncated = steps >= spec.horizon
        if truncated:
            xi = spec._reset([s.rng], 1)
            new_states.append(EnvState(spec._observe(xi)[0], xi[0], 0, s.rng))
            results.append(StepResult(new_states[-1].observation, float(rewards[i]), False, True, obs[i]))
        else:
            new_states.append(EnvState(obs[i], x_next[i], steps, s.rng))
            results.append(StepResult(obs[i], float(rewards[i]), False, False))
    return new_states, results
