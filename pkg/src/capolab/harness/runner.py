"""Training loop for every method, evaluation, and run artifacts.

All randomness of a run comes from its integer seed through named sub-streams,
so the evaluation stream can change without touching training.
"""
from __future__ import annotations

import csv
import json
import math
import os
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from capolab import consensus, fisher, nn
from capolab.envs import VecEnv, get_env
from capolab.harness.config import CAPO_METHODS, dump_config
from capolab.harness.summary import mean_se
from capolab.nn import AdamState, MlpSpec
from capolab.optim import FrameSet, _batch_stats, ppo_update, surrogate_gradient, trpo_update
from capolab.policy import dist_at, init_policy_params, make_policy, sample_action
from capolab.rollout import attach_values, collect_batch, compute_gae, fit_value, minibatch_slices

PROGRESS_COLUMNS = [
    "generation", "phase", "frames", "return_mean", "mean_kl", "surrogate_gain", "epochs_run",
    "accepted", "value_loss", "signal_c2", "waste", "alpha", "cos_f", "waste_reduction_ratio",
    "consensus_quad_kl", "mean_expert_quad_kl",
]


def substream(seed, name):
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def subseed(seed, name):
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])


@dataclass
class SeedRecord:
    seed: int
    method: str
    env_id: str
    rows: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    traces: list = field(default_factory=list)

    @property
    def final_return(self):
        return self.rows[-1]["return_mean"] if self.rows else float("nan")

    def summary(self):
        return {
            "method": self.method,
            "env_id": self.env_id,
            "seed": self.seed,
            "frames": self.rows[-1]["frames"] if self.rows else 0,
            "batches": len(self.rows),
            "final_return": self.final_return,
        }


@dataclass
class RunRecord:
    config: object
    seeds: list

    def final_returns(self):
        return [s.final_return for s in self.seeds]

    def summary(self):
        mean, se = mean_se(self.final_returns())
        return {
            "method": self.config.method,
            "env_id": self.config.env_id,
            "seeds": [s.seed for s in self.seeds],
            "final_returns": self.final_returns(),
            "return_mean": mean,
            "return_se": se,
        }


def evaluate(policy, params, env_id, episodes, seed, stochastic=False):
    """Mean episodic return of ``episodes`` episodes stepped together.

    The eval env and sampler are rebuilt from ``seed`` on every call, so each
    evaluation starts from the same states.
    """
    env = VecEnv(env_id, episodes, subseed(seed, "eval"))
    rng = substream(seed, "eval-sample") if stochastic else None
    totals = np.zeros(episodes)
    for _ in range(env.spec.horizon):
        dist = dist_at(policy, params, env.obs)
        action = sample_action(dist, rng) if stochastic else dist.mean
        _, r, _, _, _ = env.step(action)
        totals += r
    return float(np.mean(totals)), totals


def _plan(cfg):
    B = cfg.frames_per_batch
    warmup_frames, gens = consensus.allocate_budget(cfg.total_frames, cfg.capo_warmup_frac, B)
    warmup_batches = warmup_frames // B
    ppo = cfg.effective_ppo()
    steps_per_update = ppo.epochs * len(minibatch_slices(B, ppo.minibatches))
    value_steps = cfg.value_epochs * len(minibatch_slices(B, cfg.value.minibatches))
    total_batches = warmup_batches + gens
    return {
        "frames_per_batch": B,
        "warmup_batches": warmup_batches,
        "generations": gens,
        "total_batches": total_batches,
        "effective_epochs": ppo.epochs,
        "value_epochs": cfg.value_epochs,
        "anneal_total_steps": total_batches * steps_per_update,
        "value_anneal_total_steps": total_batches * value_steps,
    }


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


class Trainer:
    """State of one seeded run; :meth:`run` executes every batch."""

    def __init__(self, cfg, seed):
        self.cfg = cfg.validate()
        self.seed = int(seed)
        self.plan = _plan(cfg)
        spec = get_env(cfg.env_id)
        self.policy = make_policy(spec.obs_dim, spec.action_dim, cfg.hidden_dims)
        self.params = init_policy_params(self.policy, subseed(seed, "policy-init"), cfg.hidden_gain)
        self.adam = AdamState.zeros(self.policy.num_params)
        self.value_spec = MlpSpec(spec.obs_dim, tuple(cfg.value.hidden_dims), 1)
        self.value_params = nn.orthogonal_init(
            self.value_spec, [cfg.hidden_gain] * len(cfg.value.hidden_dims) + [1.0],
            subseed(seed, "value-init"),
        )
        self.value_adam = AdamState.zeros(self.value_spec.num_params)
        self.env = VecEnv(cfg.env_id, cfg.num_envs, subseed(seed, "env"))
        self.sample_rng = substream(seed, "policy-sample")
        self.ppo = replace(cfg.effective_ppo(), anneal_total_steps=self.plan["anneal_total_steps"])
        self.capo = cfg.effective_capo()
        self.record = SeedRecord(self.seed, cfg.method, cfg.env_id)
        self.frames = 0

    # -- value function ------------------------------------------------
    def _value_fn(self, obs):
        return nn.mlp_forward(self.value_spec, self.value_params, obs)[:, 0]

    def _value_lr(self, step):
        v = self.cfg.value
        total = self.plan["value_anneal_total_steps"]
        if not v.lr_anneal or total <= 0:
            return v.lr
        return v.lr * max(0.0, 1.0 - step / total)

    def _collect(self, batch_idx):
        batch = collect_batch(self.policy, self.params, self.env, self.cfg.horizon, self.sample_rng)
        attach_values(batch, self._value_fn)
        adv = compute_gae(batch, self.cfg.gamma, self.cfg.gae_lambda)
        v = self.cfg.value
        fit = fit_value(self.value_spec, self.value_params, batch, adv.returns, self.cfg.value_epochs,
                        v.minibatches, self._value_lr, self.value_adam,
                        seed=consensus.expert_shuffle_seed(self.seed, batch_idx, 0),
                        vf_coef=v.vf_coef, max_grad_norm=v.max_grad_norm)
        self.value_params, self.value_adam = fit.params, fit.adam_state
        self.frames += batch.num_frames
        return FrameSet.from_batch(batch, adv), fit.loss_after

    # -- per-method updates ------------------------------------------
    def _ppo_step(self, frames, batch_idx, keep_snapshots=False):
        seed = consensus.expert_shuffle_seed(self.seed, batch_idx, 1)
        return ppo_update(self.policy, self.params, self.adam, frames, None,
                          replace(self.ppo, shuffle_seed=seed), keep_snapshots)

    def _update(self, frames, batch_idx, phase):
        """Returns ``(new_params, new_adam, expert_param_list, info)``."""
        method = self.cfg.method
        if phase == "warmup" or method in ("ppo", "ppo_kx"):
            res = self._ppo_step(frames, batch_idx)
            return res.params, res.adam_state, [res.params], {"experts": [res]}
        if method == "ppo_swa":
            res = self._ppo_step(frames, batch_idx, keep_snapshots=True)
            return consensus.swa_average(res.snapshots), res.adam_state, [res.params], {"experts": [res]}
        if method == "trpo":
            res = trpo_update(self.policy, self.params, frames, None, self.cfg.trpo, self.adam)
            return res.params, self.adam, [res.params], {"experts": [res], "accepted": res.epochs_run == 1}
        if method == "best_of_k":
            seeds = [consensus.expert_shuffle_seed(self.seed, batch_idx, k) for k in range(1, self.capo.K + 1)]
            experts = consensus.run_experts(self.policy, self.params, self.adam, frames, self.ppo, seeds,
                                            self.capo.workers)
            idx, best = consensus.best_of_k_select(experts)
            return best.params, best.adam_state.copy(), [e.params for e in experts], \
                {"experts": experts, "selected": idx}
        result, _, new_adam, experts = consensus.run_generation(
            self.policy, self.params, self.adam, frames, None, self.capo, self.ppo,
            generation=batch_idx, run_seed=self.seed, diagnostics=False,
        )
        info = {"experts": experts, "consensus": result, "accepted": result.trust_region_ok}
        return result.params, new_adam, [e.params for e in experts], info

    def _diagnose(self, batch_idx, frames, expert_params, new_params):
        g = surrogate_gradient(self.policy, self.params, frames)
        if not np.any(g):
            return None
        apply_F = consensus.fisher_operator(self.policy, self.params, frames.observations,
                                            self.capo.diag_damping)
        try:
            return fisher.diagnose(batch_idx, apply_F, g, self.params, expert_params, new_params,
                                   self.capo.diag_cg_iters)
        except fisher.UndefinedDirectionError:
            return None

    def step(self, batch_idx, phase):
        frames, vloss = self._collect(batch_idx)
        old = self.params
        new_params, new_adam, expert_params, info = self._update(frames, batch_idx, phase)
        rec = self._diagnose(batch_idx, frames, expert_params, new_params) if self.cfg.diagnostics else None
        ref = dist_at(self.policy, old, frames.observations)
        kl, surr = _batch_stats(self.policy, new_params, frames, ref, self.ppo.clip_eps)
        self.params, self.adam = new_params, new_adam
        ret, _ = evaluate(self.policy, self.params, self.cfg.env_id, self.cfg.eval_episodes, self.seed,
                          self.cfg.eval_stochastic)
        experts = info["experts"]
        row = {
            "generation": batch_idx, "phase": phase, "frames": self.frames, "return_mean": ret,
            "mean_kl": kl, "surrogate_gain": surr,
            "epochs_run": int(np.mean([e.epochs_run for e in experts])) if experts else 0,
            "accepted": bool(info.get("accepted", True)), "value_loss": vloss,
        }
        if rec is not None:
            d = rec.consensus
            row.update(signal_c2=d.c * d.c, waste=d.waste_norm_sq, alpha=d.alpha, cos_f=d.cos_f,
                       waste_reduction_ratio=rec.waste_reduction_ratio,
                       consensus_quad_kl=rec.consensus_quad_kl,
                       mean_expert_quad_kl=rec.mean_expert_quad_kl)
            rec.extra["phase"] = phase
            self.record.diagnostics.append(rec)
        self.record.rows.append(row)
        trace = {
            "generation": batch_idx, "phase": phase,
            "experts": [{"shuffle_seed": int(e.shuffle_seed), "epochs_run": e.epochs_run,
                         "final_mean_kl": e.final_mean_kl, "surrogate_gain": e.surrogate_gain,
                         "trace": e.trace} for e in experts],
        }
        if "selected" in info:
            trace["selected"] = info["selected"]
        res = info.get("consensus")
        if res is not None:
            trace["consensus"] = {"mean_expert_kl": res.mean_expert_kl, "consensus_kl": res.consensus_kl,
                                  "distill_steps_used": res.distill_steps_used,
                                  "trust_region_ok": res.trust_region_ok,
                                  "distill_loss_init": res.distill_loss_init,
                                  "distill_loss_final": res.distill_loss_final,
                                  "line_search_scale": res.line_search_scale}
        self.record.traces.append(trace)
        return row

    def run(self):
        idx = 0
        for _ in range(self.plan["warmup_batches"]):
            self.step(idx, "warmup")
            idx += 1
        for _ in range(self.plan["generations"]):
            self.step(idx, "generation" if self.cfg.method in CAPO_METHODS else "train")
            idx += 1
        return self.record


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, default=_json_default, allow_nan=True)


def write_seed_artifacts(out_dir, cfg, plan, record):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved"), "w") as fh:
        fh.write(dump_config(replace(cfg, seeds=(record.seed,)), plan))
    with open(os.path.join(out_dir, "progress.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROGRESS_COLUMNS)
        for row in record.rows:
            w.writerow([_fmt(row.get(c)) for c in PROGRESS_COLUMNS])
    fisher.write_diagnostics_csv(os.path.join(out_dir, "diagnostics.csv"), record.diagnostics)
    with open(os.path.join(out_dir, "traces.jsonl"), "w") as fh:
        for t in record.traces:
            fh.write(_dumps(t) + "\n")
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        fh.write(_dumps(record.summary()) + "\n")


def run_seed(cfg, seed, out_dir=None):
    trainer = Trainer(cfg, seed)
    record = trainer.run()
    if out_dir is not None:
        write_seed_artifacts(out_dir, cfg, trainer.plan, record)
    return record


def run_experiment(cfg, out_dir=None):
    """Run every seed in ``cfg.seeds``; artifacts go to ``out_dir/seed_<s>/``."""
    cfg.validate()
    seeds = []
    for s in cfg.seeds:
        sub = os.path.join(out_dir, f"seed_{s}") if out_dir is not None else None
        seeds.append(run_seed(cfg, s, sub))
    record = RunRecord(cfg, seeds)
    if out_dir is not None:
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            fh.write(_dumps(record.summary()) + "\n")
    return record
