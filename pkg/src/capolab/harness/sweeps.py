"""Parameter sweeps over a base config, emitting long-format tables."""
from __future__ import annotations

import os

import numpy as np

from capolab.harness.config import CAPO_METHODS, apply_override
from capolab.harness.runner import run_experiment
from capolab.harness.summary import mean_se, write_csv
from capolab.rollout import minibatch_slices

EPOCH_GRID = (2, 4, 6, 10, 15, 20, 40)
K_GRID = (2, 4, 8, 16)
CLIP_GRID = (0.1, 0.2, 0.3, 0.5)
TARGET_KL_GRID = (0.0, 0.02, 0.04, 0.08)
WARMUP_GRID = (0.0, 0.05, 0.10, 0.20)
CARRY_GRID = ("incumbent", "reset", "best_expert", "average")

EPOCH_COLUMNS = ["E", "return_mean", "return_se", "signal_c2", "waste", "total_kl", "alpha", "cos_f"]
GRID_COLUMNS = ["param", "value", "method", "n", "return_mean", "return_se", "grad_steps"]
K_COLUMNS = GRID_COLUMNS + ["waste_reduction_ratio"]


def _with(cfg, **settings):
    for key, value in settings.items():
        cfg = apply_override(cfg, f"{key}={value}")
    return cfg


def _sub(out_dir, *parts):
    return os.path.join(out_dir, *parts) if out_dir is not None else None


def final_decomposition(seed_record):
    """Decomposition of the last recorded update of a run."""
    if not seed_record.diagnostics:
        raise ValueError("run has no diagnostics; enable experiment.diagnostics")
    return seed_record.diagnostics[-1].consensus


def epoch_sweep(cfg, E_values=EPOCH_GRID, seeds=None, out_dir=None):
    """PPO at each epoch count; final-update signal/waste split and final return."""
    rows = []
    for E in E_values:
        run_cfg = _with(cfg, **{"method": "ppo", "ppo.epochs": E, "diagnostics": True})
        if seeds is not None:
            run_cfg = _with(run_cfg, seeds=",".join(str(s) for s in seeds))
        rec = run_experiment(run_cfg, _sub(out_dir, f"E_{E}"))
        decs = [final_decomposition(s) for s in rec.seeds]
        c2 = float(np.mean([d.c * d.c for d in decs]))
        waste = float(np.mean([d.waste_norm_sq for d in decs]))
        mean, se = mean_se(rec.final_returns())
        rows.append({
            "E": E, "return_mean": mean, "return_se": se, "signal_c2": c2, "waste": waste,
            "total_kl": c2 + waste, "alpha": float(np.mean([d.alpha for d in decs])),
            "cos_f": float(np.mean([d.cos_f for d in decs])),
        })
    if out_dir is not None:
        write_csv(os.path.join(out_dir, "sweep.csv"), rows, EPOCH_COLUMNS)
    return rows


def _grad_steps(cfg):
    ppo = cfg.effective_ppo()
    width = cfg.capo.K if cfg.method in ("best_of_k", *CAPO_METHODS) else 1
    return width * ppo.epochs * len(minibatch_slices(cfg.frames_per_batch, ppo.minibatches))


def grid_sweep(cfg, key, values, methods, seeds=None, out_dir=None, name=None):
    """Every (value, method) pair at ``key = value``; one long-format row each."""
    name = name or key
    rows = []
    for value in values:
        for method in methods:
            run_cfg = _with(cfg, **{"method": method, key: value})
            if seeds is not None:
                run_cfg = _with(run_cfg, seeds=",".join(str(s) for s in seeds))
            rec = run_experiment(run_cfg, _sub(out_dir, f"{name}_{value}", method))
            mean, se = mean_se(rec.final_returns())
            ratios = [d.waste_reduction_ratio for s in rec.seeds for d in s.diagnostics
                      if d.extra.get("phase") == "generation" and np.isfinite(d.waste_reduction_ratio)]
            rows.append({
                "param": name, "value": value, "method": method, "n": len(rec.seeds),
                "return_mean": mean, "return_se": se, "grad_steps": _grad_steps(run_cfg),
                "waste_reduction_ratio": float(np.mean(ratios)) if ratios else None,
            })
    if out_dir is not None:
        write_csv(os.path.join(out_dir, "sweep.csv"), rows, K_COLUMNS)
    return rows


def k_sweep(cfg, K_values=K_GRID, seeds=None, out_dir=None, methods=("capo_avg", "capo_logop")):
    cfg = _with(cfg, **{"ppo.epochs": 10})
    return grid_sweep(cfg, "capo.K", K_values, methods, seeds, out_dir, "K")


def clip_sweep(cfg, values=CLIP_GRID, seeds=None, out_dir=None, methods=("ppo", "capo_avg", "capo_logop")):
    return grid_sweep(cfg, "ppo.clip_eps", values, methods, seeds, out_dir, "clip_eps")


def target_kl_sweep(cfg, values=TARGET_KL_GRID, seeds=None, out_dir=None,
                    methods=("ppo", "capo_avg", "capo_logop")):
    return grid_sweep(cfg, "ppo.target_kl", values, methods, seeds, out_dir, "target_kl")


def warmup_sweep(cfg, values=WARMUP_GRID, seeds=None, out_dir=None, methods=("capo_avg", "capo_logop")):
    return grid_sweep(cfg, "capo.warmup_frac", values, methods, seeds, out_dir, "warmup_frac")


def carry_sweep(cfg, values=CARRY_GRID, seeds=None, out_dir=None, methods=("capo_avg", "capo_logop")):
    return grid_sweep(cfg, "capo.carry_mode", values, methods, seeds, out_dir, "carry_mode")
