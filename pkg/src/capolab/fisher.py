"""Signal/waste decomposition of policy updates in the Fisher metric.

Every inner product here goes through one linear operator ``apply_F`` (a
callable ``v -> F v``). Using the same (possibly damped) operator for the
natural-gradient direction and for the projections keeps the Pythagorean split
exact in that metric.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from capolab.optim import conjugate_gradient
from capolab.policy import FisherOperator


class UndefinedDirectionError(ValueError):
    """The policy gradient is zero, so the natural-gradient direction does not exist."""


@dataclass
class Decomposition:
    c: float
    waste_norm_sq: float
    signal_kl: float
    waste_kl: float
    total_kl_quad: float
    alpha: float
    cos_f: float
    nat_grad_norm: float = float("nan")


def natural_direction(apply_F, g, cg_iters=10, tol=1e-10):
    """Unit Fisher-norm direction of ``F^-1 g`` and ``||F^-1 g||_F``."""
    g = np.asarray(g, dtype=np.float64)
    if not np.any(g):
        raise UndefinedDirectionError("natural gradient direction undefined for g = 0")
    x = conjugate_gradient(apply_F, g, cg_iters, tol)
    norm = math.sqrt(max(float(x @ apply_F(x)), 0.0))
    if norm == 0.0:
        raise UndefinedDirectionError("natural gradient has zero Fisher norm")
    return x / norm, norm


def natural_gradient_direction(policy, params, states, g, damping, cg_iters=10, tol=1e-10):
    return natural_direction(FisherOperator(policy, params, states, damping), g, cg_iters, tol)


class FisherFrame:
    """Caches ``F d_hat`` so each decomposition costs a single operator application."""

    def __init__(self, apply_F, d_hat, nat_grad_norm=float("nan")):
        self.apply_F = apply_F
        self.d_hat = np.asarray(d_hat, dtype=np.float64)
        self.F_d = apply_F(self.d_hat)
        self.dFd = float(self.d_hat @ self.F_d)
        self.nat_grad_norm = nat_grad_norm

    def split(self, delta):
        """Return ``(c, eps, F delta, F eps)``."""
        delta = np.asarray(delta, dtype=np.float64)
        F_delta = self.apply_F(delta)
        c = float(self.d_hat @ F_delta) / self.dFd
        eps = delta - c * self.d_hat
        F_eps = F_delta - c * self.F_d
        return c, eps, F_delta, F_eps

    def decompose(self, delta):
        c, eps, F_delta, F_eps = self.split(delta)
        return _decomposition(c, float(eps @ F_eps), float(np.asarray(delta) @ F_delta),
                              self.nat_grad_norm)


def _decomposition(c, waste, total, nat_grad_norm):
    waste = max(waste, 0.0)
    denom = c * c + waste
    alpha = c * c / denom if denom > 0 else 0.0
    norm = math.sqrt(max(total, 0.0))
    cos_f = c / norm if norm > 0 else 0.0
    return Decomposition(
        c=c,
        waste_norm_sq=waste,
        signal_kl=0.5 * c * c,
        waste_kl=0.5 * waste,
        total_kl_quad=0.5 * total,
        alpha=alpha,
        cos_f=cos_f,
        nat_grad_norm=nat_grad_norm,
    )


def decompose_update(delta, d_hat, apply_F, nat_grad_norm=float("nan")):
    """Split ``delta = c d_hat + eps`` with ``<eps, d_hat>_F = 0``."""
    return FisherFrame(apply_F, d_hat, nat_grad_norm).decompose(delta)


def waste_reduction_ratio(expert_decomps, consensus_decomp):
    """Consensus waste over mean expert waste; below 1 means waste cancelled."""
    if len(expert_decomps) < 2:
        raise ValueError("waste reduction needs at least two experts")
    mean_waste = float(np.mean([d.waste_norm_sq for d in expert_decomps]))
    if mean_waste == 0.0:
        raise ZeroDivisionError("mean expert waste is zero; ratio undefined")
    return consensus_decomp.waste_norm_sq / mean_waste


def _fisher_cosine_mean(vectors, F_vectors):
    cos = []
    for j, k in combinations(range(len(vectors)), 2):
        nj = float(vectors[j] @ F_vectors[j])
        nk = float(vectors[k] @ F_vectors[k])
        if nj <= 0 or nk <= 0:
            continue
        cos.append(float(vectors[j] @ F_vectors[k]) / math.sqrt(nj * nk))
    if not cos:
        raise ValueError("every expert pair has a zero-norm vector")
    return float(np.mean(cos))


def cross_expert_correlations(expert_updates, d_hat, apply_F, frame=None):
    """Mean pairwise Fisher cosines of signal vectors, waste vectors and full updates.

    Signal vectors are all parallel to ``d_hat``, so ``rho_c`` is +1 when every
    ``c_k`` shares a sign.
    """
    if len(expert_updates) < 2:
        raise ValueError("correlations need at least two experts")
    frame = frame or FisherFrame(apply_F, d_hat)
    parts = [frame.split(d) for d in expert_updates]
    signal = [c * frame.d_hat for c, _, _, _ in parts]
    F_signal = [c * frame.F_d for c, _, _, _ in parts]
    rho_c = _fisher_cosine_mean(signal, F_signal)
    rho_eps = _fisher_cosine_mean([p[1] for p in parts], [p[3] for p in parts])
    rho_total = _fisher_cosine_mean([np.asarray(d) for d in expert_updates], [p[2] for p in parts])
    return rho_c, rho_eps, rho_total


def penalized_gain_gap(deltas, g, apply_F, lam):
    """Quadratic-model gap ``J(mean delta) - mean J(delta_k)`` and its closed form.

    ``J(delta) = g^T delta - (lam / 2) delta^T F delta``. Returns
    ``(gap, (lam / 2) * (Var(c_k) + mean ||eps_k - eps_bar||_F^2))`` where the
    decomposition uses the natural direction of ``g`` under ``apply_F``.
    """
    deltas = [np.asarray(d, dtype=np.float64) for d in deltas]

    def J(d):
        return float(g @ d) - 0.5 * lam * float(d @ apply_F(d))

    mean_delta = np.mean(deltas, axis=0)
    gap = J(mean_delta) - float(np.mean([J(d) for d in deltas]))
    d_hat, _ = natural_direction(apply_F, g, cg_iters=10 * len(g), tol=1e-14)
    frame = FisherFrame(apply_F, d_hat)
    parts = [frame.split(d) for d in deltas]
    cs = np.array([p[0] for p in parts])
    eps = np.array([p[1] for p in parts])
    eps_bar = eps.mean(axis=0)
    spread = float(np.mean([(e - eps_bar) @ apply_F(e - eps_bar) for e in eps]))
    return gap, 0.5 * lam * (float(np.var(cs)) + spread)


DIAGNOSTIC_COLUMNS = [
    "generation", "expert_id", "c", "waste_norm_sq", "signal_kl", "waste_kl",
    "alpha", "cos_f", "ratio", "rho_c", "rho_eps", "rho_total",
]


@dataclass
class DiagnosticsRecord:
    generation: int
    experts: list
    consensus: Decomposition
    waste_reduction_ratio: float = float("nan")
    rho_c: float = float("nan")
    rho_eps: float = float("nan")
    rho_total: float = float("nan")
    signal_preservation: float = float("nan")
    consensus_quad_kl: float = float("nan")
    mean_expert_quad_kl: float = float("nan")
    extra: dict = field(default_factory=dict)

    def rows(self):
        def fmt(x):
            return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))

        out = []
        for k, d in enumerate(self.experts):
            out.append([str(self.generation), str(k), fmt(d.c), fmt(d.waste_norm_sq), fmt(d.signal_kl),
                        fmt(d.waste_kl), fmt(d.alpha), fmt(d.cos_f), "", "", "", ""])
        d = self.consensus
        out.append([str(self.generation), "consensus", fmt(d.c), fmt(d.waste_norm_sq), fmt(d.signal_kl),
                    fmt(d.waste_kl), fmt(d.alpha), fmt(d.cos_f), fmt(self.waste_reduction_ratio),
                    fmt(self.rho_c), fmt(self.rho_eps), fmt(self.rho_total)])
        return out

    def to_dict(self):
        d = asdict(self)
        return d


def write_diagnostics_csv(path, records, append=False):
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append:
            w.writerow(DIAGNOSTIC_COLUMNS)
        for rec in records:
            w.writerows(rec.rows())


def diagnose(generation, apply_F, g, incumbent, expert_params, consensus_params,
             cg_iters=10, tol=1e-10):
    """Decompose every expert update and the consensus update against one frame."""
    d_hat, norm = natural_direction(apply_F, g, cg_iters, tol)
    frame = FisherFrame(apply_F, d_hat, norm)
    incumbent = np.asarray(incumbent, dtype=np.float64)
    deltas = [np.asarray(p) - incumbent for p in expert_params]
    experts = [frame.decompose(d) for d in deltas]
    consensus = frame.decompose(np.asarray(consensus_params) - incumbent)
    rec = DiagnosticsRecord(generation, experts, consensus)
    rec.consensus_quad_kl = consensus.total_kl_quad
    rec.mean_expert_quad_kl = float(np.mean([d.total_kl_quad for d in experts]))
    if len(experts) >= 2:
        try:
            rec.waste_reduction_ratio = waste_reduction_ratio(experts, consensus)
        except ZeroDivisionError:
            pass
        try:
            rec.rho_c, rec.rho_eps, rec.rho_total = cross_expert_correlations(
                deltas, d_hat, apply_F, frame)
        except ValueError:
            pass
        mean_c = float(np.mean([d.c for d in experts]))
        if mean_c != 0:
            rec.signal_preservation = consensus.c / mean_c
    return rec
