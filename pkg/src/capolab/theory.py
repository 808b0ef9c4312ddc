"""Closed-form checks of consensus averaging in the natural parameters of diagonal Gaussians.

A point is stored as natural parameters ``(eta1, eta2) = (mu / s2, -1 / (2 s2))``
per dimension. KL to the reference is the Bregman divergence of the
log-partition, so everything here is exact arithmetic; no sampling.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from capolab.policy import GaussianDist, InvalidFamilyError, NaturalParams, from_natural, to_natural


@dataclass
class ExpFamPoint:
    eta1: np.ndarray
    eta2: np.ndarray

    def __post_init__(self):
        self.eta1 = np.asarray(self.eta1, dtype=np.float64)
        self.eta2 = np.asarray(self.eta2, dtype=np.float64)
        if self.eta1.shape != self.eta2.shape:
            raise ValueError("eta1 and eta2 shapes differ")
        if np.any(self.eta2 >= 0):
            raise InvalidFamilyError("eta2 must be strictly negative")

    @classmethod
    def from_dist(cls, dist):
        nat = to_natural(dist)
        return cls(nat.eta1, nat.eta2)

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=np.float64)
        d = v.shape[0] // 2
        return cls(v[:d], v[d:])

    def to_dist(self):
        return from_natural(NaturalParams(self.eta1, self.eta2))

    @property
    def vector(self):
        return np.concatenate([self.eta1, self.eta2])


@dataclass
class PenalizedScore:
    surrogate_lin: float
    kl: float
    lam: float

    @property
    def j_lambda(self):
        return self.surrogate_lin - self.lam * self.kl


def _point(p):
    return p if isinstance(p, ExpFamPoint) else ExpFamPoint.from_vector(p)


def log_partition(point):
    p = _point(point)
    return float(np.sum(-p.eta1**2 / (4.0 * p.eta2) - 0.5 * np.log(-2.0 * p.eta2)))


def grad_log_partition(point):
    """Mean parameters ``(E[x], E[x^2]) = (mu, mu^2 + s2)`` as one vector."""
    p = _point(point)
    mu = -p.eta1 / (2.0 * p.eta2)
    s2 = -0.5 / p.eta2
    return np.concatenate([mu, mu**2 + s2])


def bregman_kl(eta, eta_ref):
    """``D_A(eta, eta_ref) = KL(pi_eta_ref || pi_eta)``."""
    p, r = _point(eta), _point(eta_ref)
    diff = p.vector - r.vector
    return log_partition(p) - log_partition(r) - float(grad_log_partition(r) @ diff)


def _bregman_rows(e1, e2, ref):
    """``bregman_kl`` for each row of stacked natural parameters against one reference."""
    A = np.sum(-e1**2 / (4.0 * e2) - 0.5 * np.log(-2.0 * e2), axis=1)
    mu = -ref.eta1 / (2.0 * ref.eta2)
    m2 = mu**2 - 0.5 / ref.eta2
    return A - log_partition(ref) - ((e1 - ref.eta1) @ mu + (e2 - ref.eta2) @ m2)


def linearized_surrogate(eta, eta_ref, g_eta):
    return float(np.asarray(g_eta) @ (_point(eta).vector - _point(eta_ref).vector))


def penalized_score(eta, eta_ref, g_eta, lam):
    return PenalizedScore(linearized_surrogate(eta, eta_ref, g_eta), bregman_kl(eta, eta_ref), lam)


def average_points(points):
    pts = [_point(p) for p in points]
    return ExpFamPoint(np.mean([p.eta1 for p in pts], axis=0), np.mean([p.eta2 for p in pts], axis=0))


CLAUSES = ("a", "b", "c", "d")


@dataclass
class TheoremReport:
    """Per-clause outcome; a margin >= 0 means the clause holds with that slack."""

    passed: dict = field(default_factory=dict)
    margins: dict = field(default_factory=dict)
    premise_d: bool = True

    @property
    def ok(self):
        return all(self.passed.values())


def verify_consensus_theorem(eta_t, experts, g_eta, lam, delta, tol=1e-12):
    """Check the four consensus clauses at one instance.

    (a) linear surrogate of the mean equals the mean surrogate;
    (b) KL of the mean is at most the mean KL;
    (c) the KL-penalized surrogate of the mean is at least the mean score;
    (d) if every expert is inside the KL ball of radius ``delta``, so is the mean.
    """
    if len(experts) < 2:
        raise ValueError("need at least two experts")
    ref = _point(eta_t)
    pts = [_point(e) for e in experts]
    # rows 0..K-1 are the experts, row K their natural-parameter mean
    e1 = np.stack([p.eta1 for p in pts])
    e2 = np.stack([p.eta2 for p in pts])
    e1 = np.vstack([e1, e1.mean(axis=0)])
    e2 = np.vstack([e2, e2.mean(axis=0)])
    g = np.asarray(g_eta, dtype=np.float64)
    d = ref.eta1.shape[0]
    lin_all = (e1 - ref.eta1) @ g[:d] + (e2 - ref.eta2) @ g[d:]
    kl_all = _bregman_rows(e1, e2, ref)
    lin, lin_bar = lin_all[:-1], float(lin_all[-1])
    kls, kl_bar = kl_all[:-1], float(kl_all[-1])
    J = lin - lam * kls
    J_bar = lin_bar - lam * kl_bar

    rep = TheoremReport()
    diff_a = abs(lin_bar - float(np.mean(lin)))
    scale_a = 1.0 + max(abs(lin_bar), float(np.max(np.abs(lin))))
    rep.margins["a"] = tol * scale_a - diff_a
    rep.margins["b"] = float(np.mean(kls)) - kl_bar + tol
    rep.margins["c"] = J_bar - float(np.mean(J)) + tol
    rep.premise_d = all(k <= delta for k in kls)
    rep.margins["d"] = (delta - kl_bar + tol) if rep.premise_d else float("inf")
    for clause in CLAUSES:
        rep.passed[clause] = rep.margins[clause] >= 0
    return rep


def random_instance(rng, g_mode="free"):
    """Random (eta_t, experts, g_eta, lam, delta) with delta covering every expert."""
    d = int(rng.integers(1, 6))
    K = int(rng.integers(2, 9))
    mu_t = rng.uniform(-2, 2, d)
    s_t = np.exp(rng.uniform(-1, 1, d))
    ref = ExpFamPoint.from_dist(GaussianDist(mu_t, s_t))
    spread = 10.0 ** rng.uniform(-3, 0)
    mus = mu_t + spread * rng.standard_normal((K, d))
    var = (s_t * np.exp(spread * rng.standard_normal((K, d))))**2
    e1, e2 = mus / var, -0.5 / var
    experts = [ExpFamPoint(e1[k], e2[k]) for k in range(K)]
    if g_mode == "quadratic":
        # g of the toy objective -0.5 * ||eta - eta_star||^2 at eta_t.
        target = ref.vector + rng.standard_normal(2 * d)
        g = target - ref.vector
    else:
        g = rng.standard_normal(2 * d)
    lam = float(10.0 ** rng.uniform(-2, 2))
    delta = float(np.max(_bregman_rows(e1, e2, ref))) * float(rng.uniform(1.0, 2.0))
    return ref, experts, g, lam, delta


@dataclass
class CertificationSummary:
    instances: int
    violations: dict
    worst_margin: dict

    @property
    def ok(self):
        return all(v == 0 for v in self.violations.values())


def certify(n_instances=10_000, seed=0, tol=1e-12, g_mode="free"):
    rng = np.random.default_rng(seed)
    violations = {c: 0 for c in CLAUSES}
    worst = {c: float("inf") for c in CLAUSES}
    for _ in range(n_instances):
        ref, experts, g, lam, delta = random_instance(rng, g_mode)
        rep = verify_consensus_theorem(ref, experts, g, lam, delta, tol)
        for c in CLAUSES:
            if not rep.passed[c]:
                violations[c] += 1
            worst[c] = min(worst[c], rep.margins[c])
    return CertificationSummary(n_instances, violations, worst)
