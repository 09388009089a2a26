"""Brute-force verification of the inner-maximization optimum and the
alignment identity on discrete finite distributions.

For M distributions over a shared finite support, the optimal domain
posterior at each point is each distribution's share of the total mass.
The resulting objective equals M times the uniform-weight generalized
Jensen-Shannon divergence minus M*ln(M); the minimum is attained exactly
when all distributions coincide. Everything here uses natural logs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SUM_TOL = 1e-12
IDENTITY_TOL = 1e-9
EQUALITY_TOL = 1e-12
_LOG_TINY = 1e-300


@dataclass
class DiscreteJointSet:
    """M probability vectors over a shared support, shape (M, n)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] < 2 or p.shape[1] < 1:
            raise ValueError(f"need an (M>=2, n>=1) array, got {p.shape}")
        if (p < 0).any():
            raise ValueError("probabilities must be nonnegative")
        sums = p.sum(axis=1)
        if np.abs(sums - 1.0).max() > SUM_TOL:
            raise ValueError(f"rows must sum to 1 within {SUM_TOL}, got {sums}")
        self.probs = p

    @property
    def n_distributions(self) -> int:
        return self.probs.shape[0]

    @property
    def support_size(self) -> int:
        return self.probs.shape[1]


def drop_zero_support(joints: DiscreteJointSet) -> DiscreteJointSet:
    """Remove support points carrying zero total mass."""
    keep = joints.probs.sum(axis=0) > 0
    return DiscreteJointSet(joints.probs[:, keep])


def closed_form_D(joints: DiscreteJointSet) -> np.ndarray:
    """Optimal posterior: row z, column i holds P_i(z) / sum_j P_j(z)."""
    totals = joints.probs.sum(axis=0)
    if (totals == 0).any():
        raise ValueError("support points with zero total mass must be dropped "
                         "before computing the posterior")
    return (joints.probs / totals).T


def objective(joints: DiscreteJointSet, d: np.ndarray) -> float:
    """sum_i sum_z P_i(z) * log D_i(z); zero-mass terms contribute nothing."""
    p = joints.probs
    dt = np.asarray(d, dtype=np.float64).T
    if dt.shape != p.shape:
        raise ValueError(f"candidate shape {d.shape} does not match "
                         f"({p.shape[1]}, {p.shape[0]})")
    logs = np.log(np.maximum(dt, _LOG_TINY))
    return float(np.where(p > 0, p * logs, 0.0).sum())


def _refine_pairwise(p: np.ndarray, d: np.ndarray, sweeps: int) -> np.ndarray:
    """Coordinate ascent over simplex pairs at every support point.

    Moving mass t from coordinate j to i maximizes the point objective at
    t = (P_i d_j - P_j d_i) / (P_i + P_j), which equalizes the P/d ratios
    of the pair and keeps the iterate feasible.
    """
    m, _ = p.shape
    d = d.copy()
    for _ in range(sweeps):
        for i in range(m):
            for j in range(i + 1, m):
                pi, pj = p[i], p[j]
                di, dj = d[:, i], d[:, j]
                denom = pi + pj
                with np.errstate(invalid="ignore", divide="ignore"):
                    t = np.where(denom > 0, (pi * dj - pj * di) / denom, 0.0)
                d[:, i] = di + t
                d[:, j] = dj - t
    return d


def numeric_inner_max(joints: DiscreteJointSet, trials: int, seed: int = 0,
                      sweeps: int = 30):
    """Search the per-point simplices for the best posterior.

    Draws `trials` uniform-Dirichlet candidates, keeps the best candidate
    independently at every support point, then refines it by pairwise
    coordinate ascent. Returns (best objective, best D, best objective of
    any single raw candidate).
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    p = joints.probs
    m, n = p.shape
    rng = np.random.default_rng(seed)

    best_per_point = None  # (n,) running best score per support point
    best_d = np.full((n, m), 1.0 / m)
    best_candidate_total = -np.inf
    chunk = max(1, min(trials, 20000))
    remaining = trials
    while remaining > 0:
        size = min(chunk, remaining)
        remaining -= size
        cand = rng.dirichlet(np.ones(m), size=(size, n))  # (size, n, m)
        logs = np.log(np.maximum(cand, _LOG_TINY))
        scores = np.einsum("mz,tzm->tz", p, logs)  # (size, n)
        totals = scores.sum(axis=1)
        best_candidate_total = max(best_candidate_total, float(totals.max()))
        point_best = scores.max(axis=0)
        argbest = scores.argmax(axis=0)
        if best_per_point is None:
            best_per_point = point_best
            best_d = cand[argbest, np.arange(n)]
        else:
            better = point_best > best_per_point
            best_per_point = np.where(better, point_best, best_per_point)
            best_d[better] = cand[argbest[better], np.arange(n)[better]]

    refined = _refine_pairwise(p, best_d, sweeps)
    return objective(joints, refined), refined, best_candidate_total


def _entropy(p: np.ndarray) -> np.ndarray:
    return -np.where(p > 0, p * np.log(np.maximum(p, _LOG_TINY)), 0.0).sum(axis=-1)


def generalized_jsd(joints: DiscreteJointSet) -> float:
    """H(mean of the distributions) minus the mean of their entropies."""
    p = joints.probs
    return float(_entropy(p.mean(axis=0)) - _entropy(p).mean())


@dataclass
class TheoremReport:
    objective: float
    jsd: float
    identity_residual: float
    optimum_gap: float          # objective minus its minimum -M*ln(M)
    attains_minimum: bool
    distributions_equal: bool

    @property
    def identity_holds(self) -> bool:
        return self.identity_residual < IDENTITY_TOL

    @property
    def minimum_iff_equal(self) -> bool:
        return self.attains_minimum == self.distributions_equal

    @property
    def passed(self) -> bool:
        return self.identity_holds and self.minimum_iff_equal


def verify_theorem1(joints: DiscreteJointSet) -> TheoremReport:
    """Check objective == M*JSD - M*ln(M) and the equality condition."""
    joints = drop_zero_support(joints)
    m = joints.n_distributions
    obj = objective(joints, closed_form_D(joints))
    jsd = generalized_jsd(joints)
    identity_residual = abs(obj - (m * jsd - m * np.log(m)))
    optimum_gap = obj + m * np.log(m)
    return TheoremReport(
        objective=obj,
        jsd=jsd,
        identity_residual=identity_residual,
        optimum_gap=abs(optimum_gap),
        attains_minimum=abs(optimum_gap) < IDENTITY_TOL,
        distributions_equal=jsd < EQUALITY_TOL,
    )


def random_joint_set(rng: np.random.Generator, m: int | None = None,
                     n: int | None = None) -> DiscreteJointSet:
    """Random instance: M in {2,3,4}, support size up to 12, Dirichlet rows."""
    if m is None:
        m = int(rng.integers(2, 5))
    if n is None:
        n = int(rng.integers(1, 13))
    return DiscreteJointSet(rng.dirichlet(np.ones(n), size=m))


def verify_many(instances: int, seed: int) -> list:
    """Run the identity check over random instances; one report dict each."""
    if instances < 1:
        raise ValueError(f"instances must be >= 1, got {instances}")
    out = []
    root = np.random.SeedSequence(seed)
    for child in root.spawn(instances):
        instance_seed = int(child.generate_state(1)[0])
        rng = np.random.default_rng(instance_seed)
        report = verify_theorem1(random_joint_set(rng))
        out.append({
            "instance_seed": instance_seed,
            "identity_residual": report.identity_residual,
            "optimum_gap": report.optimum_gap,
            "jsd": report.jsd,
            "identity_holds": report.identity_holds,
            "minimum_iff_equal": report.minimum_iff_equal,
            "pass": report.passed,
        })
    return out
