"""Numerical lab for the likelihood-gap analysis on finite distributions.

Finite discrete distributions stand in for the continuous image
distributions, which makes every quantity in the analysis exactly
computable at desk scale: total variation, KL divergence, the expected
log-likelihood gap, the AUC ceiling 1/2 + tv - tv^2/2, and a Monte-Carlo
check of the concentration argument behind choose_k.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ValidationError, make_rng, stable_seed
from .detector import choose_k


@dataclass(frozen=True)
class DiscreteDist:
    """Finite distribution: outcomes plus their probabilities."""

    support: tuple
    probs: np.ndarray

    def __post_init__(self):
        support = tuple(self.support)
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or len(support) != probs.size:
            raise ValidationError("support and probs must have equal length")
        if probs.size == 0:
            raise ValidationError("distribution must have nonempty support")
        if (probs < 0).any():
            raise ValidationError("probabilities must be nonnegative")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ValidationError(f"probabilities sum to {probs.sum()}, not 1")
        probs.flags.writeable = False
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_probs(cls, probs: Sequence[float]) -> "DiscreteDist":
        probs = np.asarray(list(probs), dtype=np.float64)
        return cls(support=tuple(range(probs.size)), probs=probs)


def _check_support(g: DiscreteDist, h: DiscreteDist) -> None:
    if g.support != h.support:
        raise ValidationError("distributions must share the same support")


def tv_distance(g: DiscreteDist, h: DiscreteDist) -> float:
    """Total variation: half the L1 distance between the probability vectors."""
    _check_support(g, h)
    return float(0.5 * np.abs(g.probs - h.probs).sum())


def kl_divergence(g: DiscreteDist, h: DiscreteDist) -> float:
    """KL(g || h) with the 0*log(0) := 0 convention."""
    _check_support(g, h)
    gp = g.probs
    hp = h.probs
    active = gp > 0
    if (hp[active] == 0).any():
        raise ValidationError("kl undefined: g puts mass where h has none")
    return float(np.sum(gp[active] * np.log(gp[active] / hp[active])))


def likelihood_gap(g: DiscreteDist, h: DiscreteDist, logp: Sequence[float]) -> float:
    """Expected log-likelihood under g minus under h, for a shared table."""
    _check_support(g, h)
    table = np.asarray(list(logp), dtype=np.float64)
    if table.size != len(g.support):
        raise ValidationError("log-likelihood table must align with the support")
    return float(np.dot(g.probs - h.probs, table))


def auc_ceiling(tv: float) -> float:
    """Upper bound on any detector's ROC area: 0.5 + tv - tv^2 / 2."""
    if not 0.0 <= tv <= 1.0:
        raise ValidationError(f"tv must be in [0, 1], got {tv}")
    return 0.5 + tv - tv * tv / 2.0


def sample_indices(dist: DiscreteDist, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n outcome indices from the distribution."""
    return rng.choice(dist.probs.size, size=n, p=dist.probs)


def _truncated_normal(rng: np.random.Generator, mean: float, std: float,
                      size: int, clip_at: float = 6.0) -> np.ndarray:
    # Clipping at +/- 6 std keeps the tails bounded (hence sub-Gaussian)
    # and, being symmetric, leaves the mean where it is.
    raw = rng.normal(mean, std, size=size)
    return np.clip(raw, mean - clip_at * std, mean + clip_at * std)


def validate_k_bound(sigma: float, gap: float, delta_prob: float, c: float = 4.0,
                     trials: int = 1000, seed: int = 0, k: int | None = None) -> float:
    """Monte-Carlo failure rate of mean separation at K = choose_k(...).

    Two sub-Gaussian distance distributions (truncated Gaussians with
    variance proxy sigma) sit a gap apart; each trial draws K samples from
    both and fails when the empirical means land in the wrong order. The
    concentration argument promises failure probability at most 2 * delta_prob.
    """
    if trials < 100:
        raise ValidationError("trials must be >= 100 for a stable estimate")
    if sigma <= 0 or gap <= 0:
        raise ValidationError("sigma and gap must be positive")
    if not 0.0 < delta_prob < 1.0:
        raise ValidationError("delta_prob must be in (0, 1)")
    n_samples = k if k is not None else choose_k(sigma, delta_prob, gap, c)
    rng = make_rng(stable_seed("k-bound", seed, sigma, gap, delta_prob, c, n_samples))
    std = math.sqrt(sigma)
    machine = _truncated_normal(rng, 0.0, std, size=trials * n_samples)
    other = _truncated_normal(rng, gap, std, size=trials * n_samples)
    machine_means = machine.reshape(trials, n_samples).mean(axis=1)
    other_means = other.reshape(trials, n_samples).mean(axis=1)
    failures = int(np.sum(machine_means >= other_means))
    return failures / trials


# ---------------------------------------------------------------------------
# Experiment drivers for the simulate command
# ---------------------------------------------------------------------------


def random_distribution(rng: np.random.Generator, size: int) -> DiscreteDist:
    probs = rng.dirichlet(np.ones(size))
    probs = probs / probs.sum()
    return DiscreteDist.from_probs(probs)


def run_pinsker_experiment(trials: int = 1000, seed: int = 0,
                           support_size: int = 12) -> dict:
    """Check gap <= ||logp||_inf * tv <= ||logp||_inf * sqrt(kl / 2) per trial."""
    rng = make_rng(stable_seed("pinsker-exp", seed))
    worst_slack = math.inf
    violations = 0
    for _ in range(trials):
        g = random_distribution(rng, support_size)
        h = random_distribution(rng, support_size)
        # Log-likelihood tables are genuine log-probabilities (<= 0).
        logp = np.log(random_distribution(rng, support_size).probs)
        gap = likelihood_gap(g, h, logp)
        sup = float(np.max(np.abs(logp)))
        tv_bound = sup * tv_distance(g, h)
        kl_bound = sup * math.sqrt(kl_divergence(g, h) / 2.0)
        slack = min(tv_bound - gap, kl_bound - tv_bound, kl_bound - gap)
        worst_slack = min(worst_slack, slack)
        if slack < -1e-9:
            violations += 1
    return {
        "experiment": "pinsker",
        "trials": trials,
        "violations": violations,
        "worst_slack": worst_slack,
    }


def run_lecam_experiment(n_pairs: int = 50, n_detectors: int = 20,
                         n_samples: int = 10_000, seed: int = 0,
                         support_size: int = 10) -> dict:
    """Empirical AUC of arbitrary detectors never beats the tv ceiling.

    Detectors are random score tables over the support (half of them
    thresholded to binary decisions); empirical AUC is computed from
    n_samples draws per class and compared against
    auc_ceiling(tv) + 3 / sqrt(n_samples).
    """
    from .evaluation import auroc as empirical_auc

    rng = make_rng(stable_seed("lecam-exp", seed))
    slack = 3.0 / math.sqrt(n_samples)
    violations = 0
    max_excess = -math.inf
    for _ in range(n_pairs):
        g = random_distribution(rng, support_size)
        h = random_distribution(rng, support_size)
        ceiling = auc_ceiling(tv_distance(g, h))
        g_idx = sample_indices(g, n_samples, rng)
        h_idx = sample_indices(h, n_samples, rng)
        for d in range(n_detectors):
            scores = rng.normal(size=support_size)
            if d % 2 == 1:
                scores = (scores > rng.normal()).astype(np.float64)
            # Higher score = "more machine-like"; auroc wants lower delta
            # for the positive class, so negate.
            auc = empirical_auc(-scores[g_idx], -scores[h_idx])
            excess = auc - (ceiling + slack)
            max_excess = max(max_excess, excess)
            if excess > 0:
                violations += 1
    return {
        "experiment": "lecam",
        "pairs": n_pairs,
        "detectors_per_pair": n_detectors,
        "n_samples": n_samples,
        "violations": violations,
        "max_excess": max_excess,
    }


def run_kbound_experiment(trials: int = 1000, seed: int = 0, sigma: float = 1.0,
                          gap: float = 0.5, delta_prob: float = 0.05,
                          c: float = 4.0) -> dict:
    k = choose_k(sigma, delta_prob, gap, c)
    failure_ratio = validate_k_bound(sigma, gap, delta_prob, c, trials=trials, seed=seed)
    return {
        "experiment": "kbound",
        "trials": trials,
        "sigma": sigma,
        "gap": gap,
        "delta_prob": delta_prob,
        "c": c,
        "k": k,
        "failure_ratio": failure_ratio,
        "bound": 2.0 * delta_prob,
    }
