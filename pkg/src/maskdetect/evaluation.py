"""Detection-quality metrics over labeled delta scores, plus KDE plots.

Fake is the positive class throughout, and lower delta indicates fake, so
rankings run by ascending delta (most model-like first). AUROC is the
Mann-Whitney pair statistic; AP is the step-wise (non-interpolated) mean of
precision at each fake's rank. Both are exactly brute-forceable, which the
test suite exploits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import ValidationError, make_rng, stable_seed
from .detector import calibrate_tau

# Ties in the AP ranking are broken by a deterministic pre-shuffle with this
# seed, then a stable sort; the convention is fixed so runs are comparable.
AP_TIE_SHUFFLE_SEED = 0


@dataclass(frozen=True)
class EvalReport:
    metric: str
    n_real: int
    n_fake: int
    auroc: float
    ap: float
    fpr95: float
    tau_at_tpr95: float

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "n_real": self.n_real,
            "n_fake": self.n_fake,
            "auroc": self.auroc,
            "ap": self.ap,
            "fpr95": self.fpr95,
            "tau_at_tpr95": self.tau_at_tpr95,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n",
                              encoding="utf-8")


def _check_classes(fake_deltas, real_deltas) -> tuple[np.ndarray, np.ndarray]:
    fake = np.asarray(list(fake_deltas), dtype=np.float64)
    real = np.asarray(list(real_deltas), dtype=np.float64)
    if fake.size == 0 or real.size == 0:
        raise ValidationError("both classes must be nonempty")
    return fake, real


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the average rank of their group."""
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    first = upper - counts + 1
    avg = first + (counts - 1) / 2.0
    return avg[inverse]


def auroc(fake_deltas: Sequence[float], real_deltas: Sequence[float]) -> float:
    """P(delta_fake < delta_real) + 0.5 * P(equal), over all pairs."""
    fake, real = _check_classes(fake_deltas, real_deltas)
    nf, nr = fake.size, real.size
    ranks = _average_ranks(np.concatenate([fake, real]))
    u_fake_greater = ranks[:nf].sum() - nf * (nf + 1) / 2.0
    return float(1.0 - u_fake_greater / (nf * nr))


def _ranked_fake_flags(fake: np.ndarray, real: np.ndarray,
                       shuffle_seed: int = AP_TIE_SHUFFLE_SEED) -> np.ndarray:
    """Boolean fake-flags in final ranking order (ascending delta)."""
    deltas = np.concatenate([fake, real])
    flags = np.concatenate([np.ones(fake.size, bool), np.zeros(real.size, bool)])
    perm = make_rng(stable_seed("ap-tie-shuffle", shuffle_seed)).permutation(deltas.size)
    order = np.argsort(deltas[perm], kind="stable")
    return flags[perm][order]


def average_precision(fake_deltas: Sequence[float], real_deltas: Sequence[float],
                      shuffle_seed: int = AP_TIE_SHUFFLE_SEED) -> float:
    """Mean of precision at each fake's rank, most model-like first."""
    fake, real = _check_classes(fake_deltas, real_deltas)
    ranked = _ranked_fake_flags(fake, real, shuffle_seed)
    positions = np.arange(1, ranked.size + 1)
    hits = np.cumsum(ranked)
    precisions = hits[ranked] / positions[ranked]
    return float(precisions.mean())


def fpr_at_tpr(fake_deltas: Sequence[float], real_deltas: Sequence[float],
               target_tpr: float = 0.95) -> tuple[float, float]:
    """False-positive rate on reals at the tau declaring target_tpr of fakes fake."""
    fake, real = _check_classes(fake_deltas, real_deltas)
    tau = calibrate_tau(fake.tolist(), target_tpr).tau
    fpr = float(np.mean(real <= tau))
    return fpr, tau


def evaluate_scores(fake_deltas: Sequence[float], real_deltas: Sequence[float],
                    metric: str = "psnr") -> EvalReport:
    fake, real = _check_classes(fake_deltas, real_deltas)
    fpr95, tau95 = fpr_at_tpr(fake, real, 0.95)
    return EvalReport(
        metric=metric,
        n_real=int(real.size),
        n_fake=int(fake.size),
        auroc=auroc(fake, real),
        ap=average_precision(fake, real),
        fpr95=fpr95,
        tau_at_tpr95=tau95,
    )


# ---------------------------------------------------------------------------
# Score-distribution plots (Gaussian KDE, Silverman bandwidth)
# ---------------------------------------------------------------------------


def silverman_bandwidth(values: np.ndarray) -> float:
    """0.9 * min(std, IQR/1.34) * n^(-1/5), floored for degenerate samples."""
    v = np.asarray(values, dtype=np.float64)
    std = float(v.std())
    q75, q25 = np.percentile(v, [75.0, 25.0])
    iqr = float(q75 - q25)
    scale = min(std, iqr / 1.34) if iqr > 0 else std
    h = 0.9 * scale * v.size ** (-0.2)
    if h <= 0.0:
        h = 1e-3
    return h


def kde_curve(values: Sequence[float], grid: np.ndarray,
              bandwidth: Optional[float] = None) -> np.ndarray:
    """Smoothed density of values evaluated on grid."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValidationError("kde needs at least one value")
    h = bandwidth if bandwidth is not None else silverman_bandwidth(v)
    z = (grid[:, None] - v[None, :]) / h
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (v.size * h * np.sqrt(2.0 * np.pi))
    return dens


def emit_distribution_plot(fake_deltas: Sequence[float], real_deltas: Sequence[float],
                           out_path, n_grid: int = 512):
    """Write a static vector plot of the two smoothed delta densities.

    Returns (grid, fake_density, real_density) so callers and tests can
    inspect the exact curves that were drawn.
    """
    fake, real = _check_classes(fake_deltas, real_deltas)
    h_f = silverman_bandwidth(fake)
    h_r = silverman_bandwidth(real)
    pad = 3.0 * max(h_f, h_r)
    lo = min(fake.min(), real.min()) - pad
    hi = max(fake.max(), real.max()) + pad
    if lo == hi:
        lo, hi = lo - 1.0, hi + 1.0
    grid = np.linspace(lo, hi, n_grid)
    fake_density = kde_curve(fake, grid, h_f)
    real_density = kde_curve(real, grid, h_r)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(grid, fake_density, label="fake", color="tab:red")
    ax.fill_between(grid, fake_density, alpha=0.25, color="tab:red")
    ax.plot(grid, real_density, label="real", color="tab:blue")
    ax.fill_between(grid, real_density, alpha=0.25, color="tab:blue")
    ax.set_xlabel("delta")
    ax.set_ylabel("density")
    ax.legend()
    fig.tight_layout()
    try:
        fig.savefig(out_path)
    except OSError as exc:
        raise IOError(f"could not write plot to {out_path}: {exc}") from exc
    finally:
        plt.close(fig)
    return grid, fake_density, real_density
