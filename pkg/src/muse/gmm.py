"""Isotropic Gaussian mixtures as an analytic prior.

Convolving a mixture with N(0, sigma^2 I) only inflates each component
variance, so the smoothed energy ``-log p_sigma`` and its gradient are
available in closed form. This is the ground truth for DSM training and
for solver tests.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax


@dataclass
class GmmPrior:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.asarray(self.variances, dtype=np.float64).ravel()
        k = self.weights.size
        if self.means.shape[0] != k or self.variances.size != k:
            raise ValueError("weights, means and variances disagree on component count")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(self.variances <= 0):
            raise ValueError("component variances must be positive")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def smoothed(self, sigma: float) -> "GmmPrior":
        return GmmPrior(self.weights, self.means, self.variances + sigma**2)

    def to_json(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_json(cls, obj) -> "GmmPrior":
        return cls(obj["weights"], obj["means"], obj["variances"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "GmmPrior":
        return cls.from_json(json.loads(Path(path).read_text()))


def toy_prior() -> GmmPrior:
    """Four equally weighted clusters at (+-1, +-1) with variance 0.01."""
    means = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])
    return GmmPrior(np.full(4, 0.25), means, np.full(4, 0.01))


def gmm_sample(prior: GmmPrior, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` i.i.d. draws as an (n, d) array."""
    if n < 1:
        raise ValueError("n must be >= 1")
    comp = rng.choice(prior.weights.size, size=n, p=prior.weights)
    noise = rng.standard_normal((n, prior.dim))
    return prior.means[comp] + np.sqrt(prior.variances[comp])[:, None] * noise


def _log_components(prior: GmmPrior, sigma: float, x):
    x = np.asarray(x, dtype=np.float64)
    x2 = np.atleast_2d(x)
    if x2.shape[-1] != prior.dim:
        raise ValueError(f"point dim {x2.shape[-1]} != prior dim {prior.dim}")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    var = prior.variances + sigma**2
    sq = (
        np.sum(x2 * x2, axis=1)[:, None]
        - 2.0 * x2 @ prior.means.T
        + np.sum(prior.means**2, axis=1)[None, :]
    )
    sq = np.maximum(sq, 0.0)
    d = prior.dim
    logc = np.log(prior.weights)[None, :] - 0.5 * sq / var[None, :] - 0.5 * d * np.log(2 * np.pi * var)[None, :]
    return x2, var, logc, x.ndim == 1


def smoothed_energy(prior: GmmPrior, sigma: float, x):
    """``-log p_sigma(x)`` including every normalisation constant."""
    _, _, logc, single = _log_components(prior, sigma, x)
    e = -logsumexp(logc, axis=1)
    return float(e[0]) if single else e


def smoothed_score(prior: GmmPrior, sigma: float, x):
    """Gradient of ``smoothed_energy``: sum_k w_k(x) (x - mu_k) / (s_k^2 + sigma^2)."""
    x2, var, logc, single = _log_components(prior, sigma, x)
    w = softmax(logc, axis=1) / var[None, :]
    h = x2 * w.sum(axis=1, keepdims=True) - w @ prior.means
    return h[0] if single else h


@dataclass
class GmmEnergy:
    """Oracle counterpart of a DSM-trained energy at scale ``sigma``.

    A perfectly trained model satisfies ``H = sigma^2 grad(-log p_sigma)``,
    so energy and score are the smoothed quantities scaled by ``sigma^2``.
    """

    prior: GmmPrior
    sigma: float
    variant: str = "oracle"

    @property
    def dim(self) -> int:
        return self.prior.dim

    def energy(self, x):
        return self.sigma**2 * smoothed_energy(self.prior, self.sigma, x)

    def score(self, x):
        return self.sigma**2 * smoothed_score(self.prior, self.sigma, x)

    def curvature_bound(self) -> float:
        # Hessian of -log p is (1/v) I minus a covariance, so 1/min(v) bounds it above.
        return self.sigma**2 / float(np.min(self.prior.variances + self.sigma**2))


def _grid(bounds, resolution):
    xmin, xmax, ymin, ymax = (float(b) for b in bounds)
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    if not (xmax > xmin and ymax > ymin):
        raise ValueError(f"degenerate bounds {bounds}")
    gx, gy = np.meshgrid(np.linspace(xmin, xmax, resolution), np.linspace(ymin, ymax, resolution))
    return np.column_stack([gx.ravel(), gy.ravel()])


def field_grid_export(source, bounds, resolution: int, sigma: float) -> dict:
    """Energy/sigma^2 and score/sigma^2 sampled on a regular 2-D grid.

    ``source`` may be a ``GmmPrior`` (exact smoothed field), an energy model
    or a score baseline. Baselines have no energy; that column is NaN and
    is written as an empty CSV cell.
    """
    pts = _grid(bounds, resolution)
    if isinstance(source, GmmPrior):
        energy = smoothed_energy(source, sigma, pts)
        score = smoothed_score(source, sigma, pts)
    else:
        if not sigma > 0:
            raise ValueError("sigma must be positive for network fields")
        score = source.score(pts) / sigma**2
        if hasattr(source, "energy"):
            energy = source.energy(pts) / sigma**2
        else:
            energy = np.full(len(pts), np.nan)
    return {
        "x": pts[:, 0],
        "y": pts[:, 1],
        "energy": np.asarray(energy, dtype=float),
        "score_x": score[:, 0],
        "score_y": score[:, 1],
    }


GRID_COLUMNS = ("x", "y", "energy", "score_x", "score_y")


def write_grid_csv(record: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GRID_COLUMNS)
        for row in zip(*(record[c] for c in GRID_COLUMNS)):
            w.writerow(["" if np.isnan(v) else f"{v:.9g}" for v in row])


def read_grid_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) if r[c] != "" else np.nan for r in rows]) for c in GRID_COLUMNS}


def score_agreement(model, prior: GmmPrior, sigma: float, bounds=(-2.5, 2.5, -2.5, 2.5),
                    resolution: int = 100, density_fraction: float = 0.01) -> float:
    """Mean cosine similarity between model and oracle scores.

    Averaged over grid nodes where ``p_sigma >= density_fraction * max p_sigma``.
    """
    pts = _grid(bounds, resolution)
    logp = -smoothed_energy(prior, sigma, pts)
    keep = logp >= logp.max() + np.log(density_fraction)
    pts = pts[keep]
    a = np.asarray(model.score(pts))
    b = smoothed_score(prior, sigma, pts)
    num = np.sum(a * b, axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    cos = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return float(np.mean(cos))
