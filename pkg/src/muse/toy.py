"""Small synthetic problems used by the tests, the CLI and the golden suite.

Images are complex ``(n1, n2)`` arrays stored interleaved, so a prior over
them lives in ``2 * n1 * n2`` real dimensions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gmm import GmmEnergy, GmmPrior
from .operators import LinearOperator, make_masked_dft, simulate_measurements
from .solvers import MuseSchedule
from .tensor import from_interleaved, to_interleaved

# coarse-to-fine scales for the toy problems (the image-domain scale is O(1))
TOY_SIGMAS = (2.0, 1.0, 0.5, 0.25, 0.1, 0.05, 0.02)
TOY_EPSILONS = (1e-7, 1e-7, 1e-6, 1e-6, 1e-6, 1e-5, 1e-5)


def image_gmm_prior(shape, n_clusters: int, rng, variance: float = 1e-3, scale: float = 1.0) -> GmmPrior:
    """Mixture of ``n_clusters`` random complex images with rms ``scale``."""
    n = int(np.prod(shape))
    means = scale * rng.standard_normal((n_clusters, 2 * n)) / np.sqrt(2.0)
    return GmmPrior(np.full(n_clusters, 1.0 / n_clusters), means, np.full(n_clusters, variance))


@dataclass
class ToyInstance:
    op: LinearOperator
    prior: GmmPrior
    x_true: np.ndarray
    b: np.ndarray
    eta: float


def multimodal_mri_instance(seed: int = 0, lines: int = 8, delta: float = 0.3,
                            eta: float = 0.01, variance: float = 1e-3) -> ToyInstance:
    """Masked-DFT problem whose zero-filled start sits in the wrong basin.

    The true cluster has energy on the unsampled lines; a decoy cluster
    matches it on the sampled lines up to ``delta`` and is zero elsewhere,
    which makes it the mode nearest to ``A^H b``. Two further clusters sit
    far away. The decoy explains the data worse, so the global MAP estimate
    is in the true basin.
    """
    rng = np.random.default_rng(seed)
    mask = np.zeros(lines, dtype=bool)
    mask[np.arange(0, lines, 2)] = True
    op = make_masked_dft((lines, 1), mask)
    f = op._dft[0]

    def k_to_x(k):
        return to_interleaved(f.conj().T @ k)

    k_true = (rng.standard_normal(lines) + 1j * rng.standard_normal(lines)) / np.sqrt(2.0)
    u = rng.standard_normal(int(mask.sum())) + 1j * rng.standard_normal(int(mask.sum()))
    k_decoy = np.zeros(lines, dtype=complex)
    k_decoy[mask] = k_true[mask] + delta * u / np.linalg.norm(u)
    far = 3.0 * (rng.standard_normal((2, lines)) + 1j * rng.standard_normal((2, lines))) / np.sqrt(2.0)
    means = np.stack([k_to_x(k_true), k_to_x(k_decoy), k_to_x(far[0]), k_to_x(far[1])])
    prior = GmmPrior(np.full(4, 0.25), means, np.full(4, variance))
    x_true = means[0] + np.sqrt(variance) * rng.standard_normal(means.shape[1])
    b = simulate_measurements(op, x_true, eta, rng)
    return ToyInstance(op, prior, x_true, b, eta)


def oracle_schedule(prior: GmmPrior, sigmas=TOY_SIGMAS, epsilons=TOY_EPSILONS, eta=None) -> MuseSchedule:
    """Multiscale schedule whose stage models are exact smoothed oracles."""
    models = [GmmEnergy(prior, s) for s in sigmas]
    return MuseSchedule.from_sigmas(sigmas, epsilons, models, eta=eta)


def complex_image(x, shape):
    return from_interleaved(np.asarray(x)).reshape(shape)
