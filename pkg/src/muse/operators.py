"""Linear measurement operators with adjoints.

Every operator is scaled at construction so that its largest singular value
is one. Complex data use the interleaved two-channel layout from
``muse.tensor``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .tensor import from_interleaved, load_signal, make_rng, save_signal, spectral_norm_estimate, to_interleaved

NORM_TOL = 1e-4


@dataclass
class MaskSpec:
    num_lines: int
    acceleration: float = 4.0
    center_fraction: float = 0.08
    seed: int = 0


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def generate_vd_mask(spec: MaskSpec) -> np.ndarray:
    """1-D variable-density line mask along the phase-encode axis.

    A centred block of ``ceil(center_fraction * num_lines)`` lines is always
    kept; the rest of the ``round(num_lines / acceleration)`` budget is drawn
    without replacement with probability ~ (1 + |k| / w)^-2, where k is the
    distance to the centre line and w the centre-block width.
    """
    n = int(spec.num_lines)
    if n < 1:
        raise ValueError("num_lines must be >= 1")
    if spec.acceleration < 1:
        raise ValueError("acceleration must be >= 1")
    if not 0 <= spec.center_fraction <= 1:
        raise ValueError("center_fraction must lie in [0, 1]")
    budget = _round_half_up(n / spec.acceleration)
    n_center = int(np.ceil(spec.center_fraction * n - 1e-12))
    if budget < n_center or budget < 1:
        raise ValueError(f"line budget {budget} cannot cover the {n_center} centre lines")
    mask = np.zeros(n, dtype=bool)
    lo = n // 2 - n_center // 2
    mask[lo:lo + n_center] = True
    remaining = budget - n_center
    if remaining > 0:
        free = np.flatnonzero(~mask)
        width = max(1, n_center)
        p = (1.0 + np.abs(free - n // 2) / width) ** -2.0
        picks = make_rng(spec.seed).choice(free, size=remaining, replace=False, p=p / p.sum())
        mask[picks] = True
    return mask


def write_mask_csv(mask, path) -> None:
    Path(path).write_text("".join(f"{int(m)}\n" for m in np.asarray(mask, dtype=bool)))


def read_mask_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([int(row[0]) for row in csv.reader(fh) if row], dtype=bool)


def dft_matrix(n: int) -> np.ndarray:
    """Orthonormal DFT matrix with the zero frequency at index n // 2."""
    k = np.arange(n) - n // 2
    j = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, j) / n) / np.sqrt(n)


@dataclass
class LinearOperator:
    """Normalised linear map ``x -> scale * M x`` between real vectors."""

    kind: str
    in_dim: int
    out_dim: int
    scale: float = 1.0
    matrix: np.ndarray | None = None
    shape: tuple | None = None
    mask: np.ndarray | None = None

    @cached_property
    def _dft(self):
        return dft_matrix(self.shape[0]), dft_matrix(self.shape[1])

    def _check(self, v, dim, what):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (dim,):
            raise ValueError(f"{what} expects a vector of length {dim}, got shape {v.shape}")
        return v

    def apply(self, x) -> np.ndarray:
        x = self._check(x, self.in_dim, "apply")
        if self.kind == "identity":
            return x.copy()
        if self.kind == "dense":
            return self.scale * (self.matrix @ x)
        fr, fc = self._dft
        img = from_interleaved(x).reshape(self.shape)
        k = fr @ img @ fc.T
        return self.scale * to_interleaved(k[self.mask])

    def adjoint(self, y) -> np.ndarray:
        y = self._check(y, self.out_dim, "adjoint")
        if self.kind == "identity":
            return y.copy()
        if self.kind == "dense":
            return self.scale * (self.matrix.T @ y)
        fr, fc = self._dft
        k = np.zeros(self.shape, dtype=np.complex128)
        k[self.mask] = from_interleaved(y).reshape(-1, self.shape[1])
        img = fr.conj().T @ k @ fc.conj()
        return self.scale * to_interleaved(img)

    def normal(self, x) -> np.ndarray:
        return self.adjoint(self.apply(x))

    def norm_estimate(self, iters: int = 500, seed: int = 0, tol: float = 1e-10) -> float:
        return spectral_norm_estimate(self.apply, self.adjoint, self.in_dim, iters, make_rng(seed), tol=tol)


def _normalise(op: LinearOperator, seed: int = 0) -> LinearOperator:
    est = op.norm_estimate(iters=5000, seed=seed, tol=1e-15)
    if est == 0:
        raise ValueError("operator is identically zero")
    # tiny margin keeps the true norm <= 1 despite power-iteration underestimation
    op.scale = op.scale / (est * (1 + 1e-9))
    check = op.norm_estimate(iters=5000, seed=seed + 1)
    if not 1 - NORM_TOL <= check <= 1 + 1e-9:
        raise RuntimeError(f"operator normalisation failed: norm {check}")
    return op


def make_identity(dim: int) -> LinearOperator:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return LinearOperator("identity", dim, dim)


def make_dense(matrix) -> LinearOperator:
    m = np.array(matrix, dtype=np.float64)
    if m.ndim != 2 or min(m.shape) < 1:
        raise ValueError("matrix must be 2-D and non-empty")
    return _normalise(LinearOperator("dense", m.shape[1], m.shape[0], matrix=m))


def make_dense_gaussian(rows: int, cols: int, rng) -> LinearOperator:
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    return make_dense(rng.standard_normal((rows, cols)))


def make_masked_dft(shape, mask) -> LinearOperator:
    """Single-coil Cartesian MRI operator: keep the masked rows of the 2-D DFT.

    ``mask`` is a boolean vector over ``shape[0]`` lines or a ``MaskSpec``.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 1:
        shape = (shape[0], 1)
    if len(shape) != 2 or min(shape) < 1:
        raise ValueError(f"bad image shape {shape}")
    if isinstance(mask, MaskSpec):
        if mask.num_lines != shape[0]:
            raise ValueError("mask line count must equal shape[0]")
        mask = generate_vd_mask(mask)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (shape[0],):
        raise ValueError(f"mask must have {shape[0]} entries")
    if not mask.any():
        raise ValueError("mask samples no lines")
    n = shape[0] * shape[1]
    op = LinearOperator("masked-dft", 2 * n, 2 * int(mask.sum()) * shape[1], shape=shape, mask=mask)
    check = op.norm_estimate(iters=200)
    if not 1 - NORM_TOL <= check <= 1 + 1e-9:
        raise RuntimeError(f"masked DFT is not an isometry on sampled lines: norm {check}")
    return op


def save_dense(op: LinearOperator, path) -> None:
    if op.kind != "dense":
        raise ValueError("only dense operators are stored as matrices")
    save_signal(path, op.scale * op.matrix, op.matrix.shape)


def load_dense(path) -> LinearOperator:
    data, shape, _ = load_signal(path)
    return make_dense(data.reshape(shape))


def simulate_measurements(op: LinearOperator, x_true, eta: float, rng) -> np.ndarray:
    """``b = A x + eta * n`` with unit Gaussian noise on every real channel."""
    if eta < 0:
        raise ValueError("eta must be >= 0")
    clean = op.apply(x_true)
    if eta == 0:
        return clean
    return clean + eta * rng.standard_normal(clean.shape)
