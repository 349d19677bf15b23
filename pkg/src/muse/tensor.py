"""Signals, seeded randomness and spectral estimation.

Signals are stored as flat float64 arrays. Complex images are kept as two
interleaved real channels ``[re0, im0, re1, im1, ...]`` so the plain real dot
product of two interleaved vectors equals ``Re(u^H v)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; identical seeds give bit-identical streams."""
    return np.random.Generator(np.random.PCG64(int(seed)))


@dataclass
class Signal:
    """Flat real data plus shape metadata.

    ``channels`` is 1 for real data and 2 for complex data stored as
    interleaved real/imaginary pairs.
    """

    data: np.ndarray
    shape: tuple
    channels: int = 1

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64).ravel()
        self.shape = tuple(int(s) for s in self.shape)
        if self.channels not in (1, 2):
            raise ValueError(f"channels must be 1 or 2, got {self.channels}")
        if any(s < 1 for s in self.shape):
            raise ValueError(f"shape dims must be >= 1, got {self.shape}")
        expected = self.channels * int(np.prod(self.shape))
        if self.data.size != expected:
            raise ValueError(
                f"data length {self.data.size} != channels*prod(shape) = {expected}"
            )

    @classmethod
    def from_complex(cls, z) -> "Signal":
        z = np.asarray(z, dtype=np.complex128)
        return cls(to_interleaved(z), z.shape, channels=2)

    def to_complex(self) -> np.ndarray:
        if self.channels != 2:
            raise ValueError("signal is real-valued")
        return from_interleaved(self.data).reshape(self.shape)

    def save(self, path) -> None:
        save_signal(path, self.data, self.shape, self.channels)

    @classmethod
    def load(cls, path) -> "Signal":
        data, shape, channels = load_signal(path)
        return cls(data, shape, channels)


def to_interleaved(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.complex128).ravel()
    out = np.empty(2 * z.size)
    out[0::2] = z.real
    out[1::2] = z.imag
    return out


def from_interleaved(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % 2:
        raise ValueError("interleaved complex data must have even length")
    return x[..., 0::2] + 1j * x[..., 1::2]


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_signal(path, data, shape, channels=1) -> None:
    """Write ``data`` as little-endian f64 with a ``<path>.json`` sidecar."""
    path = Path(path)
    data = np.asarray(data, dtype="<f8").ravel()
    if data.size != channels * int(np.prod(shape)):
        raise ValueError("data length does not match shape and channels")
    path.write_bytes(data.tobytes())
    sidecar_path(path).write_text(
        json.dumps({"shape": [int(s) for s in shape], "channels": int(channels)})
    )


def load_signal(path):
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    data = np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64)
    shape, channels = tuple(meta["shape"]), int(meta.get("channels", 1))
    if data.size != channels * int(np.prod(shape)):
        raise ValueError(f"{path}: length {data.size} does not match sidecar {meta}")
    return data, shape, channels


def gaussian_sample(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    """I.i.d. standard normal array of the given shape."""
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ValueError(f"shape must be non-empty with dims >= 1, got {shape}")
    return rng.standard_normal(shape)


def spectral_norm_estimate(
    apply: Callable[[np.ndarray], np.ndarray],
    adjoint: Callable[[np.ndarray], np.ndarray],
    dim: int,
    iters: int,
    rng: np.random.Generator,
    tol: float = 1e-10,
    start: np.ndarray | None = None,
) -> float:
    """Largest singular value of a linear map by power iteration on A^H A.

    Starts from a seeded random unit vector (or ``start``) and stops early
    once the Rayleigh quotient changes by less than ``tol``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    v = rng.standard_normal(dim) if start is None else np.array(start, dtype=float)
    if v.shape != (dim,):
        raise ValueError(f"start vector must have shape ({dim},)")
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(iters):
        av = np.asarray(apply(v), dtype=float)
        w = np.asarray(adjoint(av), dtype=float)
        if w.shape != (dim,):
            raise ValueError(
                f"adjoint returned shape {w.shape}, expected ({dim},): apply/adjoint mismatch"
            )
        rayleigh = float(av @ av)
        norm_w = np.linalg.norm(w)
        new = float(np.sqrt(rayleigh))
        converged = abs(new - estimate) <= tol * max(new, 1e-300)
        estimate = max(estimate, new)
        if norm_w == 0.0 or converged:
            break
        v = w / norm_w
    return estimate
