from __future__ import annotations

import numpy as np

PSNR_CAP = 120.0


def psnr(x, ref, peak=None) -> float:
    """20 log10(peak) - 10 log10(MSE), capped at 120 dB.

    ``peak`` defaults to the largest magnitude in ``ref``.
    """
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    if peak is None:
        peak = float(np.max(np.abs(ref))) if ref.size else 0.0
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((x - ref) ** 2))
    if mse < peak * peak * 1e-12:
        return PSNR_CAP
    return min(PSNR_CAP, 20.0 * np.log10(peak) - 10.0 * np.log10(mse))
