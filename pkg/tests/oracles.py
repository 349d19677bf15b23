"""Independent reference computations used only by the tests."""
import numpy as np


def jacobi_singular_values(a, sweeps=60, tol=1e-15):
    """Singular values by one-sided Jacobi rotations (Hestenes).

    Columns are orthogonalised pairwise; the column norms of the result are
    the singular values. Deliberately shares no code with numpy.linalg.
    """
    u = np.array(a, dtype=float)
    if u.shape[0] < u.shape[1]:
        u = u.T.copy()
    n = u.shape[1]
    for _ in range(sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = float(u[:, i] @ u[:, i])
                beta = float(u[:, j] @ u[:, j])
                gamma = float(u[:, i] @ u[:, j])
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                off = max(off, abs(gamma) / np.sqrt(alpha * beta))
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta)) if zeta != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ui = u[:, i].copy()
                u[:, i] = c * ui - s * u[:, j]
                u[:, j] = s * ui + c * u[:, j]
        if off <= tol:
            break
    return np.sort(np.sqrt(np.sum(u * u, axis=0)))[::-1]


def central_difference(f, x, u, h=1e-5):
    return (f(x + h * u) - f(x - h * u)) / (2.0 * h)


def mlp_forward_reference(layers, x):
    """Straight-line forward pass over (W, b, activation) triples."""
    a = np.asarray(x, dtype=float)
    for w, b, act in layers:
        z = w @ a + b
        a = np.maximum(z, 0.0) if act == "relu" else z
    return a
