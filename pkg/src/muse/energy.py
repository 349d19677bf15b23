"""Energy networks, their conservative scores, and plain score baselines.

Three energies are supported::

    E1(x) = 1/2 ||x - psi(x)||^2      psi: R^d -> R^d
    E2(x) = phi(x)                     phi: R^d -> R
    E3(x) = 1/2 ||x||^2 - phi(x)

The score ``H = grad E`` is obtained with one forward and one backward pass
through the same weights (the "mirror" half of the network). Baselines
``score-U`` (unconstrained) and ``score-C`` (spectrally normalised) predict
the score directly and carry no energy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import MlpParams

ENERGY_VARIANTS = ("E1", "E2", "E3")
BASELINE_VARIANTS = ("score-U", "score-C")
CONTRACTION_SLACK = 1e-3


@dataclass
class EnergyModel:
    variant: str
    net: MlpParams
    sigma: float

    def __post_init__(self):
        if self.variant not in ENERGY_VARIANTS:
            raise ValueError(f"unknown energy variant {self.variant!r}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.variant == "E1":
            if self.net.head is not None or self.net.out_dim != self.net.in_dim:
                raise ValueError("E1 needs a residual network R^d -> R^d without scalar head")
        elif self.net.head is None:
            raise ValueError(f"{self.variant} needs a network with a scalar head")

    @property
    def dim(self) -> int:
        return self.net.in_dim

    def energy(self, x):
        return energy_eval(self, x)

    def score(self, x):
        return score_eval(self, x)


@dataclass
class ScoreBaseline:
    variant: str
    net: MlpParams
    sigma: float

    def __post_init__(self):
        if self.variant not in BASELINE_VARIANTS:
            raise ValueError(f"unknown score variant {self.variant!r}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.net.head is not None or self.net.out_dim != self.net.in_dim:
            raise ValueError("score baselines map R^d -> R^d")

    @property
    def dim(self) -> int:
        return self.net.in_dim

    def score(self, x):
        return score_eval_baseline(self, x)


def energy_eval(model: EnergyModel, x):
    """Energy at ``x`` (d,) -> float, or (batch, d) -> (batch,)."""
    x = np.asarray(x, dtype=np.float64)
    y, _ = nn.forward(model.net, x)
    if model.variant == "E1":
        e = 0.5 * np.sum((x - y) ** 2, axis=-1)
    elif model.variant == "E2":
        e = y[..., 0]
    else:
        e = 0.5 * np.sum(x * x, axis=-1) - y[..., 0]
    return float(e) if x.ndim == 1 else e


def score_pullback(model, x):
    """Score at ``x`` together with a pullback for parameter gradients.

    Returns ``(H, pullback)``; ``pullback(H_bar)`` gives the gradient of
    ``sum(H * H_bar)`` with respect to the network parameters as a flat
    list of arrays ordered like ``net.arrays()``.
    """
    net = model.net
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y, cache = nn.forward(net, x2)
    variant = model.variant

    if variant in BASELINE_VARIANTS:
        def pullback(h_bar):
            return nn.param_grads(net, cache, np.atleast_2d(h_bar))
        h = y
    elif variant == "E1":
        r = x2 - y
        u, deltas = nn.backward(net, cache, r)
        h = r - u

        def pullback(h_bar):
            h_bar = np.atleast_2d(h_bar)
            v_bar, wgrads = nn.backward_adjoint(net, cache, deltas, -h_bar)
            grads = nn.param_grads(net, cache, -(h_bar + v_bar))
            for i, gw in enumerate(wgrads):
                grads[2 * i] = grads[2 * i] + gw
            return grads
    else:
        ones = np.ones((x2.shape[0], 1))
        u, deltas = nn.backward(net, cache, ones)
        sign = 1.0 if variant == "E2" else -1.0
        h = sign * u if variant == "E2" else x2 - u

        def pullback(h_bar):
            h_bar = np.atleast_2d(h_bar)
            _, wgrads = nn.backward_adjoint(net, cache, deltas, sign * h_bar)
            grads = [np.zeros_like(a) for a in net.arrays()]
            for i, gw in enumerate(wgrads):
                grads[2 * i] = gw
            return grads

    if np.asarray(x).ndim == 1:
        h = h[0]
    return h, pullback


def score_eval(model: EnergyModel, x):
    """Exact gradient of ``energy_eval`` via forward + backward pass."""
    if not isinstance(model, EnergyModel):
        raise TypeError("score_eval expects an EnergyModel")
    h, _ = score_pullback(model, x)
    return h


def score_eval_baseline(model: ScoreBaseline, x):
    y, _ = nn.forward(model.net, x)
    return y


def _path_points(path):
    pts = [np.asarray(p, dtype=np.float64) for p in path]
    if len(pts) < 2:
        raise ValueError("path needs at least two vertices")
    return pts


def line_integral(field, path, steps: int) -> float:
    """Composite-midpoint approximation of the integral of ``field . dl``.

    ``field`` is anything with a batched ``score`` method; ``path`` is a
    polyline given as a sequence of vertices. ``steps`` quadrature nodes are
    shared across segments in proportion to segment length.
    """
    if path is None or len(path) == 0:
        raise ValueError("empty path")
    pts = _path_points(path)
    if steps < 1:
        raise ValueError("steps must be positive")
    lengths = np.array([np.linalg.norm(b - a) for a, b in zip(pts, pts[1:])])
    total_len = lengths.sum()
    if total_len == 0:
        return 0.0
    counts = np.maximum(1, np.round(steps * lengths / total_len).astype(int))
    total = 0.0
    for a, b, n in zip(pts, pts[1:], counts):
        t = (np.arange(n) + 0.5) / n
        nodes = a[None, :] + t[:, None] * (b - a)[None, :]
        h = field.score(nodes)
        total += float(np.sum(h @ (b - a)) / n)
    return total


def loop_length(path) -> float:
    pts = _path_points(path)
    return float(sum(np.linalg.norm(b - a) for a, b in zip(pts, pts[1:])))


def line_integral_energy(model, a, x, path=None, steps: int = 1000) -> float:
    """Energy difference ``E(x) - E(a)`` recovered from the score alone.

    For a conservative model this equals ``energy_eval(x) - energy_eval(a)``
    up to an O(steps^-2) quadrature error on smooth pieces.
    """
    a = np.asarray(a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if path is None:
        path = [a, x]
    if len(path) == 0:
        raise ValueError("empty path")
    if steps < 10:
        raise ValueError("steps must be >= 10")
    pts = _path_points(path)
    if not (np.allclose(pts[0], a) and np.allclose(pts[-1], x)):
        raise ValueError("path endpoints must be a and x")
    return line_integral(model, pts, steps)


def layer_product(net: MlpParams) -> float:
    """Product of exact per-layer spectral norms."""
    return float(np.prod([np.linalg.norm(l.weight, 2) for l in net.all_layers()]))


def lipschitz_estimate(model, method: str = "pairwise-empirical", rng=None,
                       samples: int = 512, data=None, scale=None) -> float:
    """Estimate the Lipschitz constant of a model's score.

    ``pairwise-empirical`` returns the largest ratio
    ``||H(x) - H(y)|| / ||x - y||`` over sampled pairs (a lower bound).
    Points are drawn from ``data`` plus ``sigma`` noise when given, otherwise
    from a standard normal; partners are ``sigma``-scale perturbations.

    ``layer-product`` returns an upper bound built from per-layer spectral
    norms ``B``: ``B`` for baselines, ``(1 + B)^2`` for E1, ``B^2`` for E2,
    ``1 + B^2`` for E3.
    """
    if method == "layer-product":
        b = layer_product(model.net)
        return {
            "E1": (1.0 + b) ** 2,
            "E2": b * b,
            "E3": 1.0 + b * b,
        }.get(model.variant, b)
    if method != "pairwise-empirical":
        raise ValueError(f"unknown method {method!r}")
    if samples < 2:
        raise ValueError("pairwise-empirical needs samples >= 2")
    if rng is None:
        raise ValueError("pairwise-empirical needs an rng")
    sigma = float(model.sigma if scale is None else scale)
    d = model.dim
    if data is not None:
        data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        idx = rng.integers(0, data.shape[0], samples)
        x = data[idx] + sigma * rng.standard_normal((samples, d))
    else:
        x = rng.standard_normal((samples, d))
    y = x + sigma * rng.standard_normal((samples, d))
    num = np.linalg.norm(model.score(x) - model.score(y), axis=1)
    den = np.linalg.norm(x - y, axis=1)
    return float(np.max(num / den))
