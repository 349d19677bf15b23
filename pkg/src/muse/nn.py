"""Small fully-connected networks with hand-written reverse mode.

Besides the usual forward pass and vector-Jacobian product, the module
exposes the adjoint of the backward pass itself (``backward_adjoint``).
Energy scores are computed as ``J^T v``; training them by denoising score
matching needs parameter gradients *through* that backward pass. ReLU masks
are frozen in both directions, since their derivative is zero almost
everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidStateError, TrainingDivergedError
from .tensor import spectral_norm_estimate

ACTIVATIONS = ("relu", "none")


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"bad layer shapes: weight {self.weight.shape}, bias {self.bias.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def shape(self):
        return self.weight.shape


@dataclass
class MlpParams:
    """Ordered affine layers plus an optional scalar head (output dim 1)."""

    layers: list
    head: Layer | None = None

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        chain = self.all_layers()
        for a, b in zip(chain, chain[1:]):
            if a.weight.shape[0] != b.weight.shape[1]:
                raise ValueError(
                    f"layer dims do not chain: {a.weight.shape} -> {b.weight.shape}"
                )
        if self.head is not None and self.head.weight.shape[0] != 1:
            raise ValueError("scalar head must have output dimension 1")

    def all_layers(self) -> list:
        return list(self.layers) + ([self.head] if self.head is not None else [])

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.all_layers()[-1].weight.shape[0]

    def arrays(self) -> list:
        out = []
        for layer in self.all_layers():
            out += [layer.weight, layer.bias]
        return out

    def with_arrays(self, arrays) -> "MlpParams":
        arrays = list(arrays)
        if len(arrays) != 2 * len(self.all_layers()):
            raise ValueError("array count does not match parameter layout")
        new = [
            Layer(arrays[2 * i].copy(), arrays[2 * i + 1].copy(), layer.activation)
            for i, layer in enumerate(self.all_layers())
        ]
        if self.head is not None:
            return MlpParams(new[:-1], new[-1])
        return MlpParams(new)

    def copy(self) -> "MlpParams":
        return self.with_arrays(self.arrays())

    def zeros_like(self) -> "MlpParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])


def init_mlp(
    sizes,
    rng: np.random.Generator,
    scalar_head: bool = False,
    final_activation: str = "none",
) -> MlpParams:
    """He-initialised network ``sizes[0] -> ... -> sizes[-1]``.

    Hidden layers use ReLU; the last listed layer uses ``final_activation``.
    With ``scalar_head`` a linear map ``sizes[-1] -> 1`` is appended.
    """
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        act = final_activation if i == len(sizes) - 2 else "relu"
        w = rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)
        layers.append(Layer(w, np.zeros(n_out), act))
    head = None
    if scalar_head:
        n_in = sizes[-1]
        head = Layer(rng.standard_normal((1, n_in)) * np.sqrt(2.0 / n_in), np.zeros(1), "none")
    return MlpParams(layers, head)


@dataclass
class ForwardCache:
    params: MlpParams
    inputs: list = field(default_factory=list)  # a_{l-1} per layer, (B, in)
    masks: list = field(default_factory=list)  # activation derivative per layer
    squeeze: bool = False


def _as_batch(x, dim):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    x2 = x[None, :] if squeeze else x
    if x2.ndim != 2 or x2.shape[1] != dim:
        raise ValueError(f"input has shape {x.shape}, network expects dim {dim}")
    return x2, squeeze


def forward(params: MlpParams, x):
    """Evaluate the network on ``x`` of shape (d,) or (batch, d)."""
    a, squeeze = _as_batch(x, params.in_dim)
    cache = ForwardCache(params, squeeze=squeeze)
    for layer in params.all_layers():
        cache.inputs.append(a)
        z = a @ layer.weight.T + layer.bias
        if layer.activation == "relu":
            # left derivative at the kink: mask is 0 for z == 0
            mask = (z > 0).astype(np.float64)
            a = z * mask
        else:
            mask = None
            a = z
        cache.masks.append(mask)
    return (a[0] if squeeze else a), cache


def _check_cache(params, cache):
    if not isinstance(cache, ForwardCache) or cache.params is not params:
        raise InvalidStateError("forward cache was produced by different parameters")
    if len(cache.inputs) != len(params.all_layers()):
        raise InvalidStateError("forward cache layer count does not match parameters")


def backward(params: MlpParams, cache: ForwardCache, v):
    """Input cotangent ``J^T v`` plus the per-layer deltas it went through."""
    _check_cache(params, cache)
    layers = params.all_layers()
    g, _ = _as_batch(v, params.out_dim)
    if g.shape[0] != cache.inputs[0].shape[0]:
        raise ValueError("cotangent batch size does not match the forward pass")
    deltas = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        mask = cache.masks[i]
        d = g if mask is None else g * mask
        deltas[i] = d
        g = d @ layers[i].weight
    return g, deltas


def vjp(params: MlpParams, cache: ForwardCache, v):
    """Pull ``v`` back through the network.

    Returns ``(grad_x, grads)`` where ``grad_x = J^T v`` and ``grads`` holds
    the parameter gradients of ``<forward(x), v>`` summed over the batch.
    """
    grad_x, deltas = backward(params, cache, v)
    arrays = []
    for a_in, d in zip(cache.inputs, deltas):
        arrays += [d.T @ a_in, d.sum(axis=0)]
    grads = params.with_arrays(arrays)
    return (grad_x[0] if cache.squeeze else grad_x), grads


def backward_adjoint(params: MlpParams, cache: ForwardCache, deltas, u_bar):
    """Adjoint of ``backward`` with respect to ``v`` and the weights.

    Given the cotangent ``u_bar`` of the output ``u = J^T v`` of ``backward``,
    returns ``(v_bar, weight_grads)``: ``v_bar = J u_bar`` (a masked tangent
    pass without biases) and the gradient of ``<u, u_bar>`` with respect to
    each weight matrix through the backward pass. Bias gradients are zero
    here because biases only enter the backward pass through frozen masks.
    """
    _check_cache(params, cache)
    t, _ = _as_batch(u_bar, params.in_dim)
    weight_grads = []
    for layer, mask, d in zip(params.all_layers(), cache.masks, deltas):
        weight_grads.append(d.T @ t)
        t = t @ layer.weight.T
        if mask is not None:
            t = t * mask
    return t, weight_grads


def param_grads(params: MlpParams, cache: ForwardCache, y_bar):
    """Parameter gradients of ``<forward(x), y_bar>`` as a flat array list."""
    _, deltas = backward(params, cache, y_bar)
    arrays = []
    for a_in, d in zip(cache.inputs, deltas):
        arrays += [d.T @ a_in, d.sum(axis=0)]
    return arrays


def layer_spectral_norms(params: MlpParams, iters: int, rng, vectors=None) -> list:
    norms = []
    for i, layer in enumerate(params.all_layers()):
        w = layer.weight
        start = None if vectors is None else vectors.get(i)
        norms.append(
            spectral_norm_estimate(lambda v, w=w: w @ v, lambda u, w=w: w.T @ u,
                                   w.shape[1], iters, rng, start=start)
        )
    return norms


def _top_right_vector(w, iters, rng, start=None, tol=1e-12):
    v = rng.standard_normal(w.shape[1]) if start is None else start.copy()
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        u = w @ v
        new = float(np.linalg.norm(u))
        wv = w.T @ u
        n = np.linalg.norm(wv)
        if n == 0.0:
            return v, 0.0
        v = wv / n
        if abs(new - sigma) <= tol * new:
            sigma = new
            break
        sigma = new
    return v, float(np.linalg.norm(w @ v))


def spectral_normalize(params: MlpParams, iters: int, rng, vectors: dict | None = None) -> MlpParams:
    """Divide every weight matrix by its power-iteration top singular value.

    All-zero matrices are left unchanged. ``vectors`` optionally carries
    per-layer right singular vectors between calls (warm start); it is
    updated in place.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    arrays = []
    for i, layer in enumerate(params.all_layers()):
        w = layer.weight
        start = None if vectors is None else vectors.get(i)
        v, sigma = _top_right_vector(w, iters, rng, start)
        if vectors is not None:
            vectors[i] = v
        arrays += [w / sigma if sigma > 0 else w.copy(), layer.bias.copy()]
    return params.with_arrays(arrays)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = None
    v: list = None


def adam_init(params: MlpParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    zeros = [np.zeros_like(a) for a in params.arrays()]
    return AdamState(lr, beta1, beta2, eps, 0, zeros, [z.copy() for z in zeros])


def optimizer_step(state: AdamState, params: MlpParams, grads):
    """One bias-corrected Adam update. ``grads`` is MlpParams-shaped or a list."""
    g_arrays = grads.arrays() if isinstance(grads, MlpParams) else list(grads)
    p_arrays = params.arrays()
    if len(g_arrays) != len(p_arrays) or any(
        g.shape != p.shape for g, p in zip(g_arrays, p_arrays)
    ):
        raise ValueError("gradient shapes do not match parameters")
    if not all(np.all(np.isfinite(g)) for g in g_arrays):
        raise TrainingDivergedError("non-finite gradient")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = [b1 * m0 + (1 - b1) * g for m0, g in zip(state.m, g_arrays)]
    v = [b2 * v0 + (1 - b2) * g * g for v0, g in zip(state.v, g_arrays)]
    c1, c2 = 1 - b1**t, 1 - b2**t
    new = [
        p - state.lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps)
        for p, mi, vi in zip(p_arrays, m, v)
    ]
    new_state = AdamState(state.lr, b1, b2, state.eps, t, m, v)
    return new_state, params.with_arrays(new)
