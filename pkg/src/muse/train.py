"""Denoising score matching and checkpoint I/O.

The loss for a batch ``x`` at noise level ``sigma`` is

    mean_i || sigma z_i - H(x_i + sigma z_i) ||^2,   z_i ~ N(0, I)

i.e. the score network is trained to predict the noise that was added.
"""
from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .energy import BASELINE_VARIANTS, ENERGY_VARIANTS, EnergyModel, ScoreBaseline, score_pullback
from .errors import CorruptCheckpointError, TrainingDivergedError
from .gmm import GmmPrior, gmm_sample, toy_prior
from .tensor import load_signal

log = logging.getLogger(__name__)

VARIANT_CODES = {"E1": 0, "E2": 1, "E3": 2, "score-U": 3, "score-C": 4}
CODE_VARIANTS = {v: k for k, v in VARIANT_CODES.items()}
ACT_CODES = {"relu": 0, "none": 1}
CODE_ACTS = {v: k for k, v in ACT_CODES.items()}
MAGIC = b"MUSE"
FORMAT_VERSION = 1
FINAL_SN_ITERS = 2000


def init_model(variant: str, dim: int, sigma: float, rng, width: int = 128, depth: int = 4):
    """Fresh model with ``depth`` affine layers of ``width`` hidden units."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if variant in ("E2", "E3"):
        net = nn.init_mlp([dim] + [width] * depth, rng, scalar_head=True, final_activation="relu")
        return EnergyModel(variant, net, sigma)
    net = nn.init_mlp([dim] + [width] * (depth - 1) + [dim], rng)
    if variant == "E1":
        return EnergyModel(variant, net, sigma)
    if variant in BASELINE_VARIANTS:
        return ScoreBaseline(variant, net, sigma)
    raise ValueError(f"unknown variant {variant!r}")


def dsm_loss(model, batch, sigma: float, rng=None, z=None):
    """DSM loss and exact parameter gradients (flat list like ``net.arrays()``)."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    if z is None:
        z = rng.standard_normal(batch.shape)
    noise = sigma * z
    h, pullback = score_pullback(model, batch + noise)
    err = h - noise
    n = batch.shape[0]
    loss = float(np.sum(err * err) / n)
    grads = pullback(2.0 * err / n)
    return loss, grads


@dataclass
class TrainConfig:
    sigma: float
    batch_size: int = 128
    epochs: int = 30
    learning_rate: float = 1e-3
    seed: int = 0
    dataset: str = "gmm-toy"
    spectral_norm_every: int = 0
    variant: str = "E1"
    width: int = 128
    depth: int = 4
    n_samples: int = 10000
    lr_final_factor: float = 1.0
    data_path: str | None = None
    out_path: str | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.dataset not in ("gmm-toy", "gmm-file", "signal-file"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.spectral_norm_every < 0:
            raise ValueError("spectral_norm_every must be >= 0")


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    final_loss: float = float("nan")
    val_loss: float = float("nan")
    baseline_loss: float = float("nan")
    steps: int = 0
    wall_time: float = 0.0
    checkpoint_path: str | None = None
    diverged: bool = False

    def to_json(self) -> dict:
        return {
            "epoch_losses": self.epoch_losses,
            "final_loss": self.final_loss,
            "val_loss": self.val_loss,
            "baseline_loss": self.baseline_loss,
            "steps": self.steps,
            "wall_time": self.wall_time,
            "checkpoint_path": self.checkpoint_path,
            "diverged": self.diverged,
        }


def prior_dataset(prior: GmmPrior, seed: int, n: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 17])))
    return gmm_sample(prior, rng, n)


def load_dataset(config: TrainConfig) -> np.ndarray:
    """Training items as an (n, d) array."""
    if config.dataset == "gmm-toy":
        return prior_dataset(toy_prior(), config.seed, config.n_samples)
    if not config.data_path:
        raise ValueError(f"data_path is required for dataset={config.dataset}")
    if config.dataset == "gmm-file":
        return prior_dataset(GmmPrior.load(config.data_path), config.seed, config.n_samples)
    data, shape, channels = load_signal(config.data_path)
    return data.reshape(shape[0], -1)


def split_dataset(data, seed: int):
    """Deterministic 90/10 train/validation split."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 23])))
    perm = rng.permutation(len(data))
    n_train = max(1, int(round(0.9 * len(data))))
    return data[perm[:n_train]], data[perm[n_train:]]


def validation_loss(model, data, sigma: float, seed: int = 0) -> float:
    if len(data) == 0:
        return float("nan")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 29])))
    z = rng.standard_normal(data.shape)
    h, _ = score_pullback(model, data + sigma * z)
    return float(np.sum((h - sigma * z) ** 2) / len(data))


def train(model, config: TrainConfig, data=None):
    """Run DSM training; returns the trained model and a report.

    ``model`` is an initial EnergyModel/ScoreBaseline (or None to build one
    from the config). Deterministic given ``config.seed``.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_rng, noise_rng, sn_rng = (np.random.Generator(np.random.PCG64(s)) for s in seeds)
    if data is None:
        data = load_dataset(config)
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if model is None:
        model = init_model(config.variant, data.shape[1], config.sigma, init_rng,
                           config.width, config.depth)
    model = replace(model, sigma=config.sigma)
    train_set, val_set = split_dataset(data, config.seed)

    sn_vectors = {} if config.spectral_norm_every else None
    if sn_vectors is not None:
        model = replace(model, net=nn.spectral_normalize(model.net, 200, sn_rng, sn_vectors))

    state = nn.adam_init(model.net, lr=config.learning_rate)
    report = TrainReport(baseline_loss=config.sigma**2 * data.shape[1])
    start = time.perf_counter()
    n = len(train_set)
    for epoch in range(config.epochs):
        # geometric decay from learning_rate to learning_rate * lr_final_factor
        frac = epoch / max(1, config.epochs - 1)
        state.lr = config.learning_rate * config.lr_final_factor ** frac
        perm = noise_rng.permutation(n)
        losses = []
        for lo in range(0, n, config.batch_size):
            batch = train_set[perm[lo:lo + config.batch_size]]
            loss, grads = dsm_loss(model, batch, config.sigma, noise_rng)
            if not np.isfinite(loss):
                report.diverged = True
                report.wall_time = time.perf_counter() - start
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", report)
            try:
                state, net = nn.optimizer_step(state, model.net, grads)
            except TrainingDivergedError as exc:
                report.diverged = True
                exc.report = report
                raise
            report.steps += 1
            if sn_vectors is not None and report.steps % config.spectral_norm_every == 0:
                net = nn.spectral_normalize(net, 20, sn_rng, sn_vectors)
            model = replace(model, net=net)
            losses.append(loss)
        report.epoch_losses.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.6g", epoch, report.epoch_losses[-1])
    if sn_vectors is not None:
        model = replace(model, net=nn.spectral_normalize(model.net, FINAL_SN_ITERS, sn_rng, sn_vectors))
    report.final_loss = report.epoch_losses[-1]
    report.val_loss = validation_loss(model, val_set, config.sigma, config.seed)
    report.wall_time = time.perf_counter() - start
    if config.out_path:
        save_checkpoint(model, config.out_path)
        report.checkpoint_path = str(config.out_path)
    return model, report


def train_multiscale(configs, data=None, out_dir=None):
    """Train one independent model per scale, coarse to fine.

    Returns a manifest: list of ``{"sigma", "checkpoint_path"}`` (paths are
    None unless ``out_dir`` or per-config ``out_path`` is given) alongside
    the models and reports.
    """
    configs = list(configs)
    if not configs:
        raise ValueError("need at least one config")
    sigmas = [c.sigma for c in configs]
    if len(set(sigmas)) != len(sigmas):
        raise ValueError(f"duplicate sigma values in {sigmas}")
    if any(a <= b for a, b in zip(sigmas, sigmas[1:])):
        raise ValueError(f"sigma values must be sorted in descending order, got {sigmas}")
    manifest, models, reports = [], [], []
    for c in configs:
        if out_dir is not None and not c.out_path:
            c = replace(c, out_path=str(Path(out_dir) / f"model_sigma{c.sigma:g}.muse"))
        model, report = train(None, c, data)
        manifest.append({"sigma": c.sigma, "checkpoint_path": c.out_path})
        models.append(model)
        reports.append(report)
    if out_dir is not None:
        write_manifest(manifest, Path(out_dir) / "manifest.json")
    return manifest, models, reports


def write_manifest(manifest, path) -> None:
    """Checkpoint paths inside the manifest's directory are stored relative to it."""
    base = Path(path).resolve().parent
    entries = []
    for e in manifest:
        p = e["checkpoint_path"]
        if p and not str(p).startswith("oracle:"):
            full = Path(p).resolve()
            if full.parent == base or base in full.parents:
                p = str(full.relative_to(base))
        entries.append({"sigma": e["sigma"], "checkpoint_path": p})
    Path(path).write_text(json.dumps(entries, indent=1))


def read_manifest(path) -> list:
    entries = json.loads(Path(path).read_text())
    base = Path(path).parent
    out = []
    for e in entries:
        p = e["checkpoint_path"]
        if p and str(p).startswith("oracle:"):
            rest = p[len("oracle:"):]
            if not Path(rest).is_absolute():
                p = "oracle:" + str(base / rest)
        elif p and not Path(p).is_absolute():
            p = str(base / p)
        out.append({"sigma": float(e["sigma"]), "checkpoint_path": p})
    return out


def _pack_layer(layer) -> bytes:
    rows, cols = layer.weight.shape
    return (
        struct.pack("<IIB", rows, cols, ACT_CODES[layer.activation])
        + layer.weight.astype("<f8").tobytes()
        + layer.bias.astype("<f8").tobytes()
    )


def save_checkpoint(model, path) -> None:
    """Little-endian binary checkpoint (see README for the layout)."""
    net = model.net
    out = [MAGIC, struct.pack("<IBdI", FORMAT_VERSION, VARIANT_CODES[model.variant],
                              float(model.sigma), len(net.layers))]
    out += [_pack_layer(layer) for layer in net.layers]
    out.append(struct.pack("<B", 1 if net.head is not None else 0))
    if net.head is not None:
        out.append(_pack_layer(net.head))
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise CorruptCheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def floats(self, count):
        size = 8 * count
        if self.pos + size > len(self.buf):
            raise CorruptCheckpointError("truncated checkpoint")
        arr = np.frombuffer(self.buf, dtype="<f8", count=count, offset=self.pos).astype(np.float64)
        self.pos += size
        return arr

    def layer(self):
        rows, cols, act = self.take("<IIB")
        if act not in CODE_ACTS:
            raise CorruptCheckpointError(f"unknown activation code {act}")
        w = self.floats(rows * cols).reshape(rows, cols)
        return nn.Layer(w, self.floats(rows), CODE_ACTS[act])


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CorruptCheckpointError("bad magic bytes")
    r = _Reader(buf)
    r.pos = 4
    version, code, sigma, n_layers = r.take("<IBdI")
    if version != FORMAT_VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}")
    if code not in CODE_VARIANTS:
        raise CorruptCheckpointError(f"unknown variant code {code}")
    layers = [r.layer() for _ in range(n_layers)]
    (flag,) = r.take("<B")
    head = r.layer() if flag else None
    if r.pos != len(buf):
        raise CorruptCheckpointError("trailing bytes after checkpoint")
    try:
        net = nn.MlpParams(layers, head)
        variant = CODE_VARIANTS[code]
        cls = EnergyModel if variant in ENERGY_VARIANTS else ScoreBaseline
        return cls(variant, net, sigma)
    except ValueError as exc:
        raise CorruptCheckpointError(str(exc)) from exc
