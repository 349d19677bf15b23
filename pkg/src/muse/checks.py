"""Property checks behind the acceptance tests and the golden suite.

Each ``check_*`` function runs one experiment and returns a flat dict of
metrics; thresholds are applied by the caller.
"""
from __future__ import annotations

import tempfile
import time
from pathlib import Path

import numpy as np

from . import nn
from .energy import EnergyModel, energy_eval, lipschitz_estimate, line_integral, loop_length, score_eval
from .experiments import ModelCache, denoise_batch, denoise_stationary, noisy_items, patch_operator, patch_prior, psnr_stats
from .gmm import GmmEnergy, score_agreement, toy_prior
from .operators import MaskSpec, generate_vd_mask, make_dense, make_dense_gaussian, make_identity, make_masked_dft, simulate_measurements
from .solvers import MapProblem, SolveConfig, conjugate_gradient, f_map_eval, muse_solve, solve, surrogate_eval
from .toy import multimodal_mri_instance, oracle_schedule
from .train import dsm_loss, init_model, load_checkpoint, prior_dataset, save_checkpoint

LOOP_STEPS = 20000
LOOP_REL_BUDGET = 1e-3


# descent -------------------------------------------------------------------

def descent_instances(cache: ModelCache):
    """(name, MapProblem, L, x0) tuples covering oracle/trained priors and
    identity/dense/masked-DFT operators; L is an upper bound in every case."""
    out = []
    rng = np.random.default_rng(0)

    o = GmmEnergy(toy_prior(), 0.1)
    op = make_identity(2)
    b = simulate_measurements(op, np.array([0.9, 1.1]), 0.1, rng)
    out.append(("oracle-toy-identity", MapProblem(op, b, 0.01, o, 0.01), o.curvature_bound(), b + 0.3))

    inst = multimodal_mri_instance(0)
    o = GmmEnergy(inst.prior, 0.05)
    out.append(("oracle-multimodal-mdft", MapProblem(inst.op, inst.b, inst.eta**2, o, 0.05**2),
                o.curvature_bound(), inst.op.adjoint(inst.b)))

    e1_toy = cache.get("E1", 0.1)
    L_toy = lipschitz_estimate(e1_toy, "layer-product")
    b = simulate_measurements(op, np.array([-1.0, 1.05]), 0.05, rng)
    out.append(("e1-toy-identity", MapProblem(op, b, 0.05**2, e1_toy, 0.01), L_toy, np.zeros(2)))

    dense = make_dense_gaussian(1, 2, np.random.default_rng(4))
    b = simulate_measurements(dense, np.array([1.0, -1.0]), 0.05, rng)
    out.append(("e1-toy-dense", MapProblem(dense, b, 0.05**2, e1_toy, 0.01), L_toy, dense.adjoint(b)))

    e1_patch = cache.get("E1", 0.07, data="patch")
    L_patch = lipschitz_estimate(e1_patch, "layer-product")
    mdft = patch_operator()
    x_true = prior_dataset(patch_prior(), 11, 1)[0]
    for eta in (0.01, 0.05):
        b = simulate_measurements(mdft, x_true, eta, np.random.default_rng(1))
        out.append((f"e1-patch-mdft-eta{eta:g}", MapProblem(mdft, b, eta**2, e1_patch, 0.07**2),
                    L_patch, mdft.adjoint(b)))
    return out


def check_descent(cache: ModelCache, epsilon: float = 1e-5, max_iter: int = 5000) -> dict:
    """Worst monotonicity and surrogate-sandwich violations over all instances.

    Objective and surrogate values are recomputed from the stored iterates,
    not taken from the solver's own bookkeeping.
    """
    t0 = time.perf_counter()
    gd_rel = mm_rel = upper = touch = lower = -np.inf
    backtracks = 0
    instances = descent_instances(cache)
    for name, p, L, x0 in instances:
        for alg in ("gd", "mm"):
            cfg = SolveConfig(algorithm=alg, L=L, epsilon=epsilon, max_iter=max_iter, keep_iterates=True)
            tr = solve(p, cfg, x0)
            backtracks += tr.backtracks
            f = np.array([f_map_eval(p, x)[0] for x in tr.iterates])
            rel = np.max((f[1:] - f[:-1]) / np.abs(f[:-1])) if len(f) > 1 else -np.inf
            if alg == "gd":
                gd_rel = max(gd_rel, rel)
                continue
            mm_rel = max(mm_rel, rel)
            for n in range(len(tr.iterates) - 1):
                xn, xn1 = tr.iterates[n], tr.iterates[n + 1]
                Ln = tr.records[n + 1]["L"]
                g_next = surrogate_eval(p, Ln, xn1, xn)
                g_here = surrogate_eval(p, Ln, xn, xn)
                lower = max(lower, f[n + 1] - g_next)
                upper = max(upper, g_next - g_here)
                touch = max(touch, abs(g_here - f[n]))
    return {
        "instances": len(instances),
        "gd_max_rel_increase": float(gd_rel),
        "mm_max_rel_increase": float(mm_rel),
        "mm_max_f_minus_surrogate": float(lower),
        "mm_max_surrogate_increase": float(upper),
        "mm_max_touch_error": float(touch),
        "backtracks": backtracks,
        "seconds": time.perf_counter() - t0,
    }


def check_quadratic() -> dict:
    net = nn.init_mlp([2, 4, 2], np.random.default_rng(0)).zeros_like()
    prior = EnergyModel("E1", net, 1.0)
    p = MapProblem(make_identity(2), np.array([2.0, 0.0]), 1.0, prior, 1.0)
    out = {}
    for alg in ("gd", "mm"):
        tr = solve(p, SolveConfig(algorithm=alg, L=1.0, epsilon=1e-12, max_iter=1000), np.zeros(2))
        out[f"{alg}_error"] = float(np.linalg.norm(tr.x - np.array([1.0, 0.0])))
        out[f"{alg}_iterations"] = tr.iterations
    return out


def check_regime(cache: ModelCache, sigma: float = 0.07, etas=(0.01, 0.05), epsilon: float = 1e-5) -> dict:
    """Iterations to the relative-decrease stop for GD and MM on the
    masked-DFT patch problem with a trained E1 and its layer-product L."""
    model = cache.get("E1", sigma, data="patch")
    L = lipschitz_estimate(model, "layer-product")
    op = patch_operator()
    x_true = prior_dataset(patch_prior(), 11, 1)[0]
    out = {"L": L}
    for eta in etas:
        b = simulate_measurements(op, x_true, eta, np.random.default_rng(1))
        p = MapProblem(op, b, eta**2, model, sigma**2)
        for alg in ("gd", "mm"):
            tr = solve(p, SolveConfig(algorithm=alg, L=L, epsilon=epsilon, max_iter=100000), op.adjoint(b))
            out[f"{alg}_iters_eta{eta:g}"] = tr.iterations
            out[f"{alg}_reason_eta{eta:g}"] = tr.reason
        g, m = out[f"gd_iters_eta{eta:g}"], out[f"mm_iters_eta{eta:g}"]
        out[f"mm_minus_gd_eta{eta:g}"] = m - g
        out[f"iter_ratio_eta{eta:g}"] = max(g, m) / max(1, min(g, m))
    return out


# fields ----------------------------------------------------------------------

def _square(center, side):
    c = np.asarray(center, dtype=float)
    h = side / 2.0
    return [c + [-h, -h], c + [h, -h], c + [h, h], c + [-h, h], c + [-h, -h]]


TEST_LOOPS = [
    _square((1, 1), 0.6),
    _square((-1, 1), 0.6),
    _square((0, 0), 2.0),
    _square((0, 0), 1.0),
    [np.array(p, dtype=float) for p in [(-1.5, -1.0), (1.2, -0.8), (0.3, 1.4), (-1.5, -1.0)]],
]


def _mean_field_norm(model, path, steps):
    pts = []
    lengths = np.array([np.linalg.norm(b - a) for a, b in zip(path, path[1:])])
    for a, b, n in zip(path, path[1:], np.maximum(1, np.round(steps * lengths / lengths.sum()).astype(int))):
        t = (np.arange(n) + 0.5) / n
        pts.append(a + t[:, None] * (b - a))
    return float(np.mean(np.linalg.norm(model.score(np.concatenate(pts)), axis=1)))


def loop_ratio(model, path, steps: int = LOOP_STEPS) -> float:
    """|closed-loop integral| divided by the budget 1e-3 * length * mean |H|."""
    integral = line_integral(model, path, steps)
    budget = LOOP_REL_BUDGET * loop_length(path) * _mean_field_norm(model, path, steps)
    return abs(integral) / budget


def two_path_ratio(model, a, x, via, steps: int = LOOP_STEPS) -> dict:
    straight = [a, x]
    bent = [a, via, x]
    i1 = line_integral(model, straight, steps)
    i2 = line_integral(model, bent, steps)
    budget = LOOP_REL_BUDGET * (loop_length(straight) * _mean_field_norm(model, straight, steps)
                                + loop_length(bent) * _mean_field_norm(model, bent, steps))
    exact = energy_eval(model, x) - energy_eval(model, a)
    return {"paths": abs(i1 - i2) / budget, "vs_energy": max(abs(i1 - exact), abs(i2 - exact)) / budget}


def check_conservative(cache: ModelCache, sigma: float = 0.2) -> dict:
    out = {}
    a, x, via = np.array([-1.2, -0.9]), np.array([1.1, 0.8]), np.array([1.3, -1.4])
    for variant in ("E1", "E2", "E3", "score-U"):
        model = cache.get(variant, sigma)
        ratios = [loop_ratio(model, loop) for loop in TEST_LOOPS]
        out[f"{variant}_max_loop_ratio"] = float(max(ratios))
        if variant != "score-U":
            tp = two_path_ratio(model, a, x, via)
            out[f"{variant}_two_path_ratio"] = tp["paths"]
            out[f"{variant}_energy_diff_ratio"] = tp["vs_energy"]
    return out


def _preactivations(net, x):
    zs = []
    h = x
    for layer in net.all_layers():
        z = h @ layer.weight.T + layer.bias
        zs.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return zs


def _fd_score(model, x, h):
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (energy_eval(model, x + e) - energy_eval(model, x - e)) / (2 * h)
    return g


def check_gradients(points: int = 100, dim: int = 4, width: int = 16, h: float = 1e-6, seed: int = 0) -> dict:
    """Worst relative error of score vs central differences of the energy,
    and of DSM parameter gradients vs central differences of the loss.

    Points closer than 1e3 * h to a ReLU kink (in pre-activation) are
    redrawn so that the difference stencil stays on one linear piece.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for variant in ("E1", "E2", "E3"):
        model = init_model(variant, dim, 0.5, rng, width=width, depth=3)
        worst, used = 0.0, 0
        while used < points:
            x = rng.standard_normal(dim)
            scale = np.linalg.norm(x) + 1.0
            zs = _preactivations(model.net, x[None])
            if min(np.min(np.abs(z)) for z in zs[:-1]) < 1e4 * h * scale:
                continue
            fd = _fd_score(model, x, h)
            worst = max(worst, np.linalg.norm(score_eval(model, x) - fd) / max(np.linalg.norm(fd), 1e-300))
            used += 1
        out[f"{variant}_score_rel_err"] = float(worst)

    for variant in ("E1", "E2", "E3", "score-U"):
        model = init_model(variant, 3, 0.5, rng, width=8, depth=3)
        batch = rng.standard_normal((6, 3))
        z = rng.standard_normal(batch.shape)
        _, grads = dsm_loss(model, batch, 0.5, z=z)
        arrays = model.net.arrays()
        analytic, numeric = [], []
        for k, arr in enumerate(arrays):
            for idx in zip(*(rng.integers(0, s, 4) for s in arr.shape)):
                vals = []
                for sign in (1.0, -1.0):
                    pert = [a.copy() for a in arrays]
                    pert[k][idx] += sign * 1e-6
                    m = type(model)(model.variant, model.net.with_arrays(pert), model.sigma)
                    vals.append(dsm_loss(m, batch, 0.5, z=z)[0])
                numeric.append((vals[0] - vals[1]) / 2e-6)
                analytic.append(grads[k][idx])
        analytic, numeric = np.array(analytic), np.array(numeric)
        out[f"{variant}_dsm_rel_err"] = float(np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric))
    return out


def check_field(cache: ModelCache, sigmas=(0.5, 0.2, 0.1)) -> dict:
    prior = toy_prior()
    out = {f"E1_cos_sigma{s:g}": score_agreement(cache.get("E1", s), prior, s) for s in sigmas}
    out["scoreC_cos_sigma0.1"] = score_agreement(cache.get("score-C", 0.1), prior, 0.1)
    out["E1_minus_scoreC_sigma0.1"] = out["E1_cos_sigma0.1"] - out["scoreC_cos_sigma0.1"]
    return out


# reconstruction ---------------------------------------------------------------

def check_muse(seed: int = 0) -> dict:
    """Multiscale oracle solve vs single-scale GD from three initialisations."""
    inst = multimodal_mri_instance(seed)
    schedule = oracle_schedule(inst.prior, eta=inst.eta)
    rng = np.random.default_rng(100 + seed)
    inits = {
        "ahb": inst.op.adjoint(inst.b),
        "random": rng.standard_normal(inst.op.in_dim),
        "truth": inst.x_true.copy(),
    }
    final = schedule.stages[-1]
    p = MapProblem(inst.op, inst.b, final.eta**2, final.model, final.sigma**2)
    L = [s.model.curvature_bound() for s in schedule.stages]
    muse_f, muse_x, single_f = [], [], []
    for x0 in inits.values():
        cfgs = [SolveConfig(algorithm="auto", L=l, max_iter=20000) for l in L]
        x, _ = muse_solve(schedule, inst.op, inst.b, cfgs, x0)
        muse_x.append(x)
        muse_f.append(f_map_eval(p, x)[0])
        tr = solve(p, SolveConfig(algorithm="gd", L=L[-1], epsilon=1e-5, max_iter=20000), x0)
        single_f.append(f_map_eval(p, tr.x)[0])
    norm = np.linalg.norm(inst.x_true)
    dist = max(np.linalg.norm(a - b) for a in muse_x for b in muse_x) / norm
    return {
        "muse_f_rel_spread": float(np.ptp(muse_f) / np.min(np.abs(muse_f))),
        "muse_max_rel_distance": float(dist),
        "muse_f_spread": float(np.ptp(muse_f)),
        "single_gd_f_spread": float(np.ptp(single_f)),
        "muse_error_vs_truth": float(np.linalg.norm(muse_x[0] - inst.x_true) / norm),
    }


def check_denoise(cache: ModelCache, sigma: float = 0.05, items: int = 300) -> dict:
    """Mean PSNR of E1 (MAP solve) and score-C (stationary point) on
    held-out noisy patches."""
    clean = prior_dataset(patch_prior(), 1000, items)
    noisy = noisy_items(clean, sigma, 0)
    e1 = cache.get("E1", sigma, data="patch")
    sc = cache.get("score-C", sigma, data="patch")
    train_data = cache.dataset("patch")
    out = {"noisy_psnr": psnr_stats(noisy, clean)[0]}
    out["E1_psnr"] = psnr_stats(denoise_batch(e1, noisy, sigma, data=train_data), clean)[0]
    out["scoreC_psnr"] = psnr_stats(denoise_stationary(sc.score, noisy), clean)[0]
    out["E1_minus_scoreC_db"] = out["E1_psnr"] - out["scoreC_psnr"]
    return out


# infrastructure -------------------------------------------------------------

def _matrix_of(op):
    return np.column_stack([op.apply(e) for e in np.eye(op.in_dim)])


def check_infrastructure(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    ops = [make_dense_gaussian(r, c, rng) for r, c in [(3, 5), (8, 8), (16, 6)]]
    ops.append(make_dense(np.diag([3.0, 1.0, 0.5])))
    ops.append(make_masked_dft((8, 1), MaskSpec(8, acceleration=2.0, center_fraction=0.25)))
    ops.append(make_masked_dft((8, 4), MaskSpec(8, acceleration=3.0, center_fraction=0.125, seed=2)))
    top = [float(np.linalg.norm(_matrix_of(op), 2)) for op in ops]
    adj = 0.0
    for op in ops:
        for _ in range(10):
            x = rng.standard_normal(op.in_dim)
            y = rng.standard_normal(op.out_dim)
            x /= np.linalg.norm(x)
            y /= np.linalg.norm(y)
            adj = max(adj, abs(op.apply(x) @ y - x @ op.adjoint(y)))

    cg_res, cg_err = 0.0, 0.0
    for n in (2, 5, 16):
        a = rng.standard_normal((n, n))
        m = a.T @ a / 0.05**2 + 3.0 * np.eye(n)
        rhs = rng.standard_normal(n)
        x, res = conjugate_gradient(lambda v: m @ v, rhs, tol=1e-10, max_iter=200)
        direct = np.linalg.solve(m, rhs)
        cg_res = max(cg_res, res, np.linalg.norm(m @ x - rhs) / np.linalg.norm(rhs))
        cg_err = max(cg_err, np.linalg.norm(x - direct) / np.linalg.norm(direct))

    exact = True
    with tempfile.TemporaryDirectory() as tmp:
        for variant in ("E1", "E2", "E3", "score-U", "score-C"):
            model = init_model(variant, 3, 0.3, rng, width=8, depth=3)
            p1, p2 = Path(tmp) / "a.muse", Path(tmp) / "b.muse"
            save_checkpoint(model, p1)
            back = load_checkpoint(p1)
            save_checkpoint(back, p2)
            same = all(np.array_equal(u, v) for u, v in zip(model.net.arrays(), back.net.arrays()))
            exact &= same and p1.read_bytes() == p2.read_bytes() and back.sigma == model.sigma

    mask_ok = True
    for n in (8, 16, 33, 64, 100):
        for acc in (1.5, 2.0, 4.0, 8.0):
            spec = MaskSpec(n, acceleration=acc, center_fraction=0.08, seed=n)
            mask_ok &= int(generate_vd_mask(spec).sum()) == int(np.floor(n / acc + 0.5))
    return {
        "min_top_singular": min(top),
        "max_top_singular": max(top),
        "max_adjoint_error": float(adj),
        "max_cg_residual": float(cg_res),
        "max_cg_vs_direct": float(cg_err),
        "checkpoint_bit_exact": bool(exact),
        "mask_cardinality_exact": bool(mask_ok),
    }
