"""Command-line entry point: ``muse train | reconstruct | denoise-eval |
field-export | golden``.

Every command reads one ``key=value`` config; ``--seed`` and ``--out``
override the matching keys. Exit codes: 0 ok, 1 golden failure,
2 config error, 3 divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import Key, config_hash, floats, ints, read_config, resolve_path, validate
from .energy import EnergyModel, ScoreBaseline, lipschitz_estimate
from .errors import ConfigError, CorruptCheckpointError, GoldenSuiteError, StageDivergedError, TrainingDivergedError
from .gmm import GmmEnergy, field_grid_export, score_agreement, write_grid_csv
from .metrics import psnr
from .operators import MaskSpec, load_dense, make_identity, make_masked_dft, read_mask_csv, simulate_measurements
from .solvers import PNP_COLUMNS, MapProblem, MuseSchedule, SolveConfig, f_map_eval, muse_solve, pnp_ista, solve
from .tensor import load_signal, save_signal
from .toy import TOY_EPSILONS, TOY_SIGMAS, multimodal_mri_instance
from .train import TrainConfig, load_checkpoint, read_manifest, train, train_multiscale

log = logging.getLogger("muse")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


class Diverged(Exception):
    def __init__(self, stage, message):
        super().__init__(message)
        self.stage = stage


def _prior(name: str, base_dir, key: str):
    """Built-in prior name, or a prior JSON path relative to the config."""
    try:
        if ex.is_builtin_prior(name):
            return ex.named_prior(name)
        return ex.named_prior(resolve_path(name, base_dir))
    except FileNotFoundError as exc:
        raise ConfigError(f"path for {key!r} does not exist: {name}", key) from exc


def _common():
    return {"seed": Key(int, 0), "out": Key(str, required=True)}


def _write_summary(out_dir: Path, command, raw, seed, metrics, outputs, extra=None):
    summary = {
        "command": command,
        "config_hash": config_hash(raw),
        "seed": seed,
        "metrics": metrics,
        "outputs": [str(o) for o in outputs],
    }
    if extra:
        summary.update(extra)
    path = out_dir / "summary.json"
    path.write_text(json.dumps(summary, indent=1, sort_keys=True, default=float))
    return summary


# train -----------------------------------------------------------------------

TRAIN_SCHEMA = {
    **_common(),
    "variant": Key(str, "E1", choices={"E1", "E2", "E3", "score-U", "score-C"}),
    "sigma": Key(float),
    "sigmas": Key(floats),
    "dataset": Key(str, "gmm-toy", choices={"gmm-toy", "gmm-file", "signal-file"}),
    "data_path": Key(str),
    "epochs": Key(int, 60),
    "batch_size": Key(int, 128),
    "learning_rate": Key(float, 3e-3),
    "lr_final_factor": Key(float, 0.05),
    "width": Key(int, 128),
    "depth": Key(int, 4),
    "n_samples": Key(int, 10000),
    "spectral_norm_every": Key(int),
}


def cmd_train(raw, base_dir):
    cfg = validate(raw, TRAIN_SCHEMA, base_dir)
    data = None
    if cfg["dataset"] != "gmm-toy":
        if cfg["data_path"] is None:
            raise ConfigError(f"missing required config key 'data_path' for dataset={cfg['dataset']}", "data_path")
        if cfg["dataset"] == "gmm-file" and ex.is_builtin_prior(cfg["data_path"]):
            data = ex.prior_dataset(ex.named_prior(cfg["data_path"]), cfg["seed"], cfg["n_samples"])
        else:
            cfg["data_path"] = validate({"data_path": cfg["data_path"]}, {"data_path": Key(str, path=True)},
                                        base_dir)["data_path"]
    if (cfg["sigma"] is None) == (cfg["sigmas"] is None):
        raise ConfigError("give exactly one of 'sigma' or 'sigmas'", "sigma")
    sn = cfg["spectral_norm_every"]
    if sn is None:
        sn = 1 if cfg["variant"] == "score-C" else 0
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    base = dict(
        variant=cfg["variant"], dataset=cfg["dataset"], data_path=cfg["data_path"], epochs=cfg["epochs"],
        batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"], lr_final_factor=cfg["lr_final_factor"],
        width=cfg["width"], depth=cfg["depth"], n_samples=cfg["n_samples"], spectral_norm_every=sn, seed=cfg["seed"],
    )
    try:
        if cfg["sigma"] is not None:
            tc = TrainConfig(sigma=cfg["sigma"], out_path=str(out / "model.muse"), **base)
            _, report = train(None, tc, data)
            reports = [report]
            outputs = [out / "model.muse"]
        else:
            configs = [TrainConfig(sigma=s, **base) for s in cfg["sigmas"]]
            manifest, _, reports = train_multiscale(configs, data, out_dir=out)
            outputs = [Path(m["checkpoint_path"]) for m in manifest] + [out / "manifest.json"]
    except TrainingDivergedError as exc:
        raise Diverged(0, str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    report_obj = [r.to_json() for r in reports]
    (out / "report.json").write_text(json.dumps(report_obj, indent=1, default=float))
    outputs.append(out / "report.json")
    metrics = {
        "final_loss": [r.final_loss for r in reports],
        "val_loss": [r.val_loss for r in reports],
        "baseline_loss": [r.baseline_loss for r in reports],
        "first_epoch_loss": [r.epoch_losses[0] for r in reports],
        "steps": sum(r.steps for r in reports),
        "min_relative_loss_drop": min((r.epoch_losses[0] - r.final_loss) / r.epoch_losses[0] for r in reports),
    }
    return _write_summary(out, "train", raw, cfg["seed"], metrics, outputs)


# reconstruct -----------------------------------------------------------------

RECON_SCHEMA = {
    **_common(),
    "instance": Key(str),
    "operator": Key(str, "masked-dft", choices={"identity", "dense", "masked-dft"}),
    "shape": Key(ints),
    "dense_path": Key(str, path=True),
    "mask_path": Key(str, path=True),
    "acceleration": Key(float, 2.0),
    "center_fraction": Key(float, 0.08),
    "mask_seed": Key(int, 0),
    "x_true_path": Key(str, path=True),
    "b_path": Key(str, path=True),
    "eta": Key(float),
    "manifest": Key(str, path=True),
    "model": Key(str, path=True),
    "oracle": Key(str),
    "sigma": Key(float),
    "sigmas": Key(floats),
    "epsilons": Key(floats),
    "algorithm": Key(str, "muse", choices={"gd", "mm", "auto", "muse", "pnp-ista"}),
    "L": Key(float),
    "L_method": Key(str, choices={"layer-product", "pairwise-empirical", "oracle"}),
    "epsilon": Key(float, 1e-5),
    "max_iter": Key(int, 20000),
    "iters": Key(int, 500),
    "init": Key(str, "ahb", choices={"ahb", "random", "truth", "zeros"}),
    "init_seed": Key(int, 0),
}


def _build_operator(cfg):
    kind = cfg["operator"]
    if kind == "dense":
        if not cfg["dense_path"]:
            raise ConfigError("missing required config key 'dense_path' for operator=dense", "dense_path")
        return load_dense(cfg["dense_path"]), None
    if cfg["shape"] is None:
        raise ConfigError(f"missing required config key 'shape' for operator={kind}", "shape")
    shape = tuple(cfg["shape"])
    if kind == "identity":
        return make_identity(int(np.prod(shape))), shape
    if cfg["mask_path"]:
        mask = read_mask_csv(cfg["mask_path"])
    else:
        mask = MaskSpec(shape[0], cfg["acceleration"], cfg["center_fraction"], cfg["mask_seed"])
    shape2 = shape if len(shape) == 2 else (shape[0], 1)
    return make_masked_dft(shape2, mask), shape2


def _stage_models(cfg, default_prior=None, base_dir=None):
    """List of (sigma, model) sorted coarse to fine."""
    sources = [k for k in ("manifest", "model", "oracle") if cfg[k]]
    if len(sources) > 1:
        raise ConfigError(f"give only one of manifest/model/oracle, got {sources}", sources[1])
    if cfg["manifest"]:
        entries = read_manifest(cfg["manifest"])
        pairs = [(e["sigma"], ex.load_model(e["checkpoint_path"], e["sigma"])) for e in entries]
    elif cfg["model"]:
        m = load_checkpoint(cfg["model"])
        pairs = [(cfg["sigma"] or m.sigma, m)]
    else:
        name = cfg["oracle"]
        prior = default_prior if name is None else None
        if prior is None:
            if name is None:
                raise ConfigError("missing required config key 'manifest' (or 'model' / 'oracle')", "manifest")
            prior = _prior(name, base_dir, "oracle")
        sigmas = cfg["sigmas"] or ([cfg["sigma"]] if cfg["sigma"] else list(TOY_SIGMAS))
        pairs = [(s, GmmEnergy(prior, s)) for s in sigmas]
    pairs.sort(key=lambda p: -p[0])
    return pairs


def _lipschitz(cfg, model):
    if cfg["L"] is not None:
        return cfg["L"]
    method = cfg["L_method"] or ("oracle" if isinstance(model, GmmEnergy) else "layer-product")
    if method == "oracle":
        if not isinstance(model, GmmEnergy):
            raise ConfigError("L_method=oracle needs an oracle prior", "L_method")
        return model.curvature_bound()
    return lipschitz_estimate(model, method, rng=np.random.default_rng(0))


def cmd_reconstruct(raw, base_dir):
    cfg = validate(raw, RECON_SCHEMA, base_dir)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    default_prior = None
    if cfg["instance"]:
        name = cfg["instance"]
        if not name.startswith("multimodal"):
            raise ConfigError(f"unknown instance {name!r}", "instance")
        inst = multimodal_mri_instance(int(name.split(":", 1)[1]) if ":" in name else 0)
        op, shape, x_true, b, eta = inst.op, inst.op.shape, inst.x_true, inst.b, inst.eta
        default_prior = inst.prior
    else:
        op, shape = _build_operator(cfg)
        x_true = load_signal(cfg["x_true_path"])[0] if cfg["x_true_path"] else None
        eta = cfg["eta"]
        if cfg["b_path"]:
            b = load_signal(cfg["b_path"])[0]
        elif x_true is not None:
            if eta is None:
                raise ConfigError("missing required config key 'eta' to simulate measurements", "eta")
            b = simulate_measurements(op, x_true, eta, np.random.default_rng(cfg["seed"]))
        else:
            raise ConfigError("missing required config key 'b_path' (or 'x_true_path')", "b_path")
        if x_true is not None and x_true.size != op.in_dim:
            raise ConfigError("x_true length does not match the operator", "x_true_path")
        if b.size != op.out_dim:
            raise ConfigError("measurement length does not match the operator", "b_path")
    if eta is None:
        raise ConfigError("missing required config key 'eta'", "eta")

    if cfg["init"] == "ahb":
        x0 = op.adjoint(b)
    elif cfg["init"] == "zeros":
        x0 = np.zeros(op.in_dim)
    elif cfg["init"] == "random":
        x0 = np.random.default_rng(cfg["init_seed"]).standard_normal(op.in_dim)
    else:
        if x_true is None:
            raise ConfigError("init=truth needs 'x_true_path'", "init")
        x0 = x_true.copy()

    pairs = _stage_models(cfg, default_prior, base_dir)
    algorithm = cfg["algorithm"]
    start = time.perf_counter()
    outputs, traces = [], []
    if algorithm == "pnp-ista":
        sigma, model = pairs[-1]
        if not isinstance(model, ScoreBaseline) or model.variant != "score-C":
            raise ConfigError("algorithm=pnp-ista needs a score-C checkpoint in 'model'", "model")
        try:
            tr = pnp_ista(op, b, eta**2, model, iters=cfg["iters"], x0=x0)
        except ValueError as exc:
            raise ConfigError(str(exc), "model") from exc
        if tr.reason == "diverged":
            raise Diverged(0, "PnP-ISTA produced non-finite iterates")
        tr.to_csv(out / "trace.csv", PNP_COLUMNS)
        outputs.append(out / "trace.csv")
        x = tr.x
        metrics = {"iterations": tr.iterations, "data_residual": tr.records[-1]["data_residual"]}
    else:
        for s, m in pairs:
            if not isinstance(m, (EnergyModel, GmmEnergy)):
                raise ConfigError(f"{algorithm} needs energy models, got {m.variant}", "manifest")
        if algorithm == "muse":
            eps = cfg["epsilons"] or (list(TOY_EPSILONS) if len(pairs) == len(TOY_EPSILONS) else [cfg["epsilon"]] * len(pairs))
            if len(eps) != len(pairs):
                raise ConfigError(f"need {len(pairs)} epsilons, got {len(eps)}", "epsilons")
            try:
                schedule = MuseSchedule.from_sigmas([p[0] for p in pairs], eps, [p[1] for p in pairs], eta=eta)
            except ValueError as exc:
                raise ConfigError(str(exc), "sigmas") from exc
            cfgs = [SolveConfig(algorithm="auto", L=_lipschitz(cfg, m), max_iter=cfg["max_iter"]) for _, m in pairs]
            try:
                x, traces = muse_solve(schedule, op, b, cfgs, x0)
            except StageDivergedError as exc:
                raise Diverged(exc.stage, str(exc)) from exc
            final = schedule.stages[-1]
            p = MapProblem(op, b, final.eta**2, final.model, final.sigma**2)
        else:
            if cfg["sigma"] is not None:
                sigma, model = min(pairs, key=lambda q: abs(q[0] - cfg["sigma"]))
            else:
                sigma, model = pairs[-1]
            p = MapProblem(op, b, eta**2, model, sigma**2)
            sc = SolveConfig(algorithm=algorithm, L=_lipschitz(cfg, model), epsilon=cfg["epsilon"],
                             max_iter=cfg["max_iter"])
            tr = solve(p, sc, x0)
            if tr.reason == "diverged":
                raise Diverged(0, "objective became non-finite")
            traces = [tr]
            x = tr.x
        for i, tr in enumerate(traces):
            name = f"trace_stage{i}.csv" if algorithm == "muse" else "trace.csv"
            tr.to_csv(out / name)
            outputs.append(out / name)
        metrics = {
            "f_map": f_map_eval(p, x)[0],
            "iterations": sum(t.iterations for t in traces),
            "stage_iterations": [t.iterations for t in traces],
            "stage_algorithms": [t.algorithm for t in traces],
            "backtracks": sum(t.backtracks for t in traces),
            "stages": len(traces),
        }
    metrics["wall_time_s"] = time.perf_counter() - start
    if x_true is not None:
        metrics["psnr"] = psnr(x, x_true)
        metrics["rel_error"] = float(np.linalg.norm(x - x_true) / np.linalg.norm(x_true))
    if op.kind == "masked-dft":
        save_signal(out / "x_final.bin", x, op.shape, channels=2)
    else:
        save_signal(out / "x_final.bin", x, (op.in_dim,))
    outputs.insert(0, out / "x_final.bin")
    return _write_summary(out, "reconstruct", raw, cfg["seed"], metrics, outputs)


# denoise-eval ----------------------------------------------------------------

DENOISE_SCHEMA = {
    **_common(),
    "models": Key(str, "identity,oracle"),
    "prior": Key(str, "patch"),
    "sigmas": Key(floats, [0.01, 0.05]),
    "items": Key(int, 200),
    "test_seed": Key(int, 1000),
}


def _parse_models(spec: str, base_dir):
    out = []
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        name, _, ref = item.partition("=")
        if name in ("identity", "oracle") and not ref:
            out.append((name, name))
            continue
        if not ref:
            raise ConfigError(f"model entry {item!r} must look like name=path", "models")
        ref = validate({"m": ref}, {"m": Key(str, path=True)}, base_dir)["m"]
        out.append((name, ref))
    if not out:
        raise ConfigError("no models given", "models")
    return out


def cmd_denoise_eval(raw, base_dir):
    cfg = validate(raw, DENOISE_SCHEMA, base_dir)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    prior = _prior(cfg["prior"], base_dir, "prior")
    models = _parse_models(cfg["models"], base_dir)
    clean = ex.prior_dataset(prior, cfg["test_seed"], cfg["items"])
    train_data = ex.prior_dataset(prior, cfg["seed"], 2000)
    rows, warnings = [], []
    for sigma in cfg["sigmas"]:
        noisy = ex.noisy_items(clean, sigma, cfg["seed"])
        for name, ref in models:
            if ref == "identity":
                X = noisy
            elif ref == "oracle":
                o = GmmEnergy(prior, sigma)
                X = ex.denoise_batch(o, noisy, sigma, L=o.curvature_bound())
            else:
                if ref.endswith(".json"):
                    entries = read_manifest(ref)
                else:
                    entries = [{"sigma": load_checkpoint(ref).sigma, "checkpoint_path": ref}]
                model = ex.model_for_sigma(entries, sigma, warnings)
                if model.dim != prior.dim:
                    raise ConfigError(f"model {name} has dim {model.dim}, prior has {prior.dim}", "models")
                X = ex.denoise_batch(model, noisy, sigma, data=train_data)
            mean, std, _ = ex.psnr_stats(X, clean)
            rows.append({"model": name, "sigma": sigma, "psnr_mean": mean, "psnr_std": std})
    with open(out / "denoise.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "sigma", "psnr_mean", "psnr_std"])
        for r in rows:
            w.writerow([r["model"], f"{r['sigma']:g}", f"{r['psnr_mean']:.9g}", f"{r['psnr_std']:.9g}"])
    for wmsg in warnings:
        log.warning(wmsg)
    metrics = {f"{r['model']}_sigma{r['sigma']:g}_psnr": r["psnr_mean"] for r in rows}
    return _write_summary(out, "denoise-eval", raw, cfg["seed"], metrics, [out / "denoise.csv"],
                          extra={"warnings": warnings})


# field-export ----------------------------------------------------------------

FIELD_SCHEMA = {
    **_common(),
    "manifest": Key(str, required=True, path=True),
    "prior": Key(str, "toy"),
    "bounds": Key(floats, [-2.5, 2.5, -2.5, 2.5]),
    "resolution": Key(int, 100),
}


def cmd_field_export(raw, base_dir):
    cfg = validate(raw, FIELD_SCHEMA, base_dir)
    if len(cfg["bounds"]) != 4:
        raise ConfigError("bounds needs four numbers xmin,xmax,ymin,ymax", "bounds")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    prior = _prior(cfg["prior"], base_dir, "prior")
    if prior.dim != 2:
        raise ConfigError("field export needs a 2-D prior", "prior")
    outputs, report = [], {"cosine": {}}
    for entry in read_manifest(cfg["manifest"]):
        sigma = entry["sigma"]
        model = ex.load_model(entry["checkpoint_path"], sigma)
        tag = f"sigma{sigma:g}"
        try:
            rec = field_grid_export(model, cfg["bounds"], cfg["resolution"], sigma)
            ref = field_grid_export(prior, cfg["bounds"], cfg["resolution"], sigma)
        except ValueError as exc:
            raise ConfigError(str(exc), "bounds") from exc
        mpath = out / f"field_{model.variant}_{tag}.csv"
        opath = out / f"oracle_{tag}.csv"
        write_grid_csv(rec, mpath)
        write_grid_csv(ref, opath)
        outputs += [mpath, opath]
        report["cosine"][f"{model.variant}_{tag}"] = score_agreement(model, prior, sigma, tuple(cfg["bounds"]),
                                                                     cfg["resolution"])
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    outputs.append(out / "report.json")
    metrics = {f"cos_{k}": v for k, v in report["cosine"].items()}
    metrics["files"] = len(outputs)
    return _write_summary(out, "field-export", raw, cfg["seed"], metrics, outputs)


COMMANDS = {
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "denoise-eval": cmd_denoise_eval,
    "field-export": cmd_field_export,
}


def run_command(command: str, raw: dict, base_dir=None) -> dict:
    """Run a command on an already-parsed config (used by the golden suite)."""
    return COMMANDS[command](dict(raw), base_dir)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="muse", description="Energy-prior reconstruction experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
    g = sub.add_parser("golden")
    g.add_argument("--workdir", default=None)
    g.add_argument("--golden-dir", default=None)
    g.add_argument("--case", action="append", default=None)
    g.add_argument("--report", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "golden":
        from .golden import run_golden_suite

        try:
            report = run_golden_suite(args.golden_dir, args.workdir, cases=args.case)
        except GoldenSuiteError as exc:
            print(f"golden suite error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        for case in report["cases"]:
            print(f"{'PASS' if case['passed'] else 'FAIL'} {case['name']}")
        if args.report:
            Path(args.report).write_text(json.dumps(report, indent=1, default=float))
        return EXIT_OK if report["passed"] else EXIT_FAIL
    try:
        raw = read_config(args.config)
        if args.seed is not None:
            raw["seed"] = str(args.seed)
        if args.out is not None:
            raw["out"] = args.out
        summary = run_command(args.command, raw, Path(args.config).parent)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CorruptCheckpointError as exc:
        print(f"config error: unreadable checkpoint: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Diverged as exc:
        print(f"diverged at stage {exc.stage}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(json.dumps(summary["metrics"], default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
