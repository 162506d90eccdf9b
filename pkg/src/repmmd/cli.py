"""Command-line entry point: ``repmmd <subcommand> [--config PATH] [--out DIR]``.

Every run writes its resolved configuration (``config.yaml``) and a
``manifest.json`` into the output directory. Rerunning with
``--config DIR/config.yaml`` reproduces the NDJSON/CSV outputs byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from . import specnorm as sn
from . import stability as st
from . import trainer as tr
from .errors import ConfigurationError, NonConvergenceError, NonFiniteError, ReproError
from .kernels import format_float, kernel_matrix, pairwise_sq_dists, write_curves_csv
from .losses import mmd2_unbiased

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# writers

def _json_value(v):
    if isinstance(v, float):
        if not math.isfinite(v):
            return None
        return v
    if isinstance(v, (np.floating, np.integer)):
        return _json_value(v.item())
    return v


def write_ndjson(path: Path, records) -> None:
    with open(path, "w", newline="\n") as fh:
        for rec in records:
            rec = {k: _json_value(v) for k, v in rec.items()}
            fh.write(json.dumps(rec, sort_keys=False, allow_nan=False) + "\n")


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_csv_cell(v) for v in row])


def _csv_cell(v):
    if isinstance(v, (float, np.floating)):
        return format_float(v)
    if v is None:
        return ""
    return str(v)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, name: str, cfg, outputs, started: float, extra=None) -> None:
    manifest = {
        "subcommand": name,
        "seed": cfg.seed,
        "config": "config.yaml",
        "rerun": f"repmmd {name} --config {out / 'config.yaml'} --out <dir>",
        "versions": {"repmmd": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "outputs": {p.name: _sha256(p) for p in outputs},
        "wall_time_s": time.perf_counter() - started,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


# ---------------------------------------------------------------------------
# subcommands

def run_train(cfg, out: Path):
    section = cfg.train
    base = section.build(cfg.seed)
    outputs, extra = [], {}
    if not section.run_sweep:
        outputs += _train_one(base, out, "")
        return outputs, extra
    rows = []
    if section.sweep == "lambda":
        points = [("lam", lam, replace(base, disc_loss=replace(
            base.disc_loss, family="disc_lambda", lam=float(lam)))) for lam in section.lambdas]
    else:
        points = [("lr", (a, b), replace(base, lr_d=a, lr_g=b))
                  for a in section.lr_grid for b in section.lr_grid]
    for kind, value, conf in points:
        tag = (f"lam_{format_float(value)}" if kind == "lam"
               else f"lr_{format_float(value[0])}_{format_float(value[1])}")
        try:
            files = _train_one(conf, out, tag + "_")
            outputs += files
            recs = [json.loads(l) for l in files[0].read_text().splitlines()]
            first, last = recs[0], recs[-1]
            rows.append([tag, conf.disc_loss.lam, conf.lr_d, conf.lr_g, first["heldout_mmd2"],
                         last["heldout_mmd2"], last["heldout_mmd2"] / first["heldout_mmd2"],
                         last["modes_covered"], "ok"])
        except tr.TrainingAborted as err:
            rows.append([tag, conf.disc_loss.lam, conf.lr_d, conf.lr_g, None, None, None, None,
                         f"aborted at step {err.context.get('step')}"])
    path = out / "sweep_summary.csv"
    write_csv(path, ["run", "lambda", "lr_d", "lr_g", "baseline_mmd2", "final_mmd2",
                     "ratio", "modes_covered", "status"], rows)
    outputs.append(path)
    return outputs, extra


def _train_one(conf: tr.TrainConfig, out: Path, prefix: str):
    rec_path = out / f"{prefix}records.ndjson"
    try:
        result = tr.train(conf)
    except tr.TrainingAborted as err:
        write_ndjson(rec_path, [r.as_dict() for r in err.records]
                     + [{"aborted": True, **err.context}])
        raise
    write_ndjson(rec_path, [r.as_dict() for r in result.records])
    net = tr.nc.with_parameters(result.gen_net, result.gen_params)
    samples = tr.generate(net, tr.rng_stream(conf.seed, "samples"), conf.n_eval,
                          conf.latent_dim).reshape(conf.n_eval, -1)
    sample_path = out / f"{prefix}samples.csv"
    write_csv(sample_path, [f"x{i}" for i in range(samples.shape[1])], samples.tolist())
    return [rec_path, sample_path]


def run_stability(cfg, out: Path):
    section = cfg.stability
    sim = section.build()
    grid = st.grid_field(sim)
    field_path = out / "field.ndjson"
    write_ndjson(field_path, [vars(s) for s in grid])
    rows = []
    for i, start in enumerate(section.trajectory_starts):
        traj = st.integrate_trajectory(sim, start, section.trajectory_steps)
        for j, s in enumerate(traj.samples):
            rows.append([i, j, s.w1, s.w2, s.dw1, s.dw2, int(traj.escaped)])
    traj_path = out / "trajectories.csv"
    write_csv(traj_path, ["trajectory", "step", "w1", "w2", "dw1", "dw2", "escaped"], rows)
    eq_records = []
    for guess in section.equilibrium_guesses:
        rec = {"guess_w1": guess[0], "guess_w2": guess[1]}
        try:
            eq = st.find_equilibrium(sim, guess)
            _, eigs = st.jacobian_eigs(sim, eq.w1, eq.w2)
            eigs = sorted(eigs, key=lambda e: (e.real, e.imag))
            rec.update(converged=True, w1=eq.w1, w2=eq.w2, residual=eq.residual,
                       eig_real=[float(e.real) for e in eigs],
                       eig_imag=[float(e.imag) for e in eigs])
        except NonConvergenceError as err:
            rec.update(converged=False, w1=err.best[0], w2=err.best[1], residual=err.residual)
        eq_records.append(rec)
    eq_path = out / "equilibria.ndjson"
    write_ndjson(eq_path, eq_records)
    return [field_path, traj_path, eq_path], {}


def run_specnorm(cfg, out: Path):
    section = cfg.specnorm
    rows = []
    for i, km in enumerate(section.kernels):
        k = km.build()
        pico_oracle = sn.exact_sigma(sn.dbc_materialize(k))
        pim_oracle = sn.exact_sigma(k.reshaped())
        for method in section.methods:
            rng = tr.rng_stream(cfg.seed, f"power-iteration/{i}/{method}")
            if method == "pico":
                state = sn.init_pico_state(k, rng)
                est, state = sn.run_power_iteration(sn.pico_step, k, state, section.max_iters,
                                                    section.tol)
                oracle = pico_oracle
            else:
                W = k.reshaped()
                state = sn.init_pim_state(W, rng)
                est, state = sn.run_power_iteration(sn.pim_step, W, state, section.max_iters,
                                                    section.tol)
                oracle = pim_oracle
            rel = abs(est - oracle) / oracle if oracle > 0 else abs(est)
            shape = "x".join(str(v) for v in k.weights.shape)
            rows.append([i, shape, k.stride, k.padding, "x".join(map(str, k.input_shape)),
                         method, state.iterations_done, est, oracle, rel])
    path = out / "specnorm.csv"
    write_csv(path, ["kernel_id", "kernel_shape", "stride", "padding", "input_shape", "method",
                     "iterations", "estimate", "oracle", "rel_error"], rows)
    return [path], {}


def read_samples(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"{p}: sample file not found")
    with open(p, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows:
        try:
            [float(v) for v in rows[0]]
        except ValueError:
            rows = rows[1:]
    try:
        data = np.array([[float(v) for v in r] for r in rows], dtype=np.float64)
    except ValueError as err:
        raise ConfigurationError(f"{p}: non-numeric entry ({err})") from None
    if data.ndim != 2 or data.shape[0] == 0:
        raise ConfigurationError(f"{p}: expected a non-empty table of samples")
    return data


def mmd_statistic(x, y, kernel) -> float:
    return mmd2_unbiased(kernel_matrix(kernel, pairwise_sq_dists(x)),
                         kernel_matrix(kernel, pairwise_sq_dists(y)),
                         kernel_matrix(kernel, pairwise_sq_dists(x, y)))


def run_mmd_test(cfg, out: Path):
    section = cfg.mmd_test
    if section.x is None or section.y is None:
        raise ConfigurationError("mmd-test needs both sample files (--x and --y)")
    x, y = read_samples(section.x), read_samples(section.y)
    if x.shape[1] != y.shape[1]:
        raise ConfigurationError("sample files differ in dimension")
    kernel = section.kernel.build()
    if kernel.is_bounded:
        raise ConfigurationError("mmd-test needs an unbounded kernel")
    stat = mmd_statistic(x, y, kernel)
    p_value = None
    if section.permutations:
        rng = tr.rng_stream(cfg.seed, "permutation")
        pooled = np.concatenate([x, y])
        n = len(x)
        hits = 0
        for _ in range(section.permutations):
            idx = rng.permutation(len(pooled))
            if mmd_statistic(pooled[idx[:n]], pooled[idx[n:]], kernel) >= stat:
                hits += 1
        p_value = (hits + 1) / (section.permutations + 1)
    path = out / "mmd_test.csv"
    write_csv(path, ["n", "dim", "kernel", "statistic", "permutations", "p_value"],
              [[len(x), x.shape[1], kernel.describe(), stat, section.permutations, p_value]])
    return [path], {}


def run_kernel_curves(cfg, out: Path):
    from .kernels import rbf_mixture
    e = np.linspace(0.0, 10.0, 1001)
    a, b = out / "kernel_values.csv", out / "kernel_derivatives.csv"
    write_curves_csv(a, rbf_mixture(), e, derivative=False)
    write_curves_csv(b, rbf_mixture(), e, derivative=True)
    return [a, b], {}


SUBCOMMANDS = {
    "train": run_train,
    "simulate-stability": run_stability,
    "specnorm": run_specnorm,
    "mmd-test": run_mmd_test,
    "kernel-curves": run_kernel_curves,
}


def run_subcommand(name: str, cfg, out) -> int:
    """Run one subcommand into ``out``; returns the process exit status."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfgmod.dump(cfg))
    started = time.perf_counter()
    try:
        outputs, extra = SUBCOMMANDS[name](cfg, out)
    except NonFiniteError as err:
        print(f"repmmd {name}: aborted: {err} {err.context}", file=sys.stderr)
        return EXIT_ABORT
    write_manifest(out, name, cfg, outputs, started, extra)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="repmmd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"repmmd {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in list(SUBCOMMANDS) + ["show-config"]:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, default=None, help="YAML config file")
        if name == "show-config":
            continue
        sp.add_argument("--out", type=Path, default=Path("runs") / name, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        if name == "train":
            sp.add_argument("--sweep", action="store_true", help="run the configured sweep")
        if name == "mmd-test":
            sp.add_argument("--x", type=Path, default=None, help="CSV of samples from P")
            sp.add_argument("--y", type=Path, default=None, help="CSV of samples from Q")
            sp.add_argument("--permutations", type=int, default=None)
    return p


def _overrides(args) -> dict:
    o: dict = {}
    if getattr(args, "seed", None) is not None:
        o["seed"] = args.seed
    if getattr(args, "sweep", False):
        o.setdefault("train", {})["run_sweep"] = True
    if args.command == "mmd-test":
        mt = {}
        if args.x is not None:
            mt["x"] = str(args.x.resolve())
        if args.y is not None:
            mt["y"] = str(args.y.resolve())
        if args.permutations is not None:
            mt["permutations"] = args.permutations
        if mt:
            o["mmd_test"] = mt
    return o


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.parse_config(args.config, _overrides(args))
        if args.command == "show-config":
            sys.stdout.write(cfgmod.dump(cfg))
            return EXIT_OK
        return run_subcommand(args.command, cfg, args.out)
    except ConfigurationError as err:
        print(f"repmmd {args.command}: configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ReproError as err:
        print(f"repmmd {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
