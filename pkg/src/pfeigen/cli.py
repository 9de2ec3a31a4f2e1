"""Command-line experiment runner.

Usage::

    pfeigen {eigen,oracle,bellman,rare-event,validate} [--config PATH]
            [--seed INT] [--out DIR] [--threads INT] [--oracle] [--key value ...]

Configuration is a flat ``key = value`` file; any key can be overridden on
the command line as ``--key value``.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import backward as bw
from . import bellman, forward, models, oracle, rare_event
from .errors import ConfigError, InvalidArgumentError, InvariantError, PfEigenError
from .kernel import Dirac, Uniform, log_sum_exp

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_IO = 0, 1, 2, 3
SUBCOMMANDS = ("eigen", "oracle", "bellman", "rare-event", "validate")

DEFAULTS: Dict[str, str] = {
    "model": "neutron",
    "L": str(np.pi / 2),
    "c": "1.0",
    "delta": "0.0",
    "alpha": "0.0",
    "theta": "2.0",
    "mu_rev": "10.0",
    "sigma": "20.0",
    "dt": "0.01",
    "x_max": "500.0",
    "N": "250",
    "two_n": "2000",
    "window_m": "0",
    "seed": "0",
    "seeds": "1",
    "grid_size": "512",
    "eval_points": "",
    "initial": "dirac",
    "x0": "0.0",
    "tol": "1e-10",
    "n_max": "50",
    "preset": "",
    "m_values": "5,10,20",
    "deltas": "0.8",
    "replications": "2000",
    "alphas": "",
    "t_values": "",
    "lambda_seeds": "4",
    "corrupt": "none",
    "scaling": "false",
    "scaling_N": "50,100,200,400",
    "scaling_seeds": "40",
}

# model-specific defaults applied when the key is not given explicitly
MODEL_DEFAULTS = {
    "neutron": {"eval_points": f"0,{np.pi / 2},150"},
    "unit": {"c": "2.0", "eval_points": "-2,2,150", "two_n": "200", "N": "100"},
    "rare": {"c": "2.0", "alpha": "6.0", "N": "250", "two_n": "1000", "eval_points": "-2,2,150"},
    "cir": {"delta": "5.0", "N": "500", "two_n": "4000", "window_m": "1000",
            "eval_points": "4,20,321", "x0": "10.0", "grid_size": "512"},
}


@dataclass
class RunConfig:
    subcommand: str
    values: Dict[str, str]
    output_dir: str
    threads: int = 1
    with_oracle: bool = False
    explicit: set = field(default_factory=set)

    def get(self, key: str) -> str:
        return self.values[key]

    def int(self, key: str, minimum: int = 1) -> int:
        try:
            v = int(self.values[key])
        except ValueError:
            raise ConfigError(f"key {key!r}: expected an integer, got {self.values[key]!r}")
        if v < minimum:
            raise ConfigError(f"key {key!r}: must be >= {minimum}, got {v}")
        return v

    def float(self, key: str) -> float:
        try:
            return float(self.values[key])
        except ValueError:
            raise ConfigError(f"key {key!r}: expected a number, got {self.values[key]!r}")

    def floats(self, key: str) -> List[float]:
        raw = self.values[key].strip()
        if not raw:
            return []
        try:
            return [float(s) for s in raw.split(",")]
        except ValueError:
            raise ConfigError(f"key {key!r}: expected comma-separated numbers, got {raw!r}")

    def ints(self, key: str) -> List[int]:
        vals = self.floats(key)
        if any(v != int(v) or v < 0 for v in vals):
            raise ConfigError(f"key {key!r}: expected nonnegative integers")
        return [int(v) for v in vals]

    def flag(self, key: str) -> bool:
        v = self.values[key].strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off", ""):
            return False
        raise ConfigError(f"key {key!r}: expected a boolean, got {v!r}")

    def eval_points(self) -> np.ndarray:
        parts = self.floats("eval_points")
        if len(parts) != 3 or parts[2] != int(parts[2]) or parts[2] < 1:
            raise ConfigError("key 'eval_points': expected 'start,stop,count'")
        if not parts[0] <= parts[1]:
            raise ConfigError("key 'eval_points': need start <= stop")
        return np.linspace(parts[0], parts[1], int(parts[2]))


def parse_config_file(path: str) -> Dict[str, str]:
    out = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}")
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown key {k!r}")
            out[k] = v
    return out


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_config(argv: Sequence[str]) -> RunConfig:
    p = _Parser(prog="pfeigen", description=__doc__.split("\n")[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="out")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--oracle", action="store_true")
    args, rest = p.parse_known_args(argv)
    explicit = {}
    if args.config:
        explicit.update(parse_config_file(args.config))
    if len(rest) % 2:
        raise ConfigError(f"override {rest[-1]!r} lacks a value")
    for k, v in zip(rest[::2], rest[1::2]):
        if not k.startswith("--"):
            raise ConfigError(f"unexpected argument {k!r}")
        key = k[2:].replace("-", "_")
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        explicit[key] = v
    if args.seed is not None:
        explicit["seed"] = str(args.seed)
    if args.threads < 0:
        raise ConfigError("--threads must be >= 0")
    values = dict(DEFAULTS)
    model = explicit.get("model", DEFAULTS["model"])
    if model not in MODEL_DEFAULTS:
        raise ConfigError(f"key 'model': unknown model {model!r} "
                          f"(choose from {', '.join(MODEL_DEFAULTS)})")
    values.update(MODEL_DEFAULTS[model])
    values.update(explicit)
    return RunConfig(args.subcommand, values, args.out, args.threads, args.oracle,
                     set(explicit))


def make_model(cfg: RunConfig, **override):
    name = cfg.get("model")
    get = lambda k: override.get(k, cfg.float(k))
    try:
        if name == "neutron":
            return models.neutron_model(get("L"), get("c"), get("delta"))
        if name == "unit":
            return models.rare_event_model(get("c"), 0.0)
        if name == "rare":
            return models.rare_event_model(get("c"), get("alpha"))
        return models.cir_bellman_model(get("theta"), get("mu_rev"), get("sigma"),
                                        get("dt"), get("x_max"), get("delta"))
    except InvalidArgumentError as exc:
        raise ConfigError(f"model {name!r}: {exc}")


def initial_law(cfg: RunConfig):
    kind = cfg.get("initial")
    if kind == "dirac":
        return Dirac(cfg.float("x0"))
    if kind == "uniform":
        return Uniform()
    raise ConfigError("key 'initial': expected 'dirac' or 'uniform'")


def grid_scheme(model) -> str:
    return "cell" if isinstance(model, models.CIRBellmanModel) else "nodal"


def solve_oracle(model, cfg: RunConfig):
    op = oracle.build_grid_operator(model, cfg.int("grid_size", 8), grid_scheme(model))
    return op, oracle.power_iteration(op, cfg.float("tol"))


def _window(cfg, n):
    m = cfg.int("window_m", 0)
    return m if m > 0 else max(n // 10, 1)


def _h_replicate(args):
    model, N, two_n, initial, seed, r, x, m = args
    traj = forward.run_forward(model, N, two_n, initial, seed, replicate=r)
    back = bw.run_backward(traj)
    return (bw.window_average_h(traj, back, x, m),
            forward.log_lambda_average(traj, two_n // 2), traj.log_lambda)


def _map(fn, jobs, threads):
    workers = rare_event.resolve_threads(threads)
    if workers == 1 or len(jobs) == 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(workers) as ex:
        return list(ex.map(fn, jobs))


def _particle_h(cfg, model, x):
    N, two_n = cfg.int("N"), cfg.int("two_n", 2)
    if two_n % 2:
        raise ConfigError("key 'two_n': must be even")
    m = _window(cfg, two_n // 2)
    if m > two_n // 2:
        raise ConfigError("key 'window_m': must not exceed two_n / 2")
    seed, seeds = cfg.int("seed", 0), cfg.int("seeds")
    jobs = [(model, N, two_n, initial_law(cfg), seed, r, x, m) for r in range(seeds)]
    res = _map(_h_replicate, jobs, cfg.threads)
    h = np.mean([r[0] for r in res], axis=0)
    lam = float(np.mean([r[1] for r in res]))
    return h, lam, res[0][2], m


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _model_summary(cfg):
    keys = {"neutron": ("L", "c", "delta"), "unit": ("c",), "rare": ("c", "alpha"),
            "cir": ("theta", "mu_rev", "sigma", "dt", "x_max", "delta")}[cfg.get("model")]
    return {"name": cfg.get("model"), **{k: cfg.float(k) for k in keys}}


def cmd_eigen(cfg: RunConfig) -> int:
    if cfg.get("preset") == "neutron-deltas":
        for d in (0.0, 0.5, 1.0, 2.0, 5.0):
            sub = RunConfig(cfg.subcommand, dict(cfg.values, model="neutron", delta=str(d)),
                            os.path.join(cfg.output_dir, f"delta_{d:g}"), cfg.threads,
                            cfg.with_oracle, cfg.explicit)
            sub.values["preset"] = ""
            cmd_eigen(sub)
        return EXIT_OK
    if cfg.get("preset"):
        raise ConfigError(f"key 'preset': unknown preset {cfg.get('preset')!r} for eigen")
    t0 = time.perf_counter()
    model = make_model(cfg)
    x = cfg.eval_points()
    h, lam, log_lambda, m = _particle_h(cfg, model, x)
    h_or = None
    summary = {}
    if cfg.with_oracle:
        op, eig = solve_oracle(model, cfg)
        h_or = oracle.extend_h(op, eig, x)
        summary["oracle_log_lambda"] = eig.log_lambda_star
        summary["sup_relative_error"] = float(np.max(np.abs(h / h_or - 1)))
    os.makedirs(cfg.output_dir, exist_ok=True)
    bw.write_h_csv(x, h, cfg.output_dir, h_or)
    _write_lambda(log_lambda, cfg.output_dir)
    summary.update({"model": _model_summary(cfg), "N": cfg.int("N"),
                    "n": cfg.int("two_n", 2) // 2, "m": m, "Lambda_hat": lam,
                    "seed": cfg.int("seed", 0), "seeds": cfg.int("seeds"),
                    "wall_clock_seconds": time.perf_counter() - t0})
    _write_json(os.path.join(cfg.output_dir, "summary.json"), summary)
    return EXIT_OK


def _write_lambda(log_lambda, out_dir):
    with open(os.path.join(out_dir, "lambda.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p", "log_lambda"])
        for p, v in enumerate(log_lambda):
            w.writerow([p, repr(float(v))])


def cmd_oracle(cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    model = make_model(cfg)
    op, eig = solve_oracle(model, cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    oracle.write_oracle_csv(op, eig, cfg.output_dir)
    n_max = cfg.int("n_max")
    prof = oracle.met_decay_profile(op, eig, n_max)
    bound = (oracle.met_bound(model, np.arange(1, n_max + 1))
             if model.epsilon_bounds is not None else [None] * n_max)
    oracle.write_met_csv(prof, bound, cfg.output_dir)
    r_eta, r_h = oracle.eigen_residuals(op, eig)
    _write_json(os.path.join(cfg.output_dir, "summary.json"), {
        "model": _model_summary(cfg), "grid_size": op.size, "scheme": op.scheme,
        "lambda_star": eig.lambda_star, "iterations": eig.iterations,
        "residual_eta": r_eta, "residual_h": r_h, "rho": eig.rho,
        "bellman_residual": bellman.bellman_residual(eig, op),
        "wall_clock_seconds": time.perf_counter() - t0})
    return EXIT_OK


def cmd_bellman(cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    model = make_model(cfg)
    x = cfg.eval_points()
    h, lam, _, m = _particle_h(cfg, model, x)
    est = bellman.ValueFunctionEstimate(x, -np.log(h), -lam, cfg.int("N"),
                                        cfg.int("two_n", 2) // 2, m, cfg.int("seeds"))
    summary = {"model": _model_summary(cfg), "N": est.N, "n": est.n, "m": m,
               "varsigma_hat": est.varsigma_hat, "seed": cfg.int("seed", 0),
               "discontinuities": bellman.discontinuities(x, est.v_hat).tolist()}
    v_or = None
    if cfg.with_oracle:
        op, eig = solve_oracle(model, cfg)
        v_or = -np.log(oracle.extend_h(op, eig, x))
        summary["varsigma_oracle"] = -eig.log_lambda_star
        summary["bellman_residual"] = bellman.bellman_residual(eig, op)
    os.makedirs(cfg.output_dir, exist_ok=True)
    bellman.write_value_function_csv(est, cfg.output_dir, v_or)
    summary["wall_clock_seconds"] = time.perf_counter() - t0
    _write_json(os.path.join(cfg.output_dir, "summary.json"), summary)
    return EXIT_OK


def cmd_rare_event(cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    if cfg.get("model") not in ("rare", "unit"):
        raise ConfigError("key 'model': rare-event needs model 'rare'")
    model = make_model(cfg)
    N, two_n = cfg.int("N"), cfg.int("two_n", 2)
    ms, deltas = cfg.ints("m_values"), cfg.floats("deltas")
    if not ms or not deltas:
        raise ConfigError("keys 'm_values' and 'deltas' must be nonempty")
    if max(ms) > two_n // 2:
        raise ConfigError("key 'm_values': chain length exceeds two_n / 2")
    reps, seed, x0 = cfg.int("replications", 2), cfg.int("seed", 0), cfg.float("x0")
    alpha = model.alpha
    rows = []
    vals = rare_event.conditional_is_replicates(model, N, two_n, ms, deltas, reps, x0,
                                                seed, cfg.threads, initial_law(cfg))
    for a, m in enumerate(ms):
        for b, d in enumerate(deltas):
            mean, rv = rare_event.mean_relvar(vals[:, a, b])
            rows.append(rare_event.Estimate("conditional", m, d, alpha, mean, rv, reps))
    base = models.rare_event_model(model.c, 0.0)
    for m in ms:
        for d in deltas:
            mean, rv = rare_event.naive_is(base, m, d, reps, x0, seed)
            rows.append(rare_event.Estimate("naive", m, d, 0.0, mean, rv, reps))
    if cfg.with_oracle:
        for m in ms:
            for d in deltas:
                # m = 0: the empty sum never exceeds 0
                lo, hi = ((0.0, 0.0) if m == 0 else
                          oracle.brute_force_deviation_prob(base, m, d, x0, 2048))
                rows.append(rare_event.Estimate("oracle_lower", m, d, 0.0, lo, float("nan"), 0))
                rows.append(rare_event.Estimate("oracle_upper", m, d, 0.0, hi, float("nan"), 0))
    sweep = cfg.floats("alphas")
    for a_ in sweep:
        if a_ == alpha:
            continue
        v = rare_event.conditional_is_replicates(models.rare_event_model(model.c, a_), N,
                                                 two_n, ms, deltas, reps, x0, seed,
                                                 cfg.threads, initial_law(cfg))
        for i, m in enumerate(ms):
            for j, d in enumerate(deltas):
                mean, rv = rare_event.mean_relvar(v[:, i, j])
                rows.append(rare_event.Estimate("conditional", m, d, a_, mean, rv, reps))
    os.makedirs(cfg.output_dir, exist_ok=True)
    rare_event.write_rare_event_csv(rows, cfg.output_dir)
    grid = sorted(set(sweep) | {0.0, alpha}) if sweep else list(np.linspace(-16, 16, 65))
    curve = rare_event.lambda_curve(partial(models.rare_event_model, model.c), grid, N,
                                    two_n // 2, cfg.int("lambda_seeds"), seed,
                                    initial_law(cfg), cfg.threads)
    rare_event.write_lambda_curve_csv(curve, cfg.output_dir)
    ts = cfg.floats("t_values") or list(np.round(np.linspace(-0.8, 0.8, 17), 10))
    I, arg = rare_event.rate_function(curve, np.asarray(ts))
    rare_event.write_rate_function_csv(ts, I, arg, cfg.output_dir)
    _write_json(os.path.join(cfg.output_dir, "summary.json"), {
        "model": _model_summary(cfg), "N": N, "n": two_n // 2, "replications": reps,
        "seed": seed, "wall_clock_seconds": time.perf_counter() - t0})
    return EXIT_OK


# ---------------------------------------------------------------------------
# validation


def _check(name, value, bound, passed):
    return {"name": name, "value": float(value), "bound": float(bound), "passed": bool(passed)}


def identity_checks(traj, back, tol=1e-10):
    """Exact identities of a particle run: layer means of ``h``, twisted row
    sums and the particle product formula."""
    out = []
    dev = float(np.max(np.abs(back.normalizers - 1.0)))
    out.append(_check("eta_p(h_p) = 1", dev, tol, dev <= tol))
    n = back.n
    xs = traj.model.space.grid(7)
    worst = 0.0
    for p in range(n + 1, 2 * n + 1, max(1, n // 10)):
        for x in xs:
            worst = max(worst, abs(bw.twisted_row(traj, back, p, x).probabilities.sum() - 1))
    out.append(_check("twisted rows sum to 1", worst, tol, worst <= tol))
    worst = 0.0
    for p in range(0, n, max(1, n // 5)):
        lw = bw.semigroup_log_weights(traj, traj.layer(p), n, start=p)
        lhs = log_sum_exp(lw)
        rhs = float(np.sum(traj.log_lambda[p:n]))
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(rhs)))
    out.append(_check("log prod lambda = log eta_p Q_{p,n}(1)", worst, tol, worst <= tol))
    recompute = max(abs(np.log(np.mean(np.exp(traj.model.log_potential(traj.layer(p)))))
                        - traj.log_lambda[p]) for p in range(traj.horizon + 1))
    out.append(_check("lambda_p = eta_p(G)", recompute, 1e-12, recompute <= 1e-12))
    return out


def cmd_validate(cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    model = make_model(cfg)
    N, two_n = cfg.int("N"), cfg.int("two_n", 2)
    seed = cfg.int("seed", 0)
    traj = forward.run_forward(model, N, two_n, initial_law(cfg), seed)
    back = bw.run_backward(traj)
    corrupt = cfg.get("corrupt")
    if corrupt == "h":
        back = back.scaled(10.0)
    elif corrupt != "none":
        raise ConfigError("key 'corrupt': expected 'none' or 'h'")
    checks = identity_checks(traj, back)
    if model.epsilon_bounds is not None:
        rep = forward.pathwise_ratio_diagnostic(
            traj, back, model.space.grid(150),
            layers=range(back.n, 2 * back.n, max(1, back.n // 20)))
        checks.append(_check("h ratio upper bound", rep.h_max, rep.upper_bound,
                             rep.h_max <= rep.upper_bound))
        checks.append(_check("h ratio lower bound", rep.h_min, rep.lower_bound,
                             rep.h_min >= rep.lower_bound))
    if cfg.with_oracle:
        op, eig = solve_oracle(model, cfg)
        r_eta, r_h = oracle.eigen_residuals(op, eig)
        tol = cfg.float("tol")
        checks.append(_check("oracle eta residual", r_eta, 10 * tol * eig.lambda_star,
                             r_eta <= 10 * tol * eig.lambda_star))
        checks.append(_check("oracle h residual", r_h, 10 * tol * eig.lambda_star,
                             r_h <= 10 * tol * eig.lambda_star))
        stat = float(np.abs(eig.pi_star @ eig.p_star - eig.pi_star).sum())
        checks.append(_check("pi* P* = pi*", stat, 1e-8, stat <= 1e-8))
    report = {"model": _model_summary(cfg), "N": N, "two_n": two_n, "seed": seed,
              "corrupt": corrupt, "checks": checks}
    os.makedirs(cfg.output_dir, exist_ok=True)
    if cfg.flag("scaling"):
        report["scaling"] = _scaling(cfg, model)
    report["passed"] = all(c["passed"] for c in checks)
    report["wall_clock_seconds"] = time.perf_counter() - t0
    _write_json(os.path.join(cfg.output_dir, "validate.json"), report)
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']}: "
              f"{c['value']:.3e} (bound {c['bound']:.3e})")
    return EXIT_OK if report["passed"] else EXIT_INVARIANT


def _scaling_job(args):
    model, N, two_n, initial, seed, r, x = args
    traj = forward.run_forward(model, N, two_n, initial, seed, replicate=r)
    return bw.window_average_h(traj, bw.run_backward(traj), x)


def _scaling(cfg, model):
    """RMSE of the window-averaged ``h`` at the interval midpoint vs the oracle."""
    x = 0.5 * (model.space.lower + model.space.upper)
    op, eig = solve_oracle(model, cfg)
    ref = float(oracle.extend_h(op, eig, x)[0])
    Ns, seeds = cfg.ints("scaling_N"), cfg.int("scaling_seeds", 2)
    two_n, seed = cfg.int("two_n", 2), cfg.int("seed", 0)
    rmse = []
    for N in Ns:
        jobs = [(model, N, two_n, initial_law(cfg), seed, r, x) for r in range(seeds)]
        est = np.array(_map(_scaling_job, jobs, cfg.threads))
        rmse.append(float(np.sqrt(np.mean((est - ref) ** 2))))
    slope = float(np.polyfit(np.log(Ns), np.log(rmse), 1)[0])
    with open(os.path.join(cfg.output_dir, "scaling.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "rmse"])
        for N, r in zip(Ns, rmse):
            w.writerow([N, repr(r)])
    return {"x": x, "N": Ns, "rmse": rmse, "slope": slope}


COMMANDS = {"eigen": cmd_eigen, "oracle": cmd_oracle, "bellman": cmd_bellman,
            "rare-event": cmd_rare_event, "validate": cmd_validate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = build_config(argv)
        return COMMANDS[cfg.subcommand](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantError as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PfEigenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
