"""Subcommand orchestration: build inputs from a config, run, write outputs.

Each subcommand returns ``{filename: ResultRecord}``; :func:`run_subcommand`
writes them atomically and maps errors to exit codes.
"""

from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
import sys

import numpy as np

from ..auxwalk import build_params
from ..envlaw import Environment, make_tilt_mixture, zero_disorder
from ..errors import ConfigError, ConvergenceError, RwreError
from ..ldp import AnnealedLogMGF, QuenchedLogMGF, circle_grid, rate_gap_grid
from ..pathexact import lambda_q_estimate_dp, verify_identity_P3
from ..regen import (
    estimate_c_bar,
    estimate_exp_moment_tau,
    sample_cycles,
    scan_gamma0,
    solve_lambda_bar_a,
)
from ..seeding import STREAM_ENV, STREAM_MISC, derive_seed, seed_stream
from .persist import ResultRecord, csv_body, write_records

SUBCOMMANDS = ("construct", "verify-identity", "mgf", "regen", "rate", "sweep")

EXIT_OK = 0
EXIT_INTERNAL = 5


@contextmanager
def worker_map(workers):
    """``map`` over a process pool of ``workers`` (builtin ``map`` for one worker)."""
    if workers <= 1:
        yield map
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield pool.map


def make_law(config, epsilon=None):
    eps = config["law.epsilon"] if epsilon is None else epsilon
    if config["law.family"] == "zero" or eps == 0.0:
        return zero_disorder(config.alpha)
    return make_tilt_mixture(config.alpha, eps, config["law.atoms"], config["law.seed"])


def _provenance(config, **extra):
    out = {"master_seed": config["mc.seed"], "workers": config["mc.workers"]}
    out.update(extra)
    return out


def _fmt_vec(v):
    return [float(c) for c in v]


# -- subcommands ---------------------------------------------------------------

def cmd_construct(config):
    params = build_params(config.y, config.alpha)
    record = params.to_record() + "\n"
    sys.stdout.write(record)
    return {"construct.txt": ResultRecord("aux_walk_params", record)}


def _random_tuple(rng, d):
    v = rng.standard_normal(d)
    y = rng.uniform(0.05, 0.9) * v / np.abs(v).sum()
    kappa = 0.02
    alpha = kappa + (1 - 2 * d * kappa) * rng.dirichlet(np.full(2 * d, 2.0))
    alpha /= alpha.sum()
    return y, alpha


def cmd_verify_identity(config):
    d = config.d
    rng = seed_stream(config["mc.seed"], 0, STREAM_MISC)
    n = config["identity.n"]
    theta_cfg = config["identity.theta"]
    rows, lines = [], []
    for trial in range(config["identity.trials"]):
        y, alpha = _random_tuple(rng, d)
        params = build_params(y, alpha)
        law = make_tilt_mixture(alpha, config["law.epsilon"], config["law.atoms"], int(rng.integers(2**31)))
        env = Environment(law, int(rng.integers(2**62)))
        if trial == 0:
            theta = -params.theta_tilt
        elif theta_cfg != "auto":
            theta = np.asarray(theta_cfg, dtype=float)
        else:
            theta = rng.uniform(-0.5, 0.5, d)
        rep = verify_identity_P3(params, env, law, theta, n)
        rows.append([trial, n, *_fmt_vec(theta), rep.lhs_q, rep.rhs_q, rep.lhs_a, rep.rhs_a,
                     rep.max_rel_err, "pass" if rep.passed else "fail"])
        lines.append(f"{trial:4d}  n={n}  rel_err={rep.max_rel_err:.3e}  {'pass' if rep.passed else 'FAIL'}")
    failed = sum(r[-1] == "fail" for r in rows)
    sys.stdout.write("\n".join(lines) + f"\n{len(rows) - failed}/{len(rows)} passed\n")
    cols = ["trial", "n", *[f"theta{i + 1}" for i in range(d)], "lhs_q", "rhs_q", "lhs_a", "rhs_a",
            "max_rel_err", "status"]
    rec = {"verify_identity.csv": ResultRecord("identity_table", csv_body(cols, rows), _provenance(config))}
    if failed:
        write_records(config, rec)
        raise RwreError(f"{failed} identity checks failed")
    return rec


def cmd_mgf(config, map_fn=map):
    d = config.d
    params = build_params(config.y, config.alpha)
    law = make_law(config)
    theta = np.zeros(d) if config["mgf.theta"] == "auto" else np.asarray(config["mgf.theta"], dtype=float)
    mode = config["mgf.mode"]
    rows = []
    if mode in ("quenched", "both"):
        env = Environment(law, derive_seed(config["mc.seed"], STREAM_ENV, 0))
        n_list = sorted(set(config["mgf.n_list"]))
        est = lambda_q_estimate_dp(env, theta + params.theta_tilt, n_list, config["dp.memory_cap"])
        for i, n in enumerate(est.n):
            rows.append([int(n), "quenched", *_fmt_vec(theta), float(params.log_sqrt_C + est.cesaro[i]),
                         float(params.log_sqrt_C + est.window[i])])
    if mode in ("annealed", "both"):
        cycles = sample_cycles(params, law, config["mc.samples"], config["mc.seed"], config.confirm_window,
                               config["mc.unit_size"], map_fn=map_fn)
        r = solve_lambda_bar_a(params, law, theta, cycles, n_boot=0)
        rows.append([len(cycles), "annealed", *_fmt_vec(theta), r.value, r.value])
    cols = ["n", "mode", *[f"theta{i + 1}" for i in range(d)], "value", "increment"]
    return {"mgf.csv": ResultRecord("mgf_table", csv_body(cols, rows), _provenance(config))}


def cmd_regen(config, map_fn=map):
    d = config.d
    params = build_params(config.y, config.alpha)
    law = make_law(config)
    seed = config["mc.seed"]
    cycles = sample_cycles(params, law, config["mc.samples"], seed, config.confirm_window,
                           config["mc.unit_size"], map_fn=map_fn)
    n = len(cycles)
    cols = ["cycle", "tau", *[f"disp{i + 1}" for i in range(d)], "log_xi"]
    cyc_rows = [[i, int(cycles.tau[i]), *[int(c) for c in cycles.displacement[i]], float(cycles.log_xi[i])]
                for i in range(n)]
    bias = cycles.bias_bound
    est = solve_lambda_bar_a(params, law, np.zeros(d), cycles, n_boot=config["mc.bootstrap"], seed=seed)
    tau = cycles.tau.astype(float)
    rows = [["mean_tau", float(tau.mean()), float(tau.std(ddof=1) / np.sqrt(n)), n, bias]]
    vel = cycles.displacement.sum(axis=0) / tau.sum()
    for i in range(d):
        rows.append([f"velocity{i + 1}", float(vel[i]), float("nan"), n, bias])
    rows.append(["lambda_bar_a_0", est.value, est.stderr, n, bias])
    for i in range(d):
        rows.append([f"grad_lambda_bar_a_0_{i + 1}", float(est.gradient[i]), float(est.gradient_stderr[i]), n, bias])
    rows.append(["hessian_min_eig_0", est.min_eigenvalue, est.min_eigenvalue_stderr, n, bias])
    n_aux = min(config["mc.samples"], 100000)
    cb = estimate_c_bar(params, n_aux, seed, config.confirm_window)
    rows.append(["c_bar", cb.p_hat, cb.stderr, n_aux, bias])
    gammas = config["regen.gamma_scan"]
    if gammas:
        moments = estimate_exp_moment_tau(params, list(gammas), n_aux, seed, config.confirm_window)
        for m in moments:
            rows.append([f"exp_moment_tau_gamma={m.gamma!r}", m.mean, m.stderr, m.n_samples, bias])
        rows.append(["gamma0_hat", scan_gamma0(moments), float("nan"), n_aux, bias])
    prov = _provenance(config, confirm_window=cycles.confirm_window, violations=cycles.violations)
    return {
        "regen_cycles.csv": ResultRecord("cycle_summary", csv_body(cols, cyc_rows), prov),
        "regen_estimators.csv": ResultRecord("estimator_table",
                                             csv_body(["name", "value", "stderr", "n_samples", "bias_bound"], rows),
                                             prov),
    }


def _estimators(config):
    annealed = AnnealedLogMGF(y=config.y, n_cycles=config["mc.samples"], seed=config["mc.seed"],
                              confirm_window=config.confirm_window, n_boot=config["mc.bootstrap"],
                              tol=config["ldp.tol"], max_iter=config["ldp.max_iter"],
                              unit_size=config["mc.unit_size"])
    quenched = QuenchedLogMGF(y=config.y, n=config["dp.n_max"], n_envs=config["dp.envs"], seed=config["mc.seed"],
                              memory_cap=config["dp.memory_cap"], tol=config["ldp.tol"],
                              max_iter=config["ldp.max_iter"])
    return annealed, quenched


def rate_records(config, records, kind):
    d = config.d
    cols = ["epsilon", *[f"x{i + 1}" for i in range(d)], "I_q", "I_q_err", "I_a", "I_a_err", "gap", "gap_err",
            *[f"theta{i + 1}" for i in range(d)], "seeds"]
    rows, long_rows = [], []
    for k, r in enumerate(records):
        rows.append([r.epsilon, *_fmt_vec(r.x), r.I_q_hat, r.I_q_err, r.I_a_hat, r.I_a_err, r.gap, r.gap_stderr,
                     *_fmt_vec(r.theta_a), r.seeds])
        quantities = [("I_q", r.I_q_hat, r.I_q_err), ("I_a", r.I_a_hat, r.I_a_err), ("gap", r.gap, r.gap_stderr)]
        quantities += [(f"theta_q{i + 1}", float(r.theta_q[i]), float("nan")) for i in range(d)]
        quantities += [(f"theta_a{i + 1}", float(r.theta_a[i]), float("nan")) for i in range(d)]
        for name, value, err in quantities:
            long_rows.append([r.epsilon, k, *_fmt_vec(r.x), name, value, err, r.status])
    long_cols = ["epsilon", "point", *[f"x{i + 1}" for i in range(d)], "quantity", "value", "stderr", "status"]
    prov = _provenance(config)
    return {
        f"{kind}.csv": ResultRecord(f"{kind}_table", csv_body(cols, rows), prov),
        f"{kind}_long.csv": ResultRecord(f"{kind}_long", csv_body(long_cols, long_rows), prov),
    }


def _run_grid(config, epsilons, points, map_fn):
    annealed, quenched = _estimators(config)
    return rate_gap_grid(config.y, config.alpha, epsilons, points, annealed, quenched,
                         config["law.atoms"], config["law.seed"], map_fn=map_fn)


def cmd_rate(config, map_fn=map):
    records = _run_grid(config, [config["law.epsilon"]], [config.rate_x], map_fn)
    _raise_if_failed(records)
    return rate_records(config, records, "rate")


def cmd_sweep(config, map_fn=map):
    epsilons = config["sweep.epsilons"]
    if not epsilons:
        raise ConfigError("sweep.epsilons must be a nonempty list")
    points = circle_grid(config.y, config["sweep.radius"], config["sweep.count"])
    records = _run_grid(config, epsilons, points, map_fn)
    return rate_records(config, records, "sweep")


def _raise_if_failed(records):
    bad = [r for r in records if r.status != "ok"]
    if bad:
        raise ConvergenceError(bad[0].status)


_DISPATCH = {
    "construct": lambda c, m: cmd_construct(c),
    "verify-identity": lambda c, m: cmd_verify_identity(c),
    "mgf": cmd_mgf,
    "regen": cmd_regen,
    "rate": cmd_rate,
    "sweep": cmd_sweep,
}


def execute(name, config):
    """Run subcommand ``name`` and write its outputs; returns the written paths (raises on error)."""
    if name not in _DISPATCH:
        raise ConfigError(f"unknown subcommand {name!r}; choose from {', '.join(SUBCOMMANDS)}")
    with worker_map(config["mc.workers"]) as map_fn:
        records = _DISPATCH[name](config, map_fn)
    return write_records(config, records)


def run_subcommand(name, config, flags=None):
    """Apply ``flags`` (key -> text) over ``config``, run ``name`` and return the exit status."""
    try:
        if flags:
            config = config.with_overrides(flags)
        execute(name, config)
        return EXIT_OK
    except RwreError as exc:
        _report(exc)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001  the CLI must map every failure to a code
        _report(exc)
        return EXIT_INTERNAL


def _report(exc):
    violations = getattr(exc, "violations", None)
    if violations:
        for v in violations:
            print(f"error: {v}", file=sys.stderr)
    else:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
