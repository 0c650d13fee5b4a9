"""Command-line entry point: ``ofdma-delay <command> ...``."""
from __future__ import annotations

import argparse
import os
import sys
import tempfile
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, SystemConfig, dump_config, load_config
from .oracle import (EnumerationTooLarge, InvalidRegimeError, NotConvergedError, build_csi_alphabet,
                     per_user_poisson_solve, relative_value_iteration, verify_additivity)
from .policy import all_states

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
POLICY_CHOICES = ("decomposed", "optimal", "mlwdf", "round_robin", "zero")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def write_atomic(path: Path, text: str):
    """Write via a temp file in the same directory and rename over ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError as exc:
        raise UsageError(f"not a number list: {text!r}") from exc


def _ints(text: str) -> list[int]:
    out = []
    for part in text.replace(",", " ").split():
        if "-" in part[1:]:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return out


# --------------------------------------------------------------------- formatting

def format_joint_table(v: np.ndarray, K: int, N_Q: int, header: dict | None = None) -> str:
    lines = [f"# {k}={val}" for k, val in (header or {}).items()]
    lines.append("\t".join(["state_index"] + [f"q_{k + 1}" for k in range(K)] + ["v_tilde"]))
    for i, q in enumerate(all_states(K, N_Q)):
        lines.append("\t".join([str(i)] + [str(int(x)) for x in q] + [repr(float(v[i]))]))
    return "\n".join(lines) + "\n"


def format_user_tables(v: np.ndarray, thetas=None) -> str:
    lines = ["user\tq\tv" + ("\ttheta" if thetas is not None else "")]
    for k, row in enumerate(v):
        for q, val in enumerate(row):
            extra = f"\t{thetas[k]!r}" if thetas is not None else ""
            lines.append(f"{k + 1}\t{q}\t{float(val)!r}{extra}")
    return "\n".join(lines) + "\n"


def read_table(path: Path, config: SystemConfig) -> np.ndarray:
    """Read a table written by ``train`` or ``oracle`` (joint or per-user layout)."""
    rows = [ln.split("\t") for ln in path.read_text().splitlines() if ln and not ln.startswith("#")]
    header, body = rows[0], rows[1:]
    if header[0] == "user":
        out = np.zeros((config.K, config.N_Q + 1))
        for r in body:
            out[int(r[0]) - 1, int(r[1])] = float(r[2])
        return out
    if header[0] == "state_index":
        out = np.zeros(config.n_states)
        for r in body:
            out[int(r[0])] = float(r[-1])
        return out
    raise ConfigError(f"{path}: unrecognised table layout")


GNUPLOT_SWEEP = """# gnuplot script for {table}
set datafile separator "\\t"
set key autotitle columnhead
set xlabel "SNR per subband (dB)"
set ylabel "weighted delay (s)"
set logscale y
plot for [p in "{policies}"] "{table}" using (strcol(1) eq p ? $2 : 1/0):(column("weighted_delay")) \\
     smooth unique with linespoints title p
"""

GNUPLOT_TRACE = """# gnuplot script for {table}
set datafile separator "\\t"
set xlabel "regenerative period"
set ylabel "mean potential"
set y2label "running average reward"
set y2tics
plot "{table}" using 2:8 with lines title "mean potential", \\
     "{table}" using 2:6 axes x1y2 with lines title "running average reward"
"""


# --------------------------------------------------------------------- commands

def _policy(args, config):
    from .sim import PolicySpec, resolve_policy
    table = None
    if getattr(args, "table", None):
        table = read_table(Path(args.table), config)
    spec = PolicySpec(args.policy, table=table, gamma=args.gamma, source=args.table_source)
    if args.calibrate:
        from .calibrate import calibrate_policy
        return calibrate_policy(spec, config, seed=args.calibration_seed)
    return resolve_policy(spec, config, seed=args.seed)


def cmd_simulate(args, config, out):
    from .sim import Simulator, SweepRow, format_table
    policy = _policy(args, config)
    sim = Simulator(config, policy, seed=args.seed)
    sim.run(args.warmup)
    sim.reset_metrics()
    sim.run(args.slots)
    m = sim.metrics()
    row = SweepRow(policy.label, config.snr_db, args.seed, sim.gamma, m)
    write_atomic(out / "metrics.tsv", format_table([row], config.K))
    print(f"policy={policy.label} gamma={sim.gamma:.6g} avg_power={m.avg_power:.6g} "
          f"weighted_delay={m.weighted_delay:.6g} violations={m.violations}")


def cmd_train(args, config, out):
    from .online import run_algorithm1, run_algorithm2
    runner = run_algorithm1 if args.algorithm == "joint" else run_algorithm2
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = runner(config, seed=args.seed, max_slots=args.max_slots, initial=args.init)
    if args.algorithm == "joint":
        text = format_joint_table(res.table, config.K, config.N_Q)
    else:
        text = format_user_tables(res.table)
    write_atomic(out / "table.tsv", text)
    write_atomic(out / "trace.tsv", res.export_trace())
    write_atomic(out / "trace.gp", GNUPLOT_TRACE.format(table="trace.tsv"))
    print(f"status={res.status} converged={res.converged} periods={res.periods.tolist()} slots={res.slots}")
    if not res.converged:
        print(f"warning: stopped by {res.status}", file=sys.stderr)


def cmd_oracle(args, config, out):
    alphabet = build_csi_alphabet(config.csi_levels)
    joint = relative_value_iteration(config, alphabet, rule=args.rule, epsilon=args.epsilon)
    header = {"theta": repr(joint.theta), "iterations": joint.iterations, "residual": repr(joint.residual),
              "rule": args.rule}
    write_atomic(out / "potentials.tsv", format_joint_table(joint.v_tilde, config.K, config.N_Q, header))
    users = [per_user_poisson_solve(k, alphabet, config) for k in range(config.K)]
    write_atomic(out / "user_potentials.tsv",
                 format_user_tables(np.array([u.v for u in users]), [u.theta for u in users]))
    rep = verify_additivity(config, alphabet)
    write_atomic(out / "additivity.tsv",
                 "max_potential_gap\ttheta_gap\n"
                 f"{rep.max_potential_gap!r}\t{rep.theta_gap!r}\n")
    print(f"theta={joint.theta!r} iterations={joint.iterations} residual={joint.residual:.3g} "
          f"sum_theta_k={sum(u.theta for u in users)!r} additivity_gap={rep.max_potential_gap:.3g}")


def cmd_sweep(args, config, out):
    from .sim import ExperimentSpec, PolicySpec, format_table, sweep
    policies = tuple(PolicySpec(p, source=args.table_source) for p in args.policies)
    spec = ExperimentSpec(
        config=config, policies=policies, snr_list=tuple(args.snr_list or ()),
        seeds=tuple(args.seeds), warmup_slots=args.warmup, measure_slots=args.slots,
        calibrate=args.calibrate, calibration_seed=args.calibration_seed,
        calibration_slots=args.calibration_slots,
    )
    rows = sweep(spec, jobs=args.jobs)
    write_atomic(out / "sweep.tsv", format_table(rows, config.K))
    write_atomic(out / "sweep.gp", GNUPLOT_SWEEP.format(table="sweep.tsv", policies=" ".join(args.policies)))
    failed = [r for r in rows if r.error]
    for r in failed:
        print(f"cell policy={r.policy} snr_db={r.snr_db} seed={r.seed} error={r.error!r}", file=sys.stderr)
    print(f"cells={len(rows)} failed={len(failed)}")


def cmd_convergence(args, config, out):
    from .sim import convergence_trace
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = convergence_trace(config, args.algorithm, seed=args.seed, max_slots=args.max_slots,
                                initial=args.init)
    write_atomic(out / "trace.tsv", res.export_trace())
    write_atomic(out / "convergence.gp", GNUPLOT_TRACE.format(table="trace.tsv"))
    stable = [res.stable_period(config.solver.delta_v, k) for k in range(len(res.periods))]
    m = res.metrics
    write_atomic(out / "summary.tsv",
                 "status\tslots\tstable_period_max\tavg_queue\tweighted_delay\n"
                 f"{res.status}\t{res.slots}\t{max((s or -1) for s in stable)}\t"
                 f"{float(np.mean(m.avg_queue))!r}\t{m.weighted_delay!r}\n")
    print(f"status={res.status} stable_periods={stable}")


def cmd_compare(args, config, inp):
    from .sim import paired_comparison, parse_table
    path = inp / "sweep.tsv"
    try:
        records = parse_table(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    policies = sorted({r["policy"] for r in records})
    base = args.reference or policies[0]
    if base not in policies:
        raise ConfigError(f"reference policy {base!r} not in {policies}")
    lines = ["policy\treference\tsnr_db\tseeds\twins\tmean_delta\tp_value"]
    for other in policies:
        if other == base:
            continue
        for c in paired_comparison(records, base, other):
            mean = float(np.mean(c.deltas)) if c.deltas.size else float("nan")
            lines.append(f"{base}\t{other}\t{c.snr_db}\t{c.deltas.size}\t{c.wins}\t{mean!r}\t{c.p_value!r}")
    text = "\n".join(lines) + "\n"
    write_atomic(inp / "compare.tsv", text)
    sys.stdout.write(text)


# --------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ofdma-delay", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, needs_out=True):
        p.add_argument("--config", required=True, help="system config file (.cfg)")
        if needs_out:
            p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="replication seed (default: config rng_seed)")

    def policy_flags(p):
        p.add_argument("--table-source", choices=("oracle", "learn", "fixed"), default="oracle",
                       help="where queue-aware policies get potentials when no --table is given")
        p.add_argument("--calibrate", action=argparse.BooleanOptionalAction, default=True,
                       help="bisect gamma so average power meets P_0")
        p.add_argument("--calibration-seed", type=int, default=10_000, help="seed for calibration runs")

    p = sub.add_parser("simulate", help="run one replication")
    common(p)
    p.add_argument("--policy", choices=POLICY_CHOICES, default="decomposed", help="allocation policy")
    p.add_argument("--table", help="potential table file (from train or oracle)")
    p.add_argument("--gamma", type=float, default=None, help="power price override")
    p.add_argument("--slots", type=int, default=1_000_000, help="measured slots")
    p.add_argument("--warmup", type=int, default=100_000, help="warmup slots")
    policy_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="learn potentials online")
    common(p)
    p.add_argument("--algorithm", choices=("joint", "decomposed"), default="decomposed",
                   help="joint table or per-user tables")
    p.add_argument("--max-slots", type=int, default=50_000_000, help="slot budget")
    p.add_argument("--init", choices=("zeros", "ramp"), default="zeros",
                   help="starting potentials; ramp charges one inter-arrival of holding cost per packet")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("oracle", help="exact solves on the quantised model")
    common(p)
    p.add_argument("--rule", choices=("optimal", "csi_only"), default="optimal",
                   help="subcarrier rule inside the joint solve")
    p.add_argument("--epsilon", type=float, default=1e-8, help="span stopping tolerance")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("sweep", help="SNR x seed x policy grid")
    common(p)
    p.add_argument("--snr-list", type=_floats, default=None, help="SNR points in dB, e.g. '24 27 30'")
    p.add_argument("--seeds", type=_ints, default=[0], help="seeds, e.g. '0-9' or '1,2,5'")
    p.add_argument("--policies", type=lambda s: s.replace(",", " ").split(),
                   default=["decomposed", "mlwdf", "round_robin"], help="policy list")
    p.add_argument("--slots", type=int, default=1_000_000, help="measured slots per cell")
    p.add_argument("--warmup", type=int, default=100_000, help="warmup slots per cell")
    p.add_argument("--calibration-slots", type=int, default=200_000, help="slots per calibration probe")
    p.add_argument("--jobs", type=int, default=1, help="parallel cells")
    policy_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("convergence", help="learning trace for plotting")
    common(p)
    p.add_argument("--algorithm", choices=("joint", "decomposed"), default="decomposed",
                   help="joint table or per-user tables")
    p.add_argument("--max-slots", type=int, default=10_000_000, help="slot budget")
    p.add_argument("--init", choices=("zeros", "ramp"), default="zeros",
                   help="starting potentials; ramp charges one inter-arrival of holding cost per packet")
    p.set_defaults(func=cmd_convergence)

    p = sub.add_parser("compare", help="paired statistics from a sweep directory")
    p.add_argument("--in", dest="inp", required=True, type=Path, help="sweep output directory")
    p.add_argument("--reference", default=None, help="policy compared against all others")
    p.set_defaults(func=cmd_compare)
    return parser


def _fail(code: int, exc: BaseException) -> int:
    msg = str(exc).replace("\n", " ").replace('"', "'")
    print(f'error code={code} class={type(exc).__name__} message="{msg}"', file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_VALIDATION, exc)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        if args.command == "compare":
            args.func(args, None, args.inp)
            return EXIT_OK
        config = load_config(args.config)
        if args.seed is None:
            args.seed = config.rng_seed
        if args.command == "sweep" and not args.policies:
            raise UsageError("empty policy list")
        args.func(args, config, args.out)
        return EXIT_OK
    except (UsageError, ConfigError, InvalidRegimeError, EnumerationTooLarge) as exc:
        return _fail(EXIT_VALIDATION, exc)
    except (NotConvergedError, RuntimeError, ValueError, ArithmeticError, OSError) as exc:
        return _fail(EXIT_RUNTIME, exc)


if __name__ == "__main__":
    sys.exit(main())
