"""Command-line front end: run experiments, verify against the built-in
oracles, resume from checkpoints, and benchmark iteration cost.

Configuration is an INI file with three sections::

    [model]
    kind = tfi            ; tfi | heisenberg
    lx = 4
    ly = 4
    g = 3.5               ; transverse field (tfi only)

    [run]
    p = 2
    chi = 12
    eta = 20
    tau = 0.1
    iterations = 50
    seed = 0              ; optional, default 0
    zip_tol = 1e-6        ; optional
    disentangler_iters = 10   ; optional, 0 disables the disentangler
    energy_period = 1     ; optional
    checkpoint_period = 10    ; optional
    energy_cap_factor = 1     ; optional, cap multiplier for energy sweeps

    [output]
    directory = out       ; optional
    formats = csv,json    ; optional
    oracle = true         ; optional: compare against exact diagonalization
    deterministic = false ; optional

Unknown keys or sections are hard errors.  Flags ``--config``, ``--out``,
``--seed``, ``--deterministic``, ``--oracle-cap`` override the file; the
environment variables ``BLOCKPEPS_CONFIG``, ``BLOCKPEPS_OUT``,
``BLOCKPEPS_SEED``, ``BLOCKPEPS_DETERMINISTIC`` and ``BLOCKPEPS_ORACLE_CAP``
mirror those flags (flags win over environment, environment over file).

Exit codes: 0 success / all checks passed, 1 verify-check failure, 2 invalid
configuration or lock conflict, 3 mid-run invariant failure (a diagnostic
snapshot path is printed), 4 verify beyond the oracle capacity, 5 snapshot
version mismatch or corruption on resume.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import os
import sys
import time
from dataclasses import dataclass, replace

import numpy as np
import scipy

from . import __version__, evolve, exact, isopeps, models

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_BAD_CONFIG = 2
EXIT_INVARIANT = 3
EXIT_CAPACITY = 4
EXIT_SNAPSHOT = 5

ENV_PREFIX = "BLOCKPEPS_"

_SCHEMA = {
    "model": {"kind": str, "lx": int, "ly": int, "g": float},
    "run": {"p": int, "chi": int, "eta": int, "tau": float,
            "iterations": int, "seed": int, "zip_tol": float,
            "disentangler_iters": int, "energy_period": int,
            "checkpoint_period": int, "energy_cap_factor": int},
    "output": {"directory": str, "formats": str, "oracle": bool,
               "deterministic": bool},
}
_REQUIRED = {"model": ("kind", "lx", "ly"),
             "run": ("p", "chi", "eta", "tau", "iterations")}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """A RunConfig plus output plumbing."""

    run: evolve.RunConfig
    out_dir: str = "out"
    formats: tuple = ("csv", "json")
    oracle: bool = True
    deterministic: bool = False
    oracle_cap: int = exact.DEFAULT_DIM_CAP


def _line_of(text: str, needle: str) -> int:
    for n, line in enumerate(text.splitlines(), start=1):
        stripped = line.split(";")[0].split("#")[0]
        if stripped.strip().lower().startswith(needle.lower()):
            return n
    return 0


def _parse_bool(raw: str, where: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"{where}: '{raw}' is not a boolean")


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse and validate an INI configuration; unknown keys are errors."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e
    values: dict = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            line = _line_of(text, f"[{section}]")
            raise ConfigError(f"line {line}: unknown section [{section}]")
        for key, raw in cp[section].items():
            if key not in _SCHEMA[section]:
                line = _line_of(text, key)
                raise ConfigError(
                    f"line {line}: unknown key '{key}' in [{section}]")
            kind = _SCHEMA[section][key]
            try:
                if kind is bool:
                    values[(section, key)] = _parse_bool(raw, key)
                else:
                    values[(section, key)] = kind(raw)
            except (ValueError, ConfigError) as e:
                line = _line_of(text, key)
                raise ConfigError(f"line {line}: bad value for '{key}': {e}")
    for section, keys in _REQUIRED.items():
        for key in keys:
            if (section, key) not in values:
                raise ConfigError(
                    f"missing required key '{key}' in [{section}]")
    try:
        run = evolve.RunConfig(
            model_kind=values[("model", "kind")],
            lx=values[("model", "lx")], ly=values[("model", "ly")],
            g=values.get(("model", "g"), 0.0),
            p=values[("run", "p")], chi=values[("run", "chi")],
            eta=values[("run", "eta")], tau=values[("run", "tau")],
            iterations=values[("run", "iterations")],
            seed=values.get(("run", "seed"), 0),
            zip_tol=values.get(("run", "zip_tol"), 1e-6),
            disentangler_iters=values.get(("run", "disentangler_iters"), 10),
            energy_period=values.get(("run", "energy_period"), 1),
            checkpoint_period=values.get(("run", "checkpoint_period"), 10),
            energy_cap_factor=values.get(("run", "energy_cap_factor"), 1))
    except ValueError as e:
        raise ConfigError(str(e)) from e
    formats = tuple(f.strip() for f in
                    values.get(("output", "formats"), "csv,json").split(",")
                    if f.strip())
    for f in formats:
        if f not in ("csv", "json"):
            raise ConfigError(f"unknown output format '{f}'")
    return ExperimentConfig(
        run=run, out_dir=values.get(("output", "directory"), "out"),
        formats=formats, oracle=values.get(("output", "oracle"), True),
        deterministic=values.get(("output", "deterministic"), False))


def serialize_config(cfg: ExperimentConfig) -> str:
    """Render a configuration back to INI (round-trips through the parser)."""
    r = cfg.run
    cp = configparser.ConfigParser()
    cp["model"] = {"kind": r.model_kind, "lx": str(r.lx), "ly": str(r.ly),
                   "g": repr(r.g)}
    cp["run"] = {"p": str(r.p), "chi": str(r.chi), "eta": str(r.eta),
                 "tau": repr(r.tau), "iterations": str(r.iterations),
                 "seed": str(r.seed), "zip_tol": repr(r.zip_tol),
                 "disentangler_iters": str(r.disentangler_iters),
                 "energy_period": str(r.energy_period),
                 "checkpoint_period": str(r.checkpoint_period),
                 "energy_cap_factor": str(r.energy_cap_factor)}
    cp["output"] = {"directory": cfg.out_dir,
                    "formats": ",".join(cfg.formats),
                    "oracle": str(cfg.oracle).lower(),
                    "deterministic": str(cfg.deterministic).lower()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def load_config(path: str, args=None) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    cfg = parse_config_text(text)
    # environment overrides, then flag overrides
    env_out = os.environ.get(ENV_PREFIX + "OUT")
    if env_out:
        cfg = replace(cfg, out_dir=env_out)
    env_seed = os.environ.get(ENV_PREFIX + "SEED")
    if env_seed is not None and env_seed != "":
        cfg = replace(cfg, run=replace(cfg.run, seed=int(env_seed)))
    env_det = os.environ.get(ENV_PREFIX + "DETERMINISTIC")
    if env_det is not None and env_det != "":
        cfg = replace(cfg, deterministic=_parse_bool(env_det, "env"))
    env_cap = os.environ.get(ENV_PREFIX + "ORACLE_CAP")
    if env_cap:
        cfg = replace(cfg, oracle_cap=int(env_cap))
    if args is not None:
        if getattr(args, "out", None):
            cfg = replace(cfg, out_dir=args.out)
        if getattr(args, "seed", None) is not None:
            cfg = replace(cfg, run=replace(cfg.run, seed=args.seed))
        if getattr(args, "deterministic", False):
            cfg = replace(cfg, deterministic=True)
        if getattr(args, "oracle_cap", None) is not None:
            cfg = replace(cfg, oracle_cap=args.oracle_cap)
    return cfg


class _Lock:
    """One run at a time per output directory."""

    def __init__(self, out_dir: str):
        self.path = os.path.join(out_dir, ".lock")

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"output directory is locked by another run ({self.path})")
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            os.remove(self.path)
        except OSError:
            pass


def _trace_rows_for_csv(row: evolve.TraceRow, cum_discard: float):
    energies = row.energies if row.energies is not None \
        else [""] * len(row.norms)
    for alpha, (e, n) in enumerate(zip(energies, row.norms)):
        yield [row.iteration, alpha,
               "" if e == "" else repr(float(e)), repr(float(n)),
               repr(float(cum_discard)), f"{row.wall_ms:.3f}"]


def _write_trace_header(path: str):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerow(
            ["iteration", "alpha", "energy", "norm", "cum_discard",
             "wall_ms"])


def _append_trace(path: str, row, cum_discard):
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for r in _trace_rows_for_csv(row, cum_discard):
            w.writerow(r)


def _references(cfg: ExperimentConfig):
    """Exact lowest-p eigenvalues, or None when beyond the oracle cap."""
    model = evolve.build_model(cfg.run)
    dim = model.d ** (cfg.run.lx * cfg.run.ly)
    if not cfg.oracle or dim > cfg.oracle_cap:
        return None
    op = exact.assemble(model, dim_cap=cfg.oracle_cap)
    vals, _ = exact.lowest_eigenpairs(op, cfg.run.p)
    return [float(v) for v in vals]


def _summary(cfg: ExperimentConfig, trace: evolve.EnergyTrace,
             state, refs):
    final = None
    for row in reversed(trace.rows):
        if row.energies is not None:
            final = list(row.energies)
            break
    summary = {
        "final_energies": final,
        "final_energies_sorted": sorted(final) if final else None,
        "reference_energies": refs,
        "relative_errors": None,
        "cum_discard": state.cum_discard,
        "iterations_completed": trace.rows[-1].iteration + 1
        if trace.rows else 0,
        "seed": cfg.run.seed,
        "config": serialize_config(cfg),
        "versions": {"blockpeps": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__},
    }
    if final is not None and refs is not None:
        got = sorted(final)
        summary["relative_errors"] = [
            abs((g - r) / r) if r != 0 else abs(g - r)
            for g, r in zip(got, refs)]
    return summary


def _checkpoint_paths(out_dir: str, iteration: int):
    base = os.path.join(out_dir, f"checkpoint_{iteration:06d}")
    return base + ".state", base + ".json"


def write_checkpoint(cfg: ExperimentConfig, state, iteration: int) -> str:
    spath, mpath = _checkpoint_paths(cfg.out_dir, iteration)
    isopeps.save_snapshot(state, spath)
    with open(mpath, "w", encoding="utf-8") as fh:
        json.dump({"iteration": iteration, "config": serialize_config(cfg),
                   "version": __version__}, fh, indent=2)
    return spath


def _run_loop(cfg: ExperimentConfig, initial_state=None,
              start_iteration: int = 0, extra_iterations=None,
              append_trace: bool = False):
    os.makedirs(cfg.out_dir, exist_ok=True)
    trace_path = os.path.join(cfg.out_dir, "trace.csv")
    run_cfg = cfg.run
    if extra_iterations is not None:
        run_cfg = replace(run_cfg, iterations=extra_iterations)
    with _Lock(cfg.out_dir):
        if "csv" in cfg.formats and not append_trace:
            _write_trace_header(trace_path)

        def cb(iteration, state, row):
            if "csv" in cfg.formats:
                _append_trace(trace_path, row, state.cum_discard)
            if (iteration + 1) % run_cfg.checkpoint_period == 0 \
                    or iteration == start_iteration + run_cfg.iterations - 1:
                write_checkpoint(cfg, state, iteration)

        try:
            state, trace = evolve.subspace_iteration(
                run_cfg, initial_state=initial_state,
                start_iteration=start_iteration, callback=cb)
        except evolve.EvolveError as e:
            if e.state is not None:
                spath = os.path.join(cfg.out_dir, "diagnostic.state")
                isopeps.save_snapshot(e.state, spath)
                print(f"invariant failure: {e}\ndiagnostic snapshot: "
                      f"{spath}", file=sys.stderr)
            else:
                print(f"invariant failure: {e}", file=sys.stderr)
            return EXIT_INVARIANT
        refs = _references(cfg)
        if "json" in cfg.formats:
            with open(os.path.join(cfg.out_dir, "summary.json"), "w",
                      encoding="utf-8") as fh:
                json.dump(_summary(cfg, trace, state, refs), fh, indent=2)
                fh.write("\n")
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    try:
        return _run_loop(cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG


def cmd_resume(args) -> int:
    meta_path = os.path.splitext(args.checkpoint)[0] + ".json"
    try:
        state = isopeps.load_snapshot(args.checkpoint)
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        cfg = parse_config_text(meta["config"])
        iteration = int(meta["iteration"])
    except (isopeps.SnapshotError, OSError, KeyError, ValueError,
            ConfigError) as e:
        print(f"cannot resume: {e}", file=sys.stderr)
        return EXIT_SNAPSHOT
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if args.iterations == 0:
        return EXIT_OK
    try:
        return _run_loop(cfg, initial_state=state,
                         start_iteration=iteration + 1,
                         extra_iterations=args.iterations,
                         append_trace=True)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG


def _verify_checks(cfg: ExperimentConfig):
    """The oracle-equivalence suite; yields (name, passed) pairs."""
    run = cfg.run
    model = evolve.build_model(run)
    rng_seed = run.seed

    st = isopeps.random_state(run.lx, run.ly, model.d, run.p,
                              chi=2, eta=2, seed=rng_seed)
    st = replace(st, chi_max=max(64, run.chi), eta_max=max(64, run.eta))

    def dense(s):
        return np.stack([exact.contract_network_to_vector(s, a)
                         for a in range(s.p)])

    v0 = dense(st)
    gram_tn = isopeps.block_overlap(st)
    gram_dense = v0.conj() @ v0.T
    yield ("block Gram vs dense Gram",
           np.linalg.norm(gram_tn - gram_dense) <= 1e-8)

    moved = isopeps.move_center_to_bottom(st)
    rot = isopeps.rotate_ccw(moved)
    yield ("lossless center move + rotation",
           np.linalg.norm(dense(rot) - v0) <= 1e-10
           and isopeps.isometry_audit(rot) <= 1e-10)

    if run.lx > 1:
        table = evolve._gate_table(model, run.tau)
        upper, lower = st.labels[0][0], st.labels[1][0]
        ka, gate = table[frozenset((upper, lower))]
        kb = (set(frozenset((upper, lower))) - {ka}).pop()
        g4 = evolve._oriented(gate.gate_tensor(), ka, upper)
        applied = evolve.apply_bond_gate(st, 0, g4)
        gm = exact._embed_two_site(gate.g_matrix, min(ka, kb), max(ka, kb),
                                   run.lx * run.ly, model.d)
        yield ("gate action vs dense gate",
               np.linalg.norm(dense(applied) - v0 @ gm.toarray().T) <= 1e-9)

    op = exact.assemble(model, dim_cap=cfg.oracle_cap)
    vals, vecs = exact.lowest_eigenpairs(op, run.p)
    yield ("oracle eigenvalues ascending",
           bool(np.all(np.diff(vals) >= -1e-10)))

    h = op.matrix
    rq_tn = evolve.rayleigh_quotients(st, model, zip_tol=0.0)
    rq_dense = np.real(np.einsum("ai,ai->a", v0.conj(),
                                 (h @ v0.T).T)
                       / np.einsum("ai,ai->a", v0.conj(), v0))
    yield ("Rayleigh quotients vs dense",
           np.max(np.abs(rq_tn - rq_dense)) <= 1e-7)


def cmd_verify(args) -> int:
    try:
        cfg = load_config(args.config, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    model = evolve.build_model(cfg.run)
    dim = model.d ** (cfg.run.lx * cfg.run.ly)
    if dim > cfg.oracle_cap:
        print(f"Hilbert dimension {dim} exceeds oracle cap "
              f"{cfg.oracle_cap}", file=sys.stderr)
        return EXIT_CAPACITY
    all_ok = True
    for name, ok in _verify_checks(cfg):
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        all_ok = all_ok and ok
    return EXIT_OK if all_ok else EXIT_CHECK_FAILED


def cmd_bench(args) -> int:
    try:
        cfg = load_config(args.config, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    r = cfg.run
    model = evolve.build_model(r)
    table = evolve._gate_table(model, r.tau)
    state = isopeps.random_state(r.lx, r.ly, model.d, r.p,
                                 chi=r.chi, eta=r.eta, seed=r.seed)
    # warm-up plus timed iteration
    state = evolve.apply_trotter_step(state, table,
                                      with_disentangler=r.disentangler_iters
                                      > 0, zip_tol=r.zip_tol)
    t0 = time.perf_counter()
    evolve.apply_trotter_step(state, table,
                              with_disentangler=r.disentangler_iters > 0,
                              zip_tol=r.zip_tol)
    dt = time.perf_counter() - t0
    d, p, chi, eta = model.d, r.p, r.chi, r.eta
    cost = r.lx ** 2 * (chi ** 4 * eta ** 3 * d * p
                        + chi ** 3 * eta ** 4 * d * d * p
                        + chi ** 2 * eta ** 5 * p * p)
    print("lx ly chi eta p    seconds/iter    cost-model    s per unit")
    print(f"{r.lx:2d} {r.ly:2d} {chi:3d} {eta:3d} {p:2d}    "
          f"{dt:12.4f}    {cost:.3e}    {dt / cost:.3e}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="blockpeps",
        description="Block isometric PEPS subspace iteration")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=os.environ.get(
            ENV_PREFIX + "CONFIG"), help="INI configuration file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--deterministic", action="store_true")
        p.add_argument("--oracle-cap", dest="oracle_cap", type=int,
                       default=None)

    common(sub.add_parser("run", help="run a subspace-iteration experiment"))
    common(sub.add_parser("verify", help="oracle-equivalence checks"))
    common(sub.add_parser("bench", help="time one iteration"))
    rp = sub.add_parser("resume", help="continue from a checkpoint")
    rp.add_argument("checkpoint", help="path to a .state snapshot")
    rp.add_argument("iterations", type=int, help="extra iterations")
    rp.add_argument("--out", default=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command in ("run", "verify", "bench") and not args.config:
        print("a config file is required (--config or "
              + ENV_PREFIX + "CONFIG)", file=sys.stderr)
        return EXIT_BAD_CONFIG
    handler = {"run": cmd_run, "verify": cmd_verify,
               "resume": cmd_resume, "bench": cmd_bench}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
