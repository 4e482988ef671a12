"""Configuration-driven command line: ``lq-bench``, ``duality`` and ``verify``.

Exit codes: 0 success, 1 usage or configuration error, 2 verification or
tolerance failure.
"""

import argparse
import csv
import hashlib
import inspect
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .backward import riccati_feedback
from .presets import PRESETS, make_preset
from .problem import ControlProcess
from .verify import (
    OptimalityVerifier,
    _jsonable,
    check_duality_batch,
    compare_costs,
    random_alternatives,
)

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2

CANDIDATES = ("riccati", "zero", "damping")
SCHEMES = ("exponential_euler", "semi_implicit_euler")
ADJOINTS = ("regression", "riccati")

# per-command defaults for keys left unset in the config
COMMAND_DEFAULTS = {
    "lq-bench": {"n_steps": 20, "candidate": "riccati"},
    "duality": {"n_steps": 20, "candidate": "damping"},
    "verify": {"n_steps": None, "candidate": None},
}


class ConfigError(ValueError):
    """Bad configuration, flags or control file (exit code 1)."""


@dataclass
class ExperimentConfig:
    preset: str = "lq_diagonal"
    preset_params: dict = field(default_factory=dict)
    horizon: float = 1.0
    n_steps: int = None
    n_paths: int = 4096
    seed: int = 0
    threads: int = 1
    scheme: str = "exponential_euler"
    candidate: str = None
    adjoint: str = "regression"
    degree: int = 1
    ridge: float = None
    n_alt: int = 5
    n_cost_alt: int = 20
    alt_scale: float = 0.3
    bias_tol: float = None
    tol_gap: float = 1e-3
    tol_var: float = 1e-2
    tol_fd: float = 1e-6
    n_fd: int = 100
    tol_convex: float = 1e-9
    n_convex_pairs: int = 10_000
    convex_radius: float = 1.0
    n_min_paths: int = 64
    n_restarts: int = 2
    out: str = "results"

    def validate(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset: unknown {self.preset!r}; choose from {sorted(PRESETS)}")
        if not isinstance(self.preset_params, dict):
            raise ConfigError("preset_params: must be a mapping")
        allowed = set(inspect.signature(PRESETS[self.preset]).parameters) - {"horizon"}
        unknown = sorted(set(self.preset_params) - allowed)
        if unknown:
            raise ConfigError(f"preset_params: unknown keys {unknown} for {self.preset}")

        for name in ("n_paths", "threads", "degree", "n_fd", "n_convex_pairs", "n_min_paths"):
            _int(self, name, minimum=1)
        for name in ("seed", "n_alt", "n_cost_alt", "n_restarts"):
            _int(self, name, minimum=0)
        if self.n_steps is not None:
            _int(self, "n_steps", minimum=1)
        for name in ("horizon", "alt_scale", "tol_gap", "tol_var", "tol_fd", "tol_convex",
                     "convex_radius"):
            _float(self, name, strict=True)
        for name in ("ridge", "bias_tol"):
            if getattr(self, name) is not None:
                _float(self, name, strict=False)
        for name, options in (("scheme", SCHEMES), ("adjoint", ADJOINTS)):
            if getattr(self, name) not in options:
                raise ConfigError(f"{name}: {getattr(self, name)!r} not in {options}")
        if self.candidate is not None and self.candidate not in CANDIDATES:
            raise ConfigError(f"candidate: {self.candidate!r} not in {CANDIDATES}")
        if not isinstance(self.out, str) or not self.out:
            raise ConfigError("out: must be a non-empty path")
        return self

    def resolved(self, command):
        """Copy with the command's defaults filled in."""
        cfg = ExperimentConfig(**asdict(self))
        for key, value in COMMAND_DEFAULTS[command].items():
            if getattr(cfg, key) is None:
                setattr(cfg, key, value)
        return cfg

    def to_dict(self):
        return _jsonable(asdict(self))


def _int(cfg, name, minimum):
    v = getattr(cfg, name)
    if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < minimum:
        raise ConfigError(f"{name}: expected an integer >= {minimum}, got {v!r}")


def _float(cfg, name, strict):
    v = getattr(cfg, name)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
        raise ConfigError(f"{name}: expected a finite number, got {v!r}")
    if v < 0 or (strict and v == 0):
        raise ConfigError(f"{name}: must be {'positive' if strict else 'non-negative'}, got {v!r}")
    setattr(cfg, name, float(v))


def load_config(path=None, overrides=None):
    """Strictly parse a YAML mapping into a validated :class:`ExperimentConfig`."""
    data = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a key-value mapping")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig(**data).validate()


def config_hash(cfg, command):
    blob = json.dumps({"command": command, "config": cfg.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# control files


def write_control_csv(path, values):
    """Stored control values ``(n_steps, m)`` or ``(n_paths, n_steps, m)`` as
    ``path,step,nu_1..nu_m`` rows, path-major, in round-trip precision."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 2:
        values = values[None]
    n_paths, n_steps, m = values.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "step"] + [f"nu_{j + 1}" for j in range(m)])
        for p in range(n_paths):
            for i in range(n_steps):
                w.writerow([p, i] + [format(v, ".17g") for v in values[p, i]])


def read_control_csv(path, control_set, grid=None, horizon=1.0):
    """Load a stored control, rejecting bad headers, gaps, duplicates,
    non-finite entries and values outside ``control_set``.

    The number of steps is read from the file unless ``grid`` is given.
    Errors name the offending line (the header is line 1).
    """
    m = control_set.dim
    expected = ["path", "step"] + [f"nu_{j + 1}" for j in range(m)]
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read control file {path}: {exc.strerror}") from None
    if not rows or [h.strip() for h in rows[0]] != expected:
        raise ConfigError(f"control file header must be {','.join(expected)}")
    body = rows[1:]
    if not body:
        raise ConfigError("control file has no rows")
    idx = np.empty((len(body), 2), dtype=np.int64)
    nu = np.empty((len(body), m))
    for r, row in enumerate(body):
        line = r + 2
        if len(row) != m + 2:
            raise ConfigError(f"line {line}: expected {m + 2} fields, got {len(row)}")
        try:
            idx[r] = [int(row[0]), int(row[1])]
            nu[r] = [float(v) for v in row[2:]]
        except ValueError:
            raise ConfigError(f"line {line}: unparseable entry in {row}") from None
        if idx[r].min() < 0:
            raise ConfigError(f"line {line}: negative path or step index")
        if not np.all(np.isfinite(nu[r])):
            raise ConfigError(f"line {line}: non-finite control value")
        if not control_set.contains(nu[r]):
            raise ConfigError(f"line {line}: control {nu[r].tolist()} lies outside the control set")
    n_paths = int(idx[:, 0].max()) + 1
    n_steps = int(idx[:, 1].max()) + 1 if grid is None else len(grid) - 1
    if len(body) != n_paths * n_steps:
        raise ConfigError(
            f"control file has {len(body)} rows, expected {n_paths} paths x {n_steps} steps"
        )
    if idx[:, 1].max() >= n_steps:
        raise ConfigError(f"control file has steps beyond the grid of {n_steps} steps")
    values = np.full((n_paths, n_steps, m), np.nan)
    seen = np.zeros((n_paths, n_steps), dtype=bool)
    for r, (p, i) in enumerate(idx):
        if seen[p, i]:
            raise ConfigError(f"line {r + 2}: duplicate entry for path {p}, step {i}")
        seen[p, i] = True
        values[p, i] = nu[r]
    if grid is None:
        grid = np.linspace(0.0, horizon, n_steps + 1)
    if n_paths == 1:
        values = values[0]
    return ControlProcess(grid, control_set, values=values, label=Path(path).stem)


# ---------------------------------------------------------------------------
# reports


def render_text(report):
    """Human-readable summary of a report dictionary."""
    lines = [f"problem: {report.get('problem')}", f"candidate: {report.get('candidate')}", ""]
    verdict = report.get("verdict", {})
    for key in sorted(verdict):
        lines.append(f"{key:<12} {'PASS' if verdict[key] else 'FAIL'}")
    for key in ("cond_i", "cond_ii", "cond_iii", "cond_iv"):
        sec = report.get(key)
        if not sec:
            continue
        stats = {k: v for k, v in sec.items() if isinstance(v, (int, float)) and not isinstance(v, bool)}
        lines.append("")
        lines.append(f"[{key}] " + ("PASS" if sec.get("pass") else "FAIL"))
        for k in sorted(stats):
            lines.append(f"  {k} = {stats[k]:.6g}")
        if "error" in sec:
            lines.append(f"  error: {sec['error']}")
    if report.get("duality") is not None:
        lines += ["", "[duality] label gap tolerance pass"]
        for d in report["duality"]:
            if "error" in d:
                lines.append(f"  {d['label']} error: {d['error']}")
            else:
                lines.append(f"  {d['label']} {d['gap']:.6g} {d['tolerance']:.6g} {d['pass']}")
    for key in ("costs", "benchmark_costs"):
        sec = report.get(key)
        if not sec or "alternatives" not in sec:
            continue
        lines += ["", f"[{key}] candidate J = {sec['candidate_cost']:.6g} +- {sec['candidate_stderr']:.3g}"]
        for row in sec["alternatives"]:
            lines.append(f"  {row['label']} dJ = {row['paired_diff']:.6g} +- {row['paired_stderr']:.3g}"
                         + ("  FLAGGED" if row["flagged"] else ""))
    if report.get("errors"):
        lines += ["", "[errors]"] + [f"  {k}: {v}" for k, v in sorted(report["errors"].items())]
    return "\n".join(lines) + "\n"


def emit_report(report, out_dir, formats=("json", "txt")):
    """Write ``report.json`` (sorted keys) and ``report.txt``; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        p = out / "report.json"
        p.write_text(json.dumps(_jsonable(report), sort_keys=True, indent=2, allow_nan=False) + "\n")
        written.append(p)
    if "txt" in formats:
        p = out / "report.txt"
        p.write_text(render_text(report))
        written.append(p)
    return written


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format(v, ".17g") if isinstance(v, float) else v for v in row])
    return Path(path)


def write_costs_csv(path, costs):
    header = ["label", "cost", "stderr", "paired_diff", "paired_stderr", "flagged"]
    rows = [["candidate", costs["candidate_cost"], costs["candidate_stderr"], 0.0, 0.0, False]]
    rows += [[r[k] for k in header] for r in costs["alternatives"]]
    return _write_csv(path, header, rows)


def write_duality_csv(path, duality):
    header = ["label", "lhs", "lhs_stderr", "rhs", "rhs_stderr", "gap", "combined_stderr",
              "bias_tol", "tolerance", "pass"]
    rows = [[d.get(k, "") for k in header] for d in duality]
    return _write_csv(path, header, rows)


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, cfg, command, files, timings, exit_code):
    """Run manifest; ``timings`` is the only entry that varies between reruns."""
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg, command),
        "exit_code": exit_code,
        "files": {Path(f).name: _sha256(f) for f in sorted(files, key=lambda f: Path(f).name)},
        "timings": timings,
    }
    p = Path(out_dir) / "manifest.json"
    p.write_text(json.dumps(_jsonable(manifest), sort_keys=True, indent=2) + "\n")
    return p


# ---------------------------------------------------------------------------
# commands


def _problem(cfg):
    try:
        return make_preset(cfg.preset, horizon=cfg.horizon, **cfg.preset_params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"preset_params: {exc}") from None


def _candidate(cfg, problem, grid):
    U = problem.control_set
    if cfg.candidate == "riccati":
        if "lq_spec" not in problem.params:
            raise ConfigError(f"candidate riccati needs an LQ preset, not {cfg.preset}")
        return riccati_feedback(problem.params["lq_spec"], grid, U)
    if cfg.candidate == "zero":
        return ControlProcess.constant(grid, U, 0.0, label="zero")
    m, n = problem.n_controls, problem.n_modes
    if m > n:
        raise ConfigError("candidate damping needs no more controls than modes")
    return ControlProcess(grid, U, feedback=lambda t, x: -x[:, :m], label="damping")


def _verifier(cfg):
    return OptimalityVerifier(
        n_paths=cfg.n_paths, seed=cfg.seed, scheme=cfg.scheme, adjoint=cfg.adjoint,
        degree=cfg.degree, ridge=cfg.ridge, tol_fd=cfg.tol_fd, n_fd=cfg.n_fd,
        tol_convex=cfg.tol_convex, n_convex_pairs=cfg.n_convex_pairs,
        convex_radius=cfg.convex_radius, n_min_paths=cfg.n_min_paths, n_restarts=cfg.n_restarts,
        tol_gap=cfg.tol_gap, tol_var=cfg.tol_var, n_alt=cfg.n_alt, alt_scale=cfg.alt_scale,
        bias_tol=cfg.bias_tol, n_threads=cfg.threads,
    )


def _all_pass(report):
    return all(report["verdict"].values()) and not report.get("partial", False)


def run_lq_benchmark(cfg, timings, export_control=None):
    problem = _problem(cfg)
    if "lq_spec" not in problem.params:
        raise ConfigError(f"lq-bench needs the lq_diagonal preset, not {cfg.preset}")
    grid = problem.grid(cfg.n_steps)
    candidate = _candidate(cfg, problem, grid)
    t0 = time.perf_counter()
    verifier = _verifier(cfg).fit(problem, candidate)
    timings["verify"] = time.perf_counter() - t0
    report = verifier.report_.to_dict()

    t0 = time.perf_counter()
    alts = random_alternatives(candidate, cfg.n_cost_alt, cfg.alt_scale, cfg.seed + 1)
    bench = compare_costs(problem, candidate, alts, scheme=cfg.scheme,
                          increments=verifier.increments_).to_dict()
    timings["compare_costs"] = time.perf_counter() - t0
    report["benchmark_costs"] = bench
    report["verdict"]["benchmark_costs"] = bench["pass"]

    out = Path(cfg.out)
    files = emit_report(report, out)
    files.append(write_costs_csv(out / "costs.csv", bench))
    files.append(write_duality_csv(out / "duality.csv", report["duality"]))
    if export_control is not None:
        write_control_csv(export_control, verifier.forward_.controls)
    return (EXIT_OK if _all_pass(report) else EXIT_FAIL), files


def run_duality_experiment(cfg, timings):
    problem = _problem(cfg)
    grid = problem.grid(cfg.n_steps)
    candidate = _candidate(cfg, problem, grid)
    alts = random_alternatives(candidate, cfg.n_alt, cfg.alt_scale, cfg.seed)
    t0 = time.perf_counter()
    results = check_duality_batch(
        problem, candidate, alts, cfg.n_paths, cfg.seed,
        cfg={"adjoint": cfg.adjoint, "degree": cfg.degree, "ridge": cfg.ridge,
             "scheme": cfg.scheme, "bias_tol": cfg.bias_tol, "n_threads": cfg.threads},
    )
    timings["duality"] = time.perf_counter() - t0
    duality = [r.to_dict() for r in results]
    report = {
        "problem": problem.name,
        "candidate": candidate.label,
        "settings": cfg.to_dict(),
        "duality": duality,
        "verdict": {"duality": all(d["pass"] for d in duality)},
    }
    out = Path(cfg.out)
    files = emit_report(report, out)
    files.append(write_duality_csv(out / "duality.csv", duality))
    return (EXIT_OK if report["verdict"]["duality"] else EXIT_FAIL), files


def run_verification(cfg, control_file, timings):
    if control_file is None:
        raise ConfigError("verify needs --control PATH")
    problem = _problem(cfg)
    grid = None if cfg.n_steps is None else problem.grid(cfg.n_steps)
    candidate = read_control_csv(control_file, problem.control_set, grid, cfg.horizon)
    if candidate.values.ndim == 3 and candidate.values.shape[0] != cfg.n_paths:
        raise ConfigError(
            f"control file holds {candidate.values.shape[0]} paths but n_paths is {cfg.n_paths}"
        )
    t0 = time.perf_counter()
    verifier = _verifier(cfg).fit(problem, candidate)
    timings["verify"] = time.perf_counter() - t0
    report = verifier.report_.to_dict()
    out = Path(cfg.out)
    files = emit_report(report, out)
    if "alternatives" in report["costs"]:
        files.append(write_costs_csv(out / "costs.csv", report["costs"]))
    files.append(write_duality_csv(out / "duality.csv", report["duality"]))
    return (EXIT_OK if _all_pass(report) else EXIT_FAIL), files


def build_parser():
    parser = argparse.ArgumentParser(prog="seecontrol", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("lq-bench", "verify the Riccati feedback on the LQ preset"),
                        ("duality", "check the duality identity against perturbed controls"),
                        ("verify", "verify a candidate control read from a CSV file")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--paths", type=int, dest="n_paths")
        p.add_argument("--threads", type=int)
        if name == "verify":
            p.add_argument("--control", help="control CSV with header path,step,nu_1..nu_m")
        if name == "lq-bench":
            p.add_argument("--export-control", help="also write the candidate's realized controls")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    started = time.perf_counter()
    timings = {}
    try:
        overrides = {"out": args.out, "seed": args.seed, "n_paths": args.n_paths,
                     "threads": args.threads}
        cfg = load_config(args.config, overrides).resolved(args.command)
        if args.command == "lq-bench":
            code, files = run_lq_benchmark(cfg, timings, args.export_control)
        elif args.command == "duality":
            code, files = run_duality_experiment(cfg, timings)
        else:
            code, files = run_verification(cfg, args.control, timings)
        timings["total"] = time.perf_counter() - started
        write_manifest(cfg.out, cfg, args.command, files, timings, code)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
        print(f"verification aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    status = "all checks passed" if code == EXIT_OK else "verification failed"
    print(f"{args.command}: {status}; outputs in {cfg.out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
