"""End-to-end acceptance checks, one per criterion.

Each test prints a single ``CRITERION n: PASS|FAIL`` line with the measured
quantities, then asserts. Run with ``pytest -s tests/test_acceptance.py`` to
see the lines.
"""
import json
import time

import numpy as np

from seecontrol.backward import riccati_feedback, solve_bsee_regression, solve_bsee_riccati_lq
from seecontrol.cli import main
from seecontrol.forward import ForwardSimulator, simulate_forward
from seecontrol.presets import LQSpec, control_diffusion, lq_diagonal, lq_problem, make_preset
from seecontrol.problem import ControlProcess, check_hamiltonian_gradients
from seecontrol.spectral import (
    SpectralBasis,
    coarsen,
    refine_same_noise,
    sample_wiener_increments,
    semigroup_apply,
)
from seecontrol.verify import (
    SamplerConfig,
    check_duality_batch,
    check_hamiltonian_convexity,
    check_phi_convexity,
    compare_costs,
    OptimalityVerifier,
    random_alternatives,
)


def report(n, ok, **measured):
    detail = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                       for k, v in measured.items())
    print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    return ok


def damping(problem, grid):
    return ControlProcess(grid, problem.control_set, feedback=lambda t, x: -x, label="damping")


# 1 -------------------------------------------------------------------------


def test_criterion_1_duality_identity():
    p = control_diffusion()
    assert p.n_modes == 8 and p.horizon == 1.0
    t0 = time.perf_counter()
    star = damping(p, p.grid(20))
    alts = random_alternatives(star, 5, seed=0)
    results = check_duality_batch(p, star, alts, n_paths=4096, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(abs(r.gap) / (3 * r.combined_stderr + r.bias_tol) for r in results)
    ok = len(results) == 5 and all(r.passed for r in results) and elapsed <= 60
    assert report(1, ok, alternatives=len(results), worst_gap_over_tol=worst,
                  seconds=elapsed)


# 2 -------------------------------------------------------------------------


def test_criterion_2_lq_sufficient_conditions():
    p = lq_diagonal()
    grid = p.grid(20)
    cand = riccati_feedback(p.params["lq_spec"], grid, p.control_set)
    ver = OptimalityVerifier(n_paths=4096, seed=0).fit(p, cand)
    rep = ver.report_
    conds = all(rep.verdict[k] for k in ("cond_i", "cond_ii", "cond_iii", "cond_iv"))
    costs = compare_costs(p, cand, random_alternatives(cand, 20, seed=1),
                          increments=ver.increments_)

    zero = ControlProcess.constant(grid, p.control_set, 0.0, label="zero")
    neg = OptimalityVerifier(n_paths=4096, seed=0).fit(p, zero).report_
    neg_ratio = neg.cond_iv["max_gap"] / neg.cond_iv["tol_gap"]

    ok = conds and not rep.partial and costs.passed and len(costs.rows) == 20 \
        and neg.verdict["cond_iv"] is False and neg_ratio > 10
    assert report(2, ok, conditions=conds, cost_flags=len(costs.flagged),
                  iv_gap=rep.cond_iv["max_gap"], zero_iv_gap_over_tol=neg_ratio)


# 3 -------------------------------------------------------------------------


def test_criterion_3_regression_vs_riccati():
    lam = SpectralBasis.dirichlet_laplacian(1, 0.1).eigenvalues
    spec = LQSpec(lam, [0.5], [1.0], [1.0], 0.5, [1.0], [[0.5]])
    p = lq_problem(spec, [1.0])
    grid = p.grid(50)
    fw = simulate_forward(p, riccati_feedback(spec, grid, p.control_set), n_paths=16384, seed=0)
    reg = solve_bsee_regression(p, fw, cfg={"degree": 1})
    ora = solve_bsee_riccati_lq(spec, fw)  # Y = P X, Z = P sigma
    err_y = (np.abs(reg.Y - ora.Y).mean(axis=0) / np.abs(ora.Y).mean(axis=0)).max()
    err_z = (np.abs(reg.Z - ora.Z).mean(axis=0) / np.abs(ora.Z).mean(axis=0)).max()
    assert report(3, err_y <= 0.05 and err_z <= 0.10, sup_err_Y=err_y, sup_err_Z=err_z)


# 4 -------------------------------------------------------------------------


def test_criterion_4_gradient_audits():
    errs = {name: check_hamiltonian_gradients(make_preset(name), n_samples=100, seed=0)
            for name in ("lq_diagonal", "nonlinear_sine", "control_diffusion")}
    worst = max(max(e.values()) for e in errs.values())
    assert report(4, worst <= 1e-6, presets=len(errs), worst_rel_err=worst)


# 5 -------------------------------------------------------------------------


def test_criterion_5_semigroup_exactness():
    basis = SpectralBasis.dirichlet_laplacian(8, 0.1)
    rng = np.random.default_rng(5)
    eye = np.eye(8)
    identity = np.array_equal(semigroup_apply(basis, 0.0, eye), eye)
    worst = 0.0
    for _ in range(100):
        t, s = rng.uniform(0, 2, 2)
        v = rng.standard_normal(8) * 10 ** rng.uniform(-3, 3)
        lhs = semigroup_apply(basis, t + s, v)
        rhs = semigroup_apply(basis, t, semigroup_apply(basis, s, v))
        worst = max(worst, np.linalg.norm(lhs - rhs) / np.linalg.norm(lhs))
    assert report(5, identity and worst <= 1e-12, S0_identity=identity, worst_rel=worst)


# 6 -------------------------------------------------------------------------


def test_criterion_6_strong_convergence():
    p = control_diffusion()
    sim = ForwardSimulator()
    base = sample_wiener_increments(p.basis, 1 / 2, 2, 1000, seed=6)
    ref_w = refine_same_noise(base, 64)

    def terminal(inc):
        return sim.simulate(p, damping(p, p.grid(inc.n_steps)), inc).terminal

    ref = terminal(ref_w)
    dts, errs = [], []
    for f in (2, 4, 8, 16, 32):
        inc = coarsen(ref_w, 64 // f)
        dts.append(inc.dt)
        errs.append(np.sqrt(np.mean(np.sum((terminal(inc) - ref) ** 2, axis=1))))
    slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert report(6, slope >= 0.45 and len(dts) >= 4, points=len(dts), order=slope)


# 7 -------------------------------------------------------------------------


def test_criterion_7_convexity_checkers():
    cfg = SamplerConfig(n_pairs=10_000)
    violations = {}
    for name in ("lq_diagonal", "control_diffusion"):
        p = make_preset(name)
        violations[f"{name}.phi"] = check_phi_convexity(p, cfg)
        grid = p.grid(10)
        cand = (riccati_feedback(p.params["lq_spec"], grid, p.control_set)
                if "lq_spec" in p.params else damping(p, grid))
        fw = simulate_forward(p, cand, n_paths=1024, seed=0)
        adj = solve_bsee_regression(p, fw)
        violations[f"{name}.H"] = check_hamiltonian_convexity(p, adj, fw, cand, cfg)
    clean = all(r.passed and r.n_tests == 10_000 for r in violations.values())

    p = control_diffusion()
    c = p.coeffs
    e1 = np.eye(p.n_modes)[0]
    wiggled = p.replace(coeffs=c.replace(
        terminal_cost=lambda x: c.terminal_cost(x) + 1e-3 * np.cos(200 * x[..., 0]),
        terminal_grad=lambda x: c.terminal_grad(x) - 0.2 * np.sin(200 * x[..., :1]) * e1,
    ))
    bad = check_phi_convexity(wiggled, cfg)
    detected = not bad.passed and bad.witness is not None and "a" in bad.witness
    assert report(7, clean and detected, convex_checks=len(violations),
                  convex_all_clean=clean, perturbation_detected=detected,
                  perturbation_violation=float(bad.worst_violation))


# 8 -------------------------------------------------------------------------


def test_criterion_8_reproducibility(tmp_path, monkeypatch):
    runs = [
        ("lq-bench", "lq_diagonal", 2048),
        ("duality", "control_diffusion", 1024),
        ("duality", "nonlinear_sine", 1024),
    ]
    identical, compared = True, 0
    for command, preset, n_paths in runs:
        cfg = tmp_path / f"{preset}.yaml"
        cfg.write_text(f"preset: {preset}\nn_paths: {n_paths}\nn_alt: 2\nn_cost_alt: 3\n"
                       "n_convex_pairs: 2000\nn_steps: 10\n")
        outs = []
        for k in range(2):
            d = tmp_path / f"{preset}_{k}"
            d.mkdir()
            monkeypatch.chdir(d)
            code = main([command, "--config", str(cfg), "--out", "out"])
            assert code in (0, 2)
            outs.append(d / "out")
        for f in sorted(outs[0].iterdir()):
            other = outs[1] / f.name
            if f.name == "manifest.json":
                a, b = json.loads(f.read_text()), json.loads(other.read_text())
                a.pop("timings"), b.pop("timings")
                same = a == b
            else:
                same = f.read_bytes() == other.read_bytes()
            identical &= same
            compared += 1
    assert report(8, identical and compared >= 9, files_compared=compared,
                  byte_identical=identical)
