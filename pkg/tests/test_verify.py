import json

import numpy as np
import pytest

from seecontrol.backward import RankDeficientRegression, RiccatiLQAdjoint, riccati_feedback, solve_bsee_regression
from seecontrol.forward import simulate_forward
from seecontrol.presets import control_diffusion, lq_diagonal, nonlinear_sine
from seecontrol.problem import BoxSet, CoefficientBundle, ControlProcess, ControlSet, ProblemDefinition
from seecontrol.spectral import SpectralBasis, refine_same_noise, sample_wiener_increments
from seecontrol.verify import (
    OptimalityVerifier,
    SamplerConfig,
    VerifierConfig,
    calibrate_bias_tol,
    check_derivative_bounds,
    check_duality_batch,
    check_duality_identity,
    check_hamiltonian_convexity,
    check_minimum_condition,
    check_phi_convexity,
    compare_costs,
    random_alternatives,
    verify_sufficient_conditions,
)


def with_wiggle(problem, amplitude=1e-3, freq=200.0):
    """Terminal cost plus a small high-frequency concave ripple in x_1."""
    c = problem.coeffs
    e1 = np.zeros(problem.n_modes)
    e1[0] = 1.0

    def phi(x):
        return c.terminal_cost(x) + amplitude * np.cos(freq * x[..., 0])

    def grad(x):
        return c.terminal_grad(x) - amplitude * freq * np.sin(freq * x[..., :1]) * e1

    return problem.replace(coeffs=c.replace(terminal_cost=phi, terminal_grad=grad))


@pytest.fixture(scope="module")
def lq_run():
    p = lq_diagonal()
    grid = p.grid(20)
    cand = riccati_feedback(p.params["lq_spec"], grid, p.control_set)
    fw = simulate_forward(p, cand, n_paths=2048, seed=0)
    return p, cand, fw, solve_bsee_regression(p, fw)


# ---------------------------------------------------------------------------
# convexity


@pytest.mark.parametrize("factory", [lq_diagonal, control_diffusion, nonlinear_sine])
def test_terminal_cost_convex_on_presets(factory):
    res = check_phi_convexity(factory(), SamplerConfig(n_pairs=10_000))
    assert res.passed and res.witness is None
    assert res.n_tests == 10_000


def test_concave_ripple_detected_with_witness():
    p = with_wiggle(control_diffusion())
    res = check_phi_convexity(p, SamplerConfig(n_pairs=10_000))
    assert not res.passed
    assert res.worst_violation > 1e-6
    a, b = np.array(res.witness["a"]), np.array(res.witness["b"])
    phi = p.coeffs.terminal_cost
    mid_gap = phi(0.5 * (a + b)) - 0.5 * (phi(a) + phi(b))
    grad_gap = p.coeffs.terminal_grad(a) @ (b - a) - (phi(b) - phi(a))
    assert max(mid_gap, grad_gap) > 0


def test_hamiltonian_convexity_holds_on_lq(lq_run):
    p, cand, fw, adj = lq_run
    res = check_hamiltonian_convexity(p, adj, fw, cand, SamplerConfig(n_pairs=5000))
    assert res.passed, res.to_dict()


def test_hamiltonian_convexity_violation_found():
    # <b, y> with b = 0.5 sin(x) is concave where y sin(x) > 0 once y is large
    p = nonlinear_sine()
    c = ControlProcess.constant(p.grid(5), p.control_set, 0.0)
    fw = simulate_forward(p, c, n_paths=100, seed=0)
    adj = solve_bsee_regression(p, fw)
    big = type(adj)(adj.grid, 20.0 * np.ones_like(adj.Y), adj.Z, adj.info)
    res = check_hamiltonian_convexity(p, big, fw, c, SamplerConfig(n_pairs=5000))
    assert not res.passed
    assert {"path", "step", "x_a", "nu_a", "x_b", "nu_b"} <= set(res.witness)


# ---------------------------------------------------------------------------
# minimum condition


def test_minimum_condition_exact_with_riccati_adjoint():
    p = lq_diagonal()
    grid = p.grid(20)
    est = RiccatiLQAdjoint().fit(p.params["lq_spec"], grid)
    cand = est.feedback(p.control_set)
    fw = simulate_forward(p, cand, n_paths=256, seed=0)
    res = check_minimum_condition(p, fw, est.predict(fw), cand)
    assert res.max_gap < 1e-10 and res.variational_residual < 1e-10
    assert res.passed


def test_minimum_condition_flags_zero_control():
    p = lq_diagonal()
    grid = p.grid(20)
    est = RiccatiLQAdjoint().fit(p.params["lq_spec"], grid)
    zero = ControlProcess.constant(grid, p.control_set, 0.0)
    fw = simulate_forward(p, zero, n_paths=256, seed=0)
    res = check_minimum_condition(p, fw, est.predict(fw), zero)
    assert not res.passed
    assert res.max_gap > 10 * res.tol_gap
    assert len(res.gap_max_by_step) == 20
    assert res.witness["H_candidate"] > res.witness["H_min"]


def test_minimum_condition_regression_adjoint(lq_run):
    p, cand, fw, adj = lq_run
    res = check_minimum_condition(p, fw, adj, cand)
    assert res.passed, res.to_dict()


def test_minimum_condition_needs_known_set_shape(lq_run):
    class Odd(ControlSet):
        def __init__(self, box):
            self.box, self.dim = box, box.dim

        def project(self, v):
            return self.box.project(v)

        def sample(self, rng, n):
            return self.box.sample(rng, n)

        @property
        def center(self):
            return self.box.center

        @property
        def diameter(self):
            return self.box.diameter

    p, cand, fw, adj = lq_run
    with pytest.raises(TypeError):
        check_minimum_condition(p, fw, adj, cand, U=Odd(p.control_set))


# ---------------------------------------------------------------------------
# derivative bounds


def test_derivative_bounds_presets():
    for factory in (lq_diagonal, nonlinear_sine, control_diffusion):
        rep = check_derivative_bounds(factory())
        assert rep.passed, rep.to_dict()
    lq = check_derivative_bounds(lq_diagonal())
    assert "running_cost_x" in lq.unbounded
    assert any("running_cost_x" in w for w in lq.warnings)


def test_derivative_bounds_flag_growing_drift():
    p = control_diffusion()
    c = p.coeffs.replace(drift=lambda x, nu: x**3 + nu, drift_x=lambda x, nu, h: 3 * x * x * h)
    rep = check_derivative_bounds(p.replace(coeffs=c))
    assert not rep.passed and "drift_x" in rep.unbounded


# ---------------------------------------------------------------------------
# duality identity


def test_duality_identical_controls_is_exactly_zero():
    p = control_diffusion()
    star = ControlProcess(p.grid(10), p.control_set, feedback=lambda t, x: -x, label="star")
    res = check_duality_identity(p, star, star, n_paths=256, cfg={"bias_tol": 0.0})
    assert res.lhs == 0.0 and res.rhs == 0.0 and res.gap == 0.0
    assert res.passed


def test_duality_control_free_dynamics_is_exactly_zero():
    # b = 0, constant sigma, linear phi: X* = X, both sides vanish
    basis = SpectralBasis.dirichlet_laplacian(2, 0.1)
    a = np.array([1.0, -1.0])

    def z2(x):
        return np.zeros(np.shape(x)[:-1] + (2, 2))

    coeffs = CoefficientBundle(
        drift=lambda x, nu: np.zeros_like(x),
        diffusion=lambda x, nu: z2(x) + 0.3 * np.eye(2),
        running_cost=lambda x, nu: 0.5 * np.sum(nu * nu, axis=-1),
        terminal_cost=lambda x: x @ a,
        drift_x=lambda x, nu, h: np.zeros_like(x),
        drift_nu=lambda x, nu, k: np.zeros(np.shape(x)),
        diffusion_x=lambda x, nu, h: z2(x),
        diffusion_nu=lambda x, nu, k: z2(x),
        running_cost_x=lambda x, nu, h: np.zeros(np.shape(x)[:-1]),
        running_cost_nu=lambda x, nu, k: np.sum(nu * k, axis=-1),
        terminal_grad=lambda x: np.broadcast_to(a, np.shape(x)).copy(),
    )
    p = ProblemDefinition(basis, coeffs, BoxSet([-1, -1], [1, 1]), [0.5, 0.5])
    grid = p.grid(10)
    star = ControlProcess.constant(grid, p.control_set, 0.2)
    alt = ControlProcess.constant(grid, p.control_set, -0.7)
    res = check_duality_identity(p, star, alt, n_paths=500, cfg={"bias_tol": 0.0})
    assert res.lhs == 0.0 and abs(res.rhs) < 1e-15


def test_duality_gap_vanishes_under_refinement_and_detects_bad_adjoint():
    p = control_diffusion()
    base = sample_wiener_increments(p.basis, 0.1, 10, 2048, seed=0)
    good, bad = [], []
    for f in (1, 2, 4):
        inc = base if f == 1 else refine_same_noise(base, f)
        grid = p.grid(10 * f)
        star = ControlProcess(grid, p.control_set, feedback=lambda t, x: -x, label="star")
        alt = ControlProcess.constant(grid, p.control_set, 1.0, label="one")
        fs = simulate_forward(p, star, increments=inc)
        adj = solve_bsee_regression(p, fs)
        broken = type(adj)(adj.grid, adj.Y, 0.0 * adj.Z, adj.info)
        kw = dict(cfg={"bias_tol": 0.0}, increments=inc, forward_star=fs)
        good.append(check_duality_batch(p, star, [alt], adjoint_star=adj, **kw)[0])
        bad.append(check_duality_batch(p, star, [alt], adjoint_star=broken, **kw)[0])
    g = [abs(r.gap) for r in good]
    # first order in dt: each halving roughly halves the gap
    assert g[0] > g[1] > g[2]
    assert 1.4 < g[0] / g[1] < 2.8 and 1.4 < g[1] / g[2] < 2.8
    # without Z the gap does not shrink and ends far outside the noise band
    assert abs(bad[2].gap) > abs(bad[0].gap)
    assert abs(bad[2].gap) > 3 * bad[2].combined_stderr + 2 * g[2]


def test_duality_passes_on_control_diffusion():
    p = control_diffusion()
    star = ControlProcess(p.grid(20), p.control_set, feedback=lambda t, x: -x, label="star")
    alts = random_alternatives(star, 2, seed=1)
    for res in check_duality_batch(p, star, alts, n_paths=2048, seed=0):
        assert res.passed, res.to_dict()
        assert res.bias_tol >= 0
        assert set(res.terms) == {"drift", "driver", "diffusion"}


def test_bias_tol_is_twice_the_halving_shift():
    p = control_diffusion()
    grid = p.grid(10)
    star = ControlProcess(grid, p.control_set, feedback=lambda t, x: -x)
    alt = ControlProcess.constant(grid, p.control_set, 0.5)
    inc = sample_wiener_increments(p.basis, 0.1, 10, 512, seed=3)
    coarse = check_duality_identity(p, star, alt, cfg={"bias_tol": 0.0}, increments=inc).gap
    fine_inc = refine_same_noise(inc, 2)
    g2 = p.grid(20)
    star2 = ControlProcess(g2, p.control_set, feedback=lambda t, x: -x)
    alt2 = ControlProcess.constant(g2, p.control_set, 0.5)
    fine = check_duality_identity(p, star2, alt2, cfg={"bias_tol": 0.0}, increments=fine_inc).gap
    assert calibrate_bias_tol(p, star, alt, inc) == pytest.approx(2 * abs(fine - coarse), rel=1e-10)


def test_duality_grid_mismatch_rejected():
    p = control_diffusion()
    star = ControlProcess(p.grid(10), p.control_set, feedback=lambda t, x: -x)
    alt = ControlProcess.constant(p.grid(20), p.control_set, 0.0)
    with pytest.raises(ValueError, match="grid"):
        check_duality_identity(p, star, alt, n_paths=64)


def test_few_paths_widen_errors_or_refuse():
    p = control_diffusion()
    star = ControlProcess(p.grid(10), p.control_set, feedback=lambda t, x: -x)
    alt = ControlProcess.constant(p.grid(10), p.control_set, 1.0)
    cfg = {"bias_tol": 0.0}
    # 8 modes -> 9 regression features; 16 paths cannot support the fit
    with pytest.raises(RankDeficientRegression):
        check_duality_identity(p, star, alt, n_paths=16, cfg=cfg)
    small = check_duality_identity(p, star, alt, n_paths=96, cfg=cfg)
    big = check_duality_identity(p, star, alt, n_paths=6144, cfg=cfg)
    assert small.combined_stderr > 3 * big.combined_stderr


# ---------------------------------------------------------------------------
# costs and alternatives


def test_random_alternatives_admissible_and_reproducible(lq_run):
    p, cand, fw, _ = lq_run
    alts = random_alternatives(cand, 3, seed=4)
    again = random_alternatives(cand, 3, seed=4)
    x = fw.states[:, 5]
    for a, b in zip(alts, again):
        nu = a.at(5, x)
        assert np.all(p.control_set.contains(nu))
        np.testing.assert_array_equal(nu, b.at(5, x))
    assert [a.label for a in alts] == ["perturbed_0", "perturbed_1", "perturbed_2"]


def test_cost_comparison_orders_controls():
    p = lq_diagonal()
    grid = p.grid(20)
    ric = riccati_feedback(p.params["lq_spec"], grid, p.control_set)
    zero = ControlProcess.constant(grid, p.control_set, 0.0, label="zero")
    res = compare_costs(p, ric, [zero] + random_alternatives(ric, 3, seed=2), n_paths=2048)
    assert res.passed and all(r["paired_diff"] > 0 for r in res.rows)
    rev = compare_costs(p, zero, [ric], n_paths=2048)
    assert rev.flagged == ["riccati"]
    # common noise: paired error well below the marginal one
    row = res.rows[0]
    assert row["paired_stderr"] < row["stderr"]


# ---------------------------------------------------------------------------
# orchestration


def test_verifier_report_lq(lq_run):
    p, cand, _, _ = lq_run
    ver = OptimalityVerifier(n_paths=2048, n_alt=2, n_convex_pairs=2000).fit(p, cand)
    rep = ver.report_
    assert rep.verdict["conditions"] and not rep.partial, rep.errors
    d = rep.to_dict()
    json.dumps(d, allow_nan=False)
    assert len(d["duality"]) == 2 and len(d["costs"]["alternatives"]) == 2
    assert d["settings"]["n_steps"] == 20


def test_verifier_records_sub_check_errors():
    p = control_diffusion()
    cand = ControlProcess(p.grid(10), p.control_set, feedback=lambda t, x: -x, label="fb")

    def broken(x, nu, h):
        raise RuntimeError("no derivative here")

    bad = p.replace(coeffs=p.coeffs.replace(running_cost_nu=broken))
    rep = OptimalityVerifier(n_paths=512, n_alt=1, n_convex_pairs=500).fit(bad, cand).report_
    assert rep.partial
    assert "cond_iv" in rep.errors and "RuntimeError" in rep.errors["cond_iv"]
    assert rep.cond_iv["pass"] is False
    json.dumps(rep.to_dict(), allow_nan=False)


def test_verify_sufficient_conditions_empty_alternatives():
    p = control_diffusion()
    cand = ControlProcess(p.grid(10), p.control_set, feedback=lambda t, x: -x)
    cfg = VerifierConfig(n_paths=512, n_alt=0, n_convex_pairs=500)
    rep = verify_sufficient_conditions(p, cand, cfg)
    d = rep.to_dict()
    assert d["duality"] == [] and d["costs"]["alternatives"] == []
    assert d["verdict"]["duality"] is True
