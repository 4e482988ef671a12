"""Numerical audit of the sufficient optimality conditions for a candidate control.

The four conditions are checked by randomized sampling; a pass is evidence
rather than proof, and every result records its sample counts, radii and
tolerances. The forward/backward duality identity and a common-noise cost
comparison against perturbed controls complete the picture.
"""

from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .backward import BSEERegressor, RiccatiLQAdjoint
from .forward import ForwardSimulator
from .problem import (
    BallSet,
    BoxSet,
    HamiltonianMinimizer,
    finite_diff_check,
    hamiltonian_eval,
    hamiltonian_grad_nu,
    hamiltonian_grad_x,
    path_costs,
)
from .spectral import hs_inner, refine_same_noise, sample_wiener_increments

# sub-check RNG streams derived from the master seed
_STREAM = {"phi": 1, "hamiltonian": 2, "minimum": 3, "bounds": 4, "fd": 5, "alternatives": 6}


def _rng(seed, name):
    return np.random.default_rng([int(seed), _STREAM[name]])


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        # strict JSON has no nan/inf
        return value if np.isfinite(value) else repr(value)
    return value


# ---------------------------------------------------------------------------
# results


@dataclass
class ConvexityResult:
    n_tests: int
    worst_violation: float
    tolerance: float
    worst_midpoint: float
    worst_gradient: float
    radius: float
    witness: dict = None

    @property
    def passed(self):
        return bool(self.worst_violation <= self.tolerance)

    def to_dict(self):
        d = asdict(self)
        d["pass"] = self.passed
        return _jsonable(d)


@dataclass
class MinimumConditionResult:
    n_points: int
    max_gap: float
    variational_residual: float
    tol_gap: float
    tol_var: float
    gap_mean_by_step: list
    gap_max_by_step: list
    witness: dict = None

    @property
    def passed(self):
        return bool(self.max_gap <= self.tol_gap and self.variational_residual <= self.tol_var)

    def to_dict(self):
        d = asdict(self)
        d["pass"] = self.passed
        return _jsonable(d)


@dataclass
class DualityCheckResult:
    label: str
    lhs: float
    lhs_stderr: float
    rhs: float
    rhs_stderr: float
    gap: float
    combined_stderr: float
    bias_tol: float
    terms: dict = field(default_factory=dict)

    @property
    def tolerance(self):
        return 3.0 * self.combined_stderr + self.bias_tol

    @property
    def passed(self):
        return bool(abs(self.gap) <= self.tolerance)

    def to_dict(self):
        d = asdict(self)
        d["tolerance"] = self.tolerance
        d["pass"] = self.passed
        return _jsonable(d)


@dataclass
class BoundsReport:
    radii: tuple
    max_norms: dict
    growth: dict
    growth_limit: float
    phi_growth_ratio: list
    strict: tuple = ("drift_x", "drift_nu", "diffusion_x", "diffusion_nu")

    @property
    def unbounded(self):
        return sorted(k for k, g in self.growth.items() if g > self.growth_limit)

    @property
    def passed(self):
        return not any(k in self.strict for k in self.unbounded)

    @property
    def warnings(self):
        w = [f"{k} grows with the sample radius" for k in self.unbounded if k not in self.strict]
        if self.phi_growth_ratio[1] > self.growth_limit * self.phi_growth_ratio[0]:
            w.append("terminal gradient grows faster than linearly")
        return w

    def to_dict(self):
        d = asdict(self)
        d.update(pass_=self.passed, unbounded=self.unbounded, warnings=self.warnings)
        d["pass"] = d.pop("pass_")
        return _jsonable(d)


# ---------------------------------------------------------------------------
# sampling helpers


@dataclass
class SamplerConfig:
    """Pairs ``(a, b)``: ``a`` within ``radius`` (rms) of a centre, ``b`` at a
    log-uniform distance between ``min_scale * radius`` and ``radius`` from ``a``."""

    n_pairs: int = 10_000
    radius: float = 1.0
    min_scale: float = 1e-4
    tol: float = 1e-9
    seed: int = 0


def _pairs(rng, centers, dim, cfg, aligned=False):
    # aligned: pair j is drawn around centers[j]
    idx = np.arange(cfg.n_pairs) if aligned else rng.integers(0, centers.shape[0], cfg.n_pairs)
    a = centers[idx] + cfg.radius * rng.standard_normal((cfg.n_pairs, dim)) / np.sqrt(dim)
    u = rng.standard_normal((cfg.n_pairs, dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    dist = cfg.radius * np.exp(rng.uniform(np.log(cfg.min_scale), 0.0, cfg.n_pairs))
    return a, a + dist[:, None] * u, idx


def _convexity(f, grad, a, b, tol, radius, describe):
    fa, fb, fm = f(a), f(b), f(0.5 * (a + b))
    scale = 1.0 + np.abs(fa) + np.abs(fb)
    midpoint = (fm - 0.5 * (fa + fb)) / scale
    gradient = (np.sum(grad(a) * (b - a), axis=1) - (fb - fa)) / scale
    viol = np.maximum(midpoint, gradient)
    j = int(np.argmax(viol))
    witness = None
    if viol[j] > tol:
        witness = describe(j)
        witness.update(f_a=fa[j], f_b=fb[j], f_mid=fm[j])
    return ConvexityResult(
        n_tests=a.shape[0],
        worst_violation=float(viol[j]),
        tolerance=tol,
        worst_midpoint=float(midpoint.max()),
        worst_gradient=float(gradient.max()),
        radius=radius,
        witness=_jsonable(witness),
    )


# ---------------------------------------------------------------------------
# condition (i)


def check_phi_convexity(problem, sampler_cfg=None, centers=None):
    """Midpoint and gradient-inequality convexity audit of the terminal cost."""
    cfg = sampler_cfg or SamplerConfig()
    centers = problem.x0[None] if centers is None else np.asarray(centers, dtype=float)
    rng = _rng(cfg.seed, "phi")
    a, b, _ = _pairs(rng, centers, problem.n_modes, cfg)
    c = problem.coeffs
    return _convexity(
        c.terminal_cost, c.terminal_grad, a, b, cfg.tol, cfg.radius,
        lambda j: {"a": a[j], "b": b[j]},
    )


# ---------------------------------------------------------------------------
# condition (iii)


def check_hamiltonian_convexity(problem, adjoint, forward, control=None, sampler_cfg=None):
    """Joint convexity of ``(x, nu) -> H(x, nu, Y*(t), Z*(t))`` at sampled (path, step)."""
    cfg = sampler_cfg or SamplerConfig()
    rng = _rng(cfg.seed, "hamiltonian")
    n, m = problem.n_modes, problem.n_controls
    n_paths, n_steps = forward.controls.shape[:2]
    p = rng.integers(0, n_paths, cfg.n_pairs)
    s = rng.integers(0, n_steps, cfg.n_pairs)
    y, z = adjoint.Y[p, s], adjoint.Z[p, s]
    centers = np.concatenate([forward.states[p, s], forward.controls[p, s]], axis=1)
    a, b, _ = _pairs(rng, centers, n + m, cfg, aligned=True)
    # keep control components admissible (U is convex, so midpoints stay in U)
    U = problem.control_set
    a[:, n:], b[:, n:] = U.project(a[:, n:]), U.project(b[:, n:])
    coeffs = problem.coeffs

    def f(w):
        return hamiltonian_eval(coeffs, w[:, :n], w[:, n:], y, z)

    def grad(w):
        gx = hamiltonian_grad_x(coeffs, w[:, :n], w[:, n:], y, z)
        gn = hamiltonian_grad_nu(coeffs, w[:, :n], w[:, n:], y, z)
        return np.concatenate([gx, gn], axis=1)

    def describe(j):
        return {"path": p[j], "step": s[j], "x_a": a[j, :n], "nu_a": a[j, n:],
                "x_b": b[j, :n], "nu_b": b[j, n:]}

    return _convexity(f, grad, a, b, cfg.tol, cfg.radius, describe)


# ---------------------------------------------------------------------------
# condition (iv)


def _worst_descent(U, g, nu):
    """``max_{v in U} -<g, v - nu>`` in closed form for box and ball sets."""
    if isinstance(U, BoxSet):
        best = np.where(g > 0, U.lower, U.upper)
    elif isinstance(U, BallSet):
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        best = U.center - U.radius * g / np.maximum(norm, np.finfo(float).tiny)
    else:
        raise TypeError(f"no support function for {type(U).__name__}")
    return np.maximum(0.0, -np.sum(g * (best - nu), axis=1))


def check_minimum_condition(problem, forward, adjoint, control=None, U=None, cfg=None):
    """Hamiltonian gap ``H(candidate) - min_U H`` and the variational residual.

    Both are normalized by ``1 + |H(candidate)|``; the residual
    ``max_{v in U} -<grad_nu H, v - nu>`` is further divided by ``diam(U)``
    so that it reads as a gradient magnitude independent of the size of U.
    ``cfg`` keys:
    ``n_paths`` (sampled paths; every grid step is used), ``tol_gap``,
    ``tol_var``, ``seed`` and the minimizer's ``n_restarts``/``max_iter``/``tol``.
    """
    cfg = dict(cfg or {})
    U = U or problem.control_set
    rng = _rng(cfg.get("seed", 0), "minimum")
    n_sample = min(cfg.get("n_paths", 64), forward.n_paths)
    paths = np.sort(rng.choice(forward.n_paths, n_sample, replace=False))
    n_steps = forward.n_steps
    x = forward.states[paths, :-1].reshape(-1, problem.n_modes)
    nu_star = forward.controls[paths].reshape(-1, problem.n_controls)
    y = adjoint.Y[paths, :-1].reshape(-1, problem.n_modes)
    z = adjoint.Z[paths].reshape(-1, problem.n_modes, problem.n_modes)
    c = problem.coeffs

    minimizer = HamiltonianMinimizer(
        n_restarts=cfg.get("n_restarts", 2),
        max_iter=cfg.get("max_iter", 500),
        tol=cfg.get("tol", 1e-10),
        seed=cfg.get("seed", 0),
    )
    _, h_min = minimizer.minimize(c, x, y, z, U, start=nu_star)
    h_star = hamiltonian_eval(c, x, nu_star, y, z)
    scale = 1.0 + np.abs(h_star)
    gap = (h_star - h_min) / scale
    g = hamiltonian_grad_nu(c, x, nu_star, y, z)
    resid = _worst_descent(U, g, nu_star) / (scale * U.diameter)

    gap_grid = gap.reshape(n_sample, n_steps)
    j = int(np.argmax(np.maximum(gap / cfg.get("tol_gap", 1e-3), resid / cfg.get("tol_var", 1e-2))))
    path_j, step_j = divmod(j, n_steps)
    witness = {
        "path": paths[path_j], "step": step_j, "x": x[j], "nu_candidate": nu_star[j],
        "H_candidate": h_star[j], "H_min": h_min[j], "grad_nu": g[j],
    }
    return MinimumConditionResult(
        n_points=x.shape[0],
        max_gap=float(gap.max()),
        variational_residual=float(resid.max()),
        tol_gap=cfg.get("tol_gap", 1e-3),
        tol_var=cfg.get("tol_var", 1e-2),
        gap_mean_by_step=gap_grid.mean(axis=0).tolist(),
        gap_max_by_step=gap_grid.max(axis=0).tolist(),
        witness=_jsonable(witness),
    )


# ---------------------------------------------------------------------------
# condition (ii)


def check_derivative_bounds(problem, cfg=None):
    """Sampled operator norms of the derivatives at two radii around ``x0``.

    A derivative whose largest sampled norm grows by more than
    ``growth_limit`` between the radii is reported as unbounded. Only the
    drift and diffusion derivatives are held to boundedness; the cost
    derivatives and the terminal gradient get a linear-growth warning.
    """
    cfg = dict(cfg or {})
    radii = tuple(cfg.get("radii", (2.0, 8.0)))
    n_samples = cfg.get("n_samples", 200)
    n_dirs = cfg.get("n_dirs", 8)
    limit = cfg.get("growth_limit", 1.5)
    rng = _rng(cfg.get("seed", 0), "bounds")
    c = problem.coeffs
    n, m = problem.n_modes, problem.n_controls
    maps = {
        "drift_x": (c.drift_x, n), "drift_nu": (c.drift_nu, m),
        "diffusion_x": (c.diffusion_x, n), "diffusion_nu": (c.diffusion_nu, m),
        "running_cost_x": (c.running_cost_x, n), "running_cost_nu": (c.running_cost_nu, m),
    }
    norms = {k: [] for k in maps}
    phi_ratio = []
    for radius in radii:
        x = problem.x0 + radius * rng.standard_normal((n_samples, n))
        nu = problem.control_set.project(radius * rng.standard_normal((n_samples, m)))
        for name, (deriv, dim) in maps.items():
            best = 0.0
            for _ in range(n_dirs):
                h = rng.standard_normal((n_samples, dim))
                h /= np.linalg.norm(h, axis=1, keepdims=True)
                out = np.asarray(deriv(x, nu, h))
                size = np.sqrt(np.sum(out.reshape(n_samples, -1) ** 2, axis=1))
                best = max(best, float(size.max()))
            norms[name].append(best)
        grad_phi = np.linalg.norm(c.terminal_grad(x), axis=1)
        phi_ratio.append(float(np.max(grad_phi / (1.0 + np.linalg.norm(x, axis=1)))))
    growth = {k: (v[1] / v[0] if v[0] > 0 else (np.inf if v[1] > 0 else 1.0)) for k, v in norms.items()}
    return BoundsReport(radii, norms, growth, limit, phi_ratio)


# ---------------------------------------------------------------------------
# duality identity


def duality_terms(problem, forward_star, adjoint_star, forward_alt):
    """Per-path left side and the three right-side terms of the duality identity.

    ``psi_1 = b(X*, nu*) - b(X, nu)``; integrals use left-endpoint quadrature.
    """
    c = problem.coeffs
    dt = forward_star.dt
    xs, xa = forward_star.states, forward_alt.states
    us, ua = forward_star.controls, forward_alt.controls
    dx = xs - xa
    lhs = np.sum(adjoint_star.Y[:, -1] * dx[:, -1], axis=1)
    xs_l, xa_l = xs[:, :-1], xa[:, :-1]
    psi1 = c.drift(xs_l, us) - c.drift(xa_l, ua)
    drift_term = dt * np.sum(adjoint_star.Y[:, :-1] * psi1, axis=(1, 2))
    grad = hamiltonian_grad_x(c, xs_l, us, adjoint_star.Y[:, :-1], adjoint_star.Z)
    driver_term = -dt * np.sum(grad * dx[:, :-1], axis=(1, 2))
    dsig = c.diffusion(xs_l, us) - c.diffusion(xa_l, ua)
    noise_term = dt * np.sum(hs_inner(dsig, adjoint_star.Z), axis=1)
    return lhs, {"drift": drift_term, "driver": driver_term, "diffusion": noise_term}


def _stderr(v):
    return float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0


def duality_statistics(lhs, terms, bias_tol, label=""):
    rhs = terms["drift"] + terms["driver"] + terms["diffusion"]
    gap = lhs - rhs
    return DualityCheckResult(
        label=label,
        lhs=float(lhs.mean()), lhs_stderr=_stderr(lhs),
        rhs=float(rhs.mean()), rhs_stderr=_stderr(rhs),
        gap=float(gap.mean()), combined_stderr=_stderr(gap),
        bias_tol=float(bias_tol),
        terms={k: {"mean": float(v.mean()), "stderr": _stderr(v)} for k, v in terms.items()},
    )


def _solve_adjoint(problem, forward, cfg):
    if cfg.get("adjoint", "regression") == "riccati":
        spec = problem.params["lq_spec"]
        return RiccatiLQAdjoint().fit(spec, forward.grid).predict(forward)
    est = BSEERegressor(degree=cfg.get("degree", 1), ridge=cfg.get("ridge"))
    return est.fit_predict(problem, forward)


def _star_solution(problem, control_star, increments, cfg):
    """Candidate paths and adjoint on the grid of ``increments``."""
    sim = ForwardSimulator(cfg.get("scheme", "exponential_euler"))
    fs = sim.simulate(problem, _regrid(control_star, increments), increments)
    return fs, _solve_adjoint(problem, fs, cfg)


def _duality_gap(problem, control_star, control_alt, increments, cfg, star=None):
    fs, adj = star if star is not None else _star_solution(problem, control_star, increments, cfg)
    sim = ForwardSimulator(cfg.get("scheme", "exponential_euler"))
    fa = sim.simulate(problem, _regrid(control_alt, increments), increments)
    lhs, terms = duality_terms(problem, fs, adj, fa)
    return float(np.mean(lhs - sum(terms.values())))


def _regrid(control, increments):
    """Feedback and open-loop controls re-sampled on a refined grid."""
    if control.n_steps == increments.n_steps:
        return control
    from .problem import ControlProcess

    factor = increments.n_steps // control.n_steps
    grid = np.linspace(0.0, control.grid[-1], increments.n_steps + 1)
    if control.is_feedback:
        base_dt = control.dt

        def rule(t, x):
            i = min(int(np.floor(t / base_dt + 1e-9)), control.n_steps - 1)
            return control.feedback(control.grid[i], x)

        return ControlProcess(grid, control.control_set, feedback=rule, label=control.label)
    return ControlProcess(grid, control.control_set,
                          values=np.repeat(control.values, factor, axis=-2), label=control.label)


def calibrate_bias_tol(problem, control_star, control_alt, increments, cfg=None,
                       coarse_gap=None, fine_star=None):
    """Twice the shift of the duality gap when the time step is halved on the same noise.

    ``coarse_gap`` and ``fine_star`` (the candidate's paths and adjoint on
    the halved grid) may be passed in to avoid recomputing them for every
    alternative.
    """
    cfg = dict(cfg or {})
    if coarse_gap is None:
        coarse_gap = _duality_gap(problem, control_star, control_alt, increments, cfg)
    if fine_star is None:
        fine_star = _star_solution(problem, control_star, refine_same_noise(increments, 2), cfg)
    fine = _duality_gap(problem, control_star, control_alt, fine_star[0].increments, cfg, fine_star)
    return 2.0 * abs(fine - coarse_gap)


def check_duality_identity(problem, control_star, control_alt, n_paths=4096, seed=0, grid=None,
                           cfg=None, increments=None, forward_star=None, adjoint_star=None):
    """Monte Carlo check of the forward/backward duality identity on shared noise.

    Passes iff ``|lhs - rhs| <= 3 * combined_stderr + bias_tol``; with
    ``cfg['bias_tol'] = None`` the allowance is calibrated by halving the step.
    """
    return check_duality_batch(problem, control_star, [control_alt], n_paths, seed, grid, cfg,
                               increments, forward_star, adjoint_star)[0]


def check_duality_batch(problem, control_star, alternatives, n_paths=4096, seed=0, grid=None,
                        cfg=None, increments=None, forward_star=None, adjoint_star=None):
    """:func:`check_duality_identity` against several alternatives, sharing the
    candidate's paths and adjoint (on both grids) between them."""
    cfg = dict(cfg or {})
    grid = control_star.grid if grid is None else np.asarray(grid, dtype=float)
    for ctrl in (control_star, *alternatives):
        if ctrl.n_steps != grid.size - 1 or not np.allclose(ctrl.grid, grid):
            raise ValueError(f"control {ctrl.label!r} does not live on the requested grid")
    if increments is None:
        increments = sample_wiener_increments(problem.basis, control_star.dt, control_star.n_steps,
                                              n_paths, seed, cfg.get("n_threads", 1))
    sim = ForwardSimulator(cfg.get("scheme", "exponential_euler"))
    if forward_star is None:
        forward_star = sim.simulate(problem, control_star, increments)
    if adjoint_star is None:
        adjoint_star = _solve_adjoint(problem, forward_star, cfg)
    fine_star = None
    results = []
    for alt in alternatives:
        forward_alt = sim.simulate(problem, alt, increments)
        lhs, terms = duality_terms(problem, forward_star, adjoint_star, forward_alt)
        bias_tol = cfg.get("bias_tol")
        if bias_tol is None:
            if fine_star is None:
                fine_star = _star_solution(problem, control_star, refine_same_noise(increments, 2), cfg)
            coarse = float(np.mean(lhs - sum(terms.values())))
            bias_tol = calibrate_bias_tol(problem, control_star, alt, increments, cfg, coarse, fine_star)
        results.append(duality_statistics(lhs, terms, bias_tol, alt.label))
    return results


# ---------------------------------------------------------------------------
# cost comparison


@dataclass
class CostComparison:
    candidate_cost: float
    candidate_stderr: float
    rows: list

    @property
    def flagged(self):
        return [r["label"] for r in self.rows if r["flagged"]]

    @property
    def passed(self):
        return not self.flagged

    def to_dict(self):
        return _jsonable({
            "candidate_cost": self.candidate_cost,
            "candidate_stderr": self.candidate_stderr,
            "alternatives": self.rows,
            "flagged": self.flagged,
            "pass": self.passed,
        })


def _cost_rows(problem, forward_star, forwards_alt, labels):
    c = problem.coeffs
    j_star = path_costs(c, forward_star.states, forward_star.controls, forward_star.dt)
    rows = []
    for label, fa in zip(labels, forwards_alt):
        j_alt = path_costs(c, fa.states, fa.controls, fa.dt)
        diff = j_alt - j_star
        mean, se = float(diff.mean()), _stderr(diff)
        rows.append({
            "label": label, "cost": float(j_alt.mean()), "stderr": _stderr(j_alt),
            "paired_diff": mean, "paired_stderr": se, "flagged": bool(mean < -3.0 * se),
        })
    return CostComparison(float(j_star.mean()), _stderr(j_star), rows)


def compare_costs(problem, candidate, alternatives, n_paths=4096, seed=0, scheme="exponential_euler",
                  increments=None):
    """Common-noise costs of the candidate and each alternative with paired standard errors.

    An alternative is flagged when ``J(alt) < J(candidate) - 3 * paired_stderr``.
    """
    for alt in alternatives:
        if alt.n_steps != candidate.n_steps or not np.allclose(alt.grid, candidate.grid):
            raise ValueError(f"alternative {alt.label!r} is on a different grid")
    if increments is None:
        increments = sample_wiener_increments(problem.basis, candidate.dt, candidate.n_steps,
                                              n_paths, seed)
    sim = ForwardSimulator(scheme)
    fs = sim.simulate(problem, candidate, increments)
    fas = [sim.simulate(problem, alt, increments) for alt in alternatives]
    labels = [alt.label or f"alt_{j}" for j, alt in enumerate(alternatives)]
    return _cost_rows(problem, fs, fas, labels)


def random_alternatives(candidate, n_alt, scale=0.3, seed=0):
    """Admissible perturbations ``P_U(g * nu(t, x) + delta_t)`` of a candidate.

    The gain ``g`` is drawn from ``[0.5, 1.5]`` and the offsets ``delta_t``
    are deterministic per step with rms ``scale`` times the half-diameter of
    ``U`` divided by ``sqrt(m)``.
    """
    rng = _rng(seed, "alternatives")
    U = candidate.control_set
    amp = scale * 0.5 * U.diameter / np.sqrt(U.dim)
    alts = []
    for j in range(n_alt):
        gain = rng.uniform(0.5, 1.5)
        offsets = amp * rng.standard_normal((candidate.n_steps, U.dim))
        alts.append(candidate.perturbed(offsets, gain, label=f"perturbed_{j}"))
    return alts


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class VerificationReport:
    problem: str
    candidate: str
    settings: dict
    cond_i: dict
    cond_ii: dict
    cond_iii: dict
    cond_iv: dict
    duality: list
    costs: dict
    errors: dict

    @property
    def verdict(self):
        v = {}
        for key in ("cond_i", "cond_ii", "cond_iii", "cond_iv"):
            v[key] = bool(getattr(self, key).get("pass", False))
        v["duality"] = all(d.get("pass", False) for d in self.duality) if self.duality else True
        v["costs"] = bool(self.costs.get("pass", True))
        v["conditions"] = all(v[k] for k in ("cond_i", "cond_ii", "cond_iii", "cond_iv"))
        return v

    @property
    def partial(self):
        return bool(self.errors)

    def to_dict(self):
        d = asdict(self)
        d["verdict"] = self.verdict
        d["partial"] = self.partial
        return _jsonable(d)


@dataclass
class VerifierConfig:
    n_paths: int = 4096
    seed: int = 0
    scheme: str = "exponential_euler"
    adjoint: str = "regression"
    degree: int = 1
    ridge: float = None
    tol_fd: float = 1e-6
    n_fd: int = 100
    tol_convex: float = 1e-9
    n_convex_pairs: int = 10_000
    convex_radius: float = 1.0
    n_min_paths: int = 64
    n_restarts: int = 2
    tol_gap: float = 1e-3
    tol_var: float = 1e-2
    n_alt: int = 5
    alt_scale: float = 0.3
    bias_tol: float = None
    n_threads: int = 1


class OptimalityVerifier(BaseEstimator):
    """Run every sufficient-condition audit for one candidate control.

    ``fit(problem, candidate)`` stores ``report_``, the forward ensemble
    ``forward_`` and adjoint ``adjoint_``; sub-check failures with an
    exception are recorded in ``report_.errors`` instead of propagating.
    """

    def __init__(self, n_paths=4096, seed=0, scheme="exponential_euler", adjoint="regression",
                 degree=1, ridge=None, tol_fd=1e-6, n_fd=100, tol_convex=1e-9,
                 n_convex_pairs=10_000, convex_radius=1.0, n_min_paths=64, n_restarts=2,
                 tol_gap=1e-3, tol_var=1e-2, n_alt=5, alt_scale=0.3, bias_tol=None,
                 n_threads=1):
        self.n_paths = n_paths
        self.seed = seed
        self.scheme = scheme
        self.adjoint = adjoint
        self.degree = degree
        self.ridge = ridge
        self.tol_fd = tol_fd
        self.n_fd = n_fd
        self.tol_convex = tol_convex
        self.n_convex_pairs = n_convex_pairs
        self.convex_radius = convex_radius
        self.n_min_paths = n_min_paths
        self.n_restarts = n_restarts
        self.tol_gap = tol_gap
        self.tol_var = tol_var
        self.n_alt = n_alt
        self.alt_scale = alt_scale
        self.bias_tol = bias_tol
        self.n_threads = n_threads

    def fit(self, problem, candidate, alternatives=None):
        errors = {}
        sampler = SamplerConfig(self.n_convex_pairs, self.convex_radius, tol=self.tol_convex,
                                seed=self.seed)
        increments = sample_wiener_increments(problem.basis, candidate.dt, candidate.n_steps,
                                              self.n_paths, self.seed, self.n_threads)
        sim = ForwardSimulator(self.scheme)
        forward = sim.simulate(problem, candidate, increments)
        adj_cfg = {"adjoint": self.adjoint, "degree": self.degree, "ridge": self.ridge,
                   "scheme": self.scheme, "bias_tol": self.bias_tol}
        adjoint = _solve_adjoint(problem, forward, adj_cfg)
        self.forward_, self.adjoint_, self.increments_ = forward, adjoint, increments

        def guarded(name, fn):
            try:
                return fn()
            except Exception as exc:  # recorded, report still emitted
                errors[name] = f"{type(exc).__name__}: {exc}"
                return {"pass": False, "error": errors[name]}

        cond_i = guarded("cond_i", lambda: check_phi_convexity(
            problem, sampler, forward.terminal).to_dict())

        def cond_ii_fn():
            fd = finite_diff_check(problem, self.n_fd, self.tol_fd, seed=self.seed)
            bounds = check_derivative_bounds(problem, {"seed": self.seed})
            return {"pass": fd.passed and bounds.passed, "finite_differences": fd.to_dict(),
                    "bounds": bounds.to_dict()}

        cond_ii = guarded("cond_ii", cond_ii_fn)
        cond_iii = guarded("cond_iii", lambda: check_hamiltonian_convexity(
            problem, adjoint, forward, candidate, sampler).to_dict())
        cond_iv = guarded("cond_iv", lambda: check_minimum_condition(
            problem, forward, adjoint, candidate, cfg={
                "n_paths": self.n_min_paths, "tol_gap": self.tol_gap, "tol_var": self.tol_var,
                "seed": self.seed, "n_restarts": self.n_restarts}).to_dict())

        if alternatives is None:
            alternatives = random_alternatives(candidate, self.n_alt, self.alt_scale, self.seed)
        duality, forwards_alt = [], []
        fine_star = None
        for alt in alternatives:
            try:
                fa = sim.simulate(problem, alt, increments)
                forwards_alt.append(fa)
                lhs, terms = duality_terms(problem, forward, adjoint, fa)
                bias = self.bias_tol
                if bias is None:
                    if fine_star is None:
                        fine_star = _star_solution(problem, candidate,
                                                   refine_same_noise(increments, 2), adj_cfg)
                    coarse = float(np.mean(lhs - sum(terms.values())))
                    bias = calibrate_bias_tol(problem, candidate, alt, increments, adj_cfg,
                                              coarse, fine_star)
                duality.append(duality_statistics(lhs, terms, bias, alt.label).to_dict())
            except Exception as exc:
                errors[f"duality:{alt.label}"] = f"{type(exc).__name__}: {exc}"
                duality.append({"label": alt.label, "pass": False, "error": errors[f"duality:{alt.label}"]})
        costs = guarded("costs", lambda: _cost_rows(
            problem, forward, forwards_alt, [a.label for a in alternatives[:len(forwards_alt)]]
        ).to_dict())

        settings = self.get_params()
        settings.update(n_steps=candidate.n_steps, horizon=float(candidate.grid[-1]),
                        adjoint_info=adjoint.info)
        self.report_ = VerificationReport(
            problem=problem.name, candidate=candidate.label, settings=_jsonable(settings),
            cond_i=cond_i, cond_ii=cond_ii, cond_iii=cond_iii, cond_iv=cond_iv,
            duality=duality, costs=costs, errors=errors,
        )
        return self


def verify_sufficient_conditions(problem, candidate, cfg=None):
    cfg = cfg if isinstance(cfg, dict) else asdict(cfg or VerifierConfig())
    return OptimalityVerifier(**cfg).fit(problem, candidate).report_
