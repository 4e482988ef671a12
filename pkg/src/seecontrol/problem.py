"""Control problem definition: coefficients, control sets, Hamiltonian, cost.

Coefficient callables are vectorized over a leading batch of points:

* ``x`` has shape ``(..., N)``, ``nu`` has shape ``(..., m)``;
* ``drift(x, nu) -> (..., N)``, ``diffusion(x, nu) -> (..., N, N)``,
  ``running_cost(x, nu) -> (...)``, ``terminal_cost(x) -> (...)``;
* derivative evaluators take a direction with the batch shape of the base
  point and return the directional derivative, e.g.
  ``drift_x(x, nu, h) -> (..., N)`` or ``diffusion_nu(x, nu, k) -> (..., N, N)``;
* ``terminal_grad(x) -> (..., N)`` is the gradient of the terminal cost.
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_count, check_positive, check_uniform_grid, check_vector
from .spectral import SpectralBasis, hs_inner

# ---------------------------------------------------------------------------
# control sets


class ControlSet:
    """Closed convex subset of ``R^m`` with an exact Euclidean projection."""

    dim: int

    def project(self, v):
        raise NotImplementedError

    def contains(self, v):
        raise NotImplementedError

    def sample(self, rng, n):
        raise NotImplementedError

    @property
    def center(self):
        raise NotImplementedError

    @property
    def diameter(self):
        raise NotImplementedError


class BoxSet(ControlSet):
    def __init__(self, lower, upper):
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise ValueError("box bounds must be finite")
        if np.any(lower > upper):
            raise ValueError("box lower bound exceeds upper bound")
        self.lower, self.upper = lower, upper
        self.dim = lower.size

    def project(self, v):
        v = check_vector(v, self.dim, "control")
        return np.clip(v, self.lower, self.upper)

    def contains(self, v):
        v = np.asarray(v, dtype=float)
        return np.all((v >= self.lower) & (v <= self.upper), axis=-1)

    def sample(self, rng, n):
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))

    @property
    def center(self):
        return 0.5 * (self.lower + self.upper)

    @property
    def diameter(self):
        return float(np.linalg.norm(self.upper - self.lower))

    def to_dict(self):
        return {"kind": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}

    def __repr__(self):
        return f"BoxSet(lower={self.lower.tolist()}, upper={self.upper.tolist()})"


class BallSet(ControlSet):
    def __init__(self, center, radius):
        center = np.atleast_1d(np.asarray(center, dtype=float))
        if center.ndim != 1 or not np.all(np.isfinite(center)):
            raise ValueError("ball center must be a finite 1-d array")
        self._center = center
        self.radius = check_positive(radius, "radius")
        self.dim = center.size

    def project(self, v):
        v = check_vector(v, self.dim, "control")
        d = v - self._center
        norm = np.linalg.norm(d, axis=-1, keepdims=True)
        scale = np.minimum(1.0, self.radius / np.maximum(norm, np.finfo(float).tiny))
        return self._center + d * scale

    def contains(self, v):
        # radial rescaling can overshoot the sphere by an ulp
        d = np.asarray(v, dtype=float) - self._center
        return np.linalg.norm(d, axis=-1) <= self.radius * (1.0 + 4 * np.finfo(float).eps)

    def sample(self, rng, n):
        g = rng.standard_normal((n, self.dim))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        r = self.radius * rng.uniform(size=(n, 1)) ** (1.0 / self.dim)
        return self._center + r * g

    @property
    def center(self):
        return self._center.copy()

    @property
    def diameter(self):
        return 2.0 * self.radius

    def to_dict(self):
        return {"kind": "ball", "center": self._center.tolist(), "radius": self.radius}

    def __repr__(self):
        return f"BallSet(center={self._center.tolist()}, radius={self.radius})"


def project_onto_U(U, nu_raw):
    """Euclidean projection of ``nu_raw`` onto the convex control set ``U``."""
    return U.project(nu_raw)


# ---------------------------------------------------------------------------
# coefficients and problem

_DERIVATIVES = (
    "drift_x",
    "drift_nu",
    "diffusion_x",
    "diffusion_nu",
    "running_cost_x",
    "running_cost_nu",
    "terminal_grad",
)


@dataclass(frozen=True)
class CoefficientBundle:
    drift: Callable
    diffusion: Callable
    running_cost: Callable
    terminal_cost: Callable
    drift_x: Callable
    drift_nu: Callable
    diffusion_x: Callable
    diffusion_nu: Callable
    running_cost_x: Callable
    running_cost_nu: Callable
    terminal_grad: Callable

    def __post_init__(self):
        missing = [name for name in _DERIVATIVES if not callable(getattr(self, name))]
        if missing:
            raise ValueError(f"coefficient bundle lacks derivative evaluators: {missing}")

    def replace(self, **changes):
        fields = {name: getattr(self, name) for name in self.__dataclass_fields__}
        fields.update(changes)
        return CoefficientBundle(**fields)


@dataclass(frozen=True)
class ProblemDefinition:
    """Everything needed to simulate and score one controlled system."""

    basis: SpectralBasis
    coeffs: CoefficientBundle
    control_set: ControlSet
    x0: np.ndarray
    horizon: float = 1.0
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        x0 = check_vector(self.x0, self.basis.n_modes, "x0", allow_batch=False)
        object.__setattr__(self, "x0", x0)
        check_positive(self.horizon, "horizon")

    @property
    def n_modes(self):
        return self.basis.n_modes

    @property
    def n_controls(self):
        return self.control_set.dim

    def grid(self, n_steps):
        n_steps = check_count(n_steps, "n_steps")
        return np.linspace(0.0, self.horizon, n_steps + 1)

    def replace(self, **changes):
        fields = {name: getattr(self, name) for name in self.__dataclass_fields__}
        fields.update(changes)
        return ProblemDefinition(**fields)


class ControlProcess:
    """Piecewise-constant admissible control on a uniform grid.

    Either ``values`` (shape ``(n_steps, m)`` shared by all paths, or
    ``(n_paths, n_steps, m)``) or a ``feedback`` rule ``(t, x) -> nu`` must
    be given; the feedback overrides stored values. Everything emitted is
    projected onto the control set, and a step's value only depends on the
    state at the left endpoint of the cell.
    """

    def __init__(self, grid, control_set, values=None, feedback=None, label=""):
        self.grid, self.dt = check_uniform_grid(grid)
        self.control_set = control_set
        self.feedback = feedback
        self.label = label
        if values is None and feedback is None:
            raise ValueError("a control needs stored values or a feedback rule")
        if values is not None:
            values = np.asarray(values, dtype=float)
            if values.ndim not in (2, 3) or values.shape[-2:] != (self.n_steps, control_set.dim):
                raise ValueError(
                    f"control values must end in shape ({self.n_steps}, {control_set.dim}),"
                    f" got {values.shape}"
                )
            if not np.all(np.isfinite(values)):
                raise ValueError("control values must be finite")
            values = control_set.project(values)
            values.setflags(write=False)
        self.values = values

    @property
    def n_steps(self):
        return self.grid.size - 1

    @property
    def is_feedback(self):
        return self.feedback is not None

    def at(self, i, x):
        """Control on cell ``[t_i, t_{i+1})`` for states ``x`` of shape ``(P, N)``."""
        n_paths = x.shape[0]
        if self.feedback is not None:
            nu = np.asarray(self.feedback(self.grid[i], x), dtype=float)
            nu = np.broadcast_to(nu, (n_paths, self.control_set.dim))
        elif self.values.ndim == 2:
            nu = np.broadcast_to(self.values[i], (n_paths, self.control_set.dim))
        else:
            if self.values.shape[0] != n_paths:
                raise ValueError(
                    f"control stores {self.values.shape[0]} paths, simulation uses {n_paths}"
                )
            nu = self.values[:, i]
        if not np.all(np.isfinite(nu)):
            raise ValueError(f"control produced non-finite values at step {i}")
        return self.control_set.project(nu)

    @classmethod
    def constant(cls, grid, control_set, value, label="constant"):
        value = np.broadcast_to(np.asarray(value, dtype=float), (control_set.dim,))
        values = np.tile(value, (len(grid) - 1, 1))
        return cls(grid, control_set, values=values, label=label)

    def perturbed(self, offsets, gain=1.0, label=""):
        """Feedback ``P_U(gain * nu(t, x) + offsets[i])`` built on this control.

        ``offsets`` has shape ``(n_steps, m)``; deterministic offsets keep the
        perturbed control adapted.
        """
        offsets = np.asarray(offsets, dtype=float)
        grid = self.grid
        base = self

        def rule(t, x):
            i = min(int(round(t / base.dt)), base.n_steps - 1)
            return gain * base.at(i, x) + offsets[i]

        return ControlProcess(grid, self.control_set, feedback=rule, label=label)

    def __repr__(self):
        kind = "feedback" if self.is_feedback else "stored"
        return f"ControlProcess({kind}, n_steps={self.n_steps}, label={self.label!r})"


# ---------------------------------------------------------------------------
# Hamiltonian


def hamiltonian_eval(coeffs, x, nu, y, z):
    """``l(x, nu) + <b(x, nu), y> + <sigma(x, nu), z>_2`` for batched points."""
    x = np.asarray(x, dtype=float)
    nu = np.asarray(nu, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    if y.shape[-1] != x.shape[-1] or z.shape[-2:] != (x.shape[-1], x.shape[-1]):
        raise ValueError("dimension mismatch between x, y and z")
    drift = coeffs.drift(x, nu)
    sigma = coeffs.diffusion(x, nu)
    return coeffs.running_cost(x, nu) + np.sum(drift * y, axis=-1) + hs_inner(sigma, z)


def _riesz(batch_shape, dim, directional):
    out = np.empty(batch_shape + (dim,))
    eye = np.eye(dim)
    for j in range(dim):
        # read-only broadcast view; derivative maps must not write into h
        out[..., j] = directional(np.broadcast_to(eye[j], batch_shape + (dim,)))
    return out


def hamiltonian_grad_x(coeffs, x, nu, y, z):
    """Riesz representative of ``h -> l_x h + <b_x h, y> + <sigma_x h, z>_2``.

    Costs ``N`` evaluations of each derivative map.
    """
    x = np.asarray(x, dtype=float)
    nu = np.asarray(nu, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], nu.shape[:-1], y.shape[:-1], z.shape[:-2])
    x = np.broadcast_to(x, batch + x.shape[-1:])
    nu = np.broadcast_to(nu, batch + nu.shape[-1:])

    def directional(h):
        return (
            coeffs.running_cost_x(x, nu, h)
            + np.sum(coeffs.drift_x(x, nu, h) * y, axis=-1)
            + hs_inner(coeffs.diffusion_x(x, nu, h), z)
        )

    return _riesz(batch, x.shape[-1], directional)


def hamiltonian_grad_nu(coeffs, x, nu, y, z):
    """Gradient of the Hamiltonian in the control, same adjoint composition."""
    x = np.asarray(x, dtype=float)
    nu = np.asarray(nu, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], nu.shape[:-1], y.shape[:-1], z.shape[:-2])
    x = np.broadcast_to(x, batch + x.shape[-1:])
    nu = np.broadcast_to(nu, batch + nu.shape[-1:])

    def directional(k):
        return (
            coeffs.running_cost_nu(x, nu, k)
            + np.sum(coeffs.drift_nu(x, nu, k) * y, axis=-1)
            + hs_inner(coeffs.diffusion_nu(x, nu, k), z)
        )

    return _riesz(batch, nu.shape[-1], directional)


class HamiltonianMinimizer(BaseEstimator):
    """Multi-start projected gradient descent on ``nu -> H(x, nu, y, z)`` over ``U``.

    Works on a whole batch of ``(x, y, z)`` points at once; every point
    carries its own step size, adapted by backtracking on the standard
    projected-gradient sufficient-decrease test. Starts are the centre of
    ``U``, an optional warm start, and ``n_restarts`` uniform draws from ``U``.
    """

    def __init__(self, n_restarts=2, max_iter=500, tol=1e-10, seed=0):
        self.n_restarts = n_restarts
        self.max_iter = max_iter
        self.tol = tol
        self.seed = seed

    def _descend(self, coeffs, U, x, y, z, nu):
        nu = U.project(nu)
        f = hamiltonian_eval(coeffs, x, nu, y, z)
        self._check_finite(f, x, nu)
        g = hamiltonian_grad_nu(coeffs, x, nu, y, z)
        step = np.ones(x.shape[0])
        active = np.ones(x.shape[0], dtype=bool)
        for _ in range(self.max_iter):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            s = step[idx, None]
            trial = U.project(nu[idx] - s * g[idx])
            d = trial - nu[idx]
            f_trial = hamiltonian_eval(coeffs, x[idx], trial, y[idx], z[idx])
            self._check_finite(f_trial, x[idx], trial)
            bound = f[idx] + np.sum(g[idx] * d, axis=1) + np.sum(d * d, axis=1) / (2 * s[:, 0])
            ok = f_trial <= bound + 1e-14 * (1.0 + np.abs(f[idx]))
            acc, rej = idx[ok], idx[~ok]
            step[rej] *= 0.5
            if acc.size:
                nu[acc] = trial[ok]
                f[acc] = f_trial[ok]
                g[acc] = hamiltonian_grad_nu(coeffs, x[acc], nu[acc], y[acc], z[acc])
                step[acc] *= 2.0
                stat = np.linalg.norm(nu[acc] - U.project(nu[acc] - g[acc]), axis=1)
                active[acc[stat <= self.tol]] = False
            active[rej[step[rej] < 1e-14]] = False
        return nu, f

    @staticmethod
    def _check_finite(f, x, nu):
        bad = ~np.isfinite(f)
        if np.any(bad):
            j = int(np.flatnonzero(bad)[0])
            raise FloatingPointError(
                f"non-finite Hamiltonian at x={x[j].tolist()}, nu={nu[j].tolist()}"
            )

    def minimize(self, coeffs, x, y, z, U, start=None):
        """Return ``(nu_hat, H_hat)`` for batched ``x (B, N)``, ``y (B, N)``, ``z (B, N, N)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        z = np.asarray(z, dtype=float)
        if z.ndim == 2:
            z = z[None]
        n_points = x.shape[0]
        rng = np.random.default_rng(self.seed)
        starts = [np.tile(U.center, (n_points, 1))]
        if start is not None:
            starts.append(np.array(np.broadcast_to(start, (n_points, U.dim)), dtype=float))
        starts += [U.sample(rng, n_points) for _ in range(self.n_restarts)]
        best_nu, best_f = None, None
        for nu0 in starts:
            nu, f = self._descend(coeffs, U, x, y, z, np.array(nu0, dtype=float))
            if best_f is None:
                best_nu, best_f = nu, f
            else:
                better = f < best_f
                best_nu[better], best_f[better] = nu[better], f[better]
        return best_nu, best_f


def minimize_hamiltonian(coeffs, x, y, z, U, cfg=None):
    """Pointwise infimum of the Hamiltonian over ``U`` for a single point."""
    est = HamiltonianMinimizer(**(cfg or {}))
    nu, f = est.minimize(coeffs, np.atleast_2d(x), np.atleast_2d(y), np.asarray(z)[None], U)
    return nu[0], float(f[0])


# ---------------------------------------------------------------------------
# cost functional


def path_costs(coeffs, states, controls, dt):
    """Per-path left-endpoint quadrature of the running cost plus terminal cost."""
    running = coeffs.running_cost(states[:, :-1], controls)
    return running.sum(axis=1) * dt + coeffs.terminal_cost(states[:, -1])


def cost_eval(coeffs, forward, control=None):
    """Monte Carlo estimate of the cost functional and its standard error."""
    if control is not None:
        if control.n_steps != forward.n_steps or not np.allclose(control.grid, forward.grid):
            raise ValueError("control grid does not match the forward ensemble grid")
    j = path_costs(coeffs, forward.states, forward.controls, forward.dt)
    stderr = j.std(ddof=1) / np.sqrt(j.size) if j.size > 1 else 0.0
    return float(j.mean()), float(stderr)


# ---------------------------------------------------------------------------
# derivative audit


def relative_error(a, b):
    """``|a - b| / max(|a|, |b|, 1)`` taken per sample; norms over trailing axes."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    axes = tuple(range(1, a.ndim))
    diff = np.sqrt(np.sum((a - b) ** 2, axis=axes)) if axes else np.abs(a - b)
    na = np.sqrt(np.sum(a * a, axis=axes)) if axes else np.abs(a)
    nb = np.sqrt(np.sum(b * b, axis=axes)) if axes else np.abs(b)
    return diff / np.maximum(np.maximum(na, nb), 1.0)


@dataclass
class DerivativeAudit:
    max_rel_error: dict
    tol: float
    n_samples: int

    @property
    def failures(self):
        return sorted(k for k, v in self.max_rel_error.items() if not v <= self.tol)

    @property
    def passed(self):
        return not self.failures

    def to_dict(self):
        return {
            "pass": self.passed,
            "tolerance": self.tol,
            "n_samples": self.n_samples,
            "max_rel_error": dict(sorted(self.max_rel_error.items())),
            "failures": self.failures,
        }


def _sample_points(problem, n, rng, radius):
    x = problem.x0 + radius * rng.standard_normal((n, problem.n_modes))
    nu = problem.control_set.sample(rng, n)
    return x, nu


def _unit(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def finite_diff_check(problem, n_samples=100, tol=1e-6, seed=0, radius=1.0, eps=1e-5):
    """Compare each supplied derivative evaluator with central differences."""
    tol = check_positive(tol, "tol")
    n_samples = check_count(n_samples, "n_samples")
    c = problem.coeffs
    rng = np.random.default_rng(seed)
    x, nu = _sample_points(problem, n_samples, rng, radius)
    h = _unit(rng, n_samples, problem.n_modes)
    k = _unit(rng, n_samples, problem.n_controls)

    def fd_x(f):
        return (f(x + eps * h, nu) - f(x - eps * h, nu)) / (2 * eps)

    def fd_nu(f):
        return (f(x, nu + eps * k) - f(x, nu - eps * k)) / (2 * eps)

    pairs = {
        "drift_x": (c.drift_x(x, nu, h), fd_x(c.drift)),
        "drift_nu": (c.drift_nu(x, nu, k), fd_nu(c.drift)),
        "diffusion_x": (c.diffusion_x(x, nu, h), fd_x(c.diffusion)),
        "diffusion_nu": (c.diffusion_nu(x, nu, k), fd_nu(c.diffusion)),
        "running_cost_x": (c.running_cost_x(x, nu, h), fd_x(c.running_cost)),
        "running_cost_nu": (c.running_cost_nu(x, nu, k), fd_nu(c.running_cost)),
        "terminal_grad": (
            np.sum(c.terminal_grad(x) * h, axis=1),
            (c.terminal_cost(x + eps * h) - c.terminal_cost(x - eps * h)) / (2 * eps),
        ),
    }
    errors = {name: float(np.max(relative_error(a, b))) for name, (a, b) in pairs.items()}
    return DerivativeAudit(errors, tol, n_samples)


def check_hamiltonian_gradients(problem, n_samples=100, seed=0, radius=1.0, eps=1e-5):
    """Max relative error of both Hamiltonian gradients against central differences
    of :func:`hamiltonian_eval` at random ``(x, nu, y, z)``."""
    c = problem.coeffs
    n, m = problem.n_modes, problem.n_controls
    rng = np.random.default_rng(seed)
    x, nu = _sample_points(problem, n_samples, rng, radius)
    y = rng.standard_normal((n_samples, n))
    z = rng.standard_normal((n_samples, n, n))
    gx = hamiltonian_grad_x(c, x, nu, y, z)
    gnu = hamiltonian_grad_nu(c, x, nu, y, z)
    fd_x = np.empty_like(gx)
    for j in range(n):
        e = np.zeros(n)
        e[j] = eps
        fd_x[:, j] = (hamiltonian_eval(c, x + e, nu, y, z) - hamiltonian_eval(c, x - e, nu, y, z)) / (
            2 * eps
        )
    fd_nu = np.empty_like(gnu)
    for j in range(m):
        e = np.zeros(m)
        e[j] = eps
        fd_nu[:, j] = (
            hamiltonian_eval(c, x, nu + e, y, z) - hamiltonian_eval(c, x, nu - e, y, z)
        ) / (2 * eps)
    return {
        "grad_x": float(np.max(relative_error(gx, fd_x))),
        "grad_nu": float(np.max(relative_error(gnu, fd_nu))),
    }
