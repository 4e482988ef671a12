"""Adjoint backward equation solvers.

:class:`BSEERegressor` runs a least-squares Monte Carlo sweep backward
through a forward ensemble. For each step ``i`` and ``E = S*(dt)``:

1. regress ``E Y_{i+1}`` on polynomial features of ``X_i`` to get ``Y~``;
2. regress ``(E Y_{i+1} - Y~) dW_i^T / dt`` to get ``Z`` (subtracting the
   fitted conditional mean leaves the estimator unbiased and removes most
   of its variance);
3. predict ``Y = Y~ + dt * E grad_x H(X_i, nu_i, Y~, Z)`` (driver projected
   on the same features);
4. correct once with the driver re-evaluated at the predicted ``Y``.

This is the one-step mild form ``Y_i = E_i[S*(dt) (Y_{i+1} + dt G_i)]``
with the driver ``G_i`` frozen at the left point; the kernel acts on it
exactly as on ``Y_{i+1}``.

:class:`RiccatiLQAdjoint` gives the exact feedback-form adjoint
``Y = P(t) X``, ``Z = P(t) sigma`` for diagonal LQ problems.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from sklearn.base import BaseEstimator
from sklearn.preprocessing import PolynomialFeatures
from sklearn.utils.validation import check_is_fitted

from ._validation import check_count, check_positive, check_uniform_grid
from .problem import ControlProcess, hamiltonian_grad_x


class RankDeficientRegression(ValueError):
    pass


@dataclass(frozen=True)
class AdjointPairEnsemble:
    """``Y`` with shape ``(P, n+1, N)`` and ``Z`` with shape ``(P, n, N, N)``."""

    grid: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    info: dict = None

    @property
    def n_paths(self):
        return self.Y.shape[0]


def terminal_condition(problem, forward):
    """``grad phi(X(T))`` on every path."""
    return problem.coeffs.terminal_grad(forward.terminal)


@dataclass
class _StepFit:
    keep: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    coef_y: np.ndarray
    coef_z: np.ndarray


class BSEERegressor(BaseEstimator):
    """Least-squares Monte Carlo solver for the adjoint equation.

    Parameters
    ----------
    degree : int
        Total degree (1 or 2) of the polynomial features in the spectral
        coordinates of ``X_i``.
    ridge : float or None
        Ridge added to the normal equations. ``None`` uses
        ``1e-8 * trace(Phi^T Phi) / n_features``.
    max_condition : float
        Largest acceptable condition number of the standardized Gram matrix.
    paths_per_feature : int
        Rank guard: at least this many paths per regression feature.
    """

    def __init__(self, degree=1, ridge=None, max_condition=1e10, paths_per_feature=10):
        self.degree = degree
        self.ridge = ridge
        self.max_condition = max_condition
        self.paths_per_feature = paths_per_feature

    def _features(self, x, fit=None):
        if fit is None:
            mean = x.mean(axis=0)
            scale = x.std(axis=0)
            keep = scale > 1e-12 * (1.0 + np.abs(mean))
            fit = _StepFit(keep, mean[keep], scale[keep], None, None)
        u = (x[:, fit.keep] - fit.mean) / fit.scale
        if u.shape[1] == 0:
            return np.ones((x.shape[0], 1)), fit
        return PolynomialFeatures(self.degree).fit_transform(u), fit

    def _factor(self, phi, step):
        gram = phi.T @ phi
        n_feat = gram.shape[0]
        d = np.sqrt(np.diag(gram))
        cond = np.linalg.cond(gram / np.outer(d, d))
        if not np.isfinite(cond) or cond > self.max_condition:
            raise RankDeficientRegression(
                f"regression at step {step} is ill-conditioned (cond={cond:.3g});"
                " use more paths or a lower degree"
            )
        ridge = 1e-8 * np.trace(gram) / n_feat if self.ridge is None else self.ridge
        self.ridge_used_ = ridge
        return cho_factor(gram + ridge * np.eye(n_feat)), cond

    def fit(self, problem, forward):
        """Run the backward sweep along ``forward``; keeps per-step coefficients."""
        if self.degree not in (1, 2):
            raise ValueError(f"degree must be 1 or 2, got {self.degree}")
        check_positive(self.max_condition, "max_condition")
        if self.ridge is not None:
            check_positive(self.ridge, "ridge", strict=False)
        grid, dt = check_uniform_grid(forward.grid)
        n_paths, n_times, n = forward.states.shape
        n_features = PolynomialFeatures(self.degree).fit(np.zeros((1, n))).n_output_features_
        if n_paths < self.paths_per_feature * n_features:
            raise RankDeficientRegression(
                f"{n_paths} paths for {n_features} features; need at least"
                f" {self.paths_per_feature * n_features}"
            )
        adj = np.exp(problem.basis.eigenvalues * dt)
        c = problem.coeffs
        dw = forward.increments.increments
        Y = np.empty_like(forward.states)
        Z = np.empty((n_paths, n_times - 1, n, n))
        Y[:, -1] = terminal_condition(problem, forward)
        if not np.all(np.isfinite(Y[:, -1])):
            raise FloatingPointError("non-finite terminal gradient")
        fits = [None] * (n_times - 1)
        conds = np.empty(n_times - 1)
        for i in range(n_times - 2, -1, -1):
            x, nu = forward.states[:, i], forward.controls[:, i]
            phi, fit = self._features(x)
            factor, conds[i] = self._factor(phi, i)
            target = adj * Y[:, i + 1]
            coef_tilde = cho_solve(factor, phi.T @ target)
            y_tilde = phi @ coef_tilde
            resid = target - y_tilde
            z_target = (resid[:, :, None] * dw[:, i, None, :]).reshape(n_paths, n * n) / dt
            coef_z = cho_solve(factor, phi.T @ z_target)
            z_hat = (phi @ coef_z).reshape(n_paths, n, n)

            drive = hamiltonian_grad_x(c, x, nu, y_tilde, z_hat)
            if not np.all(np.isfinite(drive)):
                raise FloatingPointError(f"non-finite adjoint driver at step {i}")
            coef_y = coef_tilde + dt * cho_solve(factor, phi.T @ (adj * drive))
            y_pred = phi @ coef_y
            drive = hamiltonian_grad_x(c, x, nu, y_pred, z_hat)
            coef_y = coef_tilde + dt * cho_solve(factor, phi.T @ (adj * drive))

            Y[:, i] = phi @ coef_y
            Z[:, i] = z_hat
            if not (np.all(np.isfinite(Y[:, i])) and np.all(np.isfinite(z_hat))):
                raise FloatingPointError(f"non-finite adjoint estimate at step {i}")
            fit.coef_y, fit.coef_z = coef_y, coef_z
            fits[i] = fit
        self.step_fits_ = fits
        self.condition_numbers_ = conds
        self.n_features_ = n_features
        self.grid_ = grid
        self.Y_ = Y
        self.Z_ = Z
        self._problem = problem
        return self

    def predict(self, forward):
        """Evaluate the fitted regressions on the states of ``forward``.

        ``Y_i`` and ``Z_i`` only read ``X_i``; the terminal value is exact.
        """
        check_is_fitted(self, "step_fits_")
        if forward.states.shape[1] != self.grid_.size or not np.allclose(forward.grid, self.grid_):
            raise ValueError("ensemble grid differs from the fitted grid")
        n_paths, n_times, n = forward.states.shape
        Y = np.empty_like(forward.states)
        Z = np.empty((n_paths, n_times - 1, n, n))
        Y[:, -1] = terminal_condition(self._problem, forward)
        for i, fit in enumerate(self.step_fits_):
            phi, _ = self._features(forward.states[:, i], fit)
            Y[:, i] = phi @ fit.coef_y
            Z[:, i] = (phi @ fit.coef_z).reshape(n_paths, n, n)
        return AdjointPairEnsemble(self.grid_, Y, Z, self._info())

    def _info(self):
        return {
            "method": "regression",
            "degree": self.degree,
            "ridge": float(self.ridge_used_),
            "n_features": int(self.n_features_),
            "max_condition_number": float(np.max(self.condition_numbers_)),
        }

    def fit_predict(self, problem, forward):
        """In-sample adjoint for the ensemble used to fit."""
        self.fit(problem, forward)
        return AdjointPairEnsemble(self.grid_, self.Y_, self.Z_, self._info())


def solve_bsee_regression(problem, forward, control=None, cfg=None):
    if control is not None and control.n_steps != forward.n_steps:
        raise ValueError("control grid does not match the forward ensemble")
    return BSEERegressor(**(cfg or {})).fit_predict(problem, forward)


# ---------------------------------------------------------------------------
# Riccati oracle


def _riccati_rhs(spec):
    a = -2.0 * (spec.eigenvalues + spec.L)
    b2 = spec.B**2 / spec.r

    def rhs(p):
        return a * p + b2 * p * p - spec.Q

    return rhs


def riccati_solution(spec, grid, refine=10):
    """Per-mode ``P(t_i)`` on ``grid`` from classical RK4 run backward from
    ``P(T) = G`` on a grid ``refine`` times finer."""
    grid, dt = check_uniform_grid(grid)
    refine = check_count(refine, "refine")
    h = dt / refine
    rhs = _riccati_rhs(spec)
    n_steps = grid.size - 1
    P = np.empty((grid.size, spec.n_modes))
    p = spec.G.copy()
    P[-1] = p
    for i in range(n_steps - 1, -1, -1):
        for _ in range(refine):
            # backward in time: dp/ds = -rhs(p) with s = T - t
            k1 = -rhs(p)
            k2 = -rhs(p + 0.5 * h * k1)
            k3 = -rhs(p + 0.5 * h * k2)
            k4 = -rhs(p + h * k3)
            p = p + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        P[i] = p
    return P


class RiccatiLQAdjoint(BaseEstimator):
    """Exact adjoint of a diagonal LQ problem under its optimal feedback."""

    def __init__(self, refine=10):
        self.refine = refine

    def fit(self, spec, grid):
        self.spec_ = spec
        self.grid_ = np.asarray(grid, dtype=float)
        self.P_ = riccati_solution(spec, grid, self.refine)
        return self

    def predict(self, forward):
        check_is_fitted(self, "P_")
        if not np.allclose(forward.grid, self.grid_):
            raise ValueError("ensemble grid differs from the Riccati grid")
        Y = self.P_[None] * forward.states
        Z = self.P_[:-1, :, None] * self.spec_.sigma[None]
        Z = np.broadcast_to(Z, (forward.n_paths,) + Z.shape).copy()
        return AdjointPairEnsemble(self.grid_, Y, Z, {"method": "riccati", "refine": self.refine})

    def feedback(self, control_set):
        """Optimal feedback ``nu = -B P(t_i) x / r`` as a control process."""
        check_is_fitted(self, "P_")
        P, spec, dt = self.P_, self.spec_, self.grid_[1] - self.grid_[0]
        n_steps = self.grid_.size - 1

        def rule(t, x):
            i = min(int(round(t / dt)), n_steps - 1)
            return -spec.B * P[i] * x / spec.r

        return ControlProcess(self.grid_, control_set, feedback=rule, label="riccati")


def solve_bsee_riccati_lq(lq_spec, forward, refine=10):
    return RiccatiLQAdjoint(refine).fit(lq_spec, forward.grid).predict(forward)


def riccati_feedback(lq_spec, grid, control_set, refine=10):
    return RiccatiLQAdjoint(refine).fit(lq_spec, grid).feedback(control_set)


def write_adjoint_csv(path, adjoint):
    """``path,t,y_1..y_N,z_11..z_NN``; ``Z`` at the terminal time is written as 0."""
    n_paths, n_times, n = adjoint.Y.shape
    Z = np.concatenate([adjoint.Z, np.zeros((n_paths, 1, n, n))], axis=1)
    header = ["path", "t"] + [f"y_{k + 1}" for k in range(n)]
    sep = "" if n < 10 else "_"
    header += [f"z_{a + 1}{sep}{b + 1}" for a in range(n) for b in range(n)]
    rows = np.column_stack(
        [
            np.repeat(np.arange(n_paths), n_times),
            np.tile(adjoint.grid, n_paths),
            adjoint.Y.reshape(-1, n),
            Z.reshape(-1, n * n),
        ]
    )
    fmt = ["%d"] + ["%.17g"] * (rows.shape[1] - 1)
    np.savetxt(path, rows, fmt=fmt, delimiter=",", header=",".join(header), comments="")
