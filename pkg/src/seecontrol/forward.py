"""Monte Carlo simulation of the controlled evolution equation in mild form."""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_uniform_grid, check_vector
from .spectral import WienerIncrements, hs_apply, sample_wiener_increments

SCHEMES = ("exponential_euler", "semi_implicit_euler")


@dataclass(frozen=True)
class ForwardPathEnsemble:
    """Simulated states ``(P, n+1, N)`` and the realized controls ``(P, n, m)``."""

    grid: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    increments: WienerIncrements
    control: object = None

    @property
    def n_paths(self):
        return self.states.shape[0]

    @property
    def n_steps(self):
        return self.grid.size - 1

    @property
    def dt(self):
        return self.increments.dt

    @property
    def terminal(self):
        return self.states[:, -1]


class ForwardSimulator(BaseEstimator):
    """Left-point exponential Euler (or semi-implicit Euler) path simulator.

    The exponential scheme discretizes the variation-of-constants formula::

        X_{i+1} = S(dt) [X_i + b(X_i, nu_i) dt + sigma(X_i, nu_i) dW_i]

    and the semi-implicit one solves ``(I - dt A) X_{i+1} = X_i + b dt + sigma dW``.
    Paths are advanced together as one array; no state is shared between
    paths, so results do not depend on how paths are batched.
    """

    def __init__(self, scheme="exponential_euler"):
        self.scheme = scheme

    def simulate(self, problem, control, increments, x0=None):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        grid, dt = check_uniform_grid(control.grid)
        if increments.n_steps != control.n_steps or not np.isclose(increments.dt, dt, rtol=1e-12):
            raise ValueError(
                f"grid mismatch: control has {control.n_steps} steps of {dt},"
                f" noise has {increments.n_steps} steps of {increments.dt}"
            )
        if increments.n_modes != problem.n_modes:
            raise ValueError("noise modes do not match the basis")
        x0 = problem.x0 if x0 is None else check_vector(x0, problem.n_modes, "x0", allow_batch=False)
        lam = problem.basis.eigenvalues
        if self.scheme == "exponential_euler":
            propagate = np.exp(lam * dt)
        else:
            propagate = 1.0 / (1.0 - dt * lam)

        c = problem.coeffs
        n_paths, n_steps = increments.n_paths, increments.n_steps
        dw = increments.increments
        states = np.empty((n_paths, n_steps + 1, problem.n_modes))
        controls = np.empty((n_paths, n_steps, problem.n_controls))
        x = np.tile(x0, (n_paths, 1))
        states[:, 0] = x
        for i in range(n_steps):
            nu = control.at(i, x)
            controls[:, i] = nu
            x = propagate * (x + c.drift(x, nu) * dt + hs_apply(c.diffusion(x, nu), dw[:, i]))
            bad = ~np.all(np.isfinite(x), axis=1)
            if np.any(bad):
                p = int(np.flatnonzero(bad)[0])
                raise FloatingPointError(f"state blew up on path {p} at step {i + 1}")
            states[:, i + 1] = x
        return ForwardPathEnsemble(grid, states, controls, increments, control)


def simulate_forward(problem, control, x0=None, n_paths=1000, seed=0, scheme="exponential_euler",
                     increments=None, n_threads=1):
    """Simulate ``n_paths`` paths under ``control``, drawing noise from ``seed``
    unless explicit ``increments`` are supplied."""
    if increments is None:
        increments = sample_wiener_increments(
            problem.basis, control.dt, control.n_steps, n_paths, seed, n_threads
        )
    return ForwardSimulator(scheme).simulate(problem, control, increments, x0)


def write_ensemble_csv(path, forward):
    """One row per (path, step): ``path,t,x_1..x_N``."""
    n_paths, n_times, n = forward.states.shape
    header = "path,t," + ",".join(f"x_{k + 1}" for k in range(n))
    rows = np.column_stack(
        [
            np.repeat(np.arange(n_paths), n_times),
            np.tile(forward.grid, n_paths),
            forward.states.reshape(-1, n),
        ]
    )
    fmt = ["%d", "%.17g"] + ["%.17g"] * n
    np.savetxt(path, rows, fmt=fmt, delimiter=",", header=header, comments="")
