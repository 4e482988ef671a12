"""Shipped test problems.

* ``lq_diagonal``: linear dynamics, constant noise, quadratic costs, all
  diagonal in the eigenbasis; solved exactly by a per-mode Riccati ODE.
* ``nonlinear_sine``: bounded smooth nonlinearities in drift, diffusion and
  running cost, control in a ball; not convex in general.
* ``control_diffusion``: the noise amplitude depends on the control, with
  convex non-quadratic costs so that every sufficient condition can hold.

Every preset uses the Dirichlet Laplacian spectrum scaled by ``diffusivity``.
"""

from dataclasses import dataclass

import numpy as np

from .problem import BallSet, BoxSet, CoefficientBundle, ProblemDefinition
from .spectral import SpectralBasis


@dataclass(frozen=True)
class LQSpec:
    """Diagonal LQ data: ``b = L x + B nu``, ``l = (<Qx,x> + r|nu|^2)/2``,
    ``phi = <Gx,x>/2``, constant ``sigma``; ``L, B, Q, G`` are per-mode."""

    eigenvalues: np.ndarray
    L: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    r: float
    G: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.eigenvalues).size
        for name in ("L", "B", "Q", "G"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 1 or arr.size != n:
                raise ValueError(f"LQ spec is not diagonal: {name} must be a length-{n} vector")
            object.__setattr__(self, name, arr)
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.shape != (n, n):
            raise ValueError(f"sigma must be ({n}, {n})")
        if self.r <= 0:
            raise ValueError("control weight r must be positive")
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "eigenvalues", np.asarray(self.eigenvalues, dtype=float))

    @property
    def n_modes(self):
        return self.eigenvalues.size


def _zeros_like_matrix(x, n):
    return np.zeros(np.shape(x)[:-1] + (n, n))


def _diag(v):
    n = v.shape[-1]
    out = np.zeros(v.shape + (n,))
    idx = np.arange(n)
    out[..., idx, idx] = v
    return out


def lq_problem(spec, x0, bound=5.0, horizon=1.0, name="lq"):
    """Build a problem definition from diagonal LQ data."""
    n = spec.n_modes
    L, B, Q, G, r, sigma = spec.L, spec.B, spec.Q, spec.G, spec.r, spec.sigma

    coeffs = CoefficientBundle(
        drift=lambda x, nu: L * x + B * nu,
        diffusion=lambda x, nu: np.broadcast_to(sigma, np.shape(x)[:-1] + (n, n)),
        running_cost=lambda x, nu: 0.5 * np.sum(Q * x * x, axis=-1) + 0.5 * r * np.sum(nu * nu, axis=-1),
        terminal_cost=lambda x: 0.5 * np.sum(G * x * x, axis=-1),
        drift_x=lambda x, nu, h: L * h,
        drift_nu=lambda x, nu, k: B * k,
        diffusion_x=lambda x, nu, h: _zeros_like_matrix(x, n),
        diffusion_nu=lambda x, nu, k: _zeros_like_matrix(x, n),
        running_cost_x=lambda x, nu, h: np.sum(Q * x * h, axis=-1),
        running_cost_nu=lambda x, nu, k: r * np.sum(nu * k, axis=-1),
        terminal_grad=lambda x: G * x,
    )
    basis = SpectralBasis(spec.eigenvalues, kind="dirichlet")
    U = BoxSet(-bound * np.ones(n), bound * np.ones(n))
    return ProblemDefinition(basis, coeffs, U, x0, horizon, name, {"lq_spec": spec})


def lq_diagonal(
    n_modes=8,
    horizon=1.0,
    diffusivity=0.1,
    drift_gain=0.5,
    control_gain=1.0,
    state_weight=1.0,
    control_weight=0.5,
    terminal_weight=1.0,
    noise=0.5,
    bound=5.0,
):
    basis = SpectralBasis.dirichlet_laplacian(n_modes, diffusivity)
    k = np.arange(1, n_modes + 1)
    spec = LQSpec(
        eigenvalues=basis.eigenvalues,
        L=np.full(n_modes, drift_gain),
        B=np.full(n_modes, control_gain),
        Q=np.full(n_modes, state_weight),
        r=control_weight,
        G=np.full(n_modes, terminal_weight),
        sigma=np.diag(noise / k),
    )
    return lq_problem(spec, 1.0 / k, bound, horizon, "lq_diagonal")


def nonlinear_sine(
    n_modes=8,
    horizon=1.0,
    diffusivity=0.1,
    n_controls=2,
    sine_gain=0.5,
    noise=0.5,
    noise_modulation=0.3,
    state_weight=1.0,
    sine_weight=0.5,
    control_weight=0.5,
    terminal_weight=1.0,
    radius=2.0,
):
    n, m = n_modes, n_controls
    basis = SpectralBasis.dirichlet_laplacian(n, diffusivity)
    k = np.arange(1, n + 1)
    s = noise / k
    # control enters the leading modes with decaying weight
    B = np.zeros((n, m))
    for j in range(m):
        B[:, j] = np.cos((j + 1) * k) / k
    a, gam, q, beta, r, g = sine_gain, noise_modulation, state_weight, sine_weight, control_weight, terminal_weight

    coeffs = CoefficientBundle(
        drift=lambda x, nu: a * np.sin(x) + nu @ B.T,
        diffusion=lambda x, nu: _diag(s * (1.0 + gam * np.cos(x))),
        running_cost=lambda x, nu: np.sum(0.5 * q * x * x + beta * (1.0 - np.cos(x)), axis=-1)
        + 0.5 * r * np.sum(nu * nu, axis=-1),
        terminal_cost=lambda x: 0.5 * g * np.sum(x * x, axis=-1),
        drift_x=lambda x, nu, h: a * np.cos(x) * h,
        drift_nu=lambda x, nu, kk: kk @ B.T,
        diffusion_x=lambda x, nu, h: _diag(-s * gam * np.sin(x) * h),
        diffusion_nu=lambda x, nu, kk: _zeros_like_matrix(x, n),
        running_cost_x=lambda x, nu, h: np.sum((q * x + beta * np.sin(x)) * h, axis=-1),
        running_cost_nu=lambda x, nu, kk: r * np.sum(nu * kk, axis=-1),
        terminal_grad=lambda x: g * x,
    )
    U = BallSet(np.zeros(m), radius)
    x0 = np.sin(k) / k
    return ProblemDefinition(basis, coeffs, U, x0, horizon, "nonlinear_sine", {"B": B})


def control_diffusion(
    n_modes=8,
    horizon=1.0,
    diffusivity=0.1,
    drift_gain=0.5,
    control_gain=1.0,
    noise=0.5,
    control_noise=0.5,
    state_noise=0.2,
    coupling=0.05,
    state_weight=1.0,
    control_weight=0.5,
    terminal_weight=1.0,
    terminal_quadratic=0.5,
    bound=1.0,
):
    """``sigma(x, nu) = Sigma0 + diag(s * (control_noise * nu + state_noise * x))``.

    ``Sigma0`` is ``diag(s)`` plus a small symmetric coupling decaying off
    the diagonal, with ``s_k = noise / k``. Running cost
    ``q * sum(sqrt(1 + x^2) - 1) + r |nu|^2 / 2`` and terminal cost
    ``g * sum(log cosh x) + g2 |x|^2 / 2`` are convex, and the pairing terms
    of the Hamiltonian are affine, so the Hamiltonian is jointly convex.
    """
    n = n_modes
    basis = SpectralBasis.dirichlet_laplacian(n, diffusivity)
    k = np.arange(1, n + 1)
    s = noise / k
    i, j = np.meshgrid(k, k, indexing="ij")
    sigma0 = np.diag(s) + np.where(i != j, coupling / (i * j), 0.0)
    L, Bc = drift_gain, control_gain
    cn, sn = control_noise, state_noise
    q, r, g, g2 = state_weight, control_weight, terminal_weight, terminal_quadratic

    coeffs = CoefficientBundle(
        drift=lambda x, nu: L * x + Bc * nu,
        diffusion=lambda x, nu: sigma0 + _diag(s * (cn * nu + sn * x)),
        running_cost=lambda x, nu: q * np.sum(np.sqrt(1.0 + x * x) - 1.0, axis=-1)
        + 0.5 * r * np.sum(nu * nu, axis=-1),
        terminal_cost=lambda x: g * np.sum(np.logaddexp(x, -x) - np.log(2.0), axis=-1)
        + 0.5 * g2 * np.sum(x * x, axis=-1),
        drift_x=lambda x, nu, h: L * h,
        drift_nu=lambda x, nu, kk: Bc * kk,
        diffusion_x=lambda x, nu, h: _diag(s * sn * h),
        diffusion_nu=lambda x, nu, kk: _diag(s * cn * kk),
        running_cost_x=lambda x, nu, h: q * np.sum(x / np.sqrt(1.0 + x * x) * h, axis=-1),
        running_cost_nu=lambda x, nu, kk: r * np.sum(nu * kk, axis=-1),
        terminal_grad=lambda x: g * np.tanh(x) + g2 * x,
    )
    U = BoxSet(-bound * np.ones(n), bound * np.ones(n))
    return ProblemDefinition(basis, coeffs, U, 1.0 / k, horizon, "control_diffusion", {"sigma0": sigma0})


PRESETS = {
    "lq_diagonal": lq_diagonal,
    "nonlinear_sine": nonlinear_sine,
    "control_diffusion": control_diffusion,
}


def make_preset(name, **overrides):
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(**overrides)
