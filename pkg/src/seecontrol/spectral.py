"""Truncated spectral realization of the state space.

States are coefficient vectors in the eigenbasis of a diagonalizable
generator, so the semigroup acts as a diagonal of exponentials. Operators
valued in the Hilbert-Schmidt class are plain ``(N, N)`` arrays, and the
cylindrical Wiener process is truncated to ``N`` independent scalar
Brownian motions.

All functions accept a leading batch of paths: vectors are ``(..., N)`` and
Hilbert-Schmidt matrices are ``(..., N, N)``.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._validation import check_count, check_positive, check_vector

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class SpectralBasis:
    """Eigenvalues of the generator ``A`` on its first ``n_modes`` eigenvectors.

    Use :meth:`dirichlet_laplacian` for the default instance
    ``A = kappa * d^2/dxi^2`` on ``L^2(0, 1)`` with Dirichlet conditions.
    """

    eigenvalues: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        lam = np.array(self.eigenvalues, dtype=float).ravel()
        if lam.size < 1:
            raise ValueError("basis needs at least one mode")
        if not np.all(np.isfinite(lam)):
            raise ValueError("eigenvalues must be finite")
        lam.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)

    @classmethod
    def dirichlet_laplacian(cls, n_modes, diffusivity=1.0):
        n_modes = check_count(n_modes, "n_modes")
        diffusivity = check_positive(diffusivity, "diffusivity")
        k = np.arange(1, n_modes + 1)
        return cls(-diffusivity * (k * np.pi) ** 2, kind="dirichlet")

    @property
    def n_modes(self):
        return self.eigenvalues.size

    def eigenfunctions(self, xi):
        """Evaluate ``sqrt(2) sin(k pi xi)`` at points ``xi``; shape ``(len(xi), N)``."""
        if self.kind != "dirichlet":
            raise ValueError("eigenfunctions are only known for the Dirichlet basis")
        xi = np.asarray(xi, dtype=float)
        k = np.arange(1, self.n_modes + 1)
        return np.sqrt(2.0) * np.sin(np.pi * np.multiply.outer(xi, k))

    def synthesize(self, coeffs, xi):
        """Map coefficient vectors to function values on the points ``xi``."""
        coeffs = check_vector(coeffs, self.n_modes, "coeffs")
        return coeffs @ self.eigenfunctions(xi).T


def _decay(basis, t):
    if not np.isfinite(t) or t < 0:
        raise ValueError(f"semigroup time must be finite and >= 0, got {t!r}")
    return np.exp(basis.eigenvalues * t)


def semigroup_apply(basis, t, v):
    """Apply ``S(t) = exp(tA)``: coefficient ``k`` is scaled by ``exp(lambda_k t)``."""
    v = check_vector(v, basis.n_modes, "v")
    if t == 0:
        return v.copy()
    return v * _decay(basis, t)


def adjoint_semigroup_apply(basis, t, v):
    """Apply ``S*(t)``.

    Real eigenvalues make ``A`` self-adjoint in the orthonormal eigenbasis,
    so this coincides with :func:`semigroup_apply`; it stays a separate entry
    point for generators whose adjoint differs.
    """
    v = check_vector(v, basis.n_modes, "v")
    if t == 0:
        return v.copy()
    return v * _decay(basis, t)


def hs_inner(m1, m2):
    """Hilbert-Schmidt (Frobenius) inner product over the last two axes."""
    m1 = np.asarray(m1, dtype=float)
    m2 = np.asarray(m2, dtype=float)
    if m1.ndim < 2 or m1.shape[-2:] != m2.shape[-2:]:
        raise ValueError(f"shape mismatch in hs_inner: {m1.shape} vs {m2.shape}")
    return np.einsum("...ij,...ij->...", m1, m2)


def hs_apply(m, dw):
    """Apply HS matrices ``(..., N, N)`` to increments ``(..., N)``."""
    return np.einsum("...ij,...j->...i", m, dw)


@dataclass(frozen=True)
class WienerIncrements:
    """Increments of the truncated cylindrical Wiener process.

    ``increments[p, i, k]`` is the increment of mode ``k`` over step ``i``
    on path ``p``; each is ``Normal(0, dt)``. ``refinement`` counts how many
    times the original grid has been halved by :func:`refine_same_noise`.
    """

    increments: np.ndarray
    dt: float
    seed: int
    refinement: int = 1

    def __post_init__(self):
        arr = np.asarray(self.increments, dtype=float)
        if arr.ndim != 3:
            raise ValueError("increments must have shape (n_paths, n_steps, n_modes)")
        arr.setflags(write=False)
        object.__setattr__(self, "increments", arr)

    @property
    def n_paths(self):
        return self.increments.shape[0]

    @property
    def n_steps(self):
        return self.increments.shape[1]

    @property
    def n_modes(self):
        return self.increments.shape[2]


def _path_generator(seed, path, stream=0):
    # Counter-based: the stream for (seed, stream, path) never depends on
    # how many other paths were drawn or in which order.
    key = [seed & _MASK64, stream & _MASK64]
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, path, 0]))


def _standard_normals(seed, stream, first_path, n_paths, shape):
    out = np.empty((n_paths,) + shape)
    for j in range(n_paths):
        out[j] = _path_generator(seed, first_path + j, stream).standard_normal(shape)
    return out


def _draw(seed, stream, n_paths, shape, n_threads):
    if n_threads <= 1 or n_paths < 2 * n_threads:
        return _standard_normals(seed, stream, 0, n_paths, shape)
    bounds = np.linspace(0, n_paths, n_threads + 1).astype(int)
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        chunks = pool.map(
            lambda ab: _standard_normals(seed, stream, ab[0], ab[1] - ab[0], shape),
            zip(bounds[:-1], bounds[1:]),
        )
        return np.concatenate(list(chunks), axis=0)


def sample_wiener_increments(basis, dt, n_steps, n_paths, seed, n_threads=1):
    """Draw i.i.d. ``Normal(0, dt)`` increments per (path, step, mode).

    Every path owns a Philox stream keyed by ``seed`` and offset by the path
    index, so the tensor is a pure function of ``(seed, dims)`` regardless
    of ``n_threads``.
    """
    dt = check_positive(dt, "dt")
    n_steps = check_count(n_steps, "n_steps")
    n_paths = check_count(n_paths, "n_paths")
    z = _draw(int(seed), 0, n_paths, (n_steps, basis.n_modes), n_threads)
    return WienerIncrements(z * np.sqrt(dt), dt, int(seed))


def refine_same_noise(increments, factor, n_threads=1):
    """Brownian-bridge refinement of every step into ``factor`` sub-steps.

    Each halving splits an increment ``dW`` over ``h`` into
    ``dW/2 + sqrt(h/4) xi`` and its complement, so per-coarse-cell sums
    reproduce the original increments up to rounding. The bridge noise for
    halving level ``L`` comes from stream ``L`` of the same master seed,
    hence ``refine(refine(W, 2), 2)`` equals ``refine(W, 4)``.
    """
    factor = check_count(factor, "factor", minimum=2)
    if factor & (factor - 1):
        raise ValueError(f"refinement factor must be a power of two, got {factor}")
    dw = np.array(increments.increments)
    dt = increments.dt
    level = int(np.log2(increments.refinement))
    for _ in range(int(np.log2(factor))):
        level += 1
        n_paths, n_steps, n_modes = dw.shape
        xi = _draw(increments.seed, level, n_paths, (n_steps, n_modes), n_threads)
        first = 0.5 * dw + np.sqrt(dt / 4.0) * xi
        second = dw - first
        dw = np.stack([first, second], axis=2).reshape(n_paths, 2 * n_steps, n_modes)
        dt = dt / 2.0
    return WienerIncrements(dw, dt, increments.seed, increments.refinement * factor)


def coarsen(increments, factor):
    """Sum consecutive blocks of ``factor`` steps (inverse of refinement)."""
    factor = check_count(factor, "factor")
    dw = increments.increments
    n_paths, n_steps, n_modes = dw.shape
    if n_steps % factor:
        raise ValueError(f"{n_steps} steps cannot be grouped in blocks of {factor}")
    summed = dw.reshape(n_paths, n_steps // factor, factor, n_modes).sum(axis=2)
    return WienerIncrements(
        summed, increments.dt * factor, increments.seed, max(increments.refinement // factor, 1)
    )


__all__ = [
    "SpectralBasis",
    "WienerIncrements",
    "adjoint_semigroup_apply",
    "coarsen",
    "hs_apply",
    "hs_inner",
    "refine_same_noise",
    "sample_wiener_increments",
    "semigroup_apply",
]
