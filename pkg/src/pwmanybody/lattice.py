"""Reciprocal-lattice machinery and plane-wave <-> real-space transforms.

Conventions
-----------
Lattice and reciprocal vectors are stored as *columns* of 3x3 matrices.
A G-vector with Miller triple ``m`` is ``G = B @ m``.  Orbitals are
``psi(r) = V**-0.5 * sum_G c_G exp(i G.r)`` so that unit coefficient norm
means unit norm over the cell.  Grid point ``(i, j, k)`` sits at fractional
position ``(i/n1, j/n2, k/n3)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .errors import AliasingError

if TYPE_CHECKING:
    from .pwio import CrystalCell, PlaneWaveOrbitalSet

TWO_PI = 2.0 * np.pi


def reciprocal_vectors(lattice: np.ndarray) -> np.ndarray:
    """Columns b_i with b_i . a_j = 2 pi delta_ij."""
    return TWO_PI * np.linalg.inv(np.asarray(lattice, dtype=float)).T


@dataclass(frozen=True, eq=False)
class ReciprocalBasis:
    b_vectors: np.ndarray
    g_cut: float

    @classmethod
    def from_cell(cls, cell: "CrystalCell", e_cut: float) -> "ReciprocalBasis":
        return cls(reciprocal_vectors(cell.lattice_vectors), float(np.sqrt(2.0 * e_cut)))

    @property
    def lattice_vectors(self) -> np.ndarray:
        return TWO_PI * np.linalg.inv(self.b_vectors).T

    def cartesian(self, miller: np.ndarray) -> np.ndarray:
        return np.asarray(miller, dtype=float) @ self.b_vectors.T


def canonical_g_order(miller: np.ndarray, b_vectors: np.ndarray) -> np.ndarray:
    """Permutation sorting G-vectors by |G|^2, then lexicographically by Miller index.

    |G|^2 is rounded to 1e-8 so that symmetry-equivalent vectors whose squared
    norms differ in the last ulp still tie and fall back to the Miller order.
    """
    miller = np.asarray(miller, dtype=np.int64).reshape(-1, 3)
    g2 = np.round(np.sum((miller @ b_vectors.T) ** 2, axis=1), 8)
    return np.lexsort((miller[:, 2], miller[:, 1], miller[:, 0], g2))


def generate_g_sphere(basis: ReciprocalBasis) -> np.ndarray:
    """All Miller triples with |G| <= g_cut, in canonical order."""
    if basis.g_cut <= 0:
        raise ValueError("g_cut must be positive")
    a_len = np.linalg.norm(basis.lattice_vectors, axis=0)
    bounds = np.floor(basis.g_cut * a_len / TWO_PI + 1e-9).astype(int)
    axes = [np.arange(-n, n + 1) for n in bounds]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    g2 = np.sum((mesh @ basis.b_vectors.T) ** 2, axis=1)
    inside = mesh[g2 <= basis.g_cut**2 * (1.0 + 1e-10)]
    return inside[canonical_g_order(inside, basis.b_vectors)]


def fft_friendly(n: int) -> int:
    """Smallest integer >= n whose prime factors are all in {2, 3, 5, 7}."""
    n = max(int(n), 1)
    while True:
        m = n
        for p in (2, 3, 5, 7):
            while m % p == 0:
                m //= p
        if m == 1:
            return n
        n += 1


def grid_dims_for_cutoff(lattice: np.ndarray, g_max: float) -> tuple[int, int, int]:
    """FFT-friendly dims that represent every Fourier component with |G| <= g_max."""
    a_len = np.linalg.norm(lattice, axis=0)
    return tuple(fft_friendly(int(np.ceil(2.0 * g_max * a / TWO_PI + 1.0))) for a in a_len)


def pair_grid_dims(cell: "CrystalCell", g_cut: float) -> tuple[int, int, int]:
    """Grid for products of two orbitals (band limit 2 g_cut)."""
    return grid_dims_for_cutoff(cell.lattice_vectors, 2.0 * g_cut)


def check_band_limit(dims, max_miller) -> None:
    """Raise if a field with the given per-axis Miller extent would alias on ``dims``."""
    for axis, (n, m) in enumerate(zip(dims, max_miller)):
        if n < 2 * int(m) + 1:
            raise AliasingError(
                f"grid dimension {n} along axis {axis} aliases Miller extent {int(m)} "
                f"(needs >= {2 * int(m) + 1})"
            )


def grid_miller(dims) -> np.ndarray:
    """Signed Miller index of every FFT bin, shape (n1, n2, n3, 3)."""
    freqs = [np.rint(np.fft.fftfreq(n) * n).astype(np.int64) for n in dims]
    return np.stack(np.meshgrid(*freqs, indexing="ij"), axis=-1)


def grid_g2(b_vectors: np.ndarray, dims) -> np.ndarray:
    g = grid_miller(dims) @ b_vectors.T
    return np.sum(g * g, axis=-1)


def fractional_points(dims) -> np.ndarray:
    axes = [np.arange(n) / n for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@dataclass(frozen=True, eq=False)
class RealSpaceGrid:
    dims: tuple[int, int, int]
    values: np.ndarray
    cell: "CrystalCell" = field(repr=False)

    def __post_init__(self):
        if tuple(self.values.shape) != tuple(self.dims):
            raise ValueError(f"values shape {self.values.shape} does not match dims {self.dims}")

    @property
    def weight(self) -> float:
        return self.cell.volume / float(np.prod(self.dims))

    def integrate(self, values: np.ndarray | None = None):
        v = self.values if values is None else values
        return v.sum() * self.weight

    def cartesian_points(self) -> np.ndarray:
        return fractional_points(self.dims) @ self.cell.lattice_vectors.T


def coefficients_to_grid(miller: np.ndarray, coeffs: np.ndarray, dims, volume: float) -> np.ndarray:
    """psi(r_grid) for one coefficient vector (no band-limit check)."""
    box = np.zeros(dims, dtype=complex)
    idx = np.mod(miller, np.asarray(dims))
    box[idx[:, 0], idx[:, 1], idx[:, 2]] = coeffs
    return np.fft.ifftn(box) * (np.prod(dims) / np.sqrt(volume))


def grid_to_coefficients(values: np.ndarray, miller: np.ndarray, volume: float) -> np.ndarray:
    """Inverse of :func:`coefficients_to_grid` restricted to ``miller``."""
    dims = values.shape
    spec = np.fft.fftn(values) * (np.sqrt(volume) / np.prod(dims))
    idx = np.mod(miller, np.asarray(dims))
    return spec[idx[:, 0], idx[:, 1], idx[:, 2]]


def orbital_to_real_space(orbitals: "PlaneWaveOrbitalSet", t: int, dims) -> RealSpaceGrid:
    dims = tuple(int(n) for n in dims)
    check_band_limit(dims, np.abs(orbitals.miller).max(axis=0))
    values = coefficients_to_grid(orbitals.miller, orbitals.coefficients[:, t], dims, orbitals.cell.volume)
    return RealSpaceGrid(dims, values, orbitals.cell)


def orbitals_on_grid(orbitals: "PlaneWaveOrbitalSet", indices, dims) -> np.ndarray:
    """Stack of real-space orbitals, shape (len(indices), *dims)."""
    dims = tuple(int(n) for n in dims)
    check_band_limit(dims, np.abs(orbitals.miller).max(axis=0))
    idx = np.mod(orbitals.miller, np.asarray(dims))
    out = np.empty((len(indices), *dims), dtype=complex)
    scale = np.prod(dims) / np.sqrt(orbitals.cell.volume)
    for k, t in enumerate(indices):
        box = np.zeros(dims, dtype=complex)
        box[idx[:, 0], idx[:, 1], idx[:, 2]] = orbitals.coefficients[:, t]
        out[k] = np.fft.ifftn(box) * scale
    return out


def pair_density_fft(psi_u: np.ndarray, psi_v: np.ndarray) -> np.ndarray:
    """rho~_uv on every FFT bin: (1/V) int psi_u^* psi_v exp(-iG.r) dr."""
    return np.fft.fftn(np.conj(psi_u) * psi_v) / psi_u.size


def pair_density_spectrum(orbitals: "PlaneWaveOrbitalSet", u: int, v: int, dims) -> dict:
    """Fourier components of psi_u^* psi_v on the doubled sphere, keyed by Miller triple."""
    dims = tuple(int(n) for n in dims)
    check_band_limit(dims, 2 * np.abs(orbitals.miller).max(axis=0))
    psi = orbitals_on_grid(orbitals, [u, v], dims)
    spec = pair_density_fft(psi[0], psi[1])
    basis = ReciprocalBasis(orbitals.basis.b_vectors, 2.0 * orbitals.basis.g_cut)
    doubled = generate_g_sphere(basis)
    idx = np.mod(doubled, np.asarray(dims))
    values = spec[idx[:, 0], idx[:, 1], idx[:, 2]]
    return {tuple(int(x) for x in m): complex(val) for m, val in zip(doubled, values)}
