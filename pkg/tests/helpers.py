"""Synthetic fixtures and independent oracles shared by the test modules."""

from __future__ import annotations

from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import erf

from pwmanybody.lattice import RealSpaceGrid, ReciprocalBasis, generate_g_sphere
from pwmanybody.matelems import OneBodyMatrix, TwoBodyTensor
from pwmanybody.activespace import ActiveSpaceHamiltonian
from pwmanybody.solver import sector_states
from pwmanybody.pwio import (
    Atom,
    CrystalCell,
    NormConservingPseudopotential,
    PlaneWaveOrbitalSet,
    Projector,
    radial_weights,
    write_upf,
)
from pwmanybody.radial import local_form_factor, projector_transform, unique_norms, ylm

R_MESH = np.arange(2001) * 0.01
RAB = np.full(R_MESH.size, 0.01)


def erf_local(z: float, rc: float, r=R_MESH) -> np.ndarray:
    """-Z erf(r/rc)/r with its finite r = 0 limit."""
    with np.errstate(divide="ignore", invalid="ignore"):
        v = -z * erf(r / rc) / r
    v[r == 0] = -z * 2.0 / (np.sqrt(np.pi) * rc)
    return v


def gaussian_projector(width: float, l: int = 0, r=R_MESH) -> np.ndarray:
    return r**l * np.exp(-0.5 * (r / width) ** 2)


SPECIES = {
    # name: (z, rc, projector width, D)
    "deep": (1.0, 0.6, 0.7, -0.8),
    "shallow": (1.0, 1.2, 0.9, 0.3),
    "H": (1.0, 0.8, 0.8, 0.5),
}


def make_pp(species: str) -> NormConservingPseudopotential:
    z, rc, width, d = SPECIES[species]
    return NormConservingPseudopotential(
        species, z, R_MESH, radial_weights(RAB), erf_local(z, rc), (Projector(0, gaussian_projector(width)),),
        np.array([[d]]),
    )


def write_species_upf(directory: Path, species: str) -> Path:
    z, rc, width, d = SPECIES[species]
    path = Path(directory) / f"{species}.upf"
    write_upf(path, species, z, R_MESH, RAB, erf_local(z, rc), [(0, gaussian_projector(width))], [[d]])
    return path


def two_atom_cell(length: float = 8.0, species=("deep", "shallow")) -> CrystalCell:
    atoms = (
        Atom(species[0], np.array([0.25, 0.5, 0.5]) * length, f"{species[0]}.upf"),
        Atom(species[1], np.array([0.75, 0.5, 0.5]) * length, f"{species[1]}.upf"),
    )
    return CrystalCell(np.eye(3) * length, atoms)


def plane_wave_hamiltonian(cell: CrystalCell, miller: np.ndarray, pps: dict) -> np.ndarray:
    """Dense <G1|T + V_loc + V_nl|G2> over the given sphere (independent of the orbital-basis code path)."""
    b = ReciprocalBasis.from_cell(cell, 1.0).b_vectors
    g = miller @ b.T
    n = g.shape[0]
    h = np.diag(0.5 * np.sum(g * g, axis=1)).astype(complex)
    dg = g[:, None, :] - g[None, :, :]
    keys, inverse = unique_norms(dg.reshape(-1, 3))
    for atom in cell.atoms:
        pp = pps[atom.species]
        form = local_form_factor(pp, keys, cell.volume)[inverse].reshape(n, n)
        h += form * np.exp(-1j * dg @ atom.position)
        for i, proj in enumerate(pp.projectors):
            f = projector_transform(pp.r_grid, pp.r_weights, proj.beta, proj.l, np.linalg.norm(g, axis=1))
            for m in range(-proj.l, proj.l + 1):
                y = ylm(proj.l, m, g)
                vec = np.conj(y) * f * np.exp(1j * g @ atom.position)
                h += (4 * np.pi) ** 2 / cell.volume * pp.d_matrix[i, i] * np.outer(vec.conj(), vec)
    return 0.5 * (h + h.conj().T)


def real_basis(miller: np.ndarray) -> np.ndarray:
    """Unitary U whose columns are cos/sin combinations of +-G pairs (plus the origin)."""
    index = {tuple(m): k for k, m in enumerate(miller.tolist())}
    n = len(index)
    u = np.zeros((n, n), dtype=complex)
    col = 0
    seen = set()
    for m in miller.tolist():
        m = tuple(m)
        if m in seen:
            continue
        neg = tuple(-x for x in m)
        k, kn = index[m], index[neg]
        seen.update({m, neg})
        if k == kn:
            u[k, col] = 1.0
            col += 1
            continue
        u[k, col], u[kn, col] = 1 / np.sqrt(2), 1 / np.sqrt(2)
        u[k, col + 1], u[kn, col + 1] = -1j / np.sqrt(2), 1j / np.sqrt(2)
        col += 2
    return u


def gamma_orbitals(cell: CrystalCell, e_cut: float, pps: dict, n_orbitals: int, n_electrons: int):
    """Lowest eigenstates of the plane-wave one-body Hamiltonian, as real (gamma-only) orbitals."""
    basis = ReciprocalBasis.from_cell(cell, e_cut)
    miller = generate_g_sphere(basis)
    h = plane_wave_hamiltonian(cell, miller, pps)
    u = real_basis(miller)
    h_real = u.conj().T @ h @ u
    assert np.max(np.abs(h_real.imag)) < 1e-10
    w, v = np.linalg.eigh(h_real.real)
    coeffs = u @ v[:, :n_orbitals]
    return PlaneWaveOrbitalSet(cell, e_cut, miller, coeffs, w[:n_orbitals], n_electrons, gamma_only=True)


def random_orbitals(cell: CrystalCell, e_cut: float, n_orbitals: int, rng, real: bool = False, n_electrons=2):
    miller = generate_g_sphere(ReciprocalBasis.from_cell(cell, e_cut))
    n_g = miller.shape[0]
    if real:
        u = real_basis(miller)
        c, _ = np.linalg.qr(rng.normal(size=(n_g, n_orbitals)))
        coeffs = u @ c
    else:
        c = rng.normal(size=(n_g, n_orbitals)) + 1j * rng.normal(size=(n_g, n_orbitals))
        coeffs, _ = np.linalg.qr(c)
    return PlaneWaveOrbitalSet(cell, e_cut, miller, coeffs, np.zeros(n_orbitals), n_electrons, gamma_only=real)


# ---------------------------------------------------------------------------
# random Hamiltonians


def random_real_eri(n: int, rng, n_factors: int = 6, scale: float = 1.0) -> np.ndarray:
    """Physicist-order tensor with the full 8-fold real symmetry (positive semidefinite Coulomb-like)."""
    l = rng.normal(size=(n_factors, n, n)) * scale
    l = 0.5 * (l + l.transpose(0, 2, 1))
    chem = np.einsum("kab,kcd->abcd", l, l)  # (tw|uv)
    return np.einsum("twuv->tuvw", chem)


def random_symmetric(n: int, rng, scale: float = 1.0) -> np.ndarray:
    a = rng.normal(size=(n, n)) * scale
    return 0.5 * (a + a.T)


def active_hamiltonian(h1: np.ndarray, h4: np.ndarray, n_electrons: int, e_const: float = 0.0, real=True):
    return ActiveSpaceHamiltonian(
        OneBodyMatrix(h1), TwoBodyTensor.from_full(h4, real_orbitals=real), e_const, n_electrons
    )


# ---------------------------------------------------------------------------
# determinant-basis oracle (independent of the qubit mapping code)


def _annihilate(state: int, mode: int):
    if not (state >> mode) & 1:
        return None, 0
    sign = -1 if bin(state & ((1 << mode) - 1)).count("1") % 2 else 1
    return state ^ (1 << mode), sign


def _create(state: int, mode: int):
    if (state >> mode) & 1:
        return None, 0
    sign = -1 if bin(state & ((1 << mode) - 1)).count("1") % 2 else 1
    return state | (1 << mode), sign


def apply_string(state: int, ops):
    """Apply a product of ladder operators (rightmost first); ops are (mode, is_creation)."""
    sign = 1
    for mode, dagger in reversed(ops):
        state, s = (_create if dagger else _annihilate)(state, mode)
        if state is None:
            return None, 0
        sign *= s
    return state, sign


def spin_orbital_integrals(h1: np.ndarray, h4: np.ndarray):
    """Spin-blocked spin-orbital h1 and physicist h2 (a+_P a+_Q a_R a_S) from spatial integrals."""
    n = h1.shape[0]
    h1s = np.zeros((2 * n, 2 * n), dtype=complex)
    h2s = np.zeros((2 * n,) * 4, dtype=complex)
    for s in range(2):
        h1s[s * n : (s + 1) * n, s * n : (s + 1) * n] = h1
        for r in range(2):
            h2s[s * n : (s + 1) * n, r * n : (r + 1) * n, r * n : (r + 1) * n, s * n : (s + 1) * n] = h4
    return h1s, h2s


def determinant_matrix(h1s: np.ndarray, h2s: np.ndarray, states, constant: float = 0.0) -> np.ndarray:
    """<b'| sum h1 a+a + 1/2 sum h2 a+a+aa |b> over explicit basis states."""
    states = list(states)
    pos = {s: k for k, s in enumerate(states)}
    m = np.zeros((len(states), len(states)), dtype=complex)
    n_so = h1s.shape[0]
    one = [(p, q) for p in range(n_so) for q in range(n_so) if h1s[p, q] != 0]
    two = [tuple(i) for i in np.argwhere(h2s != 0)]
    for col, b in enumerate(states):
        m[col, col] += constant
        for p, q in one:
            t, sgn = apply_string(b, [(p, True), (q, False)])
            if t is not None and t in pos:
                m[pos[t], col] += h1s[p, q] * sgn
        for p, q, r, s in two:
            t, sgn = apply_string(b, [(p, True), (q, True), (r, False), (s, False)])
            if t is not None and t in pos:
                m[pos[t], col] += 0.5 * h2s[p, q, r, s] * sgn
    return m


def spin_sector(n: int, n_up: int, n_down: int) -> list[int]:
    up = [sum(1 << i for i in c) for c in combinations(range(n), n_up)]
    down = [sum(1 << (n + i) for i in c) for c in combinations(range(n), n_down)]
    return sorted(a | b for a in up for b in down)


PAULI = {
    "I": np.eye(2),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]]),
    "Z": np.diag([1.0, -1.0]).astype(complex),
}


def dense_pauli(label: str) -> np.ndarray:
    """Dense matrix of a Pauli string with qubit 0 as the least significant bit."""
    m = np.eye(1, dtype=complex)
    for ch in reversed(label):
        m = np.kron(m, PAULI[ch])
    return m


def dense_qubit_matrix(qh) -> np.ndarray:
    return sum(c * dense_pauli(lab) for lab, c in qh.terms)


def random_instance(n, seed, scale=0.3, mixing=0.2):
    """Mean-field-like instance: orbital energies ordered, weak random couplings."""
    rng = np.random.default_rng(seed)
    h1 = mixing * random_symmetric(n, rng) + np.diag(np.arange(n) * 0.8 - 1.0)
    return h1, random_real_eri(n, rng, scale=scale)


def lowest_polarized_energy(qh, n_e):
    """Ground energy with one more up than down pair (S_z = 1): equals the sector ground energy for a triplet."""
    n = qh.n_orbitals
    states = sector_states(n, n_e // 2 + 1, n_e // 2 - 1)
    return np.linalg.eigvalsh(qh.sector_matrix(states).toarray())[0]


# ---------------------------------------------------------------------------
# Gaussian densities with a known zero-flux plane

LENGTH = 10.0
WIDTH = 0.8


def gaussian_density(n, centers, charges, width=WIDTH, length=LENGTH, shift=(0, 0, 0)):
    """Periodic sum of normalized Gaussians (nearest images only along each axis)."""
    cell = CrystalCell(np.eye(3) * length)
    grid = RealSpaceGrid((n, n, n), np.zeros((n, n, n)), cell)
    r = grid.cartesian_points()
    rho = np.zeros((n, n, n))
    norm = (2 * np.pi * width**2) ** -1.5
    for c, q in zip(centers, charges):
        d = r - np.asarray(c) * length
        d -= length * np.round(d / length)
        rho += q * norm * np.exp(-np.sum(d * d, axis=-1) / (2 * width**2))
    rho = np.roll(rho, shift, axis=(0, 1, 2))
    return rho


def slab_fraction(a, b, x0, width=WIDTH):
    s = np.sqrt(2) * width
    return 0.5 * (erf((b - x0) / s) - erf((a - x0) / s))


def dividing_planes(q1, q2, x1, x2, width=WIDTH, length=LENGTH):
    """Density minima along the axis between the blobs (both the direct and the periodic gap)."""
    def axial(x):
        total = 0.0
        for q, x0 in ((q1, x1), (q2, x2)):
            for image in (-1, 0, 1):
                total += q * np.exp(-((x - x0 - image * length) ** 2) / (2 * width**2))
        return total

    inner = minimize_scalar(axial, bounds=(x1, x2), method="bounded", options={"xatol": 1e-10}).x
    outer = minimize_scalar(axial, bounds=(x2, x1 + length), method="bounded", options={"xatol": 1e-10}).x
    return inner, outer - length


def analytic_charge(q1, q2, x1, x2, lo, hi):
    """Charge between planes lo < x1 < hi: both blobs' mass in that slab."""
    return q1 * slab_fraction(lo, hi, x1) + q2 * (slab_fraction(lo, hi, x2) + slab_fraction(lo, hi, x2 - LENGTH))
