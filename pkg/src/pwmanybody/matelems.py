"""Hamiltonian matrix elements in the Kohn-Sham orbital basis.

Two-electron integrals use physicist ordering, following the integrand::

    h_tuvw = \\int\\int psi_t^*(1) psi_u^*(2) |r1 - r2|^-1 psi_v(2) psi_w(1)

and are evaluated from FFT pair densities on a grid wide enough for
products of two orbitals, dropping G = 0 (neutralizing background).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, NumericalError
from .lattice import (
    ReciprocalBasis,
    check_band_limit,
    generate_g_sphere,
    grid_miller,
    orbitals_on_grid,
    pair_grid_dims,
)
from .radial import local_form_factor, projector_transform, unique_norms, ylm

HERMITICITY_TOL = 1e-10
FOUR_PI = 4.0 * np.pi
_ERI_CHUNK = 512


@dataclass(frozen=True, eq=False)
class OneBodyMatrix:
    """Hermitian one-electron matrix over orbital indices ``indices`` (Hartree)."""

    h: np.ndarray
    indices: tuple[int, ...] | None = None

    def __post_init__(self):
        h = np.array(self.h, dtype=complex)
        if h.ndim != 2 or h.shape[0] != h.shape[1]:
            raise ValueError("one-body matrix must be square")
        idx = tuple(range(h.shape[0])) if self.indices is None else tuple(int(i) for i in self.indices)
        if len(idx) != h.shape[0]:
            raise ValueError("index labels do not match matrix size")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "indices", idx)

    @property
    def n(self) -> int:
        return self.h.shape[0]

    def hermiticity_residual(self) -> float:
        return float(np.max(np.abs(self.h - self.h.conj().T), initial=0.0))

    def restrict(self, indices) -> "OneBodyMatrix":
        pos = _positions(self.indices, indices)
        return OneBodyMatrix(self.h[np.ix_(pos, pos)], tuple(indices))

    def __add__(self, other: "OneBodyMatrix") -> "OneBodyMatrix":
        if self.indices != other.indices:
            raise ValueError("cannot add one-body matrices over different index sets")
        return OneBodyMatrix(self.h + other.h, self.indices)


def _positions(labels, wanted) -> list[int]:
    lookup = {lab: k for k, lab in enumerate(labels)}
    try:
        return [lookup[int(i)] for i in wanted]
    except KeyError as exc:
        raise NumericalError(f"orbital {exc.args[0]} not present in matrix-element index set {list(labels)}") from None


# ---------------------------------------------------------------------------
# symmetry-compressed two-body storage


def _symmetry_images(idx: np.ndarray, real: bool):
    """Images of index quadruples under the ERI symmetry group.

    Returns (images, conj) with images of shape (M, n_ops, 4) and a boolean
    flag per operation telling whether the value is complex-conjugated.
    """
    p, q, r, s = idx.T
    ops = [((p, q, r, s), False), ((q, p, s, r), False), ((s, r, q, p), True), ((r, s, p, q), True)]
    if real:
        ops += [((s, q, r, p), False), ((p, r, q, s), False), ((r, p, s, q), False), ((q, s, p, r), False)]
    images = np.stack([np.stack(o, axis=-1) for o, _ in ops], axis=1)
    return images, np.array([c for _, c in ops])


def _encode(quads: np.ndarray, n: int) -> np.ndarray:
    quads = quads.astype(np.int64)
    return ((quads[..., 0] * n + quads[..., 1]) * n + quads[..., 2]) * n + quads[..., 3]


def _representatives(idx: np.ndarray, n: int, real: bool):
    """Canonical representative code of each quadruple and whether its value is the conjugate."""
    images, conj = _symmetry_images(idx, real)
    codes = _encode(images, n)
    rep = codes.min(axis=1)
    hits = codes == rep[:, None]
    # a non-conjugating route to the representative wins; such values need no conjugation
    needs_conj = np.all(~hits | conj[None, :], axis=1)
    return rep, needs_conj


def _self_conjugate(idx: np.ndarray, n: int, real: bool) -> np.ndarray:
    images, conj = _symmetry_images(idx, real)
    codes = _encode(images, n)
    own = _encode(idx, n)
    return np.any((codes == own[:, None]) & conj[None, :], axis=1)


def unique_quadruples(n: int, real: bool) -> np.ndarray:
    """Sorted canonical representatives of all n**4 index quadruples."""
    grid = np.indices((n, n, n, n)).reshape(4, -1).T
    rep, _ = _representatives(grid, n, real)
    codes = np.unique(rep)
    return np.stack(np.unravel_index(codes, (n, n, n, n)), axis=-1)


@dataclass(frozen=True, eq=False)
class TwoBodyTensor:
    """Unique ERI values under the symmetry group plus the rule to expand them.

    ``keys`` are sorted canonical quadruples in positions 0..n-1 of
    ``indices``; for real orbitals the 8-element group applies and values
    are stored as real numbers.
    """

    keys: np.ndarray
    values: np.ndarray
    indices: tuple[int, ...]
    real_orbitals: bool

    def __post_init__(self):
        keys = np.array(self.keys, dtype=np.int64).reshape(-1, 4)
        values = np.array(self.values, dtype=complex).reshape(-1)
        if keys.shape[0] != values.size:
            raise ValueError("keys and values differ in length")
        n = len(self.indices)
        if self.real_orbitals:
            values = values.real.astype(complex)
        else:
            values[_self_conjugate(keys, n, False)] = values[_self_conjugate(keys, n, False)].real
        keys.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))

    @property
    def n(self) -> int:
        return len(self.indices)

    @classmethod
    def from_full(cls, h4: np.ndarray, indices=None, real_orbitals: bool = False) -> "TwoBodyTensor":
        h4 = np.asarray(h4)
        n = h4.shape[0]
        keys = unique_quadruples(n, real_orbitals)
        vals = h4[keys[:, 0], keys[:, 1], keys[:, 2], keys[:, 3]]
        return cls(keys, vals, tuple(range(n)) if indices is None else tuple(indices), real_orbitals)

    def lookup(self, quads: np.ndarray) -> np.ndarray:
        """Values at position quadruples (shape (..., 4))."""
        quads = np.asarray(quads, dtype=np.int64)
        flat = quads.reshape(-1, 4)
        rep, needs_conj = _representatives(flat, self.n, self.real_orbitals)
        codes = _encode(self.keys, self.n)
        pos = np.searchsorted(codes, rep)
        vals = self.values[pos]
        vals = np.where(needs_conj, np.conj(vals), vals)
        return vals.reshape(quads.shape[:-1])

    def full(self) -> np.ndarray:
        n = self.n
        grid = np.indices((n, n, n, n)).reshape(4, -1).T
        return self.lookup(grid).reshape(n, n, n, n)

    def restrict(self, indices) -> "TwoBodyTensor":
        pos = _positions(self.indices, indices)
        sub = self.full()[np.ix_(pos, pos, pos, pos)]
        return TwoBodyTensor.from_full(sub, tuple(indices), self.real_orbitals)

    def symmetry_residual(self, h4: np.ndarray | None = None) -> float:
        """Largest deviation between a tensor and its symmetry images."""
        h4 = self.full() if h4 is None else h4
        n = h4.shape[0]
        grid = np.indices((n, n, n, n)).reshape(4, -1).T
        images, conj = _symmetry_images(grid, self.real_orbitals)
        base = h4[grid[:, 0], grid[:, 1], grid[:, 2], grid[:, 3]]
        worst = 0.0
        for k, c in enumerate(conj):
            img = h4[images[:, k, 0], images[:, k, 1], images[:, k, 2], images[:, k, 3]]
            worst = max(worst, float(np.max(np.abs(base - (np.conj(img) if c else img)), initial=0.0)))
        return worst


# ---------------------------------------------------------------------------
# one-body terms


def kinetic_matrix(orbitals) -> OneBodyMatrix:
    c = orbitals.coefficients
    return OneBodyMatrix(0.5 * (c.conj().T * orbitals.g2) @ c)


def local_pp_pw(pp, position, delta_g, cell) -> complex:
    """Plane-wave matrix element <G1|V_loc|G2> of one atom, for delta_g = G1 - G2."""
    delta_g = np.asarray(delta_g, dtype=float)
    q = float(np.linalg.norm(delta_g))
    value = local_form_factor(pp, q, cell.volume)[0]
    if q < 1e-12:
        return complex(value)
    return complex(value * np.exp(-1j * delta_g @ np.asarray(position, dtype=float)))


def nonlocal_pp_pw(pp, position, g1, g2, cell) -> complex:
    """Plane-wave matrix element <G1|V_nl|G2> of one atom."""
    if not pp.projectors:
        return 0j
    g1 = np.asarray(g1, dtype=float)
    g2 = np.asarray(g2, dtype=float)
    q1, q2 = np.linalg.norm(g1), np.linalg.norm(g2)
    total = 0j
    ls = pp.angular_momenta
    for i, pi in enumerate(pp.projectors):
        f1 = projector_transform(pp.r_grid, pp.r_weights, pi.beta, pi.l, q1)[0]
        for j, pj in enumerate(pp.projectors):
            if ls[j] != ls[i] or pp.d_matrix[i, j] == 0:
                continue
            f2 = projector_transform(pp.r_grid, pp.r_weights, pj.beta, pj.l, q2)[0]
            angular = sum(ylm(pi.l, m, g1)[0] * np.conj(ylm(pi.l, m, g2)[0]) for m in range(-pi.l, pi.l + 1))
            total += pp.d_matrix[i, j] * angular * f1 * f2
    phase = np.exp(-1j * (g1 - g2) @ np.asarray(position, dtype=float))
    return complex(FOUR_PI**2 / cell.volume * phase * total)


def _pp_for(atom, pps):
    try:
        return pps[atom.species]
    except KeyError:
        raise NumericalError(f"no pseudopotential for species {atom.species!r}") from None


def local_potential_spectrum(cell, pps, b_vectors, g_max: float, dims) -> np.ndarray:
    """Fourier coefficients of the total local potential on an FFT box, zero beyond g_max."""
    miller = grid_miller(dims)
    g = miller @ b_vectors.T
    g2 = np.sum(g * g, axis=-1)
    inside = g2 <= g_max**2 * (1.0 + 1e-10)
    gv = g[inside]
    keys, inverse = unique_norms(gv)
    spec = np.zeros(dims, dtype=complex)
    values = np.zeros(gv.shape[0], dtype=complex)
    cache = {}
    for atom in cell.atoms:
        pp = _pp_for(atom, pps)
        if atom.species not in cache:
            cache[atom.species] = local_form_factor(pp, keys, cell.volume)[inverse]
        values += cache[atom.species] * np.exp(-1j * gv @ atom.position)
    spec[inside] = values
    return spec


def local_matrix(orbitals, cell, pps, dims=None) -> OneBodyMatrix:
    """Local pseudopotential in the orbital basis, integrated on the pair grid.

    With dims >= 4m+1 (m the per-axis Miller extent) the grid sum is exact
    for the potential truncated to the doubled sphere.
    """
    dims = tuple(dims) if dims is not None else pair_grid_dims(cell, orbitals.basis.g_cut)
    check_band_limit(dims, 2 * np.abs(orbitals.miller).max(axis=0))
    spec = local_potential_spectrum(cell, pps, orbitals.basis.b_vectors, 2.0 * orbitals.basis.g_cut, dims)
    n_pts = float(np.prod(dims))
    v_r = np.fft.ifftn(spec) * n_pts
    psi = orbitals_on_grid(orbitals, range(orbitals.n_orbitals), dims).reshape(orbitals.n_orbitals, -1)
    h = (psi.conj() @ (v_r.reshape(-1)[:, None] * psi.T)) * (cell.volume / n_pts)
    return OneBodyMatrix(h)


def projector_vectors(orbitals, pp, position) -> list[tuple[int, np.ndarray]]:
    """Per-projector overlaps P[m, t] = sum_G c_{G,t} Y*_lm F(|G|) exp(iG.R)."""
    g = orbitals.g_vectors
    keys, inverse = unique_norms(g)
    phase = np.exp(1j * g @ np.asarray(position, dtype=float))
    out = []
    for proj in pp.projectors:
        f = projector_transform(pp.r_grid, pp.r_weights, proj.beta, proj.l, keys)[inverse]
        rows = [np.conj(ylm(proj.l, m, g)) * f * phase for m in range(-proj.l, proj.l + 1)]
        out.append((proj.l, np.stack(rows) @ orbitals.coefficients))
    return out


def nonlocal_matrix(orbitals, cell, pps) -> OneBodyMatrix:
    n = orbitals.n_orbitals
    h = np.zeros((n, n), dtype=complex)
    for atom in cell.atoms:
        pp = _pp_for(atom, pps)
        vecs = projector_vectors(orbitals, pp, atom.position)
        for i, (li, pi) in enumerate(vecs):
            for j, (lj, pj) in enumerate(vecs):
                d = pp.d_matrix[i, j]
                if li != lj or d == 0:
                    continue
                h += d * (pi.conj().T @ pj)
    return OneBodyMatrix(h * FOUR_PI**2 / cell.volume)


def one_body_ks(orbitals, cell, pps, dims=None, tol: float = HERMITICITY_TOL) -> OneBodyMatrix:
    """Kinetic plus pseudopotential matrix over all orbitals of the set."""
    h = kinetic_matrix(orbitals).h
    if pps is not None and cell.atoms:
        h = h + local_matrix(orbitals, cell, pps, dims).h + nonlocal_matrix(orbitals, cell, pps).h
    residual = float(np.max(np.abs(h - h.conj().T)))
    if residual > tol:
        raise NumericalError(f"one-body matrix not Hermitian: residual {residual:.3g}")
    h = 0.5 * (h + h.conj().T)
    if orbitals.gamma_only:
        h = h.real.astype(complex)
    return OneBodyMatrix(h)


# ---------------------------------------------------------------------------
# two-body terms


def orbitals_are_real(orbitals, tol: float = 1e-12) -> bool:
    """True if every orbital is a real function, i.e. c(-G) = c(G)^*."""
    if orbitals.gamma_only:
        return True
    lookup = {tuple(m): k for k, m in enumerate(orbitals.miller.tolist())}
    try:
        neg = np.array([lookup[(-a, -b, -c)] for a, b, c in orbitals.miller.tolist()])
    except KeyError:
        return False
    c = orbitals.coefficients
    return bool(np.max(np.abs(c[neg] - c.conj()), initial=0.0) < tol)


class _PairDensities:
    """Fourier components of psi_p^* psi_q on the doubled sphere (G = 0 excluded)."""

    def __init__(self, orbitals, indices, dims=None):
        cell = orbitals.cell
        dims = tuple(dims) if dims is not None else pair_grid_dims(cell, orbitals.basis.g_cut)
        check_band_limit(dims, 2 * np.abs(orbitals.miller).max(axis=0))
        sphere = generate_g_sphere(ReciprocalBasis(orbitals.basis.b_vectors, 2.0 * orbitals.basis.g_cut))
        sphere = sphere[np.any(sphere != 0, axis=1)]
        g = sphere @ orbitals.basis.b_vectors.T
        self.dims = dims
        self.volume = cell.volume
        self.coulomb = FOUR_PI * cell.volume / np.sum(g * g, axis=1)
        self.bins = tuple(np.mod(sphere, np.asarray(dims)).T)
        self.neg_bins = tuple(np.mod(-sphere, np.asarray(dims)).T)
        self.psi = orbitals_on_grid(orbitals, list(indices), dims)
        self.n_points = float(np.prod(dims))

    def transform(self, p: int, q: int) -> np.ndarray:
        spec = np.fft.fftn(np.conj(self.psi[p]) * self.psi[q]) / self.n_points
        return spec[self.bins]

    def all_pairs(self) -> np.ndarray:
        """rho[p, q, G] for every pair; the q < p half comes from rho_qp(G) = conj(rho_pq(-G))."""
        n = self.psi.shape[0]
        rho = np.empty((n, n, self.coulomb.size), dtype=complex)
        for p in range(n):
            for q in range(p, n):
                spec = np.fft.fftn(np.conj(self.psi[p]) * self.psi[q]) / self.n_points
                rho[p, q] = spec[self.bins]
                if q != p:
                    rho[q, p] = np.conj(spec[self.neg_bins])
        return rho


def two_body_ks(orbitals, cell, indices, dims=None) -> TwoBodyTensor:
    """ERIs over ``indices``, evaluated only for the unique elements."""
    indices = [int(i) for i in indices]
    if any(i < 0 or i >= orbitals.n_orbitals for i in indices):
        raise ValueError(f"orbital indices {indices} out of range for {orbitals.n_orbitals} orbitals")
    real = orbitals_are_real(orbitals)
    pairs = _PairDensities(orbitals, indices, dims)
    rho = pairs.all_pairs()
    n = len(indices)
    keys = unique_quadruples(n, real)
    values = np.empty(keys.shape[0], dtype=complex)
    weight = pairs.coulomb
    for s in range(0, keys.shape[0], _ERI_CHUNK):
        t, u, v, w = keys[s : s + _ERI_CHUNK].T
        # rho_tw(-G) = conj(rho_wt(G))
        values[s : s + _ERI_CHUNK] = np.sum(np.conj(rho[w, t]) * rho[u, v] * weight, axis=1)
    return TwoBodyTensor(keys, values, tuple(indices), real)


def frozen_core_terms(orbitals, frozen, active, dims=None):
    """Two-electron parts of the frozen-core energy and potential via Coulomb/exchange sums.

    Returns ``(e_two, g)`` where ``e_two = sum_ab (2 h_abba - h_abab)`` and
    ``g[t, u] = sum_a (2 h_taau - h_taua)`` over ``active`` positions; the
    full ERI tensor over frozen orbitals is never built.
    """
    frozen = [int(a) for a in frozen]
    active = [int(t) for t in active]
    n_act = len(active)
    if not frozen:
        return 0.0, np.zeros((n_act, n_act), dtype=complex)
    pairs = _PairDensities(orbitals, frozen + active, dims)
    nf = len(frozen)
    fr = range(nf)
    ac = range(nf, nf + n_act)
    weight = pairs.coulomb

    env = sum(pairs.transform(a, a) for a in fr)
    e_hartree = np.sum(np.abs(env) ** 2 * weight)
    e_exchange = 0.0
    for a in fr:
        for b in fr:
            e_exchange += np.sum(np.abs(pairs.transform(b, a)) ** 2 * weight)

    act = np.array([pairs.transform(u, t) for t in ac for u in ac]).reshape(n_act, n_act, -1)
    g = 2.0 * np.einsum("tug,g,g->tu", np.conj(act), env, weight)
    for a in fr:
        rho_at = np.array([pairs.transform(a, t) for t in ac])
        g -= np.einsum("tg,ug,g->tu", np.conj(rho_at), rho_at, weight)
    return float(2.0 * e_hartree - e_exchange), g


# ---------------------------------------------------------------------------
# dump format


DUMP_VERSION = 1


def write_matrix_elements(path, header: dict, h1: OneBodyMatrix, h4: TwoBodyTensor | None = None) -> None:
    """Directory with ``header.json`` and little-endian binaries for h1 and the unique h4 list."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = dict(header)
    meta.update(
        version=DUMP_VERSION,
        n=h1.n,
        indices=list(h1.indices),
        n_unique=0 if h4 is None else int(h4.keys.shape[0]),
        real_orbitals=bool(h4.real_orbitals) if h4 is not None else False,
    )
    (path / "header.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    np.ascontiguousarray(h1.h).astype("<c16").tofile(path / "h1.c128")
    if h4 is not None:
        if tuple(h4.indices) != tuple(h1.indices):
            raise ValueError("one- and two-body index sets differ")
        h4.keys.astype("<i4").tofile(path / "h4_keys.i32")
        h4.values.astype("<c16").tofile(path / "h4_values.c128")


def read_matrix_elements(path):
    """Inverse of :func:`write_matrix_elements`; returns ``(header, h1, h4 or None)``."""
    path = Path(path)
    try:
        meta = json.loads((path / "header.json").read_text())
        n = int(meta["n"])
        h1 = np.fromfile(path / "h1.c128", dtype="<c16")
        if h1.size != n * n:
            raise ValueError(f"h1.c128 holds {h1.size} values, expected {n * n}")
        indices = tuple(meta["indices"])
        h4 = None
        if meta.get("n_unique", 0):
            keys = np.fromfile(path / "h4_keys.i32", dtype="<i4").reshape(-1, 4)
            vals = np.fromfile(path / "h4_values.c128", dtype="<c16")
            if keys.shape[0] != meta["n_unique"] or vals.size != meta["n_unique"]:
                raise ValueError("h4 binary length does not match header")
            h4 = TwoBodyTensor(keys, vals, indices, bool(meta["real_orbitals"]))
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise InputError(f"malformed matrix-element dump {path}: {exc}") from exc
    return meta, OneBodyMatrix(h1.reshape(n, n), indices), h4
