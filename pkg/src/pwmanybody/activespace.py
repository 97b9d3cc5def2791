"""Frozen-core reduction to an active space and assembly of the final Hamiltonian."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, NumericalError
from .matelems import OneBodyMatrix, TwoBodyTensor, read_matrix_elements, write_matrix_elements

HERMITICITY_TOL = 1e-10


@dataclass(frozen=True)
class ActiveSpaceSpec:
    frozen: tuple[int, ...]
    active: tuple[int, ...]
    n_active_electrons: int

    def __post_init__(self):
        frozen = tuple(int(a) for a in self.frozen)
        active = tuple(int(t) for t in self.active)
        object.__setattr__(self, "frozen", frozen)
        object.__setattr__(self, "active", active)
        if len(set(frozen)) != len(frozen) or len(set(active)) != len(active):
            raise InputError("duplicate orbital index in active-space specification")
        if set(frozen) & set(active):
            raise InputError(f"orbitals {sorted(set(frozen) & set(active))} are both frozen and active")
        n = self.n_active_electrons
        if n < 0 or n % 2:
            raise InputError(f"n_active_electrons must be even and non-negative, got {n}")
        if n > 2 * len(active):
            raise InputError(f"{n} active electrons do not fit in {len(active)} active orbitals")

    def check_electron_count(self, n_electrons: int) -> None:
        if self.n_active_electrons + 2 * len(self.frozen) != n_electrons:
            raise InputError(
                f"electron count mismatch: {self.n_active_electrons} active + 2*{len(self.frozen)} frozen "
                f"!= {n_electrons}"
            )


@dataclass(frozen=True, eq=False)
class ActiveSpaceHamiltonian:
    """H = e_const + sum h_eff[t,u] a+_t a_u + 1/2 sum h4[t,u,v,w] a+_t a+_u a_v a_w (spin summed)."""

    h_eff: OneBodyMatrix
    h4: TwoBodyTensor
    e_const: float
    n_electrons: int
    e_nn: float = 0.0
    e_self: float = 0.0
    e_frozen: float = 0.0
    frozen: tuple[int, ...] = ()

    def __post_init__(self):
        if self.h_eff.hermiticity_residual() > HERMITICITY_TOL:
            raise NumericalError(f"h_eff not Hermitian: residual {self.h_eff.hermiticity_residual():.3g}")
        if not math.isfinite(self.e_const):
            raise NumericalError("constant energy is not finite")
        if self.h_eff.n != self.h4.n:
            raise NumericalError("one- and two-body terms cover different active spaces")

    @property
    def n_active(self) -> int:
        return self.h_eff.n

    @property
    def active(self) -> tuple[int, ...]:
        return self.h_eff.indices


def frozen_core_energy(h: OneBodyMatrix, h4: TwoBodyTensor, frozen) -> float:
    frozen = list(frozen)
    if not frozen:
        return 0.0
    pos = _positions(h4, frozen)
    sub = h4.full()[np.ix_(pos, pos, pos, pos)]
    one = h.restrict(frozen).h
    coulomb = np.einsum("abba->", sub)
    exchange = np.einsum("abab->", sub)
    return float(np.real(2.0 * np.trace(one) + 2.0 * coulomb - exchange))


def frozen_core_potential(h4: TwoBodyTensor, frozen, active) -> OneBodyMatrix:
    """g[t, u] = sum_a (2 h_taau - h_taua) over active t, u."""
    active = list(active)
    if not frozen:
        return OneBodyMatrix(np.zeros((len(active), len(active))), active)
    full = h4.full()
    f = _positions(h4, frozen)
    a = _positions(h4, active)
    direct = np.einsum("taau->tu", full[np.ix_(a, f, f, a)])
    exchange = np.einsum("taua->tu", full[np.ix_(a, f, a, f)])
    return OneBodyMatrix(2.0 * direct - exchange, active)


def _positions(h4: TwoBodyTensor, labels) -> list[int]:
    lookup = {lab: k for k, lab in enumerate(h4.indices)}
    missing = [int(i) for i in labels if int(i) not in lookup]
    if missing:
        raise NumericalError(f"internal consistency: orbitals {missing} have no two-body matrix elements")
    return [lookup[int(i)] for i in labels]


def assemble_hamiltonian(
    h: OneBodyMatrix,
    h4: TwoBodyTensor,
    e_nn: float,
    e_self: float,
    spec: ActiveSpaceSpec,
    frozen_terms: tuple[float, np.ndarray] | None = None,
) -> ActiveSpaceHamiltonian:
    """Restrict to the active space and fold the frozen orbitals into h_eff and e_const.

    ``frozen_terms`` optionally supplies ``(e_two, g)`` computed without the
    full frozen-index tensor (see :func:`pwmanybody.matelems.frozen_core_terms`);
    otherwise ``h4`` must cover the frozen orbitals.
    """
    missing = [t for t in spec.active if t not in h.indices]
    if missing:
        raise NumericalError(f"internal consistency: active orbitals {missing} missing from one-body matrix")
    h4_active = h4.restrict(spec.active)
    if frozen_terms is None:
        e_frozen = frozen_core_energy(h, h4, spec.frozen)
        g = frozen_core_potential(h4, spec.frozen, spec.active).h
    else:
        e_two, g = frozen_terms
        e_frozen = float(np.real(2.0 * np.trace(h.restrict(spec.frozen).h))) + float(e_two) if spec.frozen else 0.0
        g = np.asarray(g)
    h_eff = h.restrict(spec.active).h + g
    h_eff = 0.5 * (h_eff + h_eff.conj().T)
    if h4_active.real_orbitals:
        h_eff = h_eff.real.astype(complex)
    e_const = float(e_nn) + float(e_self) + e_frozen
    return ActiveSpaceHamiltonian(
        OneBodyMatrix(h_eff, spec.active),
        h4_active,
        e_const,
        spec.n_active_electrons,
        float(e_nn),
        float(e_self),
        e_frozen,
        spec.frozen,
    )


def spin_resolved_frozen_core(h_spin, h4_spin, frozen, active):
    """Frozen-core energy and per-spin potentials for spin-dependent integrals.

    ``h_spin[s]`` are full one-body arrays and ``h4_spin[s][r]`` full
    physicist-order arrays whose electron-1 index pair (t, w) carries spin
    ``s`` and electron-2 pair (u, v) spin ``r``.  Every frozen orbital is
    assumed doubly occupied.
    """
    frozen = list(frozen)
    active = list(active)
    n_act = len(active)
    if not frozen:
        return 0.0, tuple(np.zeros((n_act, n_act), dtype=complex) for _ in range(2))
    f, a = np.array(frozen), np.array(active)
    energy = 0.0
    potentials = []
    for s in range(2):
        h_s = np.asarray(h_spin[s])
        coulomb = sum(np.einsum("abba->", np.asarray(h4_spin[s][r])[np.ix_(f, f, f, f)]) for r in range(2))
        same = np.asarray(h4_spin[s][s])
        exchange = np.einsum("abab->", same[np.ix_(f, f, f, f)])
        energy += 0.5 * (coulomb - exchange) + np.trace(h_s[np.ix_(f, f)])
        direct = sum(np.einsum("tbbu->tu", np.asarray(h4_spin[s][r])[np.ix_(a, f, f, a)]) for r in range(2))
        potentials.append(direct - np.einsum("tbub->tu", same[np.ix_(a, f, a, f)]))
    return float(np.real(energy)), tuple(potentials)


# ---------------------------------------------------------------------------
# Hamiltonian dump


def write_hamiltonian(path, ham: ActiveSpaceHamiltonian) -> None:
    header = {
        "kind": "active_space_hamiltonian",
        "n_active": ham.n_active,
        "n_electrons": ham.n_electrons,
        "e_const": ham.e_const,
        "e_nn": ham.e_nn,
        "e_self": ham.e_self,
        "e_frozen": ham.e_frozen,
        "active": list(ham.active),
        "frozen": list(ham.frozen),
    }
    write_matrix_elements(path, header, ham.h_eff, ham.h4)


def load_hamiltonian(path) -> ActiveSpaceHamiltonian:
    meta, h1, h4 = read_matrix_elements(Path(path))
    if meta.get("kind") != "active_space_hamiltonian" or h4 is None:
        raise InputError(f"{path} is not an active-space Hamiltonian dump")
    try:
        return ActiveSpaceHamiltonian(
            h1,
            h4,
            float(meta["e_const"]),
            int(meta["n_electrons"]),
            float(meta.get("e_nn", 0.0)),
            float(meta.get("e_self", 0.0)),
            float(meta.get("e_frozen", 0.0)),
            tuple(meta.get("frozen", ())),
        )
    except KeyError as exc:
        raise InputError(f"Hamiltonian dump {path} lacks field {exc}") from exc
