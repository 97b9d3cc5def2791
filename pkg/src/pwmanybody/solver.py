"""Jordan-Wigner qubit Hamiltonian, exact diagonalization and a statevector UCCSD-VQE.

Qubit ordering is spin-blocked: qubit ``t`` is spatial orbital ``t`` with
spin up, qubit ``n + t`` the same orbital with spin down.  Basis state
``b`` has qubit ``k`` occupied when bit ``k`` of ``b`` is set.

Internally Pauli operators are kept as ``X^x Z^z`` products (bit masks
``x`` and ``z``), which act as ``X^x Z^z |b> = (-1)^popcount(b & z) |b ^ x>``.
The Pauli string with ``Y`` on ``x & z`` equals ``i^popcount(x & z) X^x Z^z``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.sparse.linalg import eigsh

from .errors import InputError, NumericalError

log = logging.getLogger(__name__)

MAX_ACTIVE_ORBITALS = 14
PRUNE_TOL = 1e-14
NORM_TOL = 1e-12
_DENSE_LIMIT = 2000
MAX_RESTARTS = 3
STALL_ULPS = 64


def _popcount(a):
    return np.bitwise_count(np.asarray(a, dtype=np.int64))


def _parity(a) -> np.ndarray:
    return (_popcount(a) & 1).astype(np.int64)


@dataclass(frozen=True, eq=False)
class QubitHamiltonian:
    """Real linear combination of Pauli strings on ``n_qubits`` qubits."""

    n_qubits: int
    x: np.ndarray
    z: np.ndarray
    coeffs: np.ndarray

    def __post_init__(self):
        for name, dtype in (("x", np.int64), ("z", np.int64), ("coeffs", float)):
            a = np.array(getattr(self, name), dtype=dtype).reshape(-1)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def n_orbitals(self) -> int:
        return self.n_qubits // 2

    def labels(self) -> list[str]:
        """Pauli strings, qubit 0 first."""
        out = []
        for x, z in zip(self.x.tolist(), self.z.tolist()):
            out.append("".join("IXZY"[((x >> k) & 1) | (((z >> k) & 1) << 1)] for k in range(self.n_qubits)))
        return out

    @property
    def terms(self) -> list[tuple[str, float]]:
        return list(zip(self.labels(), self.coeffs.tolist()))

    def identity_coefficient(self) -> float:
        mask = (self.x == 0) & (self.z == 0)
        return float(self.coeffs[mask].sum())

    def xz_coefficients(self) -> np.ndarray:
        """Coefficients of the X^x Z^z form."""
        return self.coeffs * (1j ** (_popcount(self.x & self.z) % 4))

    def sector_matrix(self, states: np.ndarray) -> sp.csr_matrix:
        """Matrix of the operator within the span of ``states`` (sorted basis-state integers)."""
        states = np.asarray(states, dtype=np.int64)
        cxz = self.xz_coefficients()
        rows, cols, vals = [], [], []
        for x in np.unique(self.x):
            sel = self.x == x
            zs, cs = self.z[sel], cxz[sel]
            targets = states ^ x
            pos = np.searchsorted(states, targets)
            pos = np.minimum(pos, states.size - 1)
            ok = states[pos] == targets
            if not np.any(ok):
                continue
            src = states[ok]
            signs = 1 - 2 * _parity(src[:, None] & zs[None, :])
            amp = signs @ cs
            rows.append(pos[ok])
            cols.append(np.nonzero(ok)[0])
            vals.append(amp)
        if not rows:
            return sp.csr_matrix((states.size, states.size), dtype=complex)
        m = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(states.size, states.size)
        )
        return m.tocsr()


# ---------------------------------------------------------------------------
# Jordan-Wigner mapping


def _ladder_expansion(modes: np.ndarray, dagger: np.ndarray, coeffs: np.ndarray):
    """Expand products of ladder operators into X^x Z^z terms.

    ``modes`` and ``dagger`` have shape (T, L); each row is the ordered
    product a^(dagger)_{k1} ... a^(dagger)_{kL} with weight ``coeffs``.
    a+_k = 1/2 X_k (I + Z_k) Z_{<k} and a_k = 1/2 X_k (I - Z_k) Z_{<k}.
    """
    n_terms, length = modes.shape
    xs, zs, cs = [], [], []
    low = (np.int64(1) << modes) - 1
    bit = np.int64(1) << modes
    for choice in range(1 << length):
        x = np.zeros(n_terms, dtype=np.int64)
        z = np.zeros(n_terms, dtype=np.int64)
        c = coeffs.astype(complex) * 0.5**length
        for pos in range(length):
            with_z = (choice >> pos) & 1
            x2 = bit[:, pos]
            z2 = low[:, pos] | (bit[:, pos] if with_z else 0)
            if with_z:
                c = np.where(dagger[:, pos], c, -c)
            c = c * (1 - 2 * _parity(z & x2))
            x ^= x2
            z ^= z2
        xs.append(x)
        zs.append(z)
        cs.append(c)
    return np.concatenate(xs), np.concatenate(zs), np.concatenate(cs)


def _merge(n_qubits: int, x, z, c_xz, constant: float) -> QubitHamiltonian:
    keys = (x << n_qubits) | z
    uniq, inverse = np.unique(keys, return_inverse=True)
    merged = np.bincount(inverse, weights=c_xz.real, minlength=uniq.size) + 1j * np.bincount(
        inverse, weights=c_xz.imag, minlength=uniq.size
    )
    ux = uniq >> n_qubits
    uz = uniq & ((np.int64(1) << n_qubits) - 1)
    pauli = merged / (1j ** (_popcount(ux & uz) % 4))
    if np.any(np.abs(pauli.imag) > 1e-10):
        raise NumericalError(f"non-Hermitian qubit Hamiltonian: max imaginary coefficient {np.abs(pauli.imag).max():.3g}")
    coeffs = pauli.real
    ident = (ux == 0) & (uz == 0)
    if np.any(ident):
        coeffs[ident] += constant
    else:
        ux, uz, coeffs = np.append(0, ux), np.append(0, uz), np.append(constant, coeffs)
    keep = np.abs(coeffs) >= PRUNE_TOL
    return QubitHamiltonian(n_qubits, ux[keep], uz[keep], coeffs[keep])


def jordan_wigner(ham, max_orbitals: int = MAX_ACTIVE_ORBITALS) -> QubitHamiltonian:
    """Spin-orbital expansion of an active-space Hamiltonian mapped to qubits.

    H = e_const + sum_{tu,s} h_tu a+_ts a_us
        + 1/2 sum_{tuvw,s,r} h_tuvw a+_ts a+_ur a_vr a_ws
    """
    n = ham.n_active
    if n > max_orbitals:
        raise InputError(f"{n} active orbitals exceed the statevector budget of {max_orbitals}")
    h1 = np.asarray(ham.h_eff.h)
    h4 = ham.h4.full()
    n_qubits = 2 * n

    t, u = np.nonzero(np.abs(h1) > 0)
    one_modes, one_coeffs = [], []
    for s in range(2):
        one_modes.append(np.stack([t + s * n, u + s * n], axis=1))
        one_coeffs.append(h1[t, u])
    idx = np.argwhere(np.abs(h4) > 0)
    two_modes, two_coeffs = [], []
    for s in range(2):
        for r in range(2):
            a, b, c, d = idx.T
            modes = np.stack([a + s * n, b + r * n, c + r * n, d + s * n], axis=1)
            ok = (modes[:, 0] != modes[:, 1]) & (modes[:, 2] != modes[:, 3])
            two_modes.append(modes[ok])
            two_coeffs.append(0.5 * h4[a, b, c, d][ok])

    parts = []
    if one_modes:
        m = np.concatenate(one_modes)
        parts.append(_ladder_expansion(m, np.tile([True, False], (m.shape[0], 1)), np.concatenate(one_coeffs)))
    m = np.concatenate(two_modes) if two_modes else np.zeros((0, 4), dtype=np.int64)
    if m.size:
        parts.append(
            _ladder_expansion(m, np.tile([True, True, False, False], (m.shape[0], 1)), np.concatenate(two_coeffs))
        )
    if parts:
        x = np.concatenate([p[0] for p in parts])
        z = np.concatenate([p[1] for p in parts])
        c = np.concatenate([p[2] for p in parts])
    else:
        x = z = np.zeros(0, dtype=np.int64)
        c = np.zeros(0, dtype=complex)
    return _merge(n_qubits, x, z, c, float(ham.e_const))


# ---------------------------------------------------------------------------
# statevectors and sectors


@dataclass(frozen=True, eq=False)
class Statevector:
    amplitudes: np.ndarray
    n_qubits: int

    def __post_init__(self):
        amp = np.array(self.amplitudes, dtype=complex).reshape(-1)
        if amp.size != 1 << self.n_qubits:
            raise ValueError(f"statevector length {amp.size} does not match {self.n_qubits} qubits")
        norm = np.linalg.norm(amp)
        if abs(norm - 1.0) > NORM_TOL:
            raise NumericalError(f"statevector norm {norm:.15g} deviates from 1")
        amp.setflags(write=False)
        object.__setattr__(self, "amplitudes", amp)

    @classmethod
    def basis_state(cls, bits: int, n_qubits: int) -> "Statevector":
        amp = np.zeros(1 << n_qubits, dtype=complex)
        amp[bits] = 1.0
        return cls(amp, n_qubits)


def sector_states(n_orbitals: int, n_up: int, n_down: int) -> np.ndarray:
    """Sorted basis states with the given number of electrons in each spin block."""
    def block(k):
        return [sum(1 << i for i in c) for c in combinations(range(n_orbitals), k)]

    up = np.array(block(n_up), dtype=np.int64)
    down = np.array(block(n_down), dtype=np.int64) << n_orbitals
    return np.sort((up[:, None] | down[None, :]).reshape(-1))


def _split_electrons(n_electrons: int, n_orbitals: int) -> tuple[int, int]:
    if n_electrons < 0 or n_electrons % 2 or n_electrons > 2 * n_orbitals:
        raise InputError(f"{n_electrons} electrons cannot fill a closed-shell reference on {n_orbitals} orbitals")
    return n_electrons // 2, n_electrons // 2


def _fix_phase(vec: np.ndarray) -> np.ndarray:
    mags = np.abs(vec)
    dominant = int(np.nonzero(mags >= mags.max() - 1e-10)[0][0])
    return vec * (np.conj(vec[dominant]) / mags[dominant])


def exact_ground_state(qh: QubitHamiltonian, n_electrons: int):
    """Lowest eigenpair in the sector with n_electrons/2 electrons per spin.

    The eigenvector is phase-fixed so that its dominant amplitude (first
    basis state in index order among equal magnitudes) is positive real.
    """
    n = qh.n_orbitals
    if n > MAX_ACTIVE_ORBITALS:
        raise InputError(f"{n} orbitals exceed the exact-diagonalization budget")
    states = sector_states(n, *_split_electrons(n_electrons, n))
    mat = qh.sector_matrix(states)
    if states.size <= _DENSE_LIMIT:
        w, v = np.linalg.eigh(mat.toarray())
        energy, vec = w[0], v[:, 0]
    else:
        w, v = eigsh(mat, k=1, which="SA", tol=1e-14)
        energy, vec = w[0], v[:, 0]
    amp = np.zeros(1 << qh.n_qubits, dtype=complex)
    amp[states] = _fix_phase(vec / np.linalg.norm(vec))
    return float(energy), Statevector(amp, qh.n_qubits)


def expectation(qh: QubitHamiltonian, state: Statevector) -> float:
    amp = state.amplitudes
    support = np.nonzero(np.abs(amp) > 0)[0]
    n_e = int(_popcount(support[0])) if support.size else 0
    n_up = int(_popcount(support[0] & ((1 << qh.n_orbitals) - 1))) if support.size else 0
    states = sector_states(qh.n_orbitals, n_up, n_e - n_up)
    if np.any(np.abs(np.delete(amp, states)) > 0):
        raise NumericalError("state is not confined to one particle-number sector")
    psi = amp[states]
    return float(np.real(np.vdot(psi, qh.sector_matrix(states) @ psi)))


def occupancies(state: Statevector) -> np.ndarray:
    """f_t = <n_t,up> + <n_t,down>, with n = (I - Z)/2 on each qubit."""
    n = state.n_qubits // 2
    prob = np.abs(state.amplitudes) ** 2
    basis = np.arange(prob.size, dtype=np.int64)
    qubit_occ = np.array([prob[(basis >> k) & 1 == 1].sum() for k in range(state.n_qubits)])
    return qubit_occ[:n] + qubit_occ[n:]


# ---------------------------------------------------------------------------
# UCCSD ansatz


def _apply_ladder(states: np.ndarray, mode: int, dagger: bool):
    """Apply a (or a+) on mode to basis states; returns (new_states, sign, alive)."""
    occupied = (states >> mode) & 1 == 1
    alive = ~occupied if dagger else occupied
    sign = 1 - 2 * _parity(states & ((np.int64(1) << mode) - 1))
    return states ^ (np.int64(1) << mode), sign, alive


@dataclass(frozen=True)
class UccsdAnsatz:
    """Spin-conserving singles and S_z-conserving doubles on a closed-shell reference.

    Spin-orbital labels follow the qubit ordering.  A double ``(i, j, p, q)``
    has generator a+_p a+_q a_j a_i with i < j occupied and p < q virtual.
    """

    n_orbitals: int
    n_electrons: int
    repetitions: int = 1
    singles: tuple[tuple[int, int], ...] = field(init=False)
    doubles: tuple[tuple[int, int, int, int], ...] = field(init=False)

    def __post_init__(self):
        n = self.n_orbitals
        n_up, _ = _split_electrons(self.n_electrons, n)
        if self.repetitions < 1:
            raise InputError("repetitions must be a positive integer")
        occ = {s: [t + s * n for t in range(n_up)] for s in range(2)}
        vir = {s: [t + s * n for t in range(n_up, n)] for s in range(2)}
        singles = tuple((i, p) for s in range(2) for i in occ[s] for p in vir[s])
        all_occ = occ[0] + occ[1]
        all_vir = vir[0] + vir[1]
        doubles = []
        for i, j in combinations(all_occ, 2):
            for p, q in combinations(all_vir, 2):
                if (i >= n) + (j >= n) == (p >= n) + (q >= n):
                    doubles.append((i, j, p, q))
        object.__setattr__(self, "singles", singles)
        object.__setattr__(self, "doubles", tuple(doubles))

    @property
    def n_qubits(self) -> int:
        return 2 * self.n_orbitals

    @property
    def reference(self) -> int:
        n_up = self.n_electrons // 2
        block = (1 << n_up) - 1
        return block | (block << self.n_orbitals)

    @property
    def n_parameters(self) -> int:
        return self.repetitions * (len(self.singles) + len(self.doubles))

    def excitations(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        """(created, annihilated) modes per factor in parameter order for one repetition."""
        return [((p,), (i,)) for i, p in self.singles] + [((p, q), (j, i)) for i, j, p, q in self.doubles]


class _Rotations:
    """Precomputed (source, target, sign) triples of every factor within the reference sector."""

    def __init__(self, ansatz: UccsdAnsatz):
        n_up = ansatz.n_electrons // 2
        self.states = sector_states(ansatz.n_orbitals, n_up, n_up)
        self.pairs = []
        for created, annihilated in ansatz.excitations():
            s = self.states.copy()
            sign = np.ones(s.size, dtype=np.int64)
            alive = np.ones(s.size, dtype=bool)
            for mode in annihilated[::-1]:
                s, sg, ok = _apply_ladder(s, mode, False)
                sign *= sg
                alive &= ok
            for mode in created[::-1]:
                s, sg, ok = _apply_ladder(s, mode, True)
                sign *= sg
                alive &= ok
            src = np.nonzero(alive)[0]
            dst = np.searchsorted(self.states, s[alive])
            self.pairs.append((src, dst, sign[alive].astype(float)))
        self.reference_index = int(np.searchsorted(self.states, ansatz.reference))

    def rotate(self, psi: np.ndarray, k: int, theta: float) -> None:
        """In place psi <- exp(theta (A - A+)) psi for factor k."""
        src, dst, sign = self.pairs[k]
        c, s = np.cos(theta), np.sin(theta)
        a, b = psi[src].copy(), psi[dst].copy()
        psi[dst] = c * b + s * sign * a
        psi[src] = c * a - s * sign * b

    def generator(self, psi: np.ndarray, k: int) -> np.ndarray:
        """(A - A+) psi for factor k."""
        src, dst, sign = self.pairs[k]
        out = np.zeros_like(psi)
        out[dst] += sign * psi[src]
        out[src] -= sign * psi[dst]
        return out


def _factor_order(ansatz: UccsdAnsatz) -> np.ndarray:
    """Parameter indices in the order their factors act on the state.

    Within one repetition the operator is (prod singles)(prod doubles), so
    the last double acts first and the first single acts last.
    """
    per = len(ansatz.singles) + len(ansatz.doubles)
    return np.concatenate([r * per + np.arange(per)[::-1] for r in range(ansatz.repetitions)]).astype(int)


def _factor_of(ansatz: UccsdAnsatz, param: int) -> int:
    return param % (len(ansatz.singles) + len(ansatz.doubles))


def apply_uccsd(ansatz: UccsdAnsatz, theta, state: Statevector | None = None) -> Statevector:
    """U(theta) applied to ``state`` (default: the reference determinant)."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.size != ansatz.n_parameters:
        raise ValueError(f"expected {ansatz.n_parameters} parameters, got {theta.size}")
    if state is None:
        state = Statevector.basis_state(ansatz.reference, ansatz.n_qubits)
    if state.n_qubits != ansatz.n_qubits:
        raise ValueError(f"state has {state.n_qubits} qubits, ansatz needs {ansatz.n_qubits}")
    rot = _Rotations(ansatz)
    amp = state.amplitudes
    if np.any(np.delete(amp, rot.states) != 0):
        raise ValueError("apply_uccsd expects a state inside the reference particle-number sector")
    psi = amp[rot.states].copy()
    for k in _factor_order(ansatz):
        rot.rotate(psi, _factor_of(ansatz, k), theta[k])
    out = np.zeros_like(amp)
    out[rot.states] = psi
    return Statevector(out, ansatz.n_qubits)


class UccsdEnergy:
    """E(theta) and its adjoint gradient for one Hamiltonian/ansatz pair."""

    def __init__(self, qh: QubitHamiltonian, ansatz: UccsdAnsatz):
        if qh.n_qubits != ansatz.n_qubits:
            raise ValueError("Hamiltonian and ansatz act on different qubit counts")
        self.ansatz = ansatz
        self.rot = _Rotations(ansatz)
        self.matrix = qh.sector_matrix(self.rot.states)
        self.order = _factor_order(ansatz)
        self.n_evaluations = 0

    def state(self, theta) -> np.ndarray:
        psi = np.zeros(self.rot.states.size, dtype=complex)
        psi[self.rot.reference_index] = 1.0
        for k in self.order:
            self.rot.rotate(psi, _factor_of(self.ansatz, k), theta[k])
        return psi

    def energy(self, theta) -> float:
        psi = self.state(np.asarray(theta, dtype=float))
        return float(np.real(np.vdot(psi, self.matrix @ psi)))

    def energy_and_gradient(self, theta):
        theta = np.asarray(theta, dtype=float)
        self.n_evaluations += 1
        phi = self.state(theta)
        lam = self.matrix @ phi
        energy = float(np.real(np.vdot(phi, lam)))
        grad = np.zeros(theta.size)
        for k in self.order[::-1]:
            f = _factor_of(self.ansatz, k)
            grad[k] = 2.0 * np.real(np.vdot(lam, self.rot.generator(phi, f)))
            self.rot.rotate(phi, f, -theta[k])
            self.rot.rotate(lam, f, -theta[k])
        return energy, grad

    def to_statevector(self, theta) -> Statevector:
        amp = np.zeros(1 << self.ansatz.n_qubits, dtype=complex)
        amp[self.rot.states] = self.state(np.asarray(theta, dtype=float))
        return Statevector(amp, self.ansatz.n_qubits)


@dataclass(frozen=True)
class VqeOptions:
    max_iterations: int = 2000
    gtol: float = 1e-8
    perturbation: float = 0.0
    seed: int = 0


@dataclass(frozen=True, eq=False)
class VqeResult:
    energy: float
    theta: np.ndarray
    state: Statevector
    trace: list[float]
    n_iterations: int
    grad_norm: float
    converged: bool
    message: str


def vqe_minimize(qh: QubitHamiltonian, ansatz: UccsdAnsatz, options: VqeOptions = VqeOptions()) -> VqeResult:
    """L-BFGS minimization of the UCCSD energy, starting at theta = 0 (optionally perturbed)."""
    objective = UccsdEnergy(qh, ansatz)
    theta0 = np.zeros(ansatz.n_parameters)
    if options.perturbation:
        rng = np.random.default_rng(options.seed)
        theta0 = options.perturbation * rng.uniform(-1.0, 1.0, theta0.size)
        log.info("VQE start perturbed by %.3g (seed %d)", options.perturbation, options.seed)
    best = {"energy": np.inf, "theta": theta0.copy()}
    trace: list[float] = []

    def fun(theta):
        e, g = objective.energy_and_gradient(theta)
        if e < best["energy"]:
            best["energy"], best["theta"] = e, theta.copy()
        return e, g

    def callback(intermediate_result):
        trace.append(float(intermediate_result.fun))

    e0, g0 = fun(theta0)
    trace.append(e0)
    res_success, n_iter, message = True, 0, "initial point is stationary"
    if theta0.size and np.max(np.abs(g0)) > options.gtol:
        # a failed line search near the minimum restarts with fresh curvature memory; once a restart
        # gains nothing beyond rounding the energy is stationary to machine precision
        for _ in range(1 + MAX_RESTARTS):
            start_energy = best["energy"]
            res = minimize(
                fun,
                best["theta"].copy(),
                jac=True,
                method="L-BFGS-B",
                callback=callback,
                options={"maxiter": options.max_iterations - n_iter, "gtol": options.gtol, "ftol": 1e-15,
                         "maxcor": 30},
            )
            res_success, message = bool(res.success), str(res.message)
            n_iter += int(res.nit)
            if res_success or n_iter >= options.max_iterations or "ABNORMAL" not in message:
                break
            if start_energy - best["energy"] <= STALL_ULPS * np.spacing(max(1.0, abs(start_energy))):
                res_success, message = True, "energy stationary to machine precision"
                break
    theta = best["theta"]
    energy, grad = objective.energy_and_gradient(theta)
    grad_norm = float(np.linalg.norm(grad))
    converged = res_success or grad_norm <= options.gtol
    if not converged:
        log.warning("VQE did not converge: %s (|grad| = %.3g)", message, grad_norm)
    return VqeResult(
        energy, theta, objective.to_statevector(theta), trace, n_iter, grad_norm, converged, message
    )


def solve_report(energy: float, e_const: float, occ, n_iterations: int, grad_norm: float, converged: bool,
                 seed: int | None, **extra) -> dict:
    report = {
        "energy_hartree": float(energy),
        "e_const": float(e_const),
        "n_iterations": int(n_iterations),
        "grad_norm": float(grad_norm),
        "occupancies": [float(f) for f in occ],
        "converged": bool(converged),
        "seed": seed,
    }
    report.update(extra)
    return report
