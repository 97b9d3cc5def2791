import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import R_MESH, RAB, erf_local, gaussian_projector, random_orbitals, two_atom_cell, write_species_upf
from pwmanybody.errors import BundleError, PseudopotentialError
from pwmanybody.lattice import ReciprocalBasis, generate_g_sphere, orbital_to_real_space
from pwmanybody.pwio import (
    Atom,
    CrystalCell,
    PlaneWaveOrbitalSet,
    load_pseudopotential,
    load_wavefunction_bundle,
    write_bundle,
    write_upf,
)


def cubic(length=6.0, atoms=()):
    return CrystalCell(np.eye(3) * length, atoms)


def g0_orbital(cell, e_cut=1.0):
    miller = generate_g_sphere(ReciprocalBasis.from_cell(cell, e_cut))
    c = np.zeros((miller.shape[0], 1), dtype=complex)
    c[0, 0] = 1.0
    return PlaneWaveOrbitalSet(cell, e_cut, miller, c, [0.0], 2, gamma_only=True)


def test_cell_volume_and_wrapping():
    cell = CrystalCell(np.diag([2.0, 3.0, 4.0]), (Atom("H", np.array([2.5, -0.5, 4.0])),))
    assert cell.volume == pytest.approx(24.0, abs=1e-12)
    frac = cell.fractional(cell.atoms[0].position)
    assert np.all(frac >= 0) and np.all(frac < 1)
    np.testing.assert_allclose(frac, [0.25, 5 / 6, 0.0], atol=1e-12)


def test_zero_volume_cell_rejected():
    with pytest.raises(BundleError):
        CrystalCell(np.array([[1.0, 0, 0], [1.0, 0, 0], [0, 0, 1.0]]))


def test_single_g0_bundle_roundtrip(tmp_path):
    cell = cubic()
    orb = g0_orbital(cell)
    write_bundle(tmp_path / "b", cell, orb)
    cell2, orb2 = load_wavefunction_bundle(tmp_path / "b")
    assert orb2.n_orbitals == 1
    assert np.linalg.norm(orb2.coefficients[:, 0]) == pytest.approx(1.0, abs=1e-14)
    assert cell2.volume == pytest.approx(cell.volume)


def test_bad_norm_reported_with_index(tmp_path):
    cell = cubic()
    rng = np.random.default_rng(3)
    orb = random_orbitals(cell, 1.0, 4, rng)
    write_bundle(tmp_path / "b", cell, orb)
    raw = np.fromfile(tmp_path / "b" / "coeffs.c128", dtype="<c16").reshape(4, -1)
    raw[3] *= 0.5
    raw.tofile(tmp_path / "b" / "coeffs.c128")
    with pytest.raises(BundleError, match="orbital 3 norm 0.5"):
        load_wavefunction_bundle(tmp_path / "b")


def test_count_mismatch(tmp_path):
    cell = cubic()
    write_bundle(tmp_path / "b", cell, g0_orbital(cell))
    manifest = json.loads((tmp_path / "b" / "manifest.json").read_text())
    manifest["n_orbitals"] = 2
    (tmp_path / "b" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(BundleError, match="count mismatch"):
        load_wavefunction_bundle(tmp_path / "b")


def test_malformed_manifest(tmp_path):
    (tmp_path / "b").mkdir()
    (tmp_path / "b" / "manifest.json").write_text("{not json")
    with pytest.raises(BundleError, match="malformed manifest"):
        load_wavefunction_bundle(tmp_path / "b")


def test_cutoff_violation():
    cell = cubic(2 * np.pi)
    miller = np.array([[0, 0, 0], [2, 0, 0]])
    c = np.array([[1.0], [0.0]], dtype=complex)
    with pytest.raises(BundleError, match="cutoff violation"):
        PlaneWaveOrbitalSet(cell, 0.5, miller, c, [0.0], 2)


def test_gamma_half_sphere_of_gaussian_expands_conjugate_symmetric(tmp_path):
    # forward FFT of an off-centre real Gaussian gives genuinely complex coefficients
    length = 8.0
    cell = cubic(length)
    e_cut = 3.0
    miller = generate_g_sphere(ReciprocalBasis.from_cell(cell, e_cut))
    g = ReciprocalBasis.from_cell(cell, e_cut).cartesian(miller)
    centre = np.array([1.1, 2.3, 3.7])
    c = np.exp(-np.sum(g * g, axis=1) / 4.0) * np.exp(-1j * g @ centre)
    c /= np.linalg.norm(c)
    orb = PlaneWaveOrbitalSet(cell, e_cut, miller, c[:, None], [0.0], 2, gamma_only=True)
    write_bundle(tmp_path / "g", cell, orb)
    stored = np.fromfile(tmp_path / "g" / "gvecs.i32", dtype="<i4").reshape(-1, 3)
    assert stored.shape[0] == (miller.shape[0] + 1) // 2
    _, loaded = load_wavefunction_bundle(tmp_path / "g")
    index = {tuple(m): k for k, m in enumerate(loaded.miller.tolist())}
    coeff = loaded.coefficients[:, 0]
    for m, k in index.items():
        assert coeff[index[tuple(-x for x in m)]] == np.conj(coeff[k])
    psi = orbital_to_real_space(loaded, 0, (24, 24, 24)).values
    assert np.linalg.norm(psi.imag) < 1e-10 * np.linalg.norm(psi.real)


def test_gamma_bundle_with_both_g_and_minus_g_rejected(tmp_path):
    cell = cubic()
    write_bundle(tmp_path / "b", cell, g0_orbital(cell))
    manifest = json.loads((tmp_path / "b" / "manifest.json").read_text())
    manifest["n_gvecs"] = 3
    (tmp_path / "b" / "manifest.json").write_text(json.dumps(manifest))
    np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0]], dtype="<i4").tofile(tmp_path / "b" / "gvecs.i32")
    np.array([1.0, 0, 0], dtype="<c16").tofile(tmp_path / "b" / "coeffs.c128")
    with pytest.raises(BundleError, match="both G and -G"):
        load_wavefunction_bundle(tmp_path / "b")


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), real=st.booleans())
def test_write_load_write_is_bit_identical(tmp_path_factory, seed, real):
    rng = np.random.default_rng(seed)
    cell = two_atom_cell(7.0)
    orb = random_orbitals(cell, 1.5, 3, rng, real=real)
    # shuffle the G order: the written form must be canonical regardless
    perm = rng.permutation(orb.n_gvecs)
    orb = PlaneWaveOrbitalSet(cell, orb.e_cut, orb.miller[perm], orb.coefficients[perm], [0.1, 0.2, 0.3], 2, real)
    base = tmp_path_factory.mktemp("rt")
    write_bundle(base / "a", cell, orb)
    cell2, orb2 = load_wavefunction_bundle(base / "a")
    write_bundle(base / "b", cell2, orb2)
    for name in ("manifest.json", "gvecs.i32", "coeffs.c128"):
        assert (base / "a" / name).read_bytes() == (base / "b" / name).read_bytes()


# ---------------------------------------------------------------------------
# pseudopotentials


def test_upf_without_projectors(tmp_path):
    write_upf(tmp_path / "H.upf", "H", 1.0, R_MESH, RAB, erf_local(1.0, 0.5))
    pp = load_pseudopotential(tmp_path / "H.upf")
    assert pp.projectors == ()
    assert pp.z_valence == 1.0
    assert pp.r_grid.size == pp.v_local.size == pp.r_weights.size


def test_upf_units_converted_to_hartree(tmp_path):
    path = write_species_upf(tmp_path, "deep")
    pp = load_pseudopotential(path)
    np.testing.assert_allclose(pp.v_local, erf_local(1.0, 0.6), rtol=1e-14, atol=1e-14)
    assert pp.d_matrix[0, 0] == pytest.approx(-0.8, abs=1e-14)
    # the file stores r*beta, so beta(0) is not recoverable
    np.testing.assert_allclose(pp.projectors[0].beta[1:], gaussian_projector(0.7)[1:], rtol=1e-13)


@pytest.mark.parametrize("ptype,message", [("US", "ultrasoft unsupported"), ("PAW", "PAW unsupported")])
def test_upf_rejects_non_norm_conserving(tmp_path, ptype, message):
    write_upf(tmp_path / "x.upf", "X", 1.0, R_MESH, RAB, erf_local(1.0, 0.5), pseudo_type=ptype)
    with pytest.raises(PseudopotentialError, match=message):
        load_pseudopotential(tmp_path / "x.upf")


def test_upf_missing_tag(tmp_path):
    write_upf(tmp_path / "x.upf", "X", 1.0, R_MESH, RAB, erf_local(1.0, 0.5))
    text = (tmp_path / "x.upf").read_text()
    start, end = text.index("<PP_LOCAL"), text.index("</PP_LOCAL>") + len("</PP_LOCAL>")
    (tmp_path / "x.upf").write_text(text[:start] + text[end:])
    with pytest.raises(PseudopotentialError, match="missing mandatory tag PP_LOCAL"):
        load_pseudopotential(tmp_path / "x.upf")


def test_four_projectors_split_into_l_blocks(tmp_path):
    projectors = [(0, gaussian_projector(0.6)), (0, gaussian_projector(0.9)),
                  (1, gaussian_projector(0.6, 1)), (1, gaussian_projector(0.9, 1))]
    d = np.array([[1.0, 0.2, 0, 0], [0.2, -0.5, 0, 0], [0, 0, 0.7, 0.1], [0, 0, 0.1, 0.3]])
    write_upf(tmp_path / "Mg.upf", "Mg", 10.0, R_MESH, RAB, erf_local(10.0, 0.7), projectors, d)
    pp = load_pseudopotential(tmp_path / "Mg.upf")
    blocks = pp.d_blocks()
    assert sorted(blocks) == [0, 1]
    np.testing.assert_allclose(blocks[0], d[:2, :2], atol=1e-14)
    np.testing.assert_allclose(blocks[1], d[2:, 2:], atol=1e-14)
    assert pp.z_valence == 10.0


def test_asymmetric_d_rejected(tmp_path):
    projectors = [(0, gaussian_projector(0.6)), (0, gaussian_projector(0.9))]
    write_upf(tmp_path / "x.upf", "X", 1.0, R_MESH, RAB, erf_local(1.0, 0.5), projectors, [[1.0, 0.2], [0.3, 1.0]])
    with pytest.raises(PseudopotentialError, match="symmetric"):
        load_pseudopotential(tmp_path / "x.upf")


def test_missing_coulomb_tail_rejected(tmp_path):
    v = erf_local(1.0, 0.5) * np.exp(-R_MESH)
    write_upf(tmp_path / "x.upf", "X", 1.0, R_MESH, RAB, v)
    with pytest.raises(PseudopotentialError, match="Coulomb tail"):
        load_pseudopotential(tmp_path / "x.upf")
