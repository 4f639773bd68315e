import numpy as np
import pytest

from dbar_eit.forward import (ForwardModelError, add_noise, adjacent_patterns, dn_from_nd,
                              fit_reference_scale, homogeneous_dn, load_voltage_frame,
                              make_pattern_basis, nd_from_data, orthonormalize_patterns,
                              save_voltage_frame, simulate_dataset, simulate_voltages)
from dbar_eit.geometry import DomainDisc
from dbar_eit.mesh import FEMProblem, MeshConfig, disc_mesh, fem_solve_cem


class TestAdjacentPatterns:
    def test_paper_count(self):
        assert adjacent_patterns(32).shape == (32, 31)

    def test_three_electrodes(self):
        raw = adjacent_patterns(3)
        assert raw.shape == (3, 2)
        np.testing.assert_allclose(raw[:, 0] / np.abs(raw[:, 0]).max(), [1, -1, 0])
        np.testing.assert_allclose(raw[:, 1] / np.abs(raw[:, 1]).max(), [0, 1, -1])

    def test_columns_sum_to_zero(self):
        for L in (3, 8, 32):
            np.testing.assert_allclose(adjacent_patterns(L).sum(axis=0), 0.0)

    def test_too_few_electrodes(self):
        with pytest.raises(ForwardModelError):
            adjacent_patterns(2)


class TestOrthonormalize:
    def test_orthonormality_32(self):
        J = orthonormalize_patterns(adjacent_patterns(32))
        assert np.abs(J.T @ J - np.eye(31)).max() < 1e-12

    def test_identity_on_orthonormal_input(self):
        J = orthonormalize_patterns(adjacent_patterns(8))
        J2 = orthonormalize_patterns(J)
        np.testing.assert_allclose(J2, J, atol=1e-13)

    def test_zero_sum_preserved(self):
        J = orthonormalize_patterns(adjacent_patterns(16))
        np.testing.assert_allclose(J.sum(axis=0), 0.0, atol=1e-12)

    def test_rank_deficiency(self):
        raw = adjacent_patterns(8)
        raw[:, 3] = raw[:, 2]
        with pytest.raises(ForwardModelError):
            orthonormalize_patterns(raw)


class TestFemSolve:
    def test_opposite_electrode_antisymmetry(self, domain16):
        mesh = disc_mesh(domain16, MeshConfig(5))
        prob = FEMProblem(domain=domain16, mesh=mesh, sigma=np.ones(len(mesh.triangles)))
        pattern = np.zeros(16)
        pattern[0], pattern[8] = 1.0, -1.0
        _, U = fem_solve_cem(prob, pattern)
        # rotation by pi maps electrode l to l+8 and flips the drive sign
        np.testing.assert_allclose(U, -np.roll(U, 8), atol=1e-12 * np.abs(U).max())

    def test_mesh_refinement_convergence(self, domain16, basis16):
        # voltage peaks at the driven electrodes converge first order (edge
        # singularities), so the 0.5% bracket needs the finer pair
        frames = []
        for npe in (18, 26):
            mesh = disc_mesh(domain16, MeshConfig(npe))
            prob = FEMProblem(domain=domain16, mesh=mesh, sigma=np.ones(len(mesh.triangles)))
            frames.append(simulate_voltages(prob, basis16).V)
        diff = np.abs(frames[1] - frames[0]).max() / np.abs(frames[1]).max()
        assert diff < 0.005

    def test_analytic_disc_solution(self):
        # gap-model limit: dense gapless electrodes with weak coupling
        # (moderate contact impedance suppresses shunting); the current
        # density cos(n theta) gives u = r^n cos(n theta) / n
        n = 2
        domain = DomainDisc(radius=1.0, electrode_count=64, coverage=1.0)
        mesh = disc_mesh(domain, MeshConfig(6))
        prob = FEMProblem(domain=domain, mesh=mesh, sigma=np.ones(len(mesh.triangles)),
                          contact_impedance=0.5)
        ang = domain.electrode_angles
        w = domain.electrode_area
        # exact electrode integrals of the density
        currents = (2.0 / n) * np.sin(n * w / 2) * np.cos(n * ang)
        currents -= currents.mean()
        u, _ = fem_solve_cem(prob, currents)
        pts = mesh.nodes[:, 0] + 1j * mesh.nodes[:, 1]
        interior = np.abs(pts) < 0.8
        exact = (np.abs(pts) ** n) * np.cos(n * np.angle(pts)) / n
        u_i = u[interior] - u[interior].mean() + exact[interior].mean()
        err = np.abs(u_i - exact[interior]).max() / np.abs(exact[interior]).max()
        assert err < 0.02

    def test_input_validation(self, domain16):
        mesh = disc_mesh(domain16, MeshConfig(4))
        prob = FEMProblem(domain=domain16, mesh=mesh, sigma=np.ones(len(mesh.triangles)))
        with pytest.raises(ForwardModelError):
            fem_solve_cem(prob, np.zeros(16))
        with pytest.raises(ForwardModelError):
            fem_solve_cem(prob, np.ones(16))  # does not sum to zero
        with pytest.raises(ForwardModelError):
            FEMProblem(domain=domain16, mesh=mesh, sigma=-np.ones(len(mesh.triangles)))


class TestSimulateVoltages:
    def test_scaling_linearity(self, domain16, basis16):
        # the exact scaling symmetry of the electrode model is
        # (sigma, z) -> (2 sigma, z/2): voltages halve to solver precision
        mesh = disc_mesh(domain16, MeshConfig(5))
        p1 = FEMProblem(domain=domain16, mesh=mesh, sigma=np.ones(len(mesh.triangles)),
                        contact_impedance=1e-3)
        p2 = FEMProblem(domain=domain16, mesh=mesh, sigma=2 * np.ones(len(mesh.triangles)),
                        contact_impedance=0.5e-3)
        V1 = simulate_voltages(p1, basis16).V
        V2 = simulate_voltages(p2, basis16).V
        np.testing.assert_allclose(V2, V1 / 2, rtol=1e-10)
        # with the contact impedance held fixed the halving is approximate
        p3 = FEMProblem(domain=domain16, mesh=mesh, sigma=2 * np.ones(len(mesh.triangles)),
                        contact_impedance=1e-3)
        V3 = simulate_voltages(p3, basis16).V
        assert np.abs(V3 - V1 / 2).max() / np.abs(V1 / 2).max() < 0.02

    def test_columns_mean_free(self, thorax_dataset):
        V = thorax_dataset["frame"].V
        np.testing.assert_allclose(V.mean(axis=0), 0.0, atol=1e-12 * np.abs(V).max())

    def test_phantom_frame_nontrivial(self, thorax_dataset, homogeneous_dataset):
        assert np.abs(thorax_dataset["frame"].V - homogeneous_dataset["frame"].V).max() > 1e-4


class TestAddNoise:
    def test_zero_level_identity(self, homogeneous_dataset):
        frame = homogeneous_dataset["frame"]
        assert add_noise(frame, 0.0, 1) is frame

    def test_std_matches_level(self, thorax_dataset):
        frame = thorax_dataset["frame"]
        noisy = add_noise(frame, 0.001, seed=3)
        delta = noisy.V - frame.V
        target = 0.001 * np.abs(frame.V).max()
        assert abs(delta.std() / target - 1) < 0.05

    def test_deterministic(self, thorax_dataset):
        frame = thorax_dataset["frame"]
        a = add_noise(frame, 0.002, seed=11).V
        b = add_noise(frame, 0.002, seed=11).V
        np.testing.assert_array_equal(a, b)
        c = add_noise(frame, 0.002, seed=12).V
        assert np.abs(a - c).max() > 0

    def test_paper_levels_run(self, thorax_dataset):
        for level in (0.0, 0.001, 0.002):
            noisy = add_noise(thorax_dataset["frame"], level, seed=1)
            assert np.isfinite(noisy.V).all()

    def test_negative_level(self, thorax_dataset):
        with pytest.raises(ForwardModelError):
            add_noise(thorax_dataset["frame"], -0.1, seed=0)


class TestNDMatrix:
    def test_identity_data(self, domain32, basis32):
        A = domain32.electrode_area / domain32.radius
        R = nd_from_data(basis32.J, basis32.J, A, domain32.angular_spacing)
        np.testing.assert_allclose(R, (domain32.angular_spacing / A) * np.eye(31), atol=1e-12)

    def test_shape_mismatch(self, basis32):
        with pytest.raises(ForwardModelError):
            nd_from_data(basis32.J, basis32.J[:, :5], 0.1, 0.2)

    def test_symmetry(self, thorax_dataset):
        R = thorax_dataset["R_sigma"]
        assert np.abs(R - R.T).max() / np.abs(R).max() < 1e-8

    def test_eigenvalue_oracle(self, homogeneous_dataset):
        """R_1 approximates the unit-disc ND spectrum 1/|n|.

        The low harmonics pin the scaling convention tightly; toward n = 8
        the finite-electrode model deviates by design (converged in mesh),
        so the tolerance is opened up there.
        """
        ev = np.sort(np.linalg.eigvalsh(homogeneous_dataset["R_sigma"]))[::-1]
        for n in range(1, 9):
            pair = ev[2 * (n - 1) : 2 * n] * n
            tol = 0.05 if n <= 6 else 0.13
            assert np.abs(pair - 1).max() < tol, f"harmonic {n}: {pair}"

    def test_monotone_in_sigma(self, domain16, basis16):
        mesh = disc_mesh(domain16, MeshConfig(5))
        A = domain16.electrode_area / domain16.radius
        diags = []
        for s in (1.0, 1.5):
            prob = FEMProblem(domain=domain16, mesh=mesh, sigma=s * np.ones(len(mesh.triangles)))
            V = simulate_voltages(prob, basis16).V
            diags.append(np.diag(nd_from_data(basis16.J, V, A, domain16.angular_spacing)))
        assert np.all(diags[1] < diags[0])


class TestDNMatrix:
    def test_scalar_inverse(self):
        R = 3.0 * np.eye(7)
        np.testing.assert_allclose(dn_from_nd(R), np.eye(7) / 3.0)

    def test_inverse_residual(self, homogeneous_dataset):
        R, L = homogeneous_dataset["R_sigma"], homogeneous_dataset["L_one"]
        # L_one comes from the reference mesh; invert the data-side R directly
        L_data = dn_from_nd(R)
        assert np.abs(L_data @ R - np.eye(31)).max() < 1e-8
        assert L.shape == (31, 31)

    def test_ill_conditioned(self):
        R = np.eye(5)
        R[4, 4] = 1e-15
        with pytest.raises(ForwardModelError):
            dn_from_nd(R)

    def test_difference_concentrates_low_frequency(self, domain32, basis32):
        """(L_sigma - L_one) energy lives on low-frequency patterns.

        Holds for conductivities equal to the reference constant near the
        boundary (high-frequency boundary patterns do not reach an interior
        perturbation).  Matched meshes cancel discretization error; with the
        production anti-crime meshes, or when the fitted constant differs
        from the boundary value, high-frequency components grow instead,
        which is exactly why the scattering data must be truncated at R1.
        """
        r = domain32.radius
        sigma_fn = lambda z: 1.0 + 1.0 * np.exp(-(np.abs(z / r) / 0.35) ** 2)  # noqa: E731
        data = simulate_dataset(domain32, sigma_fn, basis=basis32,
                                data_mesh=MeshConfig(6), reference_mesh=MeshConfig(6))
        D = data["L_sigma"] - data["L_one"]  # sigma is 1 at the boundary: no rescale
        ang = domain32.electrode_angles

        def trig(n, kind):
            v = np.cos(n * ang) if kind == "c" else np.sin(n * ang)
            v = v - v.mean()
            return v / np.linalg.norm(v)

        low = [basis32.J.T @ trig(n, k) for n in (1, 2, 3) for k in "cs"]
        high = [basis32.J.T @ trig(n, k) for n in (12, 13, 14) for k in "cs"]
        e_low = sum(np.linalg.norm(D @ v) for v in low)
        e_high = sum(np.linalg.norm(D @ v) for v in high)
        assert e_low > 3 * e_high


class TestHomogeneousDN:
    def test_cache_bitwise(self, domain32, basis32):
        a = homogeneous_dn(domain32, basis32, MeshConfig(5))
        b = homogeneous_dn(domain32, basis32, MeshConfig(5))
        assert a is b or np.array_equal(a, b)

    def test_dn_eigenvalues(self, homogeneous_dataset):
        ev = np.sort(np.linalg.eigvalsh(homogeneous_dataset["L_one"]))
        # DN spectrum grows like |n|; first pair near 1, next near 2
        assert abs(ev[0] - 1) < 0.05 and abs(ev[1] - 1) < 0.05
        assert abs(ev[2] - 2) < 0.12 and abs(ev[3] - 2) < 0.12


class TestReferenceScale:
    def test_constant_sigma(self, domain16, basis16):
        c_true = 0.424
        mesh = disc_mesh(domain16, MeshConfig(5))
        A = domain16.electrode_area / domain16.radius
        L1 = homogeneous_dn(domain16, basis16, MeshConfig(5))
        # exact when the contact impedance scales with 1/sigma
        prob = FEMProblem(domain=domain16, mesh=mesh,
                          sigma=c_true * np.ones(len(mesh.triangles)),
                          contact_impedance=1e-3 / c_true)
        V = simulate_voltages(prob, basis16).V
        R = nd_from_data(basis16.J, V, A, domain16.angular_spacing)
        assert fit_reference_scale(R, L1) == pytest.approx(c_true, rel=1e-9)
        # with the physical (fixed) contact impedance the fit is approximate
        prob2 = FEMProblem(domain=domain16, mesh=mesh,
                           sigma=c_true * np.ones(len(mesh.triangles)),
                           contact_impedance=1e-3)
        V2 = simulate_voltages(prob2, basis16).V
        R2 = nd_from_data(basis16.J, V2, A, domain16.angular_spacing)
        assert fit_reference_scale(R2, L1) == pytest.approx(c_true, rel=2e-2)


class TestSerialization:
    def test_csv_roundtrip(self, thorax_dataset, domain32, tmp_path):
        frame = thorax_dataset["frame"]
        csv = tmp_path / "v.csv"
        sidecar = tmp_path / "v.json"
        save_voltage_frame(frame, domain32, csv, sidecar)
        back = load_voltage_frame(csv)
        np.testing.assert_allclose(back.V, frame.V, rtol=0, atol=1e-16)
        import json

        meta = json.loads(sidecar.read_text())
        assert meta["electrode_count"] == 32
        assert meta["radius_mm"] == 143.2


class TestDeterminism:
    def test_dataset_bitwise(self, domain16):
        sigma_fn = lambda z: np.ones(np.shape(z))  # noqa: E731
        a = simulate_dataset(domain16, sigma_fn, noise_level=0.001, seed=5,
                             data_mesh=MeshConfig(4), reference_mesh=MeshConfig(4))
        b = simulate_dataset(domain16, sigma_fn, noise_level=0.001, seed=5,
                             data_mesh=MeshConfig(4), reference_mesh=MeshConfig(4))
        np.testing.assert_array_equal(a["frame"].V, b["frame"].V)
        np.testing.assert_array_equal(a["L_sigma"], b["L_sigma"])
