import numpy as np
import pytest

from sparsegain import admm, bench, linalg
from sparsegain.bench import (
    SweepRow,
    StepTooLarge,
    gen_lattice,
    gen_spatial_decay,
    input_norm_certificate,
    simulate_closed_loop,
    sweep,
    sweep_csv,
    quadrature_reference,
)
from sparsegain.model import AdmmOptions, LtiSystem, SynthesisProblem


class TestGenerators:
    def test_lattice_size(self):
        system = gen_lattice(5, 0)
        assert system.n == 25
        assert np.array_equal(system.b_matrix, np.eye(25))
        assert np.array_equal(system.c_matrix, np.eye(25))

    def test_lattice_deterministic(self):
        a1 = gen_lattice(4, 7).a_matrix
        a2 = gen_lattice(4, 7).a_matrix
        assert np.array_equal(a1, a2)
        assert not np.array_equal(a1, gen_lattice(4, 8).a_matrix)

    def test_lattice_support_is_grid_adjacency(self):
        side = 4
        system = gen_lattice(side, 3)
        a = system.a_matrix
        for i in range(side * side):
            ri, ci = divmod(i, side)
            for j in range(side * side):
                rj, cj = divmod(j, side)
                adjacent = abs(ri - rj) + abs(ci - cj) <= 1
                if not adjacent:
                    assert a[i, j] == 0.0

    def test_lattice_entries_in_open_interval(self):
        a = gen_lattice(5, 11).a_matrix
        nz = a[a != 0.0]
        assert np.all(np.abs(nz) < 1.0)

    def test_spatial_decay_envelope(self):
        system = gen_spatial_decay(12, seed=5)
        idx = np.arange(12)
        dist = np.abs(idx[:, None] - idx[None, :]).astype(float)
        assert np.all(np.abs(system.a_matrix) <= 10.0 * np.exp(-dist ** 3) + 1e-12)
        assert np.all(np.abs(system.b_matrix) <= 2.0 * np.exp(-0.4 * dist ** 0.9) + 1e-12)
        assert np.max(np.abs(np.diag(system.a_matrix))) <= 10.0

    def test_spatial_decay_deterministic_and_sized(self):
        s1 = gen_spatial_decay(16, seed=2)
        s2 = gen_spatial_decay(16, seed=2)
        assert s1.n == 16
        assert np.array_equal(s1.a_matrix, s2.a_matrix)
        assert np.array_equal(s1.b_matrix, s2.b_matrix)

    def test_spatial_decay_rejects_bad_params(self):
        with pytest.raises(ValueError):
            gen_spatial_decay(8, alpha_a=-1.0)


class TestSimulate:
    def test_scalar_energy(self):
        system = LtiSystem([[-1.0]], [[0.0]], [[1.0]])
        j, _, _ = simulate_closed_loop(system, np.zeros((1, 1)), [1.0],
                                       q_weight=np.eye(1), r_weight=np.zeros((1, 1)))
        assert j == pytest.approx(0.5, rel=5e-3)

    def test_sup_attained_at_start_for_monotone_decay(self):
        system = LtiSystem([[-1.0]], [[1.0]], [[1.0]])
        k = np.array([[-0.5]])
        _, sup2, supinf = simulate_closed_loop(system, k, [2.0])
        assert sup2 == pytest.approx(1.0, rel=1e-9)
        assert supinf == pytest.approx(1.0, rel=1e-9)

    def test_quadrature_matches_trace_formula(self):
        rng = np.random.default_rng(31)
        for _ in range(5):
            n, m = 4, 2
            a = rng.normal(size=(n, n))
            b = rng.normal(size=(n, m))
            system = LtiSystem(a, b, np.eye(n))
            _, k = linalg.solve_care(a, b, np.eye(n), np.eye(m))
            x0 = rng.normal(size=n)
            j, _, _ = simulate_closed_loop(system, k, x0,
                                           q_weight=np.eye(n), r_weight=np.eye(m))
            ref = quadrature_reference(system, k, x0, np.eye(n), np.eye(m))
            assert j == pytest.approx(ref, rel=5e-3)

    def test_not_hurwitz_rejected(self):
        system = LtiSystem([[1.0]], [[0.0]], [[1.0]])
        with pytest.raises(linalg.NotHurwitz):
            simulate_closed_loop(system, np.zeros((1, 1)), [1.0])

    def test_step_too_large_rejected(self):
        system = LtiSystem([[-1.0]], [[0.0]], [[1.0]])
        with pytest.raises(StepTooLarge):
            simulate_closed_loop(system, np.zeros((1, 1)), [1.0], dt=1.0)


class TestSweep:
    def test_row_count_and_flags(self):
        system = LtiSystem([[0.5]], [[1.0]], [[1.0]])
        problem = SynthesisProblem(system=system, q_weight=[[1.0]],
                                   r_weight=[[1.0]], lam=0.0, noise_cov=[[1.0]])
        rows = sweep(problem, [1e-3, 10.0], [100.0], AdmmOptions(max_outer=300))
        assert len(rows) == 2
        assert all(isinstance(r, SweepRow) for r in rows)
        assert all(r.j_baseline == rows[0].j_baseline for r in rows)

    def test_lambda_zero_row_recovers_baseline(self):
        system = LtiSystem([[0.3]], [[1.0]], [[1.0]])
        problem = SynthesisProblem(system=system, q_weight=[[1.0]],
                                   r_weight=[[1.0]], lam=0.0, noise_cov=[[1.0]])
        rows = sweep(problem, [0.0], [100.0], AdmmOptions())
        assert rows[0].performance_loss <= 1e-3

    def test_density_monotone_in_lambda_scalar(self):
        system = LtiSystem([[0.5]], [[1.0]], [[1.0]])
        problem = SynthesisProblem(system=system, q_weight=[[1.0]],
                                   r_weight=[[1.0]], lam=0.0, noise_cov=[[1.0]])
        rows = sweep(problem, [1e-3, 10.0], [100.0], AdmmOptions(max_outer=400))
        assert rows[1].density <= rows[0].density

    def test_csv_format(self):
        row = SweepRow(lam=1.0, penalty_rho=2.0, j_achieved=3.0, j_baseline=2.5,
                       performance_loss=0.2, density=0.5, converged=True,
                       wall_time=0.125)
        text = sweep_csv([row])
        lines = text.strip().splitlines()
        assert lines[0] == "lambda,rho,J,J_base,loss,density,converged,seconds"
        fields = lines[1].split(",")
        assert fields[0] == "1.0" and fields[6] == "1"

    def test_empty_grid_rejected(self):
        system = LtiSystem([[0.5]], [[1.0]], [[1.0]])
        problem = SynthesisProblem(system=system, q_weight=[[1.0]],
                                   r_weight=[[1.0]], lam=0.0, noise_cov=[[1.0]])
        with pytest.raises(ValueError):
            sweep(problem, [], [100.0])


class TestInputNormCertificate:
    def test_certificate_holds_for_small_gain(self):
        rng = np.random.default_rng(41)
        n = 3
        a = rng.normal(size=(n, n)) - 2.0 * np.eye(n)
        system = LtiSystem(a, np.eye(n), np.eye(n))
        k = -0.1 * np.eye(n)
        x0 = bench.default_x0(n, 1)
        residual, certified = input_norm_certificate(system, k, np.eye(n), x0, u_max=10.0)
        assert residual == 0.0
        _, sup2, _ = simulate_closed_loop(system, k, x0)
        assert sup2 <= certified * (1 + 1e-6)
        assert certified <= 10.0

    def test_certificate_violated_for_tight_bound(self):
        system = LtiSystem([[-1.0]], [[1.0]], [[1.0]])
        k = np.array([[-5.0]])
        x0 = np.array([1.0])
        residual, certified = input_norm_certificate(system, k, np.eye(1), x0, u_max=0.1)
        assert residual > 0.0
        assert certified > 0.1
