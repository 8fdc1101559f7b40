import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsegain import lifting, linalg
from sparsegain.lifting import AugmentedLifted, LiftedVariable
from sparsegain.model import LtiSystem, StructurePattern


def random_consistent(rng, n, m, p, c=None):
    c = rng.normal(size=(p, n)) if c is None else c
    x11 = rng.normal(size=(n, n))
    x11 = x11 @ x11.T + 0.5 * np.eye(n)
    k = rng.normal(size=(m, p))
    kc = k @ c
    return c, LiftedVariable(
        x11=x11, x12=x11 @ kc.T, x22=kc @ x11 @ kc.T, k_gain=k,
        z_block=np.linalg.inv(x11),
    )


class TestAssemble:
    def test_all_ones_scalar(self):
        v = LiftedVariable(*(np.ones((1, 1)) for _ in range(5)))
        out = lifting.assemble(v, np.ones((1, 1)))
        assert np.allclose(out, np.ones((3, 3)))

    def test_zero_blocks_leave_identity_pins(self):
        v = LiftedVariable(*(np.zeros((1, 1)) for _ in range(5)))
        out = lifting.assemble(v, np.ones((1, 1)))
        expected = np.zeros((3, 3))
        expected[0, 2] = expected[2, 0] = 1.0
        assert np.allclose(out, expected)

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        c, v = random_consistent(rng, 3, 2, 2)
        pattern = StructurePattern.full(2, 2)
        out = lifting.decompose(lifting.assemble(v, c), c, pattern)
        assert np.allclose(out.x11, v.x11)
        assert np.allclose(out.k_gain, v.k_gain, atol=1e-10)
        assert np.allclose(out.z_block, v.z_block)


class TestDecompose:
    def test_pins_identity_block(self):
        rng = np.random.default_rng(1)
        c, v = random_consistent(rng, 2, 1, 1)
        m = lifting.assemble(v, c)
        m[:2, 3:] = 0.9 * np.eye(2)
        out = lifting.assemble(lifting.decompose(m, c, StructurePattern.full(1, 1)), c)
        assert np.allclose(out[:2, 3:], np.eye(2))

    def test_identity_c_masked_symmetrized_block(self):
        rng = np.random.default_rng(2)
        n = m = p = 3
        c = np.eye(3)
        mat = rng.normal(size=(2 * n + m, 2 * n + m))
        mask = rng.random((m, p)) > 0.5
        pattern = StructurePattern(mask)
        out = lifting.decompose(mat, c, pattern)
        block = 0.5 * (mat[n:n + m, n + m:] + mat[n + m:, n:n + m].T)
        assert np.allclose(out.k_gain, np.where(mask, block, 0.0))

    def test_rank_deficient_c_minimum_norm(self):
        rng = np.random.default_rng(3)
        c = np.array([[1.0, 0.0], [1.0, 0.0]])  # rank 1
        n, m, p = 2, 1, 2
        mat = rng.normal(size=(2 * n + m, 2 * n + m))
        out = lifting.decompose(mat, c, StructurePattern.full(m, p))
        assert np.all(np.isfinite(out.k_gain))
        block = 0.5 * (mat[n:n + m, n + m:] + mat[n + m:, n:n + m].T)
        direct, *_ = np.linalg.lstsq(c.T, block[0], rcond=None)
        assert np.allclose(out.k_gain[0], direct)


class TestConsistencyProject:
    def test_consistent_input_unchanged(self):
        rng = np.random.default_rng(4)
        c, v = random_consistent(rng, 3, 2, 2)
        m = lifting.assemble(v, c)
        out = lifting.consistency_project(m, c, StructurePattern.full(2, 2))
        assert np.linalg.norm(out - m) <= 1e-10 * (1 + np.linalg.norm(m))

    def test_output_symmetric(self):
        rng = np.random.default_rng(5)
        m = rng.normal(size=(7, 7))
        out = lifting.consistency_project(m, rng.normal(size=(2, 3)),
                                          StructurePattern.full(1, 2))
        assert np.allclose(out, out.T)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_idempotent(self, seed):
        rng = np.random.default_rng(seed)
        n, m, p = 2, 2, 1
        c = rng.normal(size=(p, n))
        pattern = StructurePattern(rng.random((m, p)) > 0.3)
        mat = rng.normal(size=(2 * n + m, 2 * n + m))
        once = lifting.consistency_project(mat, c, pattern)
        twice = lifting.consistency_project(once, c, pattern)
        assert np.linalg.norm(once - twice) <= 1e-9 * (1 + np.linalg.norm(once))

    def test_distance_minimizing_vs_vectorized_oracle(self):
        # brute-force least squares over the structure subspace basis
        rng = np.random.default_rng(6)
        n, m, p = 2, 2, 2
        c = rng.normal(size=(p, n))
        pattern = StructurePattern(np.array([[True, False], [True, True]]))
        mat = rng.normal(size=(2 * n + m, 2 * n + m))
        proj = lifting.consistency_project(mat, c, pattern)

        basis = []
        d = 2 * n + m

        def sym_basis(d_sub, r0, c0):
            out = []
            for i in range(d_sub):
                for j in range(i, d_sub):
                    e = np.zeros((d, d))
                    e[r0 + i, c0 + j] = e[r0 + j, c0 + i] = 1.0
                    out.append(e)
            return out

        basis += sym_basis(n, 0, 0)                      # x11
        for i in range(n):                               # x12 and mirror
            for j in range(m):
                e = np.zeros((d, d))
                e[i, n + j] = e[n + j, i] = 1.0
                basis.append(e)
        basis += sym_basis(m, n, n)                      # x22
        for i, j in zip(*np.nonzero(pattern.mask)):      # K entries via KC
            e = np.zeros((d, d))
            e[n + i, n + m:] = c[j]
            e[n + m:, n + i] = c[j]
            basis.append(e)
        basis += sym_basis(n, n + m, n + m)              # z

        pin = np.zeros((d, d))
        pin[:n, n + m:] = np.eye(n)
        pin[n + m:, :n] = np.eye(n)
        a_mat = np.stack([b.ravel() for b in basis], axis=1)
        coeff, *_ = np.linalg.lstsq(a_mat, (mat - pin).ravel(), rcond=None)
        oracle = (a_mat @ coeff).reshape(d, d) + pin
        assert np.linalg.norm(proj - oracle) <= 1e-8 * (1 + np.linalg.norm(oracle))


class TestRankIdentities:
    def test_inverse_block_at_fixed_rank(self):
        rng = np.random.default_rng(7)
        c, v = random_consistent(rng, 3, 2, 2)
        m = lifting.assemble(v, c)
        assert linalg.numerical_rank(m) == 3
        z_inv = np.linalg.inv(v.x11)
        assert np.linalg.norm(v.z_block - z_inv) <= 1e-6 * np.linalg.norm(z_inv)

    def test_two_block_column_rank_equivalence(self):
        rng = np.random.default_rng(8)
        c, v = random_consistent(rng, 3, 2, 2)
        kc = v.k_gain @ c
        tall = np.vstack([
            np.hstack([v.x11, v.x12]),
            np.hstack([v.x12.T, v.x22]),
            np.hstack([np.eye(3), kc.T]),
        ])
        assert linalg.numerical_rank(tall) == 3
        assert linalg.numerical_rank(lifting.assemble(v, c)) == 3

    def test_rank_rises_when_z_not_inverse(self):
        rng = np.random.default_rng(9)
        c, v = random_consistent(rng, 3, 2, 2)
        from dataclasses import replace

        bad = replace(v, z_block=v.z_block + 0.5 * np.eye(3))
        assert linalg.numerical_rank(lifting.assemble(bad, c)) > 3


class TestAugmented:
    def test_scalar_all_ones(self):
        base = LiftedVariable(*(np.ones((1, 1)) for _ in range(5)))
        aug = AugmentedLifted(base=base, gamma=1.0, w_inv=np.ones((1, 1)),
                              y_aux=np.ones((1, 1)))
        out = lifting.assemble_augmented(aug, np.ones((1, 1)))
        assert out.shape == (4, 3)
        assert np.allclose(out, np.ones((4, 3)))

    def test_round_trip(self):
        rng = np.random.default_rng(10)
        c, base = random_consistent(rng, 2, 1, 1)
        aug = AugmentedLifted(base=base, gamma=0.7,
                              w_inv=0.7 * np.linalg.inv(base.x11),
                              y_aux=rng.normal(size=(2, 1)))
        m = lifting.assemble_augmented(aug, c)
        back = lifting.decompose_augmented(m, c, StructurePattern.full(1, 1))
        assert back.gamma == pytest.approx(0.7)
        assert np.allclose(back.w_inv, aug.w_inv)
        assert np.allclose(back.y_aux, aug.y_aux)

    def test_rank_condition_pins_w_inverse(self):
        # with X11 = 2 and gamma = 1 the fixed-rank augmented matrix forces W = 0.5
        system = LtiSystem([[-1.0]], [[1.0]], [[1.0]])
        x11 = np.array([[2.0]])
        aug = lifting.consistent_from_gain(system, np.array([[-0.5]]), x11, gamma=1.0)
        assert np.allclose(aug.w_inv, [[0.5]])
        m = lifting.assemble_augmented(aug, system.c_matrix)
        assert linalg.numerical_rank(m) == 1
        from dataclasses import replace

        bad = replace(aug, w_inv=np.array([[0.9]]))
        assert linalg.numerical_rank(
            lifting.assemble_augmented(bad, system.c_matrix)) > 1

    def test_inf_kind_requires_v_diag(self):
        base = LiftedVariable(*(np.ones((1, 1)) for _ in range(5)))
        aug = AugmentedLifted(base=base, gamma=1.0, w_inv=np.ones((1, 1)),
                              y_aux=np.ones((1, 1)))
        with pytest.raises(ValueError):
            lifting.assemble_augmented(aug, np.ones((1, 1)), kind="inf")
