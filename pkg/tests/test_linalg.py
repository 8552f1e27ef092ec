import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bilipren.linalg import cayley, is_posdef, min_eig_sym, sv_extremes


class TestCayley:
    def test_zero_gives_identity(self):
        assert np.allclose(cayley(np.zeros((2, 2))), np.eye(2), atol=0)

    def test_hand_computed_2x2(self):
        # J = [[0,1],[-1,0]] gives Z = [[0,-2],[2,0]] and
        # (I+Z)(I-Z)^{-1} = (1/5) [[-3,-4],[4,-3]]
        J = np.array([[0.0, 1.0], [-1.0, 0.0]])
        expected = np.array([[-3.0, -4.0], [4.0, -3.0]]) / 5.0
        assert np.allclose(cayley(J), expected, atol=1e-14)

    def test_random_5x5_orthogonal(self):
        rng = np.random.default_rng(0)
        Q = cayley(rng.standard_normal((5, 5)))
        defect = np.linalg.norm(Q.T @ Q - np.eye(5), ord="fro")
        assert defect <= 1e-12

    @pytest.mark.parametrize("size", [1, 3, 17, 64, 200])
    def test_orthogonality_up_to_200(self, size):
        rng = np.random.default_rng(size)
        Q = cayley(rng.standard_normal((size, size)))
        defect = np.linalg.norm(Q.T @ Q - np.eye(size), ord="fro")
        assert defect <= 1e-12

    @given(st.integers(min_value=1, max_value=12), st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_orthogonality_property(self, size, seed):
        rng = np.random.default_rng(seed)
        Q = cayley(rng.standard_normal((size, size)) * 3.0)
        assert np.linalg.norm(Q.T @ Q - np.eye(size), ord="fro") <= 1e-12

    def test_rejects_non_square(self):
        with pytest.raises(ValueError):
            cayley(np.zeros((2, 3)))


class TestMinEigSym:
    def test_identity(self):
        assert min_eig_sym(np.eye(3)) == pytest.approx(1.0)

    def test_hand_computed(self):
        # eigenvalues of [[1,2],[2,1]] are 1 +/- 2
        assert min_eig_sym(np.array([[1.0, 2.0], [2.0, 1.0]])) == pytest.approx(-1.0)

    def test_diagonal(self):
        assert min_eig_sym(np.diag([0.5, 4.0])) == pytest.approx(0.5)

    def test_rejects_asymmetric(self):
        bad = np.array([[1.0, 2.0], [0.0, 1.0]])
        with pytest.raises(ValueError):
            min_eig_sym(bad)

    @given(st.integers(min_value=1, max_value=10),
           st.floats(min_value=-5, max_value=5, allow_nan=False),
           st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_shift_property(self, size, c, seed):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((size, size))
        S = X + X.T
        shifted = min_eig_sym(S + c * np.eye(size))
        assert shifted == pytest.approx(min_eig_sym(S) + c, abs=1e-10)


class TestSvExtremes:
    def test_diagonal(self):
        assert sv_extremes(np.diag([2.0, 0.5])) == pytest.approx((0.5, 2.0))

    def test_orthogonal_is_isometry(self):
        Q = cayley(np.array([[0.0, 2.0], [1.0, 0.0]]))
        lo, hi = sv_extremes(Q)
        assert lo == pytest.approx(1.0, abs=1e-12)
        assert hi == pytest.approx(1.0, abs=1e-12)

    def test_zero_matrix(self):
        assert sv_extremes(np.zeros((2, 2))) == (0.0, 0.0)

    @given(st.integers(min_value=1, max_value=8), st.integers(min_value=1, max_value=8),
           st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_consistent_with_gram_eigs(self, rows, cols, seed):
        rng = np.random.default_rng(seed)
        M = rng.standard_normal((rows, cols))
        lo, hi = sv_extremes(M)
        gram = M.T @ M if rows >= cols else M @ M.T
        eigs = np.linalg.eigvalsh(gram)
        assert lo ** 2 == pytest.approx(max(eigs[0], 0.0), rel=1e-9, abs=1e-12)
        assert hi ** 2 == pytest.approx(eigs[-1], rel=1e-9, abs=1e-12)
        assert 0.0 <= lo <= hi


class TestIsPosdef:
    def test_identity(self):
        assert is_posdef(np.eye(3), tol=0.0)

    def test_indefinite(self):
        assert not is_posdef(np.array([[1.0, 2.0], [2.0, 1.0]]), tol=0.0)

    def test_margin_rule(self):
        assert not is_posdef(1e-8 * np.eye(2), tol=1e-6)
