import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from hymik.constraints import build_gc_constraints, main_effect_constraints, reduce_to_full_rank
from hymik.io import data_path, load_graph
from hymik.model import scaling_constraints
from hymik.structures import (AlreadyScaled, Disconnected, Graph, StructureError, TooShort,
                              UnderConstrained, build_icar_structure, build_interaction_structure,
                              build_rw_structure, count_null_eigenvalues, generalized_log_det,
                              scale_structure)

from conftest import dense_null_basis


def test_rw1_small():
    R = build_rw_structure(3, 1)
    assert np.array_equal(R.matrix.toarray(), [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])
    assert R.rank_deficiency == 1 and R.kind == "RW1" and not R.scaled


def test_rw2_matches_difference_product():
    R = build_rw_structure(4, 2)
    D = np.array([[1.0, -2, 1, 0], [0, 1, -2, 1]])
    assert np.array_equal(R.matrix.toarray(), D.T @ D)
    assert np.array_equal(R.matrix.toarray(), [[1, -2, 1, 0], [-2, 5, -4, 1], [1, -4, 5, -2], [0, 1, -2, 1]])
    assert R.rank_deficiency == 2


def test_rw_null_space_witnesses():
    one, d = np.ones(10), np.arange(1.0, 11.0)
    R1 = build_rw_structure(10, 1).matrix
    R2 = build_rw_structure(10, 2).matrix
    assert np.abs(R1 @ one).max() <= 1e-12
    assert np.abs(R2 @ one).max() <= 1e-12 and np.abs(R2 @ d).max() <= 1e-12


def test_rw_too_short():
    with pytest.raises(TooShort):
        build_rw_structure(2, 2)
    with pytest.raises(TooShort):
        build_rw_structure(1, 1)


def test_icar_path_and_cycle():
    R = build_icar_structure(Graph.path(3))
    assert np.array_equal(R.matrix.toarray(), [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])
    C = build_icar_structure(Graph.cycle(4)).matrix.toarray()
    assert np.array_equal(np.diag(C), [2, 2, 2, 2])
    assert C[0, 1] == C[0, 3] == -1 and C[0, 2] == 0
    assert np.abs(C @ np.ones(4)).max() == 0


def test_icar_disconnected():
    g = Graph.from_edges(5, [(0, 1), (2, 3)])
    with pytest.raises(Disconnected) as err:
        build_icar_structure(g)
    assert err.value.n_components == 3


def test_graph_validation():
    with pytest.raises(StructureError):
        Graph(2, ((1,), ()))
    with pytest.raises(StructureError):
        Graph(2, ((0,), ()))
    assert list(Graph.lattice(2, 3).degrees) == [2, 3, 2, 2, 3, 2]


def test_germany_graph():
    g = load_graph(data_path("germany.graph"))
    R = build_icar_structure(g)
    assert R.n == 544 and R.rank_deficiency == 1
    assert g.n_components() == 1


def test_row_sums_zero():
    for R in (build_rw_structure(7, 1), build_icar_structure(Graph.lattice(3, 4))):
        assert np.abs(R.matrix @ np.ones(R.n)).max() == 0


def test_interaction_rank_formula_and_eigencount():
    Ra, Rg = build_rw_structure(3, 1), build_icar_structure(Graph.path(4))
    Rd = build_interaction_structure(Ra, Rg)
    assert Rd.n == 12 and Rd.rank_deficiency == 1 * 4 + 1 * 3 - 1
    ev = np.linalg.eigvalsh(Rd.matrix.toarray())
    assert int(np.sum(ev < 1e-8 * ev.max())) == 6
    Rg10 = build_icar_structure(Graph.cycle(7))
    assert build_interaction_structure(build_rw_structure(10, 2), Rg10).rank_deficiency == 2 * 7 + 10 - 2


def test_interaction_time_major_layout(rng):
    Ra, Rg = build_rw_structure(4, 2), build_icar_structure(Graph.cycle(5))
    Rd = build_interaction_structure(Ra, Rg).matrix
    u, v = rng.standard_normal(4), rng.standard_normal(5)
    lhs = Rd @ np.kron(u, v)
    rhs = np.kron(Ra.matrix @ u, Rg.matrix @ v)
    assert np.abs(lhs - rhs).max() <= 1e-10 * np.abs(rhs).max()


def test_interaction_eigenvalues_outer_product():
    Rd = build_interaction_structure(build_rw_structure(5, 1), build_icar_structure(Graph.path(4)))
    assert np.allclose(Rd.eigenvalues(), np.linalg.eigvalsh(Rd.matrix.toarray()), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(nt=st.integers(3, 8), order=st.sampled_from([1, 2]), rows=st.integers(1, 3), cols=st.integers(2, 4))
def test_eigencount_matches_rank_deficiency(nt, order, rows, cols):
    Ra = build_rw_structure(nt, order)
    Rg = build_icar_structure(Graph.lattice(rows, cols))
    for R in (Ra, Rg, build_interaction_structure(Ra, Rg)):
        assert count_null_eigenvalues(R.matrix) == R.rank_deficiency
        assert np.linalg.eigvalsh(R.matrix.toarray())[0] >= -1e-10


def test_scaling_rw1_unit_geometric_mean():
    R = build_rw_structure(10, 1)
    A = main_effect_constraints(10).A.toarray()
    S = scale_structure(R, main_effect_constraints(10))
    assert S.scaled and S.scale_factor > 0
    V = dense_null_basis(A, 10)
    Sigma = V @ np.linalg.inv(V.T @ S.matrix.toarray() @ V) @ V.T
    assert np.exp(np.mean(np.log(np.diag(Sigma)))) == pytest.approx(1.0, abs=1e-6)


def test_scaling_icar_path5_against_pinv():
    R = build_icar_structure(Graph.path(5))
    S = scale_structure(R, main_effect_constraints(5))
    c = np.exp(np.mean(np.log(np.diag(np.linalg.pinv(R.matrix.toarray())))))
    assert S.scale_factor == pytest.approx(1.0 / c, rel=1e-8)


def test_scaling_twice_fails():
    S = scale_structure(build_rw_structure(6, 1), main_effect_constraints(6))
    with pytest.raises(AlreadyScaled):
        scale_structure(S, main_effect_constraints(6))


def test_scaling_under_constrained():
    with pytest.raises(UnderConstrained):
        scale_structure(build_rw_structure(6, 2), main_effect_constraints(6))


def test_scaling_invariance():
    R = build_icar_structure(Graph.lattice(3, 3))
    R3 = type(R)((3.7 * R.matrix).tocsc(), R.rank_deficiency, R.kind)
    A = main_effect_constraints(9)
    a = scale_structure(R, A).matrix.toarray()
    b = scale_structure(R3, A).matrix.toarray()
    assert np.abs(a - b).max() <= 1e-10


def test_scaling_constraints_outside_null_space():
    # pinning the first value (not a null-space functional) takes the dense complement route
    R = build_rw_structure(8, 1)
    A = sp.csr_matrix(np.eye(8)[:1])
    S = scale_structure(R, A)
    V = dense_null_basis(A.toarray(), 8)
    Sigma = V @ np.linalg.inv(V.T @ S.matrix.toarray() @ V) @ V.T
    var = np.diag(Sigma)[1:]
    assert np.exp(np.mean(np.log(var))) == pytest.approx(1.0, abs=1e-8)


def test_scaled_interaction_kronecker_eigenvalues():
    Ra = build_rw_structure(4, 2)
    Rg = build_icar_structure(Graph.path(5))
    Rd = build_interaction_structure(Ra, Rg)
    Sd = scale_structure(Rd, scaling_constraints(Rd))
    assert np.allclose(Sd.eigenvalues(), np.linalg.eigvalsh(Sd.matrix.toarray()), atol=1e-10)
    cons = reduce_to_full_rank(build_gc_constraints(4, 5))
    assert Sd.null_space_annihilates(cons.A)


@pytest.mark.parametrize("builder", [
    lambda: (build_rw_structure(10, 1), main_effect_constraints(10).A),
    lambda: (build_rw_structure(10, 2), main_effect_constraints(10, trend=True).A),
    lambda: (build_icar_structure(Graph.path(8)), main_effect_constraints(8).A),
])
def test_generalized_log_det_against_eigen(builder):
    R, A = builder()
    ev = np.linalg.eigvalsh(R.matrix.toarray())
    assert generalized_log_det(R, A) == pytest.approx(np.sum(np.log(ev[R.rank_deficiency:])), abs=1e-6)


def test_generalized_log_det_diagonal_and_homogeneity():
    D = type(build_rw_structure(3, 1))(sp.diags([2.0, 3.0, 5.0]).tocsc(), 0, "custom")
    assert generalized_log_det(D) == pytest.approx(np.log(30.0), abs=1e-12)
    R = build_rw_structure(9, 2)
    A = main_effect_constraints(9, trend=True).A
    c = 2.5
    Rc = type(R)((c * R.matrix).tocsc(), R.rank_deficiency, R.kind)
    shift = generalized_log_det(Rc, A) - generalized_log_det(R, A)
    assert shift == pytest.approx((9 - 2) * np.log(c), abs=1e-10)
