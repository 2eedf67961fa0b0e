import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from hymik.constraints import (ConstraintSet, KrigingCorrection, NotOrthonormal, PolicyInfeasible,
                               RankCheckFailed, SingularGram, assemble_joint_precision,
                               build_gc_constraints, build_projection, build_sc_constraints,
                               constrained_variance_diag, krige_correct, main_effect_constraints,
                               reduce_to_full_rank, split_constraints)
from hymik.sparse import cholesky
from hymik.structures import Graph, build_icar_structure, build_interaction_structure, build_rw_structure

from conftest import conditional_cov, conditional_mean, random_spd


def rank(M):
    M = M.toarray() if sp.issparse(M) else M
    return np.linalg.matrix_rank(M, tol=1e-9 * max(1.0, np.abs(M).max()))


def test_gc_small_layout():
    c = build_gc_constraints(2, 3)
    A = c.dense()
    assert A.shape == (5, 6) and not c.full_rank and c.label == "GC"
    assert np.array_equal(A[0], [1, 1, 1, 0, 0, 0])
    assert np.array_equal(A[2], [1, 0, 0, 1, 0, 0])
    assert rank(A) == 4


def test_sc_small_layout():
    c = build_sc_constraints(3, 2)
    A = c.dense()
    assert A.shape == (7, 6) and c.label == "SC"
    assert np.array_equal(A[5], [1, 0, 2, 0, 3, 0])
    assert rank(A) == 5


def test_germany_sized_counts():
    gc, sc = build_gc_constraints(10, 544), build_sc_constraints(10, 544)
    assert gc.n_rows == 554 and sc.n_rows == 1098
    assert reduce_to_full_rank(gc).n_rows == 553
    # the numerically determined SC rank: n_T + 2 n_S - 2
    assert reduce_to_full_rank(sc).n_rows == 10 + 2 * 544 - 2


def test_reduce_small_and_idempotent():
    r = reduce_to_full_rank(build_gc_constraints(2, 3))
    assert r.n_rows == 4 and rank(r.A) == 4 and r.full_rank
    assert reduce_to_full_rank(r) is r
    s = reduce_to_full_rank(build_sc_constraints(4, 3))
    assert rank(s.A) == s.n_rows == 4 + 2 * 3 - 2


def test_reduce_custom_rejected():
    with pytest.raises(RankCheckFailed):
        reduce_to_full_rank(ConstraintSet(sp.csr_matrix(np.ones((2, 3)))))


@pytest.mark.parametrize("label,nt,ns,policy,k1,k2", [
    ("gc", 10, 544, "auto", 544, 9),
    ("sc", 10, 544, "auto", 1088, 8),
    ("gc", 500, 11, "auto", 500, 10),
    ("gc", 500, 11, "temporal", 500, 10),
    ("gc", 6, 6, "auto", 6, 5),  # tie goes to spatial_first
])
def test_split_sizes(label, nt, ns, policy, k1, k2):
    build = build_gc_constraints if label == "gc" else build_sc_constraints
    s = split_constraints(reduce_to_full_rank(build(nt, ns)), nt, ns, policy)
    assert (s.k1, s.k2) == (k1, k2)
    if policy == "auto" and ns >= nt:
        assert s.policy == "spatial_first"


def test_split_requires_full_rank():
    with pytest.raises(Exception):
        split_constraints(build_gc_constraints(3, 4), 3, 4)


def test_split_unknown_policy():
    with pytest.raises(PolicyInfeasible):
        split_constraints(reduce_to_full_rank(build_gc_constraints(3, 4)), 3, 4, "diagonal")


@pytest.mark.parametrize("label", ["gc", "sc"])
@pytest.mark.parametrize("policy", ["spatial", "temporal"])
@pytest.mark.parametrize("nt,ns", [(3, 4), (5, 7), (8, 3)])
def test_projector_and_span(label, policy, nt, ns):
    build = build_gc_constraints if label == "gc" else build_sc_constraints
    c = reduce_to_full_rank(build(nt, ns))
    s = split_constraints(c, nt, ns, policy)
    A1, A2, Z = s.A1.toarray(), s.A2.toarray(), s.Z.toarray()
    n = nt * ns
    assert np.abs(A1 @ A1.T - np.eye(s.k1)).max() <= 1e-10
    assert np.abs(Z @ Z - Z).max() <= 1e-10
    assert np.abs(Z - Z.T).max() <= 1e-10
    assert np.abs(A1 @ Z).max() <= 1e-10
    assert np.abs(Z - (np.eye(n) - A1.T @ A1)).max() <= 1e-12
    both = np.vstack([A1, A2])
    assert rank(both) == s.k1 + s.k2 == c.n_rows
    assert rank(np.vstack([both, c.dense()])) == c.n_rows


def test_projection_sparsity_fractions():
    c = reduce_to_full_rank(build_gc_constraints(10, 544))
    zs = split_constraints(c, 10, 544, "spatial").Z
    assert zs.nnz == 544 * 10 ** 2
    assert 100 * zs.nnz / 5440 ** 2 == pytest.approx(0.1838, abs=5e-5)
    zt = split_constraints(c, 10, 544, "temporal").Z
    assert zt.nnz / 5440 ** 2 == pytest.approx(0.10, abs=1e-12)


def test_projection_random_orthonormal(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((12, 6)))
    A1 = Q.T
    Z = build_projection(sp.csr_matrix(A1)).toarray()
    assert np.abs(Z @ Z - Z).max() <= 1e-10 and np.abs(A1 @ Z).max() <= 1e-12


def test_projection_not_orthonormal():
    with pytest.raises(NotOrthonormal):
        build_projection(sp.csr_matrix(np.ones((1, 4))))


def test_joint_precision_scalar():
    J = assemble_joint_precision(sp.csr_matrix([[1.0]]), sp.csr_matrix([[3.0]]), 7.0).toarray()
    assert np.array_equal(J, [[7, -7], [-7, 10]])


def test_joint_precision_positive_definite_and_schur():
    Ra, Rg = build_rw_structure(5, 1), build_icar_structure(Graph.path(4))
    Rd = build_interaction_structure(Ra, Rg)
    s = split_constraints(reduce_to_full_rank(build_gc_constraints(5, 4)), 5, 4, "spatial")
    Qe = (Rd.matrix + 1e-6 * sp.identity(20)).tocsc()
    J = assemble_joint_precision(s.Z, Qe, 1e8)
    assert abs(J - J.T).max() == 0
    cholesky(J)
    Jd = J.toarray()
    # eliminating x leaves Q_eps (Z idempotent); kappa-sized entries cancel to ~kappa * 1e-16
    schur = Jd[20:, 20:] - Jd[20:, :20] @ np.linalg.solve(Jd[:20, :20], Jd[:20, 20:])
    assert np.abs(schur - Qe.toarray()).max() <= 1e-7


def test_krige_no_op_and_identity_case():
    F = cholesky(sp.identity(3))
    A = sp.csr_matrix(np.ones((1, 3)) / np.sqrt(3))
    assert np.allclose(krige_correct([1.0, 2.0, 3.0], A, F), [-1, 0, 1], atol=1e-15)
    x = np.array([1.0, -2.0, 1.0])
    assert np.allclose(krige_correct(x, A, F), x, atol=1e-15)


def test_krige_against_dense_oracle(rng):
    Q = random_spd(12, rng)
    A = rng.standard_normal((3, 12))
    F = cholesky(sp.csc_matrix(Q))
    xs = rng.standard_normal(12)
    x = krige_correct(xs, sp.csr_matrix(A), F)
    ref = conditional_mean(xs, np.linalg.inv(Q), A)
    assert np.abs(x - ref).max() <= 1e-9 * max(1.0, np.abs(ref).max())
    assert np.abs(A @ x).max() <= 1e-8 * (1 + np.abs(xs).max())
    again = krige_correct(x, sp.csr_matrix(A), F)
    assert np.abs(again - x).max() <= 1e-9


def test_constrained_variance_against_dense(rng):
    Q = random_spd(10, rng)
    A = rng.standard_normal((2, 10))
    F = cholesky(sp.csc_matrix(Q))
    v = constrained_variance_diag(F, sp.csr_matrix(A))
    assert np.allclose(v, np.diag(conditional_cov(np.linalg.inv(Q), A)), rtol=1e-9, atol=1e-12)


def test_gram_log_det(rng):
    Q = random_spd(8, rng)
    A = rng.standard_normal((3, 8))
    kc = KrigingCorrection(cholesky(sp.csc_matrix(Q)), sp.csr_matrix(A))
    assert kc.log_det_gram() == pytest.approx(np.linalg.slogdet(A @ np.linalg.solve(Q, A.T))[1], abs=1e-10)


def test_redundant_rows_singular_gram(rng):
    F = cholesky(sp.csc_matrix(random_spd(6, rng)))
    A = np.ones((2, 6))
    with pytest.raises(SingularGram):
        KrigingCorrection(F, sp.csr_matrix(A))
    # the pseudo-inverse mode accepts consistent redundant rows
    kc = KrigingCorrection(F, sp.csr_matrix(A), pseudo=True)
    x = kc.correct(np.arange(6.0))
    assert abs(x.sum()) <= 1e-10 and kc.rank == 1


def test_gram_insensitive_to_row_scaling(rng):
    Q = random_spd(9, rng)
    A = rng.standard_normal((3, 9))
    A[1] *= 1e7
    F = cholesky(sp.csc_matrix(Q))
    xs = rng.standard_normal(9)
    x = KrigingCorrection(F, sp.csr_matrix(A)).correct(xs)
    ref = conditional_mean(xs, np.linalg.inv(Q), A / np.linalg.norm(A, axis=1)[:, None])
    assert np.abs(x - ref).max() <= 1e-8


def test_main_effect_trend_row_spans_d():
    A = main_effect_constraints(6, trend=True).dense()
    d = np.arange(1.0, 7.0)
    assert rank(np.vstack([A, d])) == 2


@settings(max_examples=15, deadline=None)
@given(nt=st.integers(3, 7), ns=st.integers(2, 7), sc=st.booleans(), spatial=st.booleans())
def test_split_properties(nt, ns, sc, spatial):
    c = reduce_to_full_rank((build_sc_constraints if sc else build_gc_constraints)(nt, ns))
    s = split_constraints(c, nt, ns, "spatial" if spatial else "temporal")
    A1 = s.A1.toarray()
    assert np.abs(A1 @ A1.T - np.eye(s.k1)).max() <= 1e-10
    assert rank(np.vstack([A1, s.A2.toarray()])) == c.n_rows
