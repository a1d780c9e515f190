import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from a2match import autodiff as ad
from a2match.autodiff import Tape, Tensor, constant
from a2match.transport import (
    ScoreMatrix,
    augment_dustbins,
    cost_matrix,
    marginal_residuals,
    mutual_nn,
    sinkhorn,
    sinkhorn_residual_trajectory,
)


def test_cost_matrix_examples():
    assert cost_matrix(constant([[1.0, 2.0]]), constant([[1.0, 2.0]])).data[0, 0] == 0.0
    out = cost_matrix(constant([[0.0, 0.0]]), constant([[3.0, 4.0]]))
    assert out.data[0, 0] == 5.0  # Pythagorean oracle


def test_cost_matrix_transpose_symmetry():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 6)), rng.standard_normal((7, 6))
    ab = cost_matrix(constant(a), constant(b)).data
    ba = cost_matrix(constant(b), constant(a)).data
    assert np.array_equal(ab, ba.T)
    with pytest.raises(ad.ShapeMismatch):
        cost_matrix(constant(np.zeros((3, 4))), constant(np.zeros((3, 5))))


def test_augment_dustbins_structure():
    out = augment_dustbins(constant([[2.5]]), constant(np.array(0.75)))
    assert out.values.shape == (2, 2)
    assert out.values.data[0, 0] == -2.5
    assert out.values.data[0, 1] == out.values.data[1, 0] == out.values.data[1, 1] == 0.75
    rng = np.random.default_rng(1)
    c = rng.random((3, 5))
    big = augment_dustbins(constant(c), constant(np.array(1.0)))
    assert np.array_equal(big.values.data[:3, :5], -c)


def test_alpha_bin_receives_gradient():
    rng = np.random.default_rng(2)
    cost = rng.random((3, 4))
    alpha = Tensor(np.array(0.5), requires_grad=True)

    def loss_val():
        plan = sinkhorn(augment_dustbins(constant(cost), alpha), 30)
        return ad.sum_all(ad.mul(plan.values, plan.values))

    with Tape() as tape:
        tape.backward(loss_val())
    a = float(alpha.grad)
    h = 1e-6
    alpha.data = np.array(0.5 + h)
    fp = loss_val().item()
    alpha.data = np.array(0.5 - h)
    fm = loss_val().item()
    alpha.data = np.array(0.5)
    num = (fp - fm) / (2 * h)
    assert abs(a) > 1e-6
    assert abs(a - num) / max(abs(a), abs(num)) < 1e-3


def test_sinkhorn_marginals_on_random_scores():
    rng = np.random.default_rng(3)
    plan = sinkhorn(ScoreMatrix(constant(rng.standard_normal((9, 12))), True), 100)
    row, col = marginal_residuals(plan)
    assert row < 1e-6 and col < 1e-6
    p = plan.values.data
    # row marginal oracle: each real row sums to 1, dustbin row to N
    assert np.max(np.abs(p[:8].sum(axis=1) - 1.0)) < 1e-6
    assert abs(p[8].sum() - 11.0) < 1e-6
    assert np.max(np.abs(p[:, :11].sum(axis=0) - 1.0)) < 1e-6
    assert abs(p[:, 11].sum() - 8.0) < 1e-6


def test_sinkhorn_uniform_scores_uniform_plan():
    plan = sinkhorn(ScoreMatrix(constant(np.zeros((5, 7))), True), 100).values.data
    main = plan[:4, :6]
    assert np.max(np.abs(main - main[0, 0])) < 1e-12
    assert np.max(np.abs(plan[4, :6] - plan[4, 0])) < 1e-12
    assert np.max(np.abs(plan[:4, 6] - plan[0, 6])) < 1e-12


def test_sinkhorn_shift_invariance():
    rng = np.random.default_rng(4)
    s = rng.standard_normal((6, 9))
    p1 = sinkhorn(ScoreMatrix(constant(s), True), 100).values.data
    p2 = sinkhorn(ScoreMatrix(constant(s + 37.5), True), 100).values.data
    assert np.max(np.abs(p1 - p2)) < 1e-9


def test_sinkhorn_residuals_non_increasing():
    rng = np.random.default_rng(5)
    for trial in range(10):
        traj = sinkhorn_residual_trajectory(rng.standard_normal((8, 11)), 60)
        diffs = np.diff(traj)
        assert np.all(diffs <= 1e-12), f"trial {trial} not monotone"


def test_sinkhorn_near_permutation_matches_hungarian():
    for trial in range(100):
        rng = np.random.default_rng(100 + trial)
        base = rng.uniform(0.0, 1.0, (4, 4))
        perm = rng.permutation(4)
        for i, j in enumerate(perm):
            base[i, j] += 8.0
        plan = sinkhorn(augment_dustbins(constant(-base), constant(np.array(-12.0))), 100)
        main = plan.values.data[:4, :4]
        got = {(i, j) for i, j, _ in mutual_nn(plan)}
        ri, ci = linear_sum_assignment(-base)
        assert got == set(zip(ri.tolist(), ci.tolist()))
        assert np.all(main[ri, ci] > 0.99)


def test_sinkhorn_validates_inputs():
    with pytest.raises(ValueError):
        sinkhorn(ScoreMatrix(constant(np.zeros((3, 3))), True), 0)
    exp_plan = sinkhorn(ScoreMatrix(constant(np.zeros((3, 3))), True), 5)
    with pytest.raises(ValueError):
        sinkhorn(exp_plan, 5)


def test_mutual_nn_identity_dominant():
    p = np.full((4, 4), 0.01)
    p[0, 0] = p[1, 1] = p[2, 2] = 0.9
    p[3, :] = 0.02  # dustbin row
    p[:, 3] = 0.02
    plan = ScoreMatrix(constant(p), False)
    assert [(i, j) for i, j, _ in mutual_nn(plan)] == [(0, 0), (1, 1), (2, 2)]


def test_mutual_nn_requires_mutual_argmax():
    p = np.array([
        [0.8, 0.15, 0.01],
        [0.7, 0.10, 0.01],   # row 1 argmax col 0, but col 0 argmax is row 0
        [0.01, 0.01, 0.5],
    ])
    plan = ScoreMatrix(constant(p), False)
    pairs = [(i, j) for i, j, _ in mutual_nn(plan)]
    assert (1, 0) not in pairs
    assert (0, 0) in pairs


def test_mutual_nn_dustbin_dominance_excludes():
    p = np.array([
        [0.3, 0.01, 0.5],   # row dustbin beats the best main cell
        [0.01, 0.4, 0.1],
        [0.2, 0.01, 0.0],
    ])
    plan = ScoreMatrix(constant(p), False)
    pairs = [(i, j) for i, j, _ in mutual_nn(plan)]
    assert (0, 0) not in pairs
    assert (1, 1) in pairs


def test_mutual_nn_matches_bruteforce_enumeration():
    rng = np.random.default_rng(6)
    for _ in range(25):
        p = rng.random((7, 10))
        plan = ScoreMatrix(constant(p), False)
        got = {(i, j) for i, j, _ in mutual_nn(plan)}
        m, n = 6, 9
        want = set()
        for i in range(m):
            for j in range(n):
                v = p[i, j]
                row_ok = all(p[i, jj] <= v for jj in range(n)) and v > p[i, n]
                col_ok = all(p[ii, j] <= v for ii in range(m)) and v > p[m, j]
                if row_ok and col_ok and p[i, :n].argmax() == j and p[:m, j].argmax() == i:
                    want.add((i, j))
        assert got == want


def test_mutual_nn_one_to_one_property():
    rng = np.random.default_rng(7)
    for _ in range(50):
        p = rng.random((9, 6))
        pairs = mutual_nn(ScoreMatrix(constant(p), False)).pairs
        ids_i = [i for i, _, _ in pairs]
        ids_j = [j for _, j, _ in pairs]
        assert len(ids_i) == len(set(ids_i))
        assert len(ids_j) == len(set(ids_j))


def test_sinkhorn_gradcheck_through_iterations():
    rng = np.random.default_rng(8)
    scores = Tensor(rng.standard_normal((5, 6)), requires_grad=True)
    target = rng.random((5, 6))

    def loss_val():
        plan = sinkhorn(ScoreMatrix(scores, True), 40)
        diff = ad.sub(plan.values, constant(target))
        return ad.sum_all(ad.mul(diff, diff))

    with Tape() as tape:
        tape.backward(loss_val())
    g = scores.grad.copy()
    rng2 = np.random.default_rng(9)
    for _ in range(6):
        idx = int(rng2.integers(scores.data.size))
        orig = scores.data.flat[idx]
        h = 1e-6
        scores.data.flat[idx] = orig + h
        fp = loss_val().item()
        scores.data.flat[idx] = orig - h
        fm = loss_val().item()
        scores.data.flat[idx] = orig
        num = (fp - fm) / (2 * h)
        a = g.flat[idx]
        assert abs(a - num) / max(abs(a), abs(num), 1e-8) < 1e-3
