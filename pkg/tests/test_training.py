import numpy as np
import pytest

from a2match import autodiff as ad
from a2match.autodiff import Tape, Tensor, constant
from a2match.geometry import CorrespondenceSet
from a2match.network import ModelWeights, NetworkConfig
from a2match.synth import SynthConfig, generate_scene
from a2match.training import (
    AdamState,
    IndexOutOfBounds,
    LengthMismatch,
    TrainConfig,
    adam_step,
    balance_weights,
    grad_check,
    matching_loss,
    rejection_loss,
    scene_loss,
    train,
)
from a2match.transport import ScoreMatrix


def plan_of(p):
    return ScoreMatrix(constant(np.asarray(p, dtype=float)), False)


def test_matching_loss_perfect_plan_is_zero():
    # 2 keypoints, 2 points, gt = {(0,0),(1,1)}: P=1 at both targets.
    p = np.zeros((3, 3))
    p[0, 0] = p[1, 1] = 1.0
    gt = CorrespondenceSet([(0, 0, 1.0), (1, 1, 1.0)])
    loss = matching_loss(plan_of(p), gt, 2, 2)
    assert abs(loss.item()) < 1e-12


def test_matching_loss_e_inverse_cells():
    # every target cell holds exp(-1): loss = -(1/N_m) * N_m * (-1) = 1.
    p = np.zeros((3, 4))
    p[0, 0] = np.exp(-1.0)       # gt pair
    p[1, 3] = np.exp(-1.0)       # unmatched query -> dustbin column
    p[2, 1] = p[2, 2] = np.exp(-1.0)  # unmatched db -> dustbin row
    gt = CorrespondenceSet([(0, 0, 1.0)])
    loss = matching_loss(plan_of(p), gt, 2, 3)
    assert abs(loss.item() - 1.0) < 1e-12


def test_matching_loss_all_dustbins_zero():
    p = np.zeros((3, 3))
    p[0, 2] = p[1, 2] = 1.0
    p[2, 0] = p[2, 1] = 1.0
    loss = matching_loss(plan_of(p), CorrespondenceSet([]), 2, 2)
    assert abs(loss.item()) < 1e-12


def test_matching_loss_bounds_check():
    with pytest.raises(IndexOutOfBounds):
        matching_loss(plan_of(np.zeros((3, 3))), CorrespondenceSet([(5, 0, 1.0)]), 2, 2)


def test_matching_loss_monotone_when_mass_moves_to_target():
    # 2x2 witness: moving mass from a wrong cell to the gt cell lowers loss.
    gt = CorrespondenceSet([(0, 0, 1.0)])
    lo = np.full((2, 2), 0.25)
    hi = lo.copy()
    hi[0, 0], hi[0, 1] = 0.4, 0.1
    l_lo = matching_loss(plan_of(lo), gt, 1, 1).item()
    l_hi = matching_loss(plan_of(hi), gt, 1, 1).item()
    assert l_hi < l_lo


def test_rejection_loss_examples():
    p = constant(np.array([1.0 - 1e-15, 1e-15]))
    loss = rejection_loss(p, [1.0, 0.0], [1.0, 1.0])
    assert loss.item() < 1e-10

    single = rejection_loss(constant(np.array([0.5])), [1.0], [1.0])
    assert abs(single.item() - np.log(2.0)) < 1e-12


def test_rejection_loss_all_positive_labels_only_positive_term():
    probs = constant(np.array([0.3, 0.8]))
    labels = [1.0, 1.0]
    loss = rejection_loss(probs, labels, [1.0, 1.0])
    expect = -np.mean(np.log([0.3, 0.8]))
    assert abs(loss.item() - expect) < 1e-12


def test_rejection_loss_validates_lengths():
    with pytest.raises(LengthMismatch):
        rejection_loss(constant(np.ones(3) * 0.5), [1.0, 0.0], [1.0, 1.0, 1.0])


def test_balance_weights_inverse_frequency():
    w = balance_weights([1, 1, 1, 0])
    assert np.allclose(w[:3], 4 / (2 * 3))
    assert np.allclose(w[3], 4 / (2 * 1))
    w_all = balance_weights([1, 1])
    assert np.allclose(w_all, [0.5, 0.5])  # n/(2*n_pos) with n_pos = n
    assert np.all(balance_weights(np.r_[np.ones(100), np.zeros(1)]) <= 10.0)


def test_adam_zero_gradient_keeps_weights():
    cfg = NetworkConfig(d=8)
    w = ModelWeights.initialize(cfg, seed=0)
    before = {k: p.data.copy() for k, p in w.params.items()}
    state = AdamState.for_weights(w)
    adam_step(w, {k: np.zeros_like(p.data) for k, p in w.params.items()},
              state, TrainConfig())
    for k, p in w.params.items():
        assert np.array_equal(p.data, before[k])


def test_adam_first_step_closed_form():
    # bias-corrected first step: delta = lr * g / (|g| + eps) ~ lr * sign(g)
    cfg = NetworkConfig(d=8)
    w = ModelWeights.initialize(cfg, seed=1)
    name = "clf/head/b"
    g = np.array([0.37])
    before = w.param(name).data.copy()
    grads = {k: np.zeros_like(p.data) for k, p in w.params.items()}
    grads[name] = g
    tc = TrainConfig(learning_rate=0.01)
    adam_step(w, grads, AdamState.for_weights(w), tc)
    got = w.param(name).data - before
    expect = -tc.learning_rate * g / (np.abs(g) + 1e-8)
    assert np.max(np.abs(got - expect)) < 1e-12


def test_adam_two_runs_bit_identical():
    cfg = NetworkConfig(d=8)
    rng = np.random.default_rng(2)
    grads_seq = [
        {k: rng.standard_normal(p.data.shape) for k, p in
         ModelWeights.initialize(cfg, seed=3).params.items()}
        for _ in range(3)
    ]

    def run():
        w = ModelWeights.initialize(cfg, seed=3)
        state = AdamState.for_weights(w)
        for g in grads_seq:
            adam_step(w, g, state, TrainConfig())
        return {k: p.data.copy() for k, p in w.params.items()}

    r1, r2 = run(), run()
    for k in r1:
        assert np.array_equal(r1[k], r2[k])


def small_scene(seed=0):
    return generate_scene(SynthConfig(n_points=12, inlier_fraction=0.75,
                                      pixel_noise_sigma=0.5, seed=seed))


def small_net():
    return NetworkConfig(d=8, k=6, g=3)


def test_grad_check_fresh_model_passes():
    cfg = small_net()
    w = ModelWeights.initialize(cfg, seed=0)
    report = grad_check(small_scene(), w, sample=24, seed=0)
    assert report.max_rel_error < 1e-3
    assert len(report.entries) >= 24
    assert {"enc", "clf", "ot"} <= set(report.per_module)


def test_grad_check_detects_corrupted_backward():
    cfg = small_net()
    w = ModelWeights.initialize(cfg, seed=0)
    ad.inject_backward_fault(1.25)
    try:
        report = grad_check(small_scene(), w, sample=24, seed=0)
    finally:
        ad.inject_backward_fault(None)
    assert report.max_rel_error > 1e-1


def test_grad_check_linear_toy_network_tight():
    # loss = sum(x W): d/dW is exact up to FD truncation.
    rng = np.random.default_rng(4)
    x = constant(rng.standard_normal((6, 5)))
    w = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    with Tape() as tape:
        tape.backward(ad.sum_all(ad.matmul(x, w)))
    analytic = w.grad.copy()
    h = 1e-5
    for idx in range(w.data.size):
        orig = w.data.flat[idx]
        w.data.flat[idx] = orig + h
        fp = ad.sum_all(ad.matmul(x, w)).item()
        w.data.flat[idx] = orig - h
        fm = ad.sum_all(ad.matmul(x, w)).item()
        w.data.flat[idx] = orig
        num = (fp - fm) / (2 * h)
        assert abs(num - analytic.flat[idx]) / max(abs(num), 1e-8) < 1e-8


def test_train_zero_learning_rate_keeps_weights():
    scenes = [small_scene(i) for i in range(3)]
    cfg = TrainConfig(learning_rate=0.0, epochs=2, batch_size=2, seed=0)
    w, reports, _ = train(scenes, cfg, small_net())
    w_ref = ModelWeights.initialize(small_net(), seed=0)
    for k in w.params:
        assert np.array_equal(w.params[k].data, w_ref.params[k].data)
    assert len(reports) == 2


def test_train_bit_reproducible():
    scenes = [small_scene(10 + i) for i in range(4)]
    cfg = TrainConfig(epochs=2, batch_size=2, seed=7)

    def run():
        w, reports, _ = train(scenes, cfg, small_net())
        return ({k: p.data.copy() for k, p in w.params.items()},
                [(r.matching_loss, r.rejection_loss, r.total) for r in reports])

    (w1, r1), (w2, r2) = run(), run()
    assert r1 == r2
    for k in w1:
        assert np.array_equal(w1[k], w2[k])


def test_train_reduces_loss_on_tiny_problem():
    scenes = [small_scene(20 + i) for i in range(6)]
    cfg = TrainConfig(epochs=5, batch_size=3, seed=1)
    _, reports, _ = train(scenes, cfg, small_net())
    assert reports[-1].total < reports[0].total


def test_scene_loss_is_finite_and_nonnegative():
    w = ModelWeights.initialize(small_net(), seed=5)
    with Tape() as tape:
        loss, report, _ = scene_loss(small_scene(30), w, TrainConfig(),
                                     training=True, update_stats=False)
        tape.backward(loss)
    assert np.isfinite(loss.item())
    assert report.matching_loss >= 0.0
    assert report.rejection_loss >= 0.0
