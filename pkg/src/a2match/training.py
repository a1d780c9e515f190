"""Losses, Adam, the desk-scale training loop, and gradient verification.

The matching loss is the negative log-likelihood of the transport plan at
the ground-truth cells plus the dustbin cells of unmatched points; the
rejection loss is class-balanced binary cross-entropy on the classifier
probabilities. Candidate selection (mutual NN) is discrete, so gradients
treat the selected set as fixed; the finite-difference checker freezes it
explicitly at the base point for the same reason.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, constant
from .network import ModelWeights, NetworkConfig, forward
from .rejection import candidate_batch, classify
from .transport import ScoreMatrix, augment_dustbins, cost_matrix, mutual_nn, sinkhorn

# Probability floor inside both losses; prevents -inf at initialization.
LOG_FLOOR = 1e-12


class IndexOutOfBounds(Exception):
    pass


class LengthMismatch(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    match_weight: float = 1.0
    rejection_weight: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0.0 and self.learning_rate != 0.0:
            raise ValueError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


@dataclass
class LossReport:
    matching_loss: float
    rejection_loss: float
    total: float
    n_matching: int
    n_candidates: int


def matching_loss(plan: ScoreMatrix, gt, m: int, n: int) -> Tensor:
    """Mean negative log plan probability over gt and dustbin target cells."""
    p = plan.values
    if p.shape != (m + 1, n + 1):
        raise IndexOutOfBounds(f"plan shape {p.shape} does not fit M={m}, N={n}")
    rows, cols = [], []
    matched_i, matched_j = set(), set()
    for i, j, _ in gt:
        if not (0 <= i < m and 0 <= j < n):
            raise IndexOutOfBounds(f"ground-truth pair ({i},{j}) out of bounds")
        rows.append(i)
        cols.append(j)
        matched_i.add(i)
        matched_j.add(j)
    for i in range(m):
        if i not in matched_i:
            rows.append(i)
            cols.append(n)
    for j in range(n):
        if j not in matched_j:
            rows.append(m)
            cols.append(j)
    n_m = len(rows)
    picked = ad.gather_pairs(p, rows, cols)
    logs = ad.log(ad.clamp_min(picked, LOG_FLOOR))
    return ad.scale(ad.sum_all(logs), -1.0 / n_m)


def balance_weights(labels) -> np.ndarray:
    """Inverse class-frequency weights within a batch, clamped to [0.1, 10]."""
    y = np.asarray(labels, dtype=np.float64)
    n = len(y)
    n_pos = max(int(y.sum()), 1)
    n_neg = max(n - int(y.sum()), 1)
    w_pos = np.clip(n / (2.0 * n_pos), 0.1, 10.0)
    w_neg = np.clip(n / (2.0 * n_neg), 0.1, 10.0)
    return np.where(y > 0.5, w_pos, w_neg)


def rejection_loss(probs: Tensor, labels, weights) -> Tensor:
    """Weighted binary cross-entropy over candidate probabilities."""
    y = np.asarray(labels, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    n = probs.shape[0]
    if len(y) != n or len(w) != n:
        raise LengthMismatch(f"{n} probabilities, {len(y)} labels, {len(w)} weights")
    yc, wc = constant(y), constant(w)
    ones = constant(np.ones(n))
    pos = ad.mul(yc, ad.log(ad.clamp_min(probs, LOG_FLOOR)))
    neg_p = ad.sub(ones, probs)
    neg = ad.mul(ad.sub(ones, yc), ad.log(ad.clamp_min(neg_p, LOG_FLOOR)))
    term = ad.mul(wc, ad.add(pos, neg))
    return ad.scale(ad.sum_all(term), -1.0 / n)


# --- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_weights(cls, weights: ModelWeights) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in weights.params.items()},
                   {k: np.zeros_like(p.data) for k, p in weights.params.items()}, 0)


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(weights: ModelWeights, grads: dict, state: AdamState, cfg: TrainConfig):
    """One in-place Adam update; deterministic given state."""
    state.t += 1
    t = state.t
    for name, p in weights.params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m[...] = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v[...] = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1 ** t)
        v_hat = v / (1.0 - ADAM_BETA2 ** t)
        p.data -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# --- per-scene loss -----------------------------------------------------------


def scene_loss(pair, weights: ModelWeights, train_cfg: TrainConfig,
               net_cfg: NetworkConfig = None, training=True, update_stats=True,
               frozen_candidates=None):
    """Total loss of one scene; returns (loss, report, candidates).

    frozen_candidates pins the discrete mutual-NN selection so repeated
    forward evaluations (finite differences) see a smooth function.
    """
    net_cfg = net_cfg or weights.config
    m, n = len(pair.keypoints), len(pair.points)
    f_p, f_q = forward(pair, weights, net_cfg, training=training, update_stats=update_stats)
    cost = cost_matrix(f_p, f_q)
    scores = augment_dustbins(cost, weights.param("ot/alpha_bin"))
    plan = sinkhorn(scores)
    l_match = matching_loss(plan, pair.gt_matches, m, n)

    candidates = frozen_candidates if frozen_candidates is not None else mutual_nn(plan)
    l_rej = None
    if len(candidates) > 0:
        gt_set = pair.gt_matches.pair_set()
        labels = np.array([1.0 if (i, j) in gt_set else 0.0 for i, j, _ in candidates])
        batch = candidate_batch(pair, candidates)
        probs = classify(batch, weights)
        l_rej = rejection_loss(probs, labels, balance_weights(labels))

    total = ad.scale(l_match, train_cfg.match_weight)
    if l_rej is not None:
        total = ad.add(total, ad.scale(l_rej, train_cfg.rejection_weight))
    report = LossReport(
        matching_loss=l_match.item(),
        rejection_loss=l_rej.item() if l_rej is not None else 0.0,
        total=total.item(),
        n_matching=len(pair.gt_matches) + (m - len(set(pair.gt_matches.indices_2d())))
        + (n - len(set(pair.gt_matches.indices_3d()))),
        n_candidates=len(candidates),
    )
    return total, report, candidates


def train(dataset, cfg: TrainConfig, net_cfg: NetworkConfig = None,
          weights: ModelWeights = None):
    """Mini-batch training over scene pairs; bit-reproducible given seed.

    Returns (weights, reports, epoch_seconds) with one LossReport per epoch
    holding epoch-mean losses and summed counts.
    """
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    net_cfg = net_cfg or NetworkConfig()
    if weights is None:
        weights = ModelWeights.initialize(net_cfg, seed=cfg.seed)
    state = AdamState.for_weights(weights)
    rng = np.random.default_rng(cfg.seed)
    reports = []
    epoch_seconds = []

    for _epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(dataset))
        sums = np.zeros(3)
        n_m_total = 0
        n_c_total = 0
        for start in range(0, len(order), cfg.batch_size):
            batch_idx = order[start:start + cfg.batch_size]
            weights.zero_grad()
            for sid in batch_idx:
                pair = dataset[int(sid)]
                with Tape() as tape:
                    loss, rep, _ = scene_loss(pair, weights, cfg, net_cfg,
                                              training=True, update_stats=True)
                    tape.backward(loss)
                sums += (rep.matching_loss, rep.rejection_loss, rep.total)
                n_m_total += rep.n_matching
                n_c_total += rep.n_candidates
            inv = 1.0 / len(batch_idx)
            grads = {k: p.grad * inv for k, p in weights.params.items()}
            adam_step(weights, grads, state, cfg)
        mean = sums / len(dataset)
        reports.append(LossReport(mean[0], mean[1], mean[2], n_m_total, n_c_total))
        epoch_seconds.append(time.perf_counter() - t0)
    return weights, reports, epoch_seconds


# --- finite-difference verification --------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    flat_index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    entries: list
    max_rel_error: float
    worst: GradCheckEntry
    per_module: dict


FD_STEP = 1e-5
FD_FLOOR = 1e-8


def _module_of(name: str) -> str:
    head = name.split("/")[0]
    if head.startswith("blk"):
        return f"{head}/{name.split('/')[1]}"
    return head


def _fallback_candidates(pair):
    """Deterministic candidate set so the classifier path is always exercised.

    A fresh model's transport plan rarely beats the dustbins, which would
    leave the rejection branch untested; mix ground-truth pairs with wrong
    pairs so both cross-entropy terms carry gradient.
    """
    from .geometry import CorrespondenceSet

    n = len(pair.points)
    pairs = [(i, j, 0.5) for i, j, _ in list(pair.gt_matches)[:8]]
    for i, j, _ in list(pair.gt_matches)[:4]:
        pairs.append((i, (j + 3) % n, 0.5))
    if len(pairs) < 2:
        pairs = [(0, 0, 0.5), (1, 1, 0.5), (2, 3, 0.5)]
    seen = set()
    unique = []
    for i, j, s in pairs:
        if (i, j) not in seen:
            seen.add((i, j))
            unique.append((i, j, s))
    return CorrespondenceSet(unique)


def grad_check(pair, weights: ModelWeights, sample: int = 64,
               train_cfg: TrainConfig = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences on sampled entries.

    Sampling is stratified over parameter groups (encoder, max path, annular,
    angle, fusion, cross attention, dustbin score, classifier) so every
    distinct backward rule is exercised.
    """
    train_cfg = train_cfg or TrainConfig()
    rng = np.random.default_rng(seed)

    _, _, candidates = scene_loss(pair, weights, train_cfg,
                                  training=True, update_stats=False)
    if len(candidates) == 0:
        candidates = _fallback_candidates(pair)

    weights.zero_grad()
    with Tape() as tape:
        loss, _, _ = scene_loss(pair, weights, train_cfg, training=True,
                                update_stats=False, frozen_candidates=candidates)
        tape.backward(loss)
    analytic = {k: p.grad.copy() for k, p in weights.params.items()}

    groups: dict = {}
    for name, p in weights.params.items():
        groups.setdefault(_module_of(name), []).append(name)
    picks = []
    group_names = sorted(groups)
    per_group = max(1, sample // len(group_names))
    for gname in group_names:
        names = groups[gname]
        for _ in range(per_group):
            name = names[int(rng.integers(len(names)))]
            size = weights.params[name].data.size
            picks.append((name, int(rng.integers(size))))
    while len(picks) < sample:
        name = list(weights.params)[int(rng.integers(len(weights.params)))]
        picks.append((name, int(rng.integers(weights.params[name].data.size))))

    def loss_at() -> float:
        total, _, _ = scene_loss(pair, weights, train_cfg, training=True,
                                 update_stats=False, frozen_candidates=candidates)
        return total.item()

    def measure(p, idx, step) -> float:
        orig = p.data.flat[idx]
        p.data.flat[idx] = orig + step
        f_plus = loss_at()
        p.data.flat[idx] = orig - step
        f_minus = loss_at()
        p.data.flat[idx] = orig
        return (f_plus - f_minus) / (2.0 * step)

    entries = []
    for name, idx in picks:
        p = weights.params[name]
        a = float(analytic[name].flat[idx])
        best_numeric, best_rel = None, None
        # A ReLU/argmax kink inside the difference interval fakes a mismatch;
        # shrinking the step moves the kink outside, while a genuinely wrong
        # backward rule disagrees at every step.
        for step in (FD_STEP, FD_STEP / 10.0, FD_STEP / 100.0):
            numeric = measure(p, idx, step)
            diff = abs(a - numeric)
            rel = 0.0 if diff <= FD_FLOOR else diff / max(abs(a), abs(numeric))
            if best_rel is None or rel < best_rel:
                best_numeric, best_rel = numeric, rel
            if best_rel < 1e-4:
                break
        entries.append(GradCheckEntry(name, idx, a, best_numeric, best_rel))

    worst = max(entries, key=lambda e: e.rel_error)
    per_module: dict = {}
    for e in entries:
        key = _module_of(e.name)
        if key not in per_module or e.rel_error > per_module[key]:
            per_module[key] = e.rel_error
    return GradCheckReport(entries, worst.rel_error, worst, per_module)
