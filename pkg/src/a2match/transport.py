"""Initial assignment: dustbin-augmented entropic optimal transport plus a
mutual nearest neighbor check on the transport plan.

Marginals follow the unbalanced-dustbin convention: every real point on
either side supplies unit mass, and each dustbin absorbs up to the other
side's count, so total mass balances at M + N. Each real row/column of the
plan therefore sums to one and its entries read as probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, constant
from .geometry import CorrespondenceSet

SINKHORN_ITERS = 100


@dataclass
class ScoreMatrix:
    values: Tensor            # (M+1, N+1); last row/column are the dustbins
    log_domain: bool


def cost_matrix(f_p: Tensor, f_q: Tensor) -> Tensor:
    """L2 feature distances, (M, N)."""
    return ad.pairwise_l2(f_p, f_q)


def augment_dustbins(cost: Tensor, alpha_bin: Tensor) -> ScoreMatrix:
    """Scores: negated cost in the main block, alpha_bin on the dustbins."""
    cost = cost if isinstance(cost, Tensor) else constant(cost)
    alpha_bin = alpha_bin if isinstance(alpha_bin, Tensor) else constant(alpha_bin)
    m, n = cost.shape
    a = float(alpha_bin.data)
    out_data = np.full((m + 1, n + 1), a, dtype=np.float64)
    out_data[:m, :n] = -cost.data

    tape = ad._active_tape()
    req = tape is not None and (cost.requires_grad or alpha_bin.requires_grad)
    out = Tensor._wrap(out_data, req)
    if req:
        def bw():
            g = out.grad
            if g is None:
                return
            if cost.requires_grad:
                ad._accum(cost, -g[:m, :n])
            if alpha_bin.requires_grad:
                ad._accum(alpha_bin, np.array(g[m, :].sum() + g[:m, n].sum()))
        tape.record(bw)
    return ScoreMatrix(out, log_domain=True)


def _marginals(m: int, n: int):
    log_a = np.zeros(m + 1)
    log_a[m] = np.log(n)
    log_b = np.zeros(n + 1)
    log_b[n] = np.log(m)
    return log_a, log_b


def sinkhorn(s: ScoreMatrix, iters: int = SINKHORN_ITERS) -> ScoreMatrix:
    """Log-domain Sinkhorn; returns the exponentiated transport plan.

    Differentiable through every iteration. The column update runs last, so
    column marginals are exact and row marginals converge with the iterates.
    """
    if iters < 1:
        raise ValueError(f"need at least one iteration, got {iters}")
    if not s.log_domain:
        raise ValueError("sinkhorn expects a log-domain score matrix")
    scores = s.values
    m1, n1 = scores.shape
    m, n = m1 - 1, n1 - 1
    log_a, log_b = _marginals(m, n)
    la, lb = constant(log_a), constant(log_b)
    u = constant(np.zeros(m1))
    v = constant(np.zeros(n1))
    for _ in range(iters):
        u = ad.sub(la, ad.logsumexp_over_axis(ad.add(scores, v), axis=1))
        v = ad.sub(lb, ad.logsumexp_over_axis(ad.add(scores, ad.reshape(u, (m1, 1))), axis=0))
    log_plan = ad.add(ad.add(scores, ad.reshape(u, (m1, 1))), v)
    return ScoreMatrix(ad.exp(log_plan), log_domain=False)


def marginal_residuals(plan: ScoreMatrix):
    """Max |row/column sum - prescribed marginal| of a transport plan."""
    p = plan.values.data
    m, n = p.shape[0] - 1, p.shape[1] - 1
    log_a, log_b = _marginals(m, n)
    row = np.abs(p.sum(axis=1) - np.exp(log_a)).max()
    col = np.abs(p.sum(axis=0) - np.exp(log_b)).max()
    return float(row), float(col)


def sinkhorn_residual_trajectory(scores: np.ndarray, iters: int):
    """Max marginal residual after each full iteration (test instrumentation)."""
    m1, n1 = scores.shape
    m, n = m1 - 1, n1 - 1
    log_a, log_b = _marginals(m, n)
    u = np.zeros(m1)
    v = np.zeros(n1)
    out = []
    for _ in range(iters):
        u = log_a - _lse(scores + v[None, :], axis=1)
        v = log_b - _lse(scores + u[:, None], axis=0)
        p = np.exp(scores + u[:, None] + v[None, :])
        row = np.abs(p.sum(axis=1) - np.exp(log_a)).max()
        col = np.abs(p.sum(axis=0) - np.exp(log_b)).max()
        out.append(max(float(row), float(col)))
    return out


def _lse(x, axis):
    m = x.max(axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.exp(x - m).sum(axis=axis))


def mutual_nn(plan: ScoreMatrix) -> CorrespondenceSet:
    """Pairs that are mutually each other's best match and beat both dustbins."""
    if plan.log_domain:
        raise ValueError("mutual_nn expects an exponentiated plan")
    p = plan.values.data
    m, n = p.shape[0] - 1, p.shape[1] - 1
    main = p[:m, :n]
    if m == 0 or n == 0:
        return CorrespondenceSet([])
    row_best = main.argmax(axis=1)
    col_best = main.argmax(axis=0)
    pairs = []
    for i in range(m):
        j = int(row_best[i])
        if int(col_best[j]) != i:
            continue
        val = main[i, j]
        if val > p[i, n] and val > p[m, j]:
            pairs.append((i, j, float(val)))
    return CorrespondenceSet(pairs)
