"""CTC negative log-likelihood, best-path decoding and a brute-force oracle.

Lattices are (T, V+1) log-probability matrices whose last column is the blank.
"""

from __future__ import annotations

import itertools
import math

import numba
import numpy as np

from . import diffgraph as dg
from .exceptions import InfeasibleTargetError, InstanceTooLargeError, ShapeError

NEG_INF = -np.inf


def min_frames(target) -> int:
    """Fewest frames that can emit ``target``: one per token plus a blank per adjacent repeat."""
    t = list(target)
    return len(t) + sum(1 for a, b in zip(t, t[1:]) if a == b)


def _check_target(target, blank: int) -> np.ndarray:
    labels = np.asarray(list(target), dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= blank):
        raise ValueError(f"target tokens must lie in [0, {blank}); blank is {blank}")
    return labels


@numba.njit(cache=True)
def _lse2(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@numba.njit(cache=True)
def _forward_backward(logp, ext):
    T = logp.shape[0]
    S = ext.shape[0]
    alpha = np.full((T, S), -np.inf)
    beta = np.full((T, S), -np.inf)

    alpha[0, 0] = logp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            a = alpha[t - 1, s]
            if s >= 1:
                a = _lse2(a, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != ext[s - 2]:
                a = _lse2(a, alpha[t - 1, s - 2])
            if a != -np.inf:
                alpha[t, s] = a + logp[t, ext[s]]

    log_total = alpha[T - 1, S - 1]
    if S > 1:
        log_total = _lse2(log_total, alpha[T - 1, S - 2])

    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        for s in range(S):
            b = beta[t + 1, s] + logp[t + 1, ext[s]]
            if s + 1 < S:
                b = _lse2(b, beta[t + 1, s + 1] + logp[t + 1, ext[s + 1]])
            if s + 2 < S and ext[s + 2] != ext[s]:
                b = _lse2(b, beta[t + 1, s + 2] + logp[t + 1, ext[s + 2]])
            beta[t, s] = b

    occupancy = np.zeros(logp.shape)
    if log_total != -np.inf:
        for t in range(T):
            for s in range(S):
                v = alpha[t, s] + beta[t, s]
                if v != -np.inf:
                    occupancy[t, ext[s]] += math.exp(v - log_total)
    return log_total, occupancy


def extended_labels(labels: np.ndarray, blank: int) -> np.ndarray:
    ext = np.full(2 * labels.size + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


def ctc_loss(lattice, target) -> dg.Node:
    """-log P(target | lattice) as a differentiable scalar node.

    The gradient with respect to each log-probability entry is minus the
    posterior occupancy of that (frame, symbol) pair.
    """
    node = lattice if isinstance(lattice, dg.Node) else dg.constant(lattice)
    if node.value.ndim != 2 or node.shape[1] < 2:
        raise ShapeError(f"lattice must be (T, V+1) with V >= 1, got {node.shape}")
    T, cols = node.shape
    blank = cols - 1
    labels = _check_target(target, blank)
    need = min_frames(labels)
    if T < need:
        raise InfeasibleTargetError(f"target needs at least {need} frames, lattice has {T}")
    logp = np.ascontiguousarray(node.value)
    log_total, occupancy = _forward_backward(logp, extended_labels(labels, blank))
    return dg.Node(-log_total, (node,), "ctc", lambda g: (-g * occupancy,))


def greedy_decode(lattice) -> tuple[int, ...]:
    """Per-frame argmax, collapse repeats, drop blanks."""
    values = lattice.value if isinstance(lattice, dg.Node) else np.asarray(lattice)
    blank = values.shape[1] - 1
    best = values.argmax(axis=1)
    out = []
    prev = -1
    for k in best:
        k = int(k)
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return tuple(out)


def collapse(path, blank: int) -> tuple[int, ...]:
    out = []
    prev = -1
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return tuple(out)


def brute_force_ctc(lattice, target, max_paths: int = 10**6) -> float:
    """Exact -log sum over every frame path collapsing to ``target``.

    Returns +inf when no path collapses to the target.
    """
    values = lattice.value if isinstance(lattice, dg.Node) else np.asarray(lattice, dtype=np.float64)
    T, cols = values.shape
    if cols**T > max_paths:
        raise InstanceTooLargeError(f"{cols}^{T} paths exceeds the budget of {max_paths}")
    blank = cols - 1
    goal = tuple(int(t) for t in target)
    logs = [
        float(sum(values[t, k] for t, k in enumerate(path)))
        for path in itertools.product(range(cols), repeat=T)
        if collapse(path, blank) == goal
    ]
    if not logs:
        return math.inf
    m = max(logs)
    return -(m + math.log(sum(math.exp(v - m) for v in logs)))
