"""Neuron permutations of dense networks and post-hoc alignment.

A permutation ``pi_l`` of hidden layer l maps new neuron i to old neuron
``pi_l[i]``: applying it sets ``W_l <- W_l[pi_l][:, pi_{l-1}]`` and
``b_l <- b_l[pi_l]``. Input and output layers are never permuted.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .connect import interpolate
from .errors import ConfigError, DimensionError
from .nncore import Dataset, LayeredNetwork, evaluate, unflatten


@dataclass(frozen=True)
class NetworkPermutation:
    perms: tuple

    def __post_init__(self):
        perms = tuple(np.asarray(p, dtype=np.int64) for p in self.perms)
        for k, p in enumerate(perms):
            if p.ndim != 1 or not np.array_equal(np.sort(p), np.arange(p.size)):
                raise ConfigError(f"hidden layer {k + 1}: not a bijection on 0..{p.size - 1}")
            p.setflags(write=False)
        object.__setattr__(self, "perms", perms)

    @classmethod
    def identity(cls, spec) -> "NetworkPermutation":
        return cls(tuple(np.arange(w) for w in spec.hidden_widths))

    @classmethod
    def random(cls, spec, seed) -> "NetworkPermutation":
        rng = np.random.default_rng(seed)
        return cls(tuple(rng.permutation(w) for w in spec.hidden_widths))

    @property
    def widths(self):
        return tuple(p.size for p in self.perms)

    def inverse(self) -> "NetworkPermutation":
        return NetworkPermutation(tuple(np.argsort(p) for p in self.perms))

    def then(self, other: "NetworkPermutation") -> "NetworkPermutation":
        """Permutation equivalent to applying ``self`` and then ``other``."""
        if self.widths != other.widths:
            raise DimensionError("cannot compose permutations of different widths")
        return NetworkPermutation(tuple(p[q] for p, q in zip(self.perms, other.perms)))

    def is_identity(self) -> bool:
        return all(np.array_equal(p, np.arange(p.size)) for p in self.perms)

    def __eq__(self, other):
        return isinstance(other, NetworkPermutation) and self.widths == other.widths and all(
            np.array_equal(p, q) for p, q in zip(self.perms, other.perms))

    __hash__ = None

    def to_json(self) -> str:
        return json.dumps([p.tolist() for p in self.perms])

    @classmethod
    def from_json(cls, text: str) -> "NetworkPermutation":
        return cls(tuple(json.loads(text)))


def apply_permutation(net: LayeredNetwork, p: NetworkPermutation) -> LayeredNetwork:
    hidden = net.spec.hidden_widths
    if p.widths != tuple(hidden):
        raise DimensionError(f"permutation widths {p.widths} != hidden widths {hidden}")
    out = net.copy()
    L = net.spec.num_layers
    prev = None
    for l in range(L):
        rows = p.perms[l] if l < L - 1 else None
        W = net.weights[l]
        if rows is not None:
            W = W[rows]
        if prev is not None:
            W = W[:, prev]
        out.weights[l][...] = W
        out.biases[l][...] = net.biases[l] if rows is None else net.biases[l][rows]
        prev = rows
    return out


# ---------------------------------------------------------------- assignment


def _hungarian(cost):
    """Shortest augmenting path with potentials. Returns (row -> col, u, v)."""
    n = cost.shape[0]
    INF = math.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assign = np.empty(n, dtype=np.int64)
    assign[p[1:] - 1] = np.arange(n)
    return assign, u[1:], v[1:]


def _lexicographic(assign, tight):
    """Smallest (lexicographic) perfect matching of the tight-edge graph, starting
    from the perfect matching ``assign``."""
    n = assign.size
    assign = assign.copy()
    owner = np.empty(n, dtype=np.int64)
    owner[assign] = np.arange(n)
    for i in range(n):
        for j in np.flatnonzero(tight[i]):
            if j >= assign[i]:
                break
            if owner[j] < i:
                continue
            path = _alternating_path(owner[j], assign[i], j, i, tight, assign, owner)
            if path is None:
                continue
            # rotate: i takes j, rows along the path shift one column down the chain
            for row, col in path:
                assign[row] = col
                owner[col] = row
            assign[i] = j
            owner[j] = i
            break
    return assign


def _alternating_path(start_row, target_col, banned_col, fixed_upto, tight, assign, owner):
    """BFS from ``start_row`` over tight edges to ``target_col`` using only rows
    > ``fixed_upto``. Returns the list of (row, new column) reassignments."""
    parent = {start_row: None}
    queue = [start_row]
    for row in queue:
        for col in np.flatnonzero(tight[row]):
            if col == banned_col or col == assign[row]:
                continue
            if col == target_col:
                moves = [(row, col)]
                r = row
                while parent[r] is not None:
                    prev_row = parent[r]
                    moves.append((prev_row, assign[r]))
                    r = prev_row
                return moves
            nxt = owner[col]
            if nxt <= fixed_upto or nxt in parent:
                continue
            parent[nxt] = row
            queue.append(nxt)
    return None


def solve_assignment(cost, maximize: bool = False):
    """Exact linear assignment. Returns ``(perm, objective)`` where row i is
    assigned column ``perm[i]``; among optimal answers the lexicographically
    smallest ``perm`` is returned."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise DimensionError(f"assignment needs a square matrix, got {cost.shape}")
    if not np.isfinite(cost).all():
        raise ConfigError("assignment cost contains non-finite entries")
    n = cost.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    work = -cost if maximize else cost
    work = work - work.min()
    assign, u, v = _hungarian(work)
    reduced = work - u[:, None] - v[None, :]
    tol = 1e-10 * max(1.0, float(np.abs(work).max()))
    assign = _lexicographic(assign, reduced <= tol)
    return assign, float(cost[np.arange(n), assign].sum())


# ---------------------------------------------------------------- weight matching


class WeightMatchResult(NamedTuple):
    perm: NetworkPermutation
    sweeps_used: int
    objective_trace: list
    converged: bool


def matching_objective(net_a: LayeredNetwork, net_b: LayeredNetwork) -> float:
    """Sum over layers of <W_a, W_b> + <b_a, b_b>."""
    return float(net_a.params @ net_b.params)


def _layer_similarity(a, b, perms, l):
    """S[i, j] = gain of sending neuron j of b to slot i of a in hidden layer l (0-based)."""
    Wa, Wb = a.weights[l], b.weights[l]
    if l > 0:
        Wb = Wb[:, perms[l - 1]]
    S = Wa @ Wb.T
    S += np.outer(a.biases[l], b.biases[l])
    Wa_next, Wb_next = a.weights[l + 1], b.weights[l + 1]
    if l + 1 < len(perms):
        Wb_next = Wb_next[perms[l + 1]]
    S += Wa_next.T @ Wb_next
    return S


def weight_match(net_a: LayeredNetwork, net_b: LayeredNetwork, max_sweeps: int = 100,
                 seed: int = 0) -> WeightMatchResult:
    """Coordinate descent over hidden layers (random order per sweep) maximizing
    the weight-alignment objective; returns the permutation to apply to ``net_b``.

    A layer update is accepted only if it strictly increases the objective;
    the run stops after the first sweep without any accepted update.
    """
    if net_a.spec.layer_widths != net_b.spec.layer_widths:
        raise DimensionError("weight matching needs identical architectures")
    hidden = net_a.spec.hidden_widths
    perms = [np.arange(w) for w in hidden]
    rng = np.random.default_rng(seed)
    trace = [matching_objective(net_a, net_b)]
    sweeps = 0
    converged = False
    while sweeps < max_sweeps:
        sweeps += 1
        changed = False
        for l in rng.permutation(len(hidden)):
            S = _layer_similarity(net_a, net_b, perms, l)
            new, _ = solve_assignment(S, maximize=True)
            rows = np.arange(S.shape[0])
            gain = S[rows, new].sum() - S[rows, perms[l]].sum()
            if gain > 1e-12 * max(1.0, np.abs(S).sum()):
                perms[l] = new
                changed = True
                aligned = apply_permutation(net_b, NetworkPermutation(tuple(perms)))
                trace.append(matching_objective(net_a, aligned))
        if not changed:
            converged = True
            break
    return WeightMatchResult(NetworkPermutation(tuple(perms)), sweeps, trace, converged)


# ---------------------------------------------------------------- simulated annealing


class AnnealResult(NamedTuple):
    perm: NetworkPermutation
    trace: list  # midpoint loss after each step, trace[0] is the starting loss
    accepted: int


def midpoint_loss(net_a, net_b, data, loss=None) -> float:
    mid = unflatten(net_a.spec, interpolate(net_a, net_b, 0.5))
    return evaluate(mid, data, loss).loss


def simulated_annealing_match(net_a: LayeredNetwork, net_b: LayeredNetwork, data: Dataset,
                              iters: int = 100, t0: float = 1.0, decay: float = 0.95,
                              seed: int = 0, loss: Optional[str] = None) -> AnnealResult:
    """Swap two neurons of one random hidden layer per step; keep the swap if
    the midpoint loss drops, otherwise with probability exp(-delta / t)."""
    if net_a.spec.layer_widths != net_b.spec.layer_widths:
        raise DimensionError("annealing needs identical architectures")
    if iters < 0 or t0 < 0 or not 0 < decay <= 1:
        raise ConfigError("need iters >= 0, t0 >= 0 and decay in (0, 1]")
    hidden = net_a.spec.hidden_widths
    perms = [np.arange(w) for w in hidden]
    rng = np.random.default_rng(seed)
    current = midpoint_loss(net_a, net_b, data, loss)
    trace = [current]
    accepted = 0
    t = t0
    candidates = [l for l, w in enumerate(hidden) if w >= 2]
    for _ in range(iters):
        if not candidates:
            trace.append(current)
            continue
        l = candidates[rng.integers(len(candidates))]
        i, j = rng.choice(hidden[l], size=2, replace=False)
        trial = [p.copy() for p in perms]
        trial[l][[i, j]] = trial[l][[j, i]]
        value = midpoint_loss(net_a, apply_permutation(net_b, NetworkPermutation(tuple(trial))),
                              data, loss)
        delta = value - current
        draw = rng.random()
        if delta < 0 or (t > 0 and draw < math.exp(-delta / t)):
            perms, current = trial, value
            accepted += 1
        trace.append(current)
        t *= decay
    return AnnealResult(NetworkPermutation(tuple(perms)), trace, accepted)
