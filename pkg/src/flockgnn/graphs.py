"""Sparse graph supports, graph signals and graph-filter evaluation.

A graph signal is a dense (N, F) float array: row i holds the feature
vector of node i. The support matrix is a sparse (N, N) operator whose
nonzero pattern follows the graph edges (plus optional self-loops).
Shifting a signal through the support aggregates neighbor values; a
graph filter is a polynomial in the shift with matrix-valued taps,
evaluated by repeated shifting so the cost stays proportional to the
edge count.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


class ShiftCounter:
    """Counts multiply-accumulate work done by graph shifts.

    Used by tests to certify that shifting never densifies: the count
    grows with the number of stored entries, not with N^2.
    """

    def __init__(self):
        self.macs = 0

    def reset(self):
        self.macs = 0


shift_counter = ShiftCounter()


class SupportMatrix:
    """Sparse N x N graph operator built from (row, col, weight) triplets."""

    def __init__(self, n_nodes, rows, cols, weights):
        if n_nodes <= 0:
            raise ValueError(f"n_nodes must be positive, got {n_nodes}")
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        weights = np.asarray(weights, dtype=np.float64)
        if not (rows.shape == cols.shape == weights.shape):
            raise ValueError("rows, cols and weights must have equal length")
        if rows.size and (rows.min() < 0 or rows.max() >= n_nodes
                          or cols.min() < 0 or cols.max() >= n_nodes):
            raise ValueError("triplet index out of range")
        if not np.all(np.isfinite(weights)):
            raise ValueError("support weights must be finite")
        keys = rows * n_nodes + cols
        if np.unique(keys).size != keys.size:
            raise ValueError("duplicate (row, col) triplets are not allowed")
        self.n_nodes = int(n_nodes)
        self._csr = sp.csr_matrix(
            (weights, (rows, cols)), shape=(n_nodes, n_nodes), dtype=np.float64
        )
        self._csr.sum_duplicates()

    @classmethod
    def from_dense(cls, mat):
        mat = np.asarray(mat, dtype=np.float64)
        n = mat.shape[0]
        if mat.shape != (n, n):
            raise ValueError(f"expected square matrix, got shape {mat.shape}")
        rows, cols = np.nonzero(mat)
        return cls(n, rows, cols, mat[rows, cols])

    @classmethod
    def identity(cls, n_nodes):
        idx = np.arange(n_nodes)
        return cls(n_nodes, idx, idx, np.ones(n_nodes))

    @classmethod
    def zeros(cls, n_nodes):
        return cls(n_nodes, [], [], [])

    @property
    def nnz(self):
        return self._csr.nnz

    def toarray(self):
        return self._csr.toarray()

    def triplets(self):
        coo = self._csr.tocoo()
        return coo.row, coo.col, coo.data

    def neighbors_in(self, node):
        """Nodes j with a stored entry (node, j), i.e. senders to `node`."""
        if not 0 <= node < self.n_nodes:
            raise IndexError(f"node {node} out of range [0, {self.n_nodes})")
        start, stop = self._csr.indptr[node], self._csr.indptr[node + 1]
        return self._csr.indices[start:stop]

    def transpose(self):
        coo = self._csr.tocoo()
        return SupportMatrix(self.n_nodes, coo.col, coo.row, coo.data)

    def __eq__(self, other):
        if not isinstance(other, SupportMatrix):
            return NotImplemented
        return (self.n_nodes == other.n_nodes
                and (self._csr != other._csr).nnz == 0)


def check_signal(x, n_nodes=None):
    """Validate a graph signal array, returning it as float64 (N, F)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"graph signal must be 2-D (N, F), got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("graph signal contains non-finite values")
    if n_nodes is not None and x.shape[0] != n_nodes:
        raise ValueError(
            f"signal has {x.shape[0]} rows but support has {n_nodes} nodes"
        )
    return x


def graph_shift(s: SupportMatrix, x):
    """One application of the support to a signal: each node aggregates
    weighted values from its stored in-neighbors."""
    x = check_signal(x, s.n_nodes)
    shift_counter.macs += s.nnz * x.shape[1]
    return s._csr @ x


@dataclass
class FilterTaps:
    """Matrix-valued taps of a graph filter of order K: taps[k] is (F, G)."""

    taps: list

    def __post_init__(self):
        if not self.taps:
            raise ValueError("need at least one tap (order 0)")
        taps = [np.asarray(t, dtype=np.float64) for t in self.taps]
        f, g = taps[0].shape
        for k, t in enumerate(taps):
            if t.ndim != 2 or t.shape != (f, g):
                raise ValueError(
                    f"tap {k} has shape {t.shape}, expected {(f, g)}"
                )
            if not np.all(np.isfinite(t)):
                raise ValueError(f"tap {k} contains non-finite values")
        self.taps = taps

    @property
    def order(self):
        return len(self.taps) - 1

    @property
    def n_in(self):
        return self.taps[0].shape[0]

    @property
    def n_out(self):
        return self.taps[0].shape[1]

    def copy(self):
        return FilterTaps([t.copy() for t in self.taps])

    def flat(self):
        return np.concatenate([t.ravel() for t in self.taps])


def shifted_stack(s: SupportMatrix, x, order):
    """[x, Sx, S^2 x, ..., S^K x] by iterated shifting."""
    x = check_signal(x, s.n_nodes)
    stack = [x]
    for _ in range(order):
        stack.append(graph_shift(s, stack[-1]))
    return stack


def apply_filter(s: SupportMatrix, x, taps: FilterTaps):
    """Graph convolution sum_k S^k X B_k, never forming dense powers of S."""
    x = check_signal(x, s.n_nodes)
    if x.shape[1] != taps.n_in:
        raise ValueError(
            f"signal has {x.shape[1]} features but taps expect {taps.n_in}"
        )
    stack = shifted_stack(s, x, taps.order)
    out = np.zeros((s.n_nodes, taps.n_out))
    for z, b in zip(stack, taps.taps):
        out += z @ b
    return out


class ShiftRegister:
    """Ring buffer of the last K+1 (support, signal) pairs, newest first.

    Index k holds the pair observed k steps ago. Used to evaluate filters
    on time-varying graphs with the communication-delay structure: the
    k-th tap acts on the signal from k steps ago, shifted through the k
    supports that existed while it propagated.
    """

    def __init__(self, order):
        if order < 0:
            raise ValueError("order must be non-negative")
        self.order = order
        self._buf = deque(maxlen=order + 1)

    def push(self, s: SupportMatrix, x):
        x = check_signal(x, s.n_nodes)
        self._buf.appendleft((s, x))

    def __len__(self):
        return len(self._buf)

    def __getitem__(self, k):
        return self._buf[k]

    @property
    def current(self):
        if not self._buf:
            raise ValueError("shift register is empty")
        return self._buf[0]

    def signals(self):
        return [x for _, x in self._buf]

    def supports(self):
        return [s for s, _ in self._buf]

    @classmethod
    def filled(cls, order, s, x):
        """Register holding K+1 copies of a static (support, signal) pair."""
        reg = cls(order)
        for _ in range(order + 1):
            reg.push(s, x)
        return reg


def delayed_shifted_stack(reg: ShiftRegister, order, slot=0):
    """Delayed analogue of shifted_stack, anchored at buffer position `slot`.

    Entry k is S[slot] S[slot+1] ... S[slot+k-1] applied to the signal at
    buffer position slot+k. Entries reaching past the recorded history are
    omitted (history before the first step is treated as absent).
    """
    if len(reg) == 0:
        raise ValueError("shift register is empty")
    if slot >= len(reg):
        raise IndexError("slot past end of register")
    stack = []
    for k in range(order + 1):
        if slot + k >= len(reg):
            break
        _, z = reg[slot + k]
        for j in range(slot + k - 1, slot - 1, -1):
            z = graph_shift(reg[j][0], z)
        stack.append(z)
    return stack


def apply_delayed_filter(reg: ShiftRegister, taps: FilterTaps, slot=0):
    """Graph convolution over a time-varying history (see ShiftRegister)."""
    stack = delayed_shifted_stack(reg, taps.order, slot)
    n = reg[slot][0].n_nodes
    out = np.zeros((n, taps.n_out))
    for z, b in zip(stack, taps.taps):
        out += z @ b
    return out


def k_hop_ball(s: SupportMatrix, node, k):
    """Nodes reachable from `node` in at most k hops along stored entries.

    Follows in-edges (row `node` lists the nodes it receives from), which
    is the information flow direction of repeated shifting.
    """
    seen = {int(node)}
    frontier = [int(node)]
    for _ in range(k):
        nxt = []
        for i in frontier:
            for j in s.neighbors_in(i):
                j = int(j)
                if j not in seen:
                    seen.add(j)
                    nxt.append(j)
        frontier = nxt
    return sorted(seen)


def per_node_filter_output(node, s: SupportMatrix, x, taps: FilterTaps):
    """Row `node` of apply_filter, computed from the K-hop ball only.

    Simulates the distributed implementation: the node sees just its
    K-hop neighborhood, yet reproduces the centralized value.
    """
    if not 0 <= node < s.n_nodes:
        raise IndexError(f"node {node} out of range [0, {s.n_nodes})")
    x = check_signal(x, s.n_nodes)
    ball = k_hop_ball(s, node, taps.order)
    index = {g: i for i, g in enumerate(ball)}
    rows, cols, w = s.triplets()
    mask = np.array([r in index and c in index for r, c in zip(rows, cols)],
                    dtype=bool)
    sub = SupportMatrix(
        len(ball),
        [index[r] for r in rows[mask]],
        [index[c] for c in cols[mask]],
        w[mask],
    )
    out = apply_filter(sub, x[ball], taps)
    return out[index[node]]


def save_support(path, s: SupportMatrix):
    """Edge-list text format: header `N E`, then one `i j w` line per entry."""
    rows, cols, w = s.triplets()
    with open(path, "w") as fh:
        fh.write(f"{s.n_nodes} {s.nnz}\n")
        for i, j, v in zip(rows, cols, w):
            fh.write(f"{i} {j} {float(v)!r}\n")


def load_support(path):
    with open(path) as fh:
        n, e = (int(tok) for tok in fh.readline().split())
        rows, cols, w = [], [], []
        for _ in range(e):
            i, j, v = fh.readline().split()
            rows.append(int(i))
            cols.append(int(j))
            w.append(float(v))
    return SupportMatrix(n, rows, cols, w)


def save_signal(path, x):
    np.savetxt(path, check_signal(x), delimiter=",")


def load_signal(path):
    x = np.loadtxt(path, delimiter=",", ndmin=2)
    return check_signal(x)
