"""Hybrid graph-filter / graph-network model with manual gradients.

The model combines two branches acting on the same graph signal:

* a linear branch: one bank of graph-filter taps (retrainable online), and
* a nonlinear branch: a cascade of graph filters with pointwise
  nonlinearities (trained offline, then frozen).

The branch outputs are mixed with scalar combination weights plus a
scalar offset, and fed through a per-node shared linear readout. Because
the readout is shared across nodes, the whole map stays local and
distributed, and is linear in the filter-bank taps when everything else
is held fixed.

Forward passes record a tape of intermediates; gradients for every
trainable tensor are computed from the tape by hand-written backprop and
certified against finite differences in the test suite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .graphs import (
    FilterTaps,
    ShiftRegister,
    SupportMatrix,
    check_signal,
    delayed_shifted_stack,
    graph_shift,
    shifted_stack,
)

TANH = "tanh"
RELU = "relu"


def _activate(name, z):
    if name == TANH:
        return np.tanh(z)
    if name == RELU:
        return np.maximum(z, 0.0)
    raise ValueError(f"unknown nonlinearity {name!r}")


def _activate_deriv(name, z, a):
    # a = activation(z), reused where cheaper
    if name == TANH:
        return 1.0 - a * a
    if name == RELU:
        return (z > 0.0).astype(np.float64)
    raise ValueError(f"unknown nonlinearity {name!r}")


@dataclass
class GnnParams:
    """Layered graph-filter taps with a pointwise nonlinearity.

    layers[l] holds the taps of layer l+1, mapping width F_l to F_{l+1}.
    """

    layers: list
    nonlinearity: str = TANH

    def __post_init__(self):
        if self.nonlinearity not in (TANH, RELU):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError(
                    f"layer widths do not chain: {a.n_out} -> {b.n_in}"
                )

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def n_in(self):
        return self.layers[0].n_in

    @property
    def n_out(self):
        return self.layers[-1].n_out

    def copy(self):
        return GnnParams([l.copy() for l in self.layers], self.nonlinearity)


@dataclass
class WideDeepParams:
    """All trainable tensors of the combined model."""

    deep: GnnParams
    wide: FilterTaps
    alpha_deep: float
    alpha_wide: float
    bias: float
    readout_w: np.ndarray  # (G, G_out), shared across nodes
    readout_b: np.ndarray  # (G_out,)

    def __post_init__(self):
        self.readout_w = np.asarray(self.readout_w, dtype=np.float64)
        self.readout_b = np.asarray(self.readout_b, dtype=np.float64)
        if self.deep.n_in != self.wide.n_in:
            raise ValueError("deep and wide input widths differ")
        if self.deep.n_out != self.wide.n_out:
            raise ValueError(
                f"branch output widths differ: deep {self.deep.n_out}, "
                f"wide {self.wide.n_out}"
            )
        if self.readout_w.shape[0] != self.wide.n_out:
            raise ValueError("readout input width does not match branches")
        if self.readout_b.shape != (self.readout_w.shape[1],):
            raise ValueError("readout bias shape mismatch")

    @property
    def n_in(self):
        return self.wide.n_in

    @property
    def n_out(self):
        return self.readout_w.shape[1]

    def copy(self):
        return WideDeepParams(
            self.deep.copy(), self.wide.copy(),
            float(self.alpha_deep), float(self.alpha_wide), float(self.bias),
            self.readout_w.copy(), self.readout_b.copy(),
        )

    def with_wide(self, wide: FilterTaps):
        """New snapshot sharing every tensor except the filter-bank taps."""
        out = WideDeepParams.__new__(WideDeepParams)
        out.deep = self.deep
        out.wide = wide
        out.alpha_deep = self.alpha_deep
        out.alpha_wide = self.alpha_wide
        out.bias = self.bias
        out.readout_w = self.readout_w
        out.readout_b = self.readout_b
        return out

    def to_dict(self):
        d = {}
        for l, taps in enumerate(self.deep.layers):
            for k, t in enumerate(taps.taps):
                d[f"deep.A.{l}.{k}"] = t
        for k, t in enumerate(self.wide.taps):
            d[f"wide.B.{k}"] = t
        d["alpha_deep"] = np.float64(self.alpha_deep)
        d["alpha_wide"] = np.float64(self.alpha_wide)
        d["bias"] = np.float64(self.bias)
        d["readout.w"] = self.readout_w
        d["readout.b"] = self.readout_b
        return d

    def replace_from_dict(self, d):
        """New params with tensors taken from a to_dict-shaped mapping."""
        deep = GnnParams(
            [FilterTaps([d[f"deep.A.{l}.{k}"] for k in range(taps.order + 1)])
             for l, taps in enumerate(self.deep.layers)],
            self.deep.nonlinearity,
        )
        wide = FilterTaps([d[f"wide.B.{k}"]
                           for k in range(self.wide.order + 1)])
        return WideDeepParams(
            deep, wide,
            float(d["alpha_deep"]), float(d["alpha_wide"]), float(d["bias"]),
            d["readout.w"], d["readout.b"],
        )


def init_params(rng, n_in, widths, wide_order, deep_order, n_out,
                nonlinearity=TANH):
    """Fresh model: tap entries uniform in +-1/sqrt(fan_in * (K + 1)).

    `widths` lists the deep hidden/output widths [F_1, ..., F_L]; the
    last entry must equal the shared branch output width G.
    """
    g = widths[-1]
    layers = []
    f_prev = n_in
    for f in widths:
        scale = 1.0 / np.sqrt(f_prev * (deep_order + 1))
        layers.append(FilterTaps([
            rng.uniform(-scale, scale, size=(f_prev, f))
            for _ in range(deep_order + 1)
        ]))
        f_prev = f
    wscale = 1.0 / np.sqrt(n_in * (wide_order + 1))
    wide = FilterTaps([
        rng.uniform(-wscale, wscale, size=(n_in, g))
        for _ in range(wide_order + 1)
    ])
    rscale = 1.0 / np.sqrt(g)
    readout_w = rng.uniform(-rscale, rscale, size=(g, n_out))
    readout_b = np.zeros(n_out)
    # the linear branch starts damped: joint training is unstable when the
    # unbounded branch dominates the early gradient signal
    return WideDeepParams(GnnParams(layers, nonlinearity), wide,
                          1.0, 0.2, 0.0, readout_w, readout_b)


@dataclass
class ForwardTape:
    """Intermediates of one forward pass, sufficient for exact backprop."""

    params: WideDeepParams
    supports: list            # slot-indexed, newest first
    layer_slots: list         # per layer: dict slot -> (stack, z, act)
    wide_stack: list
    deep_out: np.ndarray
    wide_out: np.ndarray
    combined: np.ndarray
    output: np.ndarray
    _supports_t: list = None

    def support_t(self, idx):
        if self._supports_t is None:
            self._supports_t = [None] * len(self.supports)
        if self._supports_t[idx] is None:
            self._supports_t[idx] = self.supports[idx].transpose()
        return self._supports_t[idx]


def _forward_over_history(supports, signals, p: WideDeepParams):
    """Shared core: forward over a slot-indexed (support, signal) history.

    Slot 0 is the current step. A single-slot history reduces every
    convolution to its order-0 term; a history of identical slots
    reproduces the static evaluation.
    """
    n_slots = len(supports)
    n = supports[0].n_nodes

    # Which slots of each layer's output feed the layers above slot 0.
    needed = [None] * (p.deep.n_layers + 1)
    needed[p.deep.n_layers] = {0}
    for l in range(p.deep.n_layers - 1, -1, -1):
        order = p.deep.layers[l].order
        req = set()
        for j in needed[l + 1]:
            for k in range(order + 1):
                if j + k < n_slots:
                    req.add(j + k)
        needed[l] = req

    def stack_at(slot, order, sigs):
        stack = []
        for k in range(order + 1):
            if slot + k >= n_slots:
                break
            z = sigs[slot + k]
            for m in range(slot + k - 1, slot - 1, -1):
                z = graph_shift(supports[m], z)
            stack.append(z)
        return stack

    layer_slots = []
    sigs = {j: signals[j] for j in needed[0] | {0}}
    for l, taps in enumerate(p.deep.layers):
        slots = {}
        new_sigs = {}
        for j in sorted(needed[l + 1]):
            stack = stack_at(j, taps.order, sigs)
            z = np.zeros((n, taps.n_out))
            for zz, a in zip(stack, taps.taps):
                z += zz @ a
            act = _activate(p.deep.nonlinearity, z)
            slots[j] = (stack, z, act)
            new_sigs[j] = act
        layer_slots.append(slots)
        sigs = new_sigs

    deep_out = layer_slots[-1][0][2] if layer_slots else signals[0]

    wide_stack = stack_at(0, p.wide.order, {j: signals[j]
                                            for j in range(n_slots)})
    wide_out = np.zeros((n, p.wide.n_out))
    for z, b in zip(wide_stack, p.wide.taps):
        wide_out += z @ b

    combined = p.alpha_deep * deep_out + p.alpha_wide * wide_out + p.bias
    output = combined @ p.readout_w + p.readout_b
    tape = ForwardTape(p, list(supports), layer_slots, wide_stack,
                       deep_out, wide_out, combined, output)
    return output, tape


def gnn_forward(s: SupportMatrix, x, p: GnnParams):
    """Nonlinear branch alone on a static support; returns (signal, tape
    fragment) where the fragment is the per-layer (stack, z, act) list."""
    x = check_signal(x, s.n_nodes)
    sig = x
    slots = []
    for taps in p.layers:
        stack = shifted_stack(s, sig, taps.order)
        z = np.zeros((s.n_nodes, taps.n_out))
        for zz, a in zip(stack, taps.taps):
            z += zz @ a
        sig = _activate(p.nonlinearity, z)
        slots.append((stack, z, sig))
    return sig, slots


def wdgnn_forward(s: SupportMatrix, x, p: WideDeepParams):
    """Full model on a static support."""
    x = check_signal(x, s.n_nodes)
    if x.shape[1] != p.n_in:
        raise ValueError(
            f"signal has {x.shape[1]} features but model expects {p.n_in}"
        )
    deep_total = sum(taps.order for taps in p.deep.layers)
    depth = max(p.wide.order, deep_total) + 1
    return _forward_over_history([s] * depth, [x] * depth, p)


def wdgnn_forward_delayed(reg: ShiftRegister, p: WideDeepParams):
    """Full model over a time-varying history; terms older than the
    recorded history are dropped."""
    if len(reg) == 0:
        raise ValueError("shift register is empty")
    supports = reg.supports()
    signals = [check_signal(x, s.n_nodes)
               for s, x in zip(supports, reg.signals())]
    if signals[0].shape[1] != p.n_in:
        raise ValueError(
            f"signal has {signals[0].shape[1]} features but model "
            f"expects {p.n_in}"
        )
    return _forward_over_history(supports, signals, p)


def _zero_grads(p: WideDeepParams):
    g = {name: np.zeros_like(np.asarray(t, dtype=np.float64))
         for name, t in p.to_dict().items()}
    return g


def grad_all(tape: ForwardTape, upstream):
    """Gradients of a scalar loss wrt every tensor, given d(loss)/d(output)."""
    p = tape.params
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != tape.output.shape:
        raise ValueError(
            f"upstream shape {upstream.shape} does not match output "
            f"shape {tape.output.shape}"
        )
    g = _zero_grads(p)

    g["readout.w"] += tape.combined.T @ upstream
    g["readout.b"] += upstream.sum(axis=0)
    d_comb = upstream @ p.readout_w.T
    g["alpha_deep"] += np.sum(d_comb * tape.deep_out)
    g["alpha_wide"] += np.sum(d_comb * tape.wide_out)
    g["bias"] += d_comb.sum()

    d_wide = p.alpha_wide * d_comb
    for k, z in enumerate(tape.wide_stack):
        g[f"wide.B.{k}"] += z.T @ d_wide

    if p.deep.n_layers:
        d_act = {0: p.alpha_deep * d_comb}
        for l in range(p.deep.n_layers - 1, -1, -1):
            taps = p.deep.layers[l]
            d_below = {}
            for j, du in d_act.items():
                stack, z, act = tape.layer_slots[l][j]
                dz = du * _activate_deriv(p.deep.nonlinearity, z, act)
                for k, zz in enumerate(stack):
                    g[f"deep.A.{l}.{k}"] += zz.T @ dz
                    if l > 0:
                        back = dz @ taps.taps[k].T
                        for m in range(j, j + k):
                            back = graph_shift(tape.support_t(m), back)
                        if j + k in d_below:
                            d_below[j + k] += back
                        else:
                            d_below[j + k] = back
            d_act = d_below
    return g


def grad_wide_only(tape: ForwardTape, upstream):
    """Gradients for the filter-bank taps only, skipping all deep work."""
    p = tape.params
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != tape.output.shape:
        raise ValueError(
            f"upstream shape {upstream.shape} does not match output "
            f"shape {tape.output.shape}"
        )
    d_wide = p.alpha_wide * (upstream @ p.readout_w.T)
    g = {f"wide.B.{k}": np.zeros_like(t)
         for k, t in enumerate(p.wide.taps)}
    for k, z in enumerate(tape.wide_stack):
        g[f"wide.B.{k}"] += z.T @ d_wide
    return g


# checkpoint format: JSON with explicit shapes and flat row-major values,
# every float printed with 17 significant digits so reload is bit-exact

def _fmt(v):
    return "%.17g" % float(v)


def params_to_jsonable(p: WideDeepParams):
    tensors = {}
    for name, t in p.to_dict().items():
        arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
        tensors[name] = {
            "shape": list(np.asarray(t).shape),
            "values": [_fmt(v) for v in arr.ravel(order="C")],
        }
    return {
        "hyper": {
            "n_in": p.n_in,
            "widths": [taps.n_out for taps in p.deep.layers],
            "deep_order": [taps.order for taps in p.deep.layers],
            "wide_order": p.wide.order,
            "n_out": p.n_out,
            "nonlinearity": p.deep.nonlinearity,
        },
        "tensors": tensors,
    }


def params_from_jsonable(obj):
    hyper = obj["hyper"]
    tensors = obj["tensors"]

    def tensor(name):
        spec = tensors[name]
        arr = np.array([float(v) for v in spec["values"]], dtype=np.float64)
        return arr.reshape(spec["shape"], order="C")

    layers = []
    for l, order in enumerate(hyper["deep_order"]):
        layers.append(FilterTaps([tensor(f"deep.A.{l}.{k}")
                                  for k in range(order + 1)]))
    wide = FilterTaps([tensor(f"wide.B.{k}")
                       for k in range(hyper["wide_order"] + 1)])
    return WideDeepParams(
        GnnParams(layers, hyper["nonlinearity"]), wide,
        float(tensor("alpha_deep")), float(tensor("alpha_wide")),
        float(tensor("bias")),
        tensor("readout.w"), tensor("readout.b"),
    )


def save_checkpoint(path, p: WideDeepParams):
    with open(path, "w") as fh:
        json.dump(params_to_jsonable(p), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        return params_from_jsonable(json.load(fh))


def serialize_deep_part(p: WideDeepParams):
    """Canonical bytes of everything except the filter-bank taps.

    Used to certify that online retraining touches only the linear branch.
    """
    obj = params_to_jsonable(p)
    obj["tensors"] = {k: v for k, v in obj["tensors"].items()
                      if not k.startswith("wide.")}
    return json.dumps(obj, sort_keys=True).encode()
