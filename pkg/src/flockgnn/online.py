"""Online phase: retraining the linear branch at deployment time.

Only the filter-bank taps move; the nonlinear branch, combination
weights and readout stay frozen, which keeps every per-step problem
convex. Two update modes are provided: a centralized gradient step on
the global instantaneous loss, and a decentralized round in which each
node averages its neighbors' taps and descends its own local loss.

A synthetic time-varying quadratic harness numerically certifies the
tracking bound: the distance to the drifting optimum stays below a
contracting transient plus a drift-dependent steady-state term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import flocking
from .flocking import FlockingConfig, SwarmState
from .graphs import FilterTaps, ShiftRegister, SupportMatrix
from .model import WideDeepParams, grad_wide_only, wdgnn_forward_delayed

CENTRALIZED = "centralized"
DECENTRALIZED = "decentralized"


@dataclass
class OnlineConfig:
    lr: float = 0.02
    steps: int = 1          # gradient steps per time instant
    mode: str = CENTRALIZED
    clip_norm: float = 1.0  # per-update tap-gradient bound, 0 disables

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("step size must be non-negative")
        if self.clip_norm < 0:
            raise ValueError("clip norm must be non-negative")
        if self.steps < 1:
            raise ValueError("need at least one gradient step")
        if self.mode not in (CENTRALIZED, DECENTRALIZED):
            raise ValueError(f"unknown mode {self.mode!r}")


def _taps_norm(taps: FilterTaps):
    return float(np.sqrt(sum(np.sum(t * t) for t in taps.taps)))


def _clip_tap_grads(grads, max_norm):
    """Joint 2-norm cap over a list of tap gradients; 0 disables."""
    if max_norm <= 0:
        return grads
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return [g * scale for g in grads]


def centralized_step(params: WideDeepParams, reg: ShiftRegister, loss_fn,
                     lr, clip_norm=0.0):
    """One gradient step on the filter-bank taps only.

    loss_fn maps the model output to (scalar loss, d loss / d output).
    Every tensor except the taps is returned untouched (same objects).
    """
    out, tape = wdgnn_forward_delayed(reg, params)
    loss, upstream = loss_fn(out)
    grads = grad_wide_only(tape, upstream)
    tap_grads = []
    for k in range(params.wide.order + 1):
        g = grads[f"wide.B.{k}"]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in tap {k}")
        tap_grads.append(g)
    tap_grads = _clip_tap_grads(tap_grads, clip_norm)
    new_taps = [t - lr * g for t, g in zip(params.wide.taps, tap_grads)]
    return params.with_wide(FilterTaps(new_taps)), loss


class NodeParamSet:
    """Per-node copies of the filter-bank taps."""

    def __init__(self, taps_list):
        if not taps_list:
            raise ValueError("need at least one node")
        shape = [(t.shape) for t in taps_list[0].taps]
        for taps in taps_list:
            if [(t.shape) for t in taps.taps] != shape:
                raise ValueError("all node copies must share tap shapes")
        self.taps_list = list(taps_list)

    @classmethod
    def replicate(cls, taps: FilterTaps, n):
        return cls([taps.copy() for _ in range(n)])

    def __len__(self):
        return len(self.taps_list)

    def __getitem__(self, i):
        return self.taps_list[i]

    def flat(self):
        return np.stack([taps.flat() for taps in self.taps_list])

    def disagreement(self):
        """Largest pairwise distance between node copies."""
        flat = self.flat()
        # diameter of the point set equals max over coordinate-wise extremes
        # only for 1-D; compute pairwise norms directly (N is small)
        d = flat[:, None, :] - flat[None, :, :]
        return float(np.sqrt(np.max(np.sum(d * d, axis=-1))))

    def mean_taps(self):
        taps0 = self.taps_list[0]
        out = []
        for k in range(taps0.order + 1):
            out.append(np.mean([taps.taps[k] for taps in self.taps_list],
                               axis=0))
        return FilterTaps(out)


def decentralized_step(node_params: NodeParamSet, s: SupportMatrix,
                       local_grad, lr):
    """Synchronous consensus round: every node averages its 1-hop
    neighborhood's taps (current graph, pre-step snapshot) and descends
    its own local gradient.

    local_grad(i) must return a gradient list matching the tap shapes,
    evaluated at node i's pre-step taps.
    """
    n = len(node_params)
    if s.n_nodes != n:
        raise ValueError(f"graph has {s.n_nodes} nodes, parameter set has {n}")
    new = []
    for i in range(n):
        nbrs = s.neighbors_in(i)
        members = np.concatenate(([i], nbrs)).astype(int)
        taps = []
        for k in range(node_params[0].order + 1):
            avg = np.mean([node_params[j].taps[k] for j in members], axis=0)
            taps.append(avg)
        if lr != 0.0:
            g = local_grad(i)
            for k, gk in enumerate(g):
                if not np.all(np.isfinite(gk)):
                    raise FloatingPointError(
                        f"non-finite local gradient at node {i}, tap {k}"
                    )
                taps[k] = taps[k] - lr * gk
        new.append(FilterTaps(taps))
    return NodeParamSet(new)


def _wide_stacks(reg: ShiftRegister, params: WideDeepParams):
    """Forward once for the frozen tensors; the per-node outputs then only
    differ through the (linear) tap term."""
    out, tape = wdgnn_forward_delayed(reg, params)
    common = (params.alpha_deep * tape.deep_out + params.bias) \
        @ params.readout_w + params.readout_b
    return tape.wide_stack, common


def node_output(stacks, common, params: WideDeepParams, taps: FilterTaps):
    wide = np.zeros((common.shape[0], taps.n_out))
    for z, b in zip(stacks, taps.taps):
        wide += z @ b
    return common + params.alpha_wide * (wide @ params.readout_w)


def _node_wide_grad(stacks, params: WideDeepParams, upstream, order):
    d_wide = params.alpha_wide * (upstream @ params.readout_w.T)
    g = []
    for k in range(order + 1):
        if k < len(stacks):
            g.append(stacks[k].T @ d_wide)
        else:
            g.append(np.zeros_like(params.wide.taps[k]))
    return g


@dataclass
class OnlineRunResult:
    trajectory: flocking.Trajectory
    rows: list                   # per-step dicts
    variation_total: float
    variation_final: float
    final_params: WideDeepParams
    node_params: NodeParamSet | None


def run_online_phase(initial: WideDeepParams, state0: SwarmState,
                     env_cfg: FlockingConfig, cfg: OnlineConfig):
    """Closed-loop rollout with per-step retraining of the taps.

    Each step: observe the graph and features, compute the control,
    apply it, then perform the configured update(s) against the
    instantaneous next-step velocity-variance loss.
    """
    depth = max(initial.wide.order,
                sum(t.order for t in initial.deep.layers))
    reg = ShiftRegister(depth)
    params = initial
    n = state0.n_agents
    node_params = None
    if cfg.mode == DECENTRALIZED:
        node_params = NodeParamSet.replicate(initial.wide, n)

    state = state0
    states = [state0]
    rows = []
    for t in range(env_cfg.n_steps):
        s = flocking.build_comm_graph(state, env_cfg.comm_radius)
        x = flocking.local_features(state, s)
        reg.push(s, x)

        if cfg.mode == CENTRALIZED:
            out, tape = wdgnn_forward_delayed(reg, params)
            u = out
            loss, upstream = flocking.instantaneous_loss_centralized(
                state, out, env_cfg.dt)
            step_params = params
            for _ in range(cfg.steps):
                step_params, _ = centralized_step(
                    step_params, reg,
                    lambda o: flocking.instantaneous_loss_centralized(
                        state, o, env_cfg.dt)[:2],
                    cfg.lr, cfg.clip_norm)
            params = step_params
            disagreement = 0.0
            taps_norm = _taps_norm(params.wide)
        else:
            stacks, common = _wide_stacks(reg, params)
            outs = [node_output(stacks, common, params, node_params[i])
                    for i in range(n)]
            u = np.stack([outs[i][i] for i in range(n)])
            loss = 0.0
            for i in range(n):
                li, _ = flocking.instantaneous_loss_local(
                    i, state, outs[i], s, env_cfg.dt)
                loss += li
            order = params.wide.order
            for _ in range(cfg.steps):
                snapshot = node_params

                def local_grad(i):
                    oi = node_output(stacks, common, params, snapshot[i])
                    _, dui = flocking.instantaneous_loss_local(
                        i, state, oi, s, env_cfg.dt)
                    g = _node_wide_grad(stacks, params, dui, order)
                    return _clip_tap_grads(g, cfg.clip_norm)

                node_params = decentralized_step(snapshot, s, local_grad,
                                                 cfg.lr)
            disagreement = node_params.disagreement()
            taps_norm = _taps_norm(node_params.mean_taps())

        if not np.all(np.isfinite(u)):
            raise FloatingPointError(f"non-finite control at step {t}")
        state = flocking.step_dynamics(
            state, flocking.clip_accel(u, env_cfg.max_accel), env_cfg.dt)
        if not np.all(np.isfinite(state.pos)):
            raise FloatingPointError(f"environment diverged at step {t}")
        states.append(state)
        rows.append({
            "t": t,
            "loss": loss,
            "taps_norm": taps_norm,
            "disagreement": disagreement,
            "velocity_variation": flocking.step_velocity_variation(state),
        })

    traj = flocking.Trajectory(states, env_cfg.dt, env_cfg.comm_radius)
    return OnlineRunResult(
        traj, rows,
        flocking.velocity_variation_total(traj),
        flocking.velocity_variation_final(traj),
        params, node_params,
    )


# --- synthetic time-varying convex verification harness ---

@dataclass
class TimeVaryingQuadratic:
    """J_t(b) = 1/2 (b - b*_t)^T H_t (b - b*_t) with drifting optimum.

    Exposes exact optima, per-step curvature extremes and the drift
    bound, so the tracking bound can be evaluated in closed form.
    """

    optima: np.ndarray      # (T+1, d)
    hessians: np.ndarray    # (T, d, d)
    curv_min: np.ndarray    # (T,)
    curv_max: np.ndarray    # (T,)
    drift_bound: float
    b0: np.ndarray

    def __post_init__(self):
        drift = np.linalg.norm(np.diff(self.optima, axis=0), axis=1)
        if drift.size and drift.max() > self.drift_bound + 1e-12:
            raise ValueError(
                "generated optimum drifts faster than the stated bound"
            )

    @property
    def n_steps(self):
        return self.hessians.shape[0]

    def grad(self, t, b):
        return self.hessians[t] @ (b - self.optima[t])


def make_rotating_problem(rng, dim, steps, curv_min, curv_max, drift):
    """Random strongly convex quadratics with a rotating optimum whose
    per-step displacement is exactly `drift`."""
    if curv_min <= 0 or curv_max < curv_min:
        raise ValueError("need 0 < curv_min <= curv_max")
    hessians = np.empty((steps, dim, dim))
    cmin = np.empty(steps)
    cmax = np.empty(steps)
    for t in range(steps):
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        eigs = rng.uniform(curv_min, curv_max, size=dim)
        eigs[0], eigs[-1] = curv_min, curv_max  # pin the stated extremes
        hessians[t] = (q * eigs) @ q.T
        cmin[t], cmax[t] = curv_min, curv_max
    optima = np.empty((steps + 1, dim))
    optima[0] = rng.standard_normal(dim)
    for t in range(steps):
        direction = rng.standard_normal(dim)
        direction /= np.linalg.norm(direction)
        optima[t + 1] = optima[t] + drift * direction
    b0 = optima[0] + rng.standard_normal(dim)
    return TimeVaryingQuadratic(optima, hessians, cmin, cmax, drift, b0)


@dataclass
class TrackingBoundReport:
    errors: np.ndarray
    bounds: np.ndarray
    rates: np.ndarray
    rate_max: float
    violations: int
    slack: float

    @property
    def ok(self):
        return self.violations == 0

    @property
    def final_error(self):
        return float(self.errors[-1])

    def steady_state_limit(self):
        if self.rate_max >= 1.0:
            return float("inf")
        return self.bounds[-1] if len(self.bounds) else 0.0


def verify_tracking_bound(problem: TimeVaryingQuadratic, gamma,
                          slack=1e-9):
    """Run constant-step gradient descent on the drifting quadratic and
    compare the recorded optimality gap against its theoretical envelope:

        err_t <= (prod of the first t rates) * err_0
                 + (1 - rate_max^t) / (1 - rate_max) * drift_bound

    where rate_t = max(|1 - gamma * curv_max_t|, |1 - gamma * curv_min_t|).
    """
    rates = np.maximum(np.abs(1.0 - gamma * problem.curv_max),
                       np.abs(1.0 - gamma * problem.curv_min))
    b = problem.b0.copy()
    t_steps = problem.n_steps
    errors = np.empty(t_steps + 1)
    bounds = np.empty(t_steps + 1)
    errors[0] = np.linalg.norm(b - problem.optima[0])
    bounds[0] = errors[0]
    prod = 1.0
    m_hat = 0.0
    for t in range(t_steps):
        b = b - gamma * problem.grad(t, b)
        errors[t + 1] = np.linalg.norm(b - problem.optima[t + 1])
        prod *= rates[t]
        m_hat = max(m_hat, rates[t])
        if m_hat < 1.0:
            geom = (1.0 - m_hat ** (t + 1)) / (1.0 - m_hat)
        else:
            geom = float(t + 1)
        bounds[t + 1] = prod * errors[0] + geom * problem.drift_bound
    violations = int(np.sum(errors > bounds + slack))
    return TrackingBoundReport(errors, bounds, rates, float(np.max(rates)),
                               violations, slack)
