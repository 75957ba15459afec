"""Robot-swarm flocking testbed.

Double-integrator point agents in the plane, a proximity communication
graph, the closed-form centralized consensus-plus-collision-avoidance
controller used as the imitation target, the local observation features
each agent can compute from its neighbors, and the velocity-variation
metrics that score a rollout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graphs import SupportMatrix, ShiftRegister

N_FEATURES = 6


@dataclass
class SwarmState:
    """Positions, velocities and applied accelerations at one time step."""

    pos: np.ndarray  # (N, 2) m
    vel: np.ndarray  # (N, 2) m/s
    acc: np.ndarray  # (N, 2) m/s^2, control applied at this step

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64)
        self.vel = np.asarray(self.vel, dtype=np.float64)
        self.acc = np.asarray(self.acc, dtype=np.float64)
        n = self.pos.shape[0]
        for name, a in (("pos", self.pos), ("vel", self.vel),
                        ("acc", self.acc)):
            if a.shape != (n, 2):
                raise ValueError(f"{name} must be (N, 2), got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def n_agents(self):
        return self.pos.shape[0]


@dataclass
class FlockingConfig:
    n_agents: int = 25
    comm_radius: float = 2.0
    init_speed: float = 3.0
    duration: float = 2.0
    dt: float = 0.01
    potential_cutoff: float = 1.0
    min_spacing: float = 0.1
    max_accel: float = 10.0
    placement_density: float = 1.0  # disc radius = density * sqrt(N)
    seed: int = 0

    def __post_init__(self):
        if self.comm_radius <= 0 or self.dt <= 0 or self.potential_cutoff <= 0:
            raise ValueError("comm_radius, dt and potential_cutoff must be > 0")
        steps = self.duration / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("dt must divide duration into integer steps")

    @property
    def n_steps(self):
        return int(round(self.duration / self.dt))


def clip_accel(u, u_max):
    return np.clip(u, -u_max, u_max)


def step_dynamics(state: SwarmState, u, dt):
    """Constant-acceleration integration over one sampling interval."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape != state.pos.shape:
        raise ValueError(f"control shape {u.shape} != state shape "
                         f"{state.pos.shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError("control contains non-finite values")
    pos = state.pos + state.vel * dt + 0.5 * u * dt * dt
    vel = state.vel + u * dt
    return SwarmState(pos, vel, u.copy())


def _pairwise_diff(pos):
    # diff[i, j] = p_i - p_j
    return pos[:, None, :] - pos[None, :, :]


def build_comm_graph(state: SwarmState, r):
    """Binary symmetric adjacency: edge iff 0 < distance <= r, no loops."""
    if r <= 0:
        raise ValueError("communication radius must be positive")
    diff = _pairwise_diff(state.pos)
    dist = np.linalg.norm(diff, axis=-1)
    off = ~np.eye(state.n_agents, dtype=bool)
    if np.any((dist == 0.0) & off):
        i, j = np.argwhere((dist == 0.0) & off)[0]
        raise ValueError(f"agents {i} and {j} are coincident")
    adj = (dist <= r) & off
    rows, cols = np.nonzero(adj)
    return SupportMatrix(state.n_agents, rows, cols,
                         np.ones(rows.size))


def potential(d, rho):
    """Repulsive pair potential of the squared distance, constant past rho."""
    d = np.asarray(d, dtype=np.float64)
    d2 = np.where(d <= rho, d * d, rho * rho)
    return 1.0 / d2 - np.log(d2)


def optimal_controller(state: SwarmState, rho, u_max=None):
    """Centralized consensus controller with collision avoidance.

    Every agent cancels its velocity mismatch against all agents and
    descends the pair potential; requires global knowledge, so it serves
    as the imitation target, not as a deployable policy.
    """
    n = state.n_agents
    diff = _pairwise_diff(state.pos)
    dist2 = np.sum(diff * diff, axis=-1)
    off = ~np.eye(n, dtype=bool)
    if np.any((dist2 == 0.0) & off):
        raise ValueError("coincident agents")

    vdiff = state.vel[:, None, :] - state.vel[None, :, :]
    u = -vdiff.sum(axis=1)

    # gradient of the pair potential wrt p_i; zero outside the cutoff
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = -2.0 / (dist2 * dist2) - 2.0 / dist2
    coef = np.where((dist2 <= rho * rho) & off, coef, 0.0)
    u -= np.einsum("ij,ijd->id", coef, diff)

    if u_max is not None:
        u = clip_accel(u, u_max)
    return u


def local_features(state: SwarmState, s: SupportMatrix):
    """Per-agent observation built from 1-hop neighbors only.

    Three stacked 2-vectors per agent: summed velocity mismatch, summed
    inverse-quartic position offsets, summed inverse-square position
    offsets. Isolated agents observe zeros.
    """
    n = state.n_agents
    feat = np.zeros((n, N_FEATURES))
    for i in range(n):
        nbrs = s.neighbors_in(i)
        if nbrs.size == 0:
            continue
        dp = state.pos[i] - state.pos[nbrs]
        d2 = np.sum(dp * dp, axis=1)
        if np.any(d2 == 0.0):
            raise ValueError(f"agent {i} coincides with a neighbor")
        feat[i, 0:2] = (state.vel[i] - state.vel[nbrs]).sum(axis=0)
        feat[i, 2:4] = (dp / d2[:, None] ** 2).sum(axis=0)
        feat[i, 4:6] = (dp / d2[:, None]).sum(axis=0)
    return feat


@dataclass
class Trajectory:
    """One rollout: states for t = 0..D, controls applied at t = 0..D-1."""

    states: list
    dt: float
    comm_radius: float
    _supports: list = field(default=None, repr=False)
    _features: list = field(default=None, repr=False)

    @property
    def n_steps(self):
        return len(self.states) - 1

    @property
    def n_agents(self):
        return self.states[0].n_agents

    def support_at(self, t):
        if self._supports is None:
            self._supports = [None] * len(self.states)
        if self._supports[t] is None:
            self._supports[t] = build_comm_graph(self.states[t],
                                                 self.comm_radius)
        return self._supports[t]

    def features_at(self, t):
        if self._features is None:
            self._features = [None] * len(self.states)
        if self._features[t] is None:
            self._features[t] = local_features(self.states[t],
                                               self.support_at(t))
        return self._features[t]

    def register_at(self, t, order):
        """Delayed observation history ending at step t (depth order+1)."""
        reg = ShiftRegister(order)
        for tau in range(max(0, t - order), t + 1):
            reg.push(self.support_at(tau), self.features_at(tau))
        return reg

    def targets_at(self, t):
        """Recorded control of step t (the imitation label)."""
        return self.states[t + 1].acc

    def velocities(self):
        return np.stack([st.vel for st in self.states])


def velocity_variation_total(traj: Trajectory):
    """Velocity variance around the swarm mean, summed over steps 1..D."""
    if traj.n_steps < 1:
        raise ValueError("empty trajectory")
    v = traj.velocities()[1:]  # (D, N, 2)
    dev = v - v.mean(axis=1, keepdims=True)
    return float(np.sum(dev * dev) / traj.n_agents)


def velocity_variation_final(traj: Trajectory):
    """Velocity variance around the swarm mean at the last step."""
    v = traj.states[-1].vel
    dev = v - v.mean(axis=0, keepdims=True)
    return float(np.sum(dev * dev) / traj.n_agents)


def step_velocity_variation(state: SwarmState):
    dev = state.vel - state.vel.mean(axis=0, keepdims=True)
    return float(np.sum(dev * dev) / state.n_agents)


def instantaneous_loss_centralized(state: SwarmState, u, dt):
    """Predicted next-step velocity variance over the whole swarm.

    The variance at the current step does not depend on the control, so
    the loss looks one Euler step ahead; this makes it a convex quadratic
    in the control with an explicit gradient.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape != state.vel.shape:
        raise ValueError(f"control shape {u.shape} != state shape "
                         f"{state.vel.shape}")
    n = state.n_agents
    v_next = state.vel + u * dt
    dev = v_next - v_next.mean(axis=0, keepdims=True)
    loss = float(np.sum(dev * dev) / n)
    grad = (2.0 * dt / n) * dev
    return loss, grad


def instantaneous_loss_local(node, state: SwarmState, u, s: SupportMatrix,
                             dt):
    """Predicted next-step velocity variance over {node} + its neighbors.

    Gradient rows are nonzero only on that closed neighborhood.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape != state.vel.shape:
        raise ValueError(f"control shape {u.shape} != state shape "
                         f"{state.vel.shape}")
    members = np.concatenate(([node], s.neighbors_in(node)))
    m = members.size
    grad = np.zeros_like(u)
    if m == 1:
        return 0.0, grad
    v_next = state.vel[members] + u[members] * dt
    dev = v_next - v_next.mean(axis=0, keepdims=True)
    loss = float(np.sum(dev * dev) / m)
    grad[members] = (2.0 * dt / m) * dev
    return loss, grad


def place_agents(rng, cfg: FlockingConfig):
    """Uniform rejection sampling in a disc of radius density*sqrt(N),
    enforcing the minimum pairwise spacing."""
    radius = cfg.placement_density * np.sqrt(cfg.n_agents)
    pos = np.empty((cfg.n_agents, 2))
    count = 0
    attempts = 0
    while count < cfg.n_agents:
        attempts += 1
        if attempts > 100000:
            raise RuntimeError("could not place agents at the requested "
                               "spacing; lower n_agents or min_spacing")
        cand = rng.uniform(-radius, radius, size=2)
        if cand @ cand > radius * radius:
            continue
        if count and np.min(np.linalg.norm(pos[:count] - cand, axis=1)) \
                < cfg.min_spacing:
            continue
        pos[count] = cand
        count += 1
    return pos


def initial_state(rng, cfg: FlockingConfig):
    pos = place_agents(rng, cfg)
    vel = rng.uniform(-cfg.init_speed, cfg.init_speed,
                      size=(cfg.n_agents, 2))
    return SwarmState(pos, vel, np.zeros_like(pos))


def rollout(controller, state0: SwarmState, cfg: FlockingConfig):
    """Run `controller(t, state) -> u` for D steps from state0.

    Controls are clipped to the configured bound before integration.
    """
    states = [state0]
    state = state0
    for t in range(cfg.n_steps):
        u = clip_accel(controller(t, state), cfg.max_accel)
        state = step_dynamics(state, u, cfg.dt)
        states.append(state)
    return Trajectory(states, cfg.dt, cfg.comm_radius)


def rollout_optimal(state0: SwarmState, cfg: FlockingConfig):
    return rollout(
        lambda t, st: optimal_controller(st, cfg.potential_cutoff),
        state0, cfg,
    )


def generate_trajectory(seed_seq, cfg: FlockingConfig):
    rng = np.random.default_rng(seed_seq)
    return rollout_optimal(initial_state(rng, cfg), cfg)


# --- trajectory persistence: one CSV per rollout ---

TRAJ_HEADER = "t,agent,px,py,vx,vy,ux,uy"


def save_trajectory(path, traj: Trajectory):
    with open(path, "w") as fh:
        fh.write(TRAJ_HEADER + "\n")
        for t, st in enumerate(traj.states):
            for i in range(st.n_agents):
                fh.write("%d,%d,%r,%r,%r,%r,%r,%r\n" % (
                    t, i, float(st.pos[i, 0]), float(st.pos[i, 1]),
                    float(st.vel[i, 0]), float(st.vel[i, 1]),
                    float(st.acc[i, 0]), float(st.acc[i, 1])))


def load_trajectory(path, dt, comm_radius):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    steps = int(data[:, 0].max())
    n = int(data[:, 1].max()) + 1
    states = []
    for t in range(steps + 1):
        block = data[data[:, 0] == t]
        block = block[np.argsort(block[:, 1])]
        states.append(SwarmState(block[:, 2:4], block[:, 4:6],
                                 block[:, 6:8]))
    return Trajectory(states, dt, comm_radius)


def check_dynamics_consistency(traj: Trajectory, tol=1e-9):
    """Re-integrate the recorded controls and compare against the states."""
    for t in range(traj.n_steps):
        nxt = step_dynamics(traj.states[t], traj.states[t + 1].acc, traj.dt)
        err = max(np.abs(nxt.pos - traj.states[t + 1].pos).max(),
                  np.abs(nxt.vel - traj.states[t + 1].vel).max())
        if err > tol:
            return False
    return True
