"""Forward spring-mass dynamics.

Forces follow a generalized Hooke's law with a signed-power extension term
plus axial damping; integration is semi-implicit Euler; ground contact is an
inelastic normal response with a Coulomb tangential rule. Springs are
undirected and forces are applied equal-and-opposite per edge, so linear
momentum is conserved when gravity and contact are absent.
"""

from __future__ import annotations

import numpy as np

from . import _core
from .core import PhysicalAttributes, SimConfig, SpringMassState, SpringTopology

# Length floor guarding the spring-axis singularity; coincident anchors
# exert zero force instead of producing NaN.
LENGTH_EPS = 1e-8


class IntegrationDivergence(RuntimeError):
    """Raised when a state component becomes non-finite during integration."""

    def __init__(self, step_index: int, frame_index: int | None = None):
        self.step_index = step_index
        self.frame_index = frame_index
        at = f"step {step_index}"
        if frame_index is not None:
            at += f" (frame {frame_index})"
        super().__init__(f"integration diverged: non-finite state at {at}")


def spring_force(x_i, x_j, rest_length: float, stiffness: float, p_k: float = 1.0,
                 eps: float = LENGTH_EPS) -> np.ndarray:
    """Force on anchor i from the spring (i, j).

    Returns -k * sgn(e)|e|^p_k * n where e is the extension beyond the rest
    length and n points from j to i. Zero when the anchors are within eps.
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    d = x_i - x_j
    ln = float(np.sqrt(d @ d))
    if ln < eps:
        return np.zeros(3)
    n = d / ln
    ext = ln - rest_length
    if p_k == 1.0:
        phi = ext
    else:
        phi = np.sign(ext) * abs(ext) ** p_k
    return -stiffness * phi * n


def damping_force(x_i, x_j, v_i, v_j, damping: float, eps: float = LENGTH_EPS) -> np.ndarray:
    """Axial damping: -d * ((v_i - v_j) . n) * n.

    Only the relative velocity projected onto the spring axis is damped;
    perpendicular motion passes through. Zero within eps of coincidence.
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    d = x_i - x_j
    ln = float(np.sqrt(d @ d))
    if ln < eps:
        return np.zeros(3)
    n = d / ln
    rel = np.asarray(v_i, dtype=np.float64) - np.asarray(v_j, dtype=np.float64)
    return -damping * float(rel @ n) * n


def accumulate_forces(
    state: SpringMassState,
    topology: SpringTopology,
    attrs: PhysicalAttributes,
    config: SimConfig,
) -> np.ndarray:
    """Net force per anchor: spring + damping over incident edges, plus gravity.

    Each edge contributes equal-and-opposite forces to its endpoints.
    """
    n = state.n_anchors
    if topology.n_edges and int(topology.edges.max()) >= n:
        raise ValueError(
            f"topology references anchor {int(topology.edges.max())} "
            f"but the state has only {n} anchors"
        )
    mass = attrs.mass_per_anchor(n)
    stiff = attrs.stiffness_per_spring(topology.n_edges)
    damp = attrs.damping_per_spring(topology.n_edges)
    forces = np.zeros((n, 3))
    if topology.n_edges:
        ei = topology.edges[:, 0]
        ej = topology.edges[:, 1]
        forces = _core.py_backend.spring_forces(
            state.positions,
            state.velocities,
            ei,
            ej,
            topology.rest_lengths,
            stiff,
            damp,
            LENGTH_EPS,
            config.spring_exponent,
            topology.edges.reshape(-1),
            n,
        )
    forces = forces + mass[:, None] * config.gravity
    return forces


def boundary(position, velocity, friction: float, ground_height: float):
    """Ground contact for one anchor: clamp, kill normal speed, Coulomb rule.

    Above ground the inputs pass through unchanged. On contact the incoming
    normal speed s_n feeds the friction budget f*s_n: tangential velocity is
    zeroed when it fits inside the budget, otherwise reduced along its own
    direction.
    """
    p = np.asarray(position, dtype=np.float64).copy()
    v = np.asarray(velocity, dtype=np.float64).copy()
    if p[1] >= ground_height:
        return p, v
    p[1] = ground_height
    s_n = max(0.0, -v[1])
    v[1] = 0.0
    vt = np.array([v[0], 0.0, v[2]])
    vt_norm = float(np.sqrt(vt[0] ** 2 + vt[2] ** 2))
    budget = friction * s_n
    if vt_norm <= budget:
        v[0] = 0.0
        v[2] = 0.0
    else:
        fac = 1.0 - budget / vt_norm
        v[0] *= fac
        v[2] *= fac
    return p, v


def _kernel_args(state, topology, attrs, config):
    n = state.n_anchors
    return dict(
        x0=state.positions,
        v0=state.velocities,
        edges=topology.edges
        if topology.n_edges
        else np.zeros((0, 2), dtype=np.int64),
        rest=topology.rest_lengths,
        mass=attrs.mass_per_anchor(n),
        stiff=attrs.stiffness_per_spring(topology.n_edges),
        damp=attrs.damping_per_spring(topology.n_edges),
        friction=attrs.friction,
        gravity=np.asarray(config.gravity, dtype=np.float64),
        dt=config.dt,
        p_k=config.spring_exponent,
        ground=config.ground_height,
        eps=LENGTH_EPS,
    )


def step(
    state: SpringMassState,
    topology: SpringTopology,
    attrs: PhysicalAttributes,
    config: SimConfig,
) -> SpringMassState:
    """One semi-implicit Euler step followed by boundary enforcement."""
    xs, vs, status = _core.run_rollout(
        **_kernel_args(state, topology, attrs, config), n_steps=1, record_every=1
    )
    if status >= 0:
        raise IntegrationDivergence(state.time_index)
    return SpringMassState(xs[0], vs[0], state.time_index + 1)


def rollout(
    initial: SpringMassState,
    topology: SpringTopology,
    attrs: PhysicalAttributes,
    config: SimConfig,
    frames: int,
    substeps: int | None = None,
) -> list[SpringMassState]:
    """Simulate frames * substeps steps; frame t is the state after
    (t+1)*substeps steps. Deterministic in its inputs."""
    if frames < 1:
        raise ValueError("frames must be >= 1")
    if substeps is None:
        substeps = config.substeps_per_frame
    xs, vs, status = _core.run_rollout(
        **_kernel_args(initial, topology, attrs, config),
        n_steps=frames * substeps,
        record_every=substeps,
    )
    if status >= 0:
        raise IntegrationDivergence(status, frame_index=status // substeps)
    return [
        SpringMassState(xs[t], vs[t], initial.time_index + (t + 1) * substeps)
        for t in range(frames)
    ]


def rollout_positions(
    initial: SpringMassState,
    topology: SpringTopology,
    attrs: PhysicalAttributes,
    config: SimConfig,
    frames: int,
    substeps: int | None = None,
) -> np.ndarray:
    """rollout() returning just the (frames, N, 3) position array."""
    if frames < 1:
        raise ValueError("frames must be >= 1")
    if substeps is None:
        substeps = config.substeps_per_frame
    xs, _, status = _core.run_rollout(
        **_kernel_args(initial, topology, attrs, config),
        n_steps=frames * substeps,
        record_every=substeps,
    )
    if status >= 0:
        raise IntegrationDivergence(status, frame_index=status // substeps)
    return xs
