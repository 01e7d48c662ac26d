"""Pure-numpy kernels: rollout forward, taped forward, and adjoint sweep.

Reference implementation for the compiled extension in ``_simcore``. Both
backends follow the exact same operation order (per-edge net coefficient,
interleaved i/j scatter, identical boundary branches) so their outputs agree
bitwise; the parity test in the suite keeps that honest.

Conventions shared by both backends:
  - per-edge net scalar coef = -(k * phi) - (d * s_axial), force = coef * n
  - degenerate edges (length < eps) exert zero force
  - integration: vhat = v + (F_spring/m + g) * dt; xhat = x + vhat * dt
  - boundary applied after integration, per anchor
  - status: -1 on success, else the 0-based index of the first step whose
    post-step state contains a non-finite component
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"


def _signed_power(ext: np.ndarray, p_k: float) -> tuple[np.ndarray, np.ndarray]:
    """sgn(e)|e|^p and its derivative p|e|^(p-1) (branch value 0 at e = 0)."""
    if p_k == 1.0:
        return ext, np.ones_like(ext)
    a = np.abs(ext)
    phi = np.sign(ext) * a**p_k
    with np.errstate(divide="ignore", invalid="ignore"):
        phip = np.where(a > 0.0, p_k * a ** (p_k - 1.0), 0.0)
    return phi, phip


def _edge_geometry(x, v, ei, ej, rest, eps, p_k):
    """Per-edge quantities reused by the forward pass and the adjoint."""
    dx = x[ei] - x[ej]
    ln = np.sqrt(dx[:, 0] ** 2 + dx[:, 1] ** 2 + dx[:, 2] ** 2)
    valid = ln >= eps
    inv = np.zeros_like(ln)
    inv[valid] = 1.0 / ln[valid]
    n = dx * inv[:, None]
    ext = ln - rest
    phi, phip = _signed_power(ext, p_k)
    dv = v[ei] - v[ej]
    s_ax = dv[:, 0] * n[:, 0] + dv[:, 1] * n[:, 1] + dv[:, 2] * n[:, 2]
    return dx, ln, inv, valid, n, ext, phi, phip, dv, s_ax


def spring_forces(x, v, ei, ej, rest, stiff, damp, eps, p_k, scatter_idx, n_anchors):
    # overflow here just means the integration is diverging; the caller's
    # isfinite check turns that into an explicit status
    with np.errstate(over="ignore", invalid="ignore"):
        _, _, _, valid, n, _, phi, _, _, s_ax = _edge_geometry(x, v, ei, ej, rest, eps, p_k)
        coef = -(stiff * phi) - (damp * s_ax)
        coef = np.where(valid, coef, 0.0)
        f_edge = coef[:, None] * n
    forces = np.zeros((n_anchors, 3))
    contrib = np.stack([f_edge, -f_edge], axis=1).reshape(-1, 3)
    np.add.at(forces, scatter_idx, contrib)
    return forces


def _apply_boundary(xhat, vhat, friction, ground):
    x_out = xhat.copy()
    v_out = vhat.copy()
    below = xhat[:, 1] < ground
    if np.any(below):
        x_out[below, 1] = ground
        vy = vhat[below, 1]
        sn = np.maximum(0.0, -vy)
        c = friction * sn
        vtx = vhat[below, 0]
        vtz = vhat[below, 2]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            vt_norm = np.sqrt(vtx**2 + vtz**2)
            stick = vt_norm <= c
            fac = 1.0 - c / vt_norm
            v_out[below, 0] = np.where(stick, 0.0, vtx * fac)
            v_out[below, 2] = np.where(stick, 0.0, vtz * fac)
        v_out[below, 1] = 0.0
    return x_out, v_out


def run_rollout(
    x0,
    v0,
    edges,
    rest,
    mass,
    stiff,
    damp,
    friction,
    gravity,
    dt,
    p_k,
    ground,
    eps,
    n_steps,
    record_every,
):
    """Integrate n_steps; record the state after every record_every-th step.

    Returns (xs, vs, status) with xs/vs of shape (n_steps // record_every,
    N, 3). status is -1 on success.
    """
    x = np.array(x0, dtype=np.float64)
    v = np.array(v0, dtype=np.float64)
    n = x.shape[0]
    ei = edges[:, 0]
    ej = edges[:, 1]
    scatter_idx = edges.reshape(-1)
    n_rec = n_steps // record_every
    xs = np.zeros((n_rec, n, 3))
    vs = np.zeros((n_rec, n, 3))
    rec = 0
    for s in range(n_steps):
        forces = spring_forces(x, v, ei, ej, rest, stiff, damp, eps, p_k, scatter_idx, n)
        acc = forces / mass[:, None] + gravity
        vhat = v + acc * dt
        xhat = x + vhat * dt
        x, v = _apply_boundary(xhat, vhat, friction, ground)
        if not (np.isfinite(x).all() and np.isfinite(v).all()):
            return xs, vs, s
        if (s + 1) % record_every == 0:
            xs[rec] = x
            vs[rec] = v
            rec += 1
    return xs, vs, -1


def run_rollout_taped(
    x0,
    v0,
    edges,
    rest,
    mass,
    stiff,
    damp,
    friction,
    gravity,
    dt,
    p_k,
    ground,
    eps,
    n_steps,
):
    """Like run_rollout but records the full per-substep tape.

    Returns (tape_x, tape_v, tape_vhat, tape_xhat, final_x, final_v, status).
    tape_x[s] / tape_v[s] hold the entry state of step s; tape_vhat / tape_xhat
    the pre-boundary integrator outputs of step s.
    """
    x = np.array(x0, dtype=np.float64)
    v = np.array(v0, dtype=np.float64)
    n = x.shape[0]
    ei = edges[:, 0]
    ej = edges[:, 1]
    scatter_idx = edges.reshape(-1)
    tape_x = np.zeros((n_steps, n, 3))
    tape_v = np.zeros((n_steps, n, 3))
    tape_vhat = np.zeros((n_steps, n, 3))
    tape_xhat = np.zeros((n_steps, n, 3))
    for s in range(n_steps):
        tape_x[s] = x
        tape_v[s] = v
        forces = spring_forces(x, v, ei, ej, rest, stiff, damp, eps, p_k, scatter_idx, n)
        acc = forces / mass[:, None] + gravity
        vhat = v + acc * dt
        xhat = x + vhat * dt
        tape_vhat[s] = vhat
        tape_xhat[s] = xhat
        x, v = _apply_boundary(xhat, vhat, friction, ground)
        if not (np.isfinite(x).all() and np.isfinite(v).all()):
            return tape_x, tape_v, tape_vhat, tape_xhat, x, v, s
    return tape_x, tape_v, tape_vhat, tape_xhat, x, v, -1


def adjoint_sweep(
    tape_x,
    tape_v,
    tape_vhat,
    tape_xhat,
    edges,
    rest,
    mass,
    stiff,
    damp,
    friction,
    dt,
    p_k,
    ground,
    eps,
    substeps,
    upstream,
    detach,
):
    """Reverse sweep over a recorded tape, accumulating shared-scalar grads.

    upstream[t] is dLoss/d(position) at the post-step state closing frame t
    (substep (t+1)*substeps - 1). With detach=True the adjoint is reset at
    each frame boundary so frame t's loss only sees frame t's substeps; with
    detach=False this is full backpropagation through time.

    Returns (g_mass, g_stiffness, g_damping, g_friction).
    """
    n_steps = tape_x.shape[0]
    n = tape_x.shape[1]
    n_frames = upstream.shape[0]
    if n_frames * substeps != n_steps:
        raise ValueError("tape length must equal n_frames * substeps")
    ei = edges[:, 0]
    ej = edges[:, 1]
    scatter_idx = edges.reshape(-1)

    adj_x = np.zeros((n, 3))
    adj_v = np.zeros((n, 3))
    g_m = 0.0
    g_k = 0.0
    g_d = 0.0
    g_f = 0.0

    for s in range(n_steps - 1, -1, -1):
        if (s + 1) % substeps == 0:
            t = (s + 1) // substeps - 1
            if detach:
                adj_x = upstream[t].copy()
                adj_v = np.zeros((n, 3))
            else:
                adj_x = adj_x + upstream[t]

        # --- boundary adjoint (branches fixed by the primal pass) ---
        xhat = tape_xhat[s]
        vhat = tape_vhat[s]
        below = xhat[:, 1] < ground
        adj_xhat = adj_x.copy()
        adj_vhat = adj_v.copy()
        if np.any(below):
            adj_xhat[below, 1] = 0.0
            vy = vhat[below, 1]
            sn = np.maximum(0.0, -vy)
            c = friction * sn
            vtx = vhat[below, 0]
            vtz = vhat[below, 2]
            vt_norm = np.sqrt(vtx**2 + vtz**2)
            stick = vt_norm <= c
            gx = adj_v[below, 0]
            gz = adj_v[below, 2]
            slip = ~stick
            inv_vt = np.zeros_like(vt_norm)
            inv_vt[slip] = 1.0 / vt_norm[slip]
            ux = vtx * inv_vt
            uz = vtz * inv_vt
            gdotu = gx * ux + gz * uz
            ratio = c * inv_vt
            a_vtx = np.where(slip, gx - ratio * gx + ratio * gdotu * ux, 0.0)
            a_vtz = np.where(slip, gz - ratio * gz + ratio * gdotu * uz, 0.0)
            adj_c = np.where(slip, -gdotu, 0.0)
            g_f += float(np.sum(adj_c * sn))
            adj_sn = adj_c * friction
            a_vy = np.where(vy < 0.0, -adj_sn, 0.0)
            adj_vhat[below, 0] = a_vtx
            adj_vhat[below, 1] = a_vy
            adj_vhat[below, 2] = a_vtz

        # --- integration adjoint ---
        x = tape_x[s]
        v = tape_v[s]
        adj_vhat_tot = adj_vhat + adj_xhat * dt
        adj_x_new = adj_xhat.copy()
        adj_v_new = adj_vhat_tot.copy()
        adj_acc = adj_vhat_tot * dt
        forces = spring_forces(x, v, ei, ej, rest, stiff, damp, eps, p_k, scatter_idx, n)
        g_m += float(
            np.sum(
                (adj_acc * forces).sum(axis=1) * (-1.0 / mass**2)
            )
        )
        adj_f_anchor = adj_acc / mass[:, None]

        # --- per-edge force adjoint ---
        _, ln, inv, valid, nrm, _, phi, phip, dv, s_ax = _edge_geometry(
            x, v, ei, ej, rest, eps, p_k
        )
        u = adj_f_anchor[ei] - adj_f_anchor[ej]
        ndotu = u[:, 0] * nrm[:, 0] + u[:, 1] * nrm[:, 1] + u[:, 2] * nrm[:, 2]
        ndotu = np.where(valid, ndotu, 0.0)
        g_k += float(np.sum(np.where(valid, -phi * ndotu, 0.0)))
        g_d += float(np.sum(np.where(valid, -s_ax * ndotu, 0.0)))

        wv = np.where(valid, -(damp * ndotu), 0.0)
        v_contrib = wv[:, None] * nrm
        contrib_v = np.stack([v_contrib, -v_contrib], axis=1).reshape(-1, 3)
        np.add.at(adj_v_new, scatter_idx, contrib_v)

        coef = -(stiff * phi) - (damp * s_ax)
        proj_u = (u - ndotu[:, None] * nrm) * inv[:, None]
        proj_dv = (dv - s_ax[:, None] * nrm) * inv[:, None]
        tx = (
            coef[:, None] * proj_u
            + (-(stiff * phip) * ndotu)[:, None] * nrm
            + (-(damp * ndotu))[:, None] * proj_dv
        )
        tx = np.where(valid[:, None], tx, 0.0)
        contrib_x = np.stack([tx, -tx], axis=1).reshape(-1, 3)
        np.add.at(adj_x_new, scatter_idx, contrib_x)

        adj_x = adj_x_new
        adj_v = adj_v_new

    return g_m, g_k, g_d, g_f
