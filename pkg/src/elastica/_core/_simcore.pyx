# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, language_level=3
"""Compiled rollout/adjoint kernels.

Mirrors py_backend.py operation for operation: identical edge iteration
order, the same net-coefficient force expression, and the same boundary
branches, so forward trajectories match the numpy backend bitwise (scalar
gradient reductions may differ in the last bit because numpy sums
pairwise).
"""

import numpy as np

from libc.math cimport fabs, isfinite, pow, sqrt
from libc.stdint cimport int64_t

BACKEND_NAME = "cython"


cdef inline double _phi(double ext, double p_k) noexcept nogil:
    if p_k == 1.0:
        return ext
    if ext > 0.0:
        return pow(ext, p_k)
    if ext < 0.0:
        return -pow(-ext, p_k)
    return 0.0


cdef inline double _phip(double ext, double p_k) noexcept nogil:
    cdef double a
    if p_k == 1.0:
        return 1.0
    a = fabs(ext)
    if a > 0.0:
        return p_k * pow(a, p_k - 1.0)
    return 0.0


cdef int _forward_steps(
    double[:, ::1] x,
    double[:, ::1] v,
    const int64_t[:, ::1] edges,
    const double[::1] rest,
    const double[::1] mass,
    const double[::1] stiff,
    const double[::1] damp,
    double friction,
    const double[::1] grav,
    double dt,
    double p_k,
    double ground,
    double eps,
    int n_steps,
    int record_every,
    double[:, :, ::1] xs,
    double[:, :, ::1] vs,
    double[:, ::1] forces,
    bint taped,
    double[:, :, ::1] tape_x,
    double[:, :, ::1] tape_v,
    double[:, :, ::1] tape_vhat,
    double[:, :, ::1] tape_xhat,
) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t n_edges = edges.shape[0]
    cdef Py_ssize_t s, e, i, j, c
    cdef int rec = 0
    cdef double dx0, dx1, dx2, ln, inv, n0, n1, n2, ext, phi
    cdef double dv0, dv1, dv2, sax, coef, f0, f1, f2
    cdef double acc, vh, xh, vy, sn, budget, vtx, vtz, vtn, fac
    cdef bint ok

    for s in range(n_steps):
        if taped:
            for i in range(n):
                for c in range(3):
                    tape_x[s, i, c] = x[i, c]
                    tape_v[s, i, c] = v[i, c]
        for i in range(n):
            forces[i, 0] = 0.0
            forces[i, 1] = 0.0
            forces[i, 2] = 0.0
        for e in range(n_edges):
            i = edges[e, 0]
            j = edges[e, 1]
            dx0 = x[i, 0] - x[j, 0]
            dx1 = x[i, 1] - x[j, 1]
            dx2 = x[i, 2] - x[j, 2]
            ln = sqrt(dx0 * dx0 + dx1 * dx1 + dx2 * dx2)
            if ln < eps:
                continue
            inv = 1.0 / ln
            n0 = dx0 * inv
            n1 = dx1 * inv
            n2 = dx2 * inv
            ext = ln - rest[e]
            phi = _phi(ext, p_k)
            dv0 = v[i, 0] - v[j, 0]
            dv1 = v[i, 1] - v[j, 1]
            dv2 = v[i, 2] - v[j, 2]
            sax = dv0 * n0 + dv1 * n1 + dv2 * n2
            coef = -(stiff[e] * phi) - (damp[e] * sax)
            f0 = coef * n0
            f1 = coef * n1
            f2 = coef * n2
            forces[i, 0] += f0
            forces[i, 1] += f1
            forces[i, 2] += f2
            forces[j, 0] -= f0
            forces[j, 1] -= f1
            forces[j, 2] -= f2
        for i in range(n):
            for c in range(3):
                acc = forces[i, c] / mass[i] + grav[c]
                vh = v[i, c] + acc * dt
                xh = x[i, c] + vh * dt
                if taped:
                    tape_vhat[s, i, c] = vh
                    tape_xhat[s, i, c] = xh
                x[i, c] = xh
                v[i, c] = vh
            # boundary enforcement on the just-integrated state
            if x[i, 1] < ground:
                x[i, 1] = ground
                vy = v[i, 1]
                sn = -vy if -vy > 0.0 else 0.0
                budget = friction * sn
                vtx = v[i, 0]
                vtz = v[i, 2]
                vtn = sqrt(vtx * vtx + vtz * vtz)
                if vtn <= budget:
                    v[i, 0] = 0.0
                    v[i, 2] = 0.0
                else:
                    fac = 1.0 - budget / vtn
                    v[i, 0] = vtx * fac
                    v[i, 2] = vtz * fac
                v[i, 1] = 0.0
        ok = True
        for i in range(n):
            for c in range(3):
                if not isfinite(x[i, c]) or not isfinite(v[i, c]):
                    ok = False
                    break
            if not ok:
                break
        if not ok:
            return <int> s
        if record_every > 0 and (s + 1) % record_every == 0:
            for i in range(n):
                for c in range(3):
                    xs[rec, i, c] = x[i, c]
                    vs[rec, i, c] = v[i, c]
            rec += 1
    return -1


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
    x = np.array(x0, dtype=np.float64)
    v = np.array(v0, dtype=np.float64)
    n = x.shape[0]
    n_rec = n_steps // record_every
    xs = np.zeros((n_rec, n, 3))
    vs = np.zeros((n_rec, n, 3))
    forces = np.zeros((n, 3))
    dummy = np.zeros((1, 1, 3))
    status = _forward_steps(
        x,
        v,
        np.ascontiguousarray(edges, dtype=np.int64),
        np.ascontiguousarray(rest, dtype=np.float64),
        np.ascontiguousarray(mass, dtype=np.float64),
        np.ascontiguousarray(stiff, dtype=np.float64),
        np.ascontiguousarray(damp, dtype=np.float64),
        friction,
        np.ascontiguousarray(gravity, dtype=np.float64),
        dt,
        p_k,
        ground,
        eps,
        n_steps,
        record_every,
        xs,
        vs,
        forces,
        False,
        dummy,
        dummy,
        dummy,
        dummy,
    )
    return xs, vs, status


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
    x = np.array(x0, dtype=np.float64)
    v = np.array(v0, dtype=np.float64)
    n = x.shape[0]
    tape_x = np.zeros((n_steps, n, 3))
    tape_v = np.zeros((n_steps, n, 3))
    tape_vhat = np.zeros((n_steps, n, 3))
    tape_xhat = np.zeros((n_steps, n, 3))
    forces = np.zeros((n, 3))
    dummy = np.zeros((1, 1, 3))
    status = _forward_steps(
        x,
        v,
        np.ascontiguousarray(edges, dtype=np.int64),
        np.ascontiguousarray(rest, dtype=np.float64),
        np.ascontiguousarray(mass, dtype=np.float64),
        np.ascontiguousarray(stiff, dtype=np.float64),
        np.ascontiguousarray(damp, dtype=np.float64),
        friction,
        np.ascontiguousarray(gravity, dtype=np.float64),
        dt,
        p_k,
        ground,
        eps,
        n_steps,
        0,
        dummy,
        dummy,
        forces,
        True,
        tape_x,
        tape_v,
        tape_vhat,
        tape_xhat,
    )
    return tape_x, tape_v, tape_vhat, tape_xhat, x, v, status


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
    cdef const double[:, :, ::1] tx = np.ascontiguousarray(tape_x, dtype=np.float64)
    cdef const double[:, :, ::1] tv = np.ascontiguousarray(tape_v, dtype=np.float64)
    cdef const double[:, :, ::1] tvh = np.ascontiguousarray(tape_vhat, dtype=np.float64)
    cdef const double[:, :, ::1] txh = np.ascontiguousarray(tape_xhat, dtype=np.float64)
    cdef const int64_t[:, ::1] ed = np.ascontiguousarray(edges, dtype=np.int64)
    cdef const double[::1] rl = np.ascontiguousarray(rest, dtype=np.float64)
    cdef const double[::1] ms = np.ascontiguousarray(mass, dtype=np.float64)
    cdef const double[::1] kk = np.ascontiguousarray(stiff, dtype=np.float64)
    cdef const double[::1] dd = np.ascontiguousarray(damp, dtype=np.float64)
    cdef const double[:, :, ::1] up = np.ascontiguousarray(upstream, dtype=np.float64)
    cdef double fric = friction
    cdef double h = dt
    cdef double pk = p_k
    cdef double gnd = ground
    cdef double ep = eps
    cdef int sub = substeps
    cdef bint det = detach

    cdef Py_ssize_t n_steps = tx.shape[0]
    cdef Py_ssize_t n = tx.shape[1]
    cdef Py_ssize_t n_edges = ed.shape[0]
    if up.shape[0] * sub != n_steps:
        raise ValueError("tape length must equal n_frames * substeps")

    adj_x_arr = np.zeros((n, 3))
    adj_v_arr = np.zeros((n, 3))
    adj_xh_arr = np.zeros((n, 3))
    adj_vh_arr = np.zeros((n, 3))
    forces_arr = np.zeros((n, 3))
    adj_acc_arr = np.zeros((n, 3))
    adj_fa_arr = np.zeros((n, 3))
    cdef double[:, ::1] adj_x = adj_x_arr
    cdef double[:, ::1] adj_v = adj_v_arr
    cdef double[:, ::1] adj_xh = adj_xh_arr
    cdef double[:, ::1] adj_vh = adj_vh_arr
    cdef double[:, ::1] forces = forces_arr
    cdef double[:, ::1] adj_acc = adj_acc_arr
    cdef double[:, ::1] adj_fa = adj_fa_arr

    cdef double g_m = 0.0, g_k = 0.0, g_d = 0.0, g_f = 0.0
    cdef Py_ssize_t s, t, i, j, e, c
    cdef double vy, sn, budget, vtx, vtz, vtn, inv_vt, ux, uz
    cdef double gx, gz, gdotu, ratio, adj_c, adj_sn
    cdef double dx0, dx1, dx2, ln, inv, n0, n1, n2, ext, phi, phip
    cdef double dv0, dv1, dv2, sax, coef, f0, f1, f2
    cdef double u0, u1, u2, ndotu, wv, pu0, pu1, pu2, pd0, pd1, pd2
    cdef double t0c, t1c, t2c, kphip, dnd, tmp

    with nogil:
        for s in range(n_steps - 1, -1, -1):
            if (s + 1) % sub == 0:
                t = (s + 1) // sub - 1
                if det:
                    for i in range(n):
                        for c in range(3):
                            adj_x[i, c] = up[t, i, c]
                            adj_v[i, c] = 0.0
                else:
                    for i in range(n):
                        for c in range(3):
                            adj_x[i, c] = adj_x[i, c] + up[t, i, c]

            # boundary adjoint (branches fixed by the primal pass)
            for i in range(n):
                for c in range(3):
                    adj_xh[i, c] = adj_x[i, c]
                    adj_vh[i, c] = adj_v[i, c]
                if txh[s, i, 1] < gnd:
                    adj_xh[i, 1] = 0.0
                    vy = tvh[s, i, 1]
                    sn = -vy if -vy > 0.0 else 0.0
                    budget = fric * sn
                    vtx = tvh[s, i, 0]
                    vtz = tvh[s, i, 2]
                    vtn = sqrt(vtx * vtx + vtz * vtz)
                    if vtn <= budget:
                        adj_vh[i, 0] = 0.0
                        adj_vh[i, 1] = 0.0
                        adj_vh[i, 2] = 0.0
                    else:
                        gx = adj_v[i, 0]
                        gz = adj_v[i, 2]
                        inv_vt = 1.0 / vtn
                        ux = vtx * inv_vt
                        uz = vtz * inv_vt
                        gdotu = gx * ux + gz * uz
                        ratio = budget * inv_vt
                        adj_vh[i, 0] = gx - ratio * gx + ratio * gdotu * ux
                        adj_vh[i, 2] = gz - ratio * gz + ratio * gdotu * uz
                        adj_c = -gdotu
                        g_f += adj_c * sn
                        adj_sn = adj_c * fric
                        if vy < 0.0:
                            adj_vh[i, 1] = -adj_sn
                        else:
                            adj_vh[i, 1] = 0.0

            # integration adjoint
            for i in range(n):
                for c in range(3):
                    tmp = adj_vh[i, c] + adj_xh[i, c] * h
                    adj_x[i, c] = adj_xh[i, c]
                    adj_v[i, c] = tmp
                    adj_acc[i, c] = tmp * h
                    adj_fa[i, c] = adj_acc[i, c] / ms[i]

            # recompute spring forces at the entry state for the mass grad
            for i in range(n):
                forces[i, 0] = 0.0
                forces[i, 1] = 0.0
                forces[i, 2] = 0.0
            for e in range(n_edges):
                i = ed[e, 0]
                j = ed[e, 1]
                dx0 = tx[s, i, 0] - tx[s, j, 0]
                dx1 = tx[s, i, 1] - tx[s, j, 1]
                dx2 = tx[s, i, 2] - tx[s, j, 2]
                ln = sqrt(dx0 * dx0 + dx1 * dx1 + dx2 * dx2)
                if ln < ep:
                    continue
                inv = 1.0 / ln
                n0 = dx0 * inv
                n1 = dx1 * inv
                n2 = dx2 * inv
                ext = ln - rl[e]
                phi = _phi(ext, pk)
                dv0 = tv[s, i, 0] - tv[s, j, 0]
                dv1 = tv[s, i, 1] - tv[s, j, 1]
                dv2 = tv[s, i, 2] - tv[s, j, 2]
                sax = dv0 * n0 + dv1 * n1 + dv2 * n2
                coef = -(kk[e] * phi) - (dd[e] * sax)
                f0 = coef * n0
                f1 = coef * n1
                f2 = coef * n2
                forces[i, 0] += f0
                forces[i, 1] += f1
                forces[i, 2] += f2
                forces[j, 0] -= f0
                forces[j, 1] -= f1
                forces[j, 2] -= f2
            for i in range(n):
                tmp = adj_acc[i, 0] * forces[i, 0] + adj_acc[i, 1] * forces[i, 1] + adj_acc[i, 2] * forces[i, 2]
                g_m += tmp * (-1.0 / (ms[i] * ms[i]))

            # per-edge adjoint into entry positions/velocities and k, d
            for e in range(n_edges):
                i = ed[e, 0]
                j = ed[e, 1]
                dx0 = tx[s, i, 0] - tx[s, j, 0]
                dx1 = tx[s, i, 1] - tx[s, j, 1]
                dx2 = tx[s, i, 2] - tx[s, j, 2]
                ln = sqrt(dx0 * dx0 + dx1 * dx1 + dx2 * dx2)
                if ln < ep:
                    continue
                inv = 1.0 / ln
                n0 = dx0 * inv
                n1 = dx1 * inv
                n2 = dx2 * inv
                ext = ln - rl[e]
                phi = _phi(ext, pk)
                phip = _phip(ext, pk)
                dv0 = tv[s, i, 0] - tv[s, j, 0]
                dv1 = tv[s, i, 1] - tv[s, j, 1]
                dv2 = tv[s, i, 2] - tv[s, j, 2]
                sax = dv0 * n0 + dv1 * n1 + dv2 * n2
                u0 = adj_fa[i, 0] - adj_fa[j, 0]
                u1 = adj_fa[i, 1] - adj_fa[j, 1]
                u2 = adj_fa[i, 2] - adj_fa[j, 2]
                ndotu = u0 * n0 + u1 * n1 + u2 * n2
                g_k += -phi * ndotu
                g_d += -sax * ndotu
                wv = -(dd[e] * ndotu)
                adj_v[i, 0] += wv * n0
                adj_v[i, 1] += wv * n1
                adj_v[i, 2] += wv * n2
                adj_v[j, 0] -= wv * n0
                adj_v[j, 1] -= wv * n1
                adj_v[j, 2] -= wv * n2
                coef = -(kk[e] * phi) - (dd[e] * sax)
                pu0 = (u0 - ndotu * n0) * inv
                pu1 = (u1 - ndotu * n1) * inv
                pu2 = (u2 - ndotu * n2) * inv
                pd0 = (dv0 - sax * n0) * inv
                pd1 = (dv1 - sax * n1) * inv
                pd2 = (dv2 - sax * n2) * inv
                kphip = -(kk[e] * phip) * ndotu
                dnd = -(dd[e] * ndotu)
                t0c = coef * pu0 + kphip * n0 + dnd * pd0
                t1c = coef * pu1 + kphip * n1 + dnd * pd1
                t2c = coef * pu2 + kphip * n2 + dnd * pd2
                adj_x[i, 0] += t0c
                adj_x[i, 1] += t1c
                adj_x[i, 2] += t2c
                adj_x[j, 0] -= t0c
                adj_x[j, 1] -= t1c
                adj_x[j, 2] -= t2c

    return g_m, g_k, g_d, g_f
