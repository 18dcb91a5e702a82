"""Hot numeric kernels with a numba path and a pure-numpy path.

Every public function here dispatches on :data:`neuroloc._accel.USE_NUMBA`.
The ``*_nb`` and ``*_np`` variants are importable directly so tests and the
benchmark can compare them against each other.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _accel
from ._accel import njit

# mu0 / 4pi with lengths in mm, moments in nAm and fields in fT:
# 1e-7 [T m/A] * 1e-9 [nAm -> Am] * 1e15 [T -> fT] * 1e6 [1/m^2 -> 1/mm^2]
FIELD_SCALE = 1e5


# --------------------------------------------------------------------------
# conv3d, stride 1, odd cubic kernel, zero "same" padding, layout (C, X, Y, Z)


def _pad(x, p):
    return np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))


@njit(fastmath=True, cache=True)
def _conv3d_forward_nb(x, w, b):
    cin, nx, ny, nz = x.shape
    cout = w.shape[0]
    k = w.shape[2]
    p = k // 2
    xp = np.zeros((cin, nx + 2 * p, ny + 2 * p, nz + 2 * p))
    xp[:, p:p + nx, p:p + ny, p:p + nz] = x
    out = np.empty((cout, nx, ny, nz))
    for o in range(cout):
        out[o] = b[o]
        for c in range(cin):
            for a in range(k):
                for e in range(k):
                    for d in range(k):
                        wv = w[o, c, a, e, d]
                        for i in range(nx):
                            for j in range(ny):
                                for l in range(nz):
                                    out[o, i, j, l] += wv * xp[c, i + a, j + e, l + d]
    return out


@njit(fastmath=True, cache=True)
def _conv3d_backward_nb(x, w, g):
    cin, nx, ny, nz = x.shape
    cout = w.shape[0]
    k = w.shape[2]
    p = k // 2
    xp = np.zeros((cin, nx + 2 * p, ny + 2 * p, nz + 2 * p))
    xp[:, p:p + nx, p:p + ny, p:p + nz] = x
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    gb = np.empty(cout)
    for o in range(cout):
        gb[o] = g[o].sum()
        for c in range(cin):
            for a in range(k):
                for e in range(k):
                    for d in range(k):
                        wv = w[o, c, a, e, d]
                        acc = 0.0
                        for i in range(nx):
                            for j in range(ny):
                                for l in range(nz):
                                    gv = g[o, i, j, l]
                                    acc += gv * xp[c, i + a, j + e, l + d]
                                    gxp[c, i + a, j + e, l + d] += wv * gv
                        gw[o, c, a, e, d] = acc
    gx = np.ascontiguousarray(gxp[:, p:p + nx, p:p + ny, p:p + nz])
    return gx, gw, gb


def _windows(x, k):
    # (cin, X, Y, Z, k, k, k) view into the padded input
    return sliding_window_view(_pad(x, k // 2), (k, k, k), axis=(1, 2, 3))


def _conv3d_forward_np(x, w, b):
    out = np.tensordot(w, _windows(x, w.shape[2]), axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    return out + b[:, None, None, None]


def _conv3d_backward_np(x, w, g):
    k = w.shape[2]
    gw = np.tensordot(g, _windows(x, k), axes=([1, 2, 3], [1, 2, 3]))
    # the adjoint of a same-padded stride-1 correlation is a correlation of the
    # output gradient with the channel-swapped, spatially flipped kernel
    w_adj = np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
    gx = np.tensordot(w_adj, _windows(g, k), axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    gb = g.sum(axis=(1, 2, 3))
    return gx, gw, gb


def conv3d_forward(x, w, b):
    """Same-padded 3D cross-correlation of ``x`` (C, X, Y, Z) with ``w`` (O, C, k, k, k)."""
    if _accel.USE_NUMBA:
        return _conv3d_forward_nb(x, w, b)
    return _conv3d_forward_np(x, w, b)


def conv3d_backward(x, w, g):
    """Return ``(grad_x, grad_w, grad_b)`` for upstream gradient ``g``."""
    if _accel.USE_NUMBA:
        return _conv3d_backward_nb(x, w, g)
    return _conv3d_backward_np(x, w, g)


# --------------------------------------------------------------------------
# Spherical-conductor lead field


@njit(fastmath=False, cache=True)
def _lead_field_nb(points, sensors, orient):
    m = sensors.shape[0]
    n = points.shape[0]
    out = np.zeros((m, 3 * n))
    for i in range(m):
        rx, ry, rz = sensors[i, 0], sensors[i, 1], sensors[i, 2]
        ux, uy, uz = orient[i, 0], orient[i, 1], orient[i, 2]
        rn = np.sqrt(rx * rx + ry * ry + rz * rz)
        for k in range(n):
            px, py, pz = points[k, 0], points[k, 1], points[k, 2]
            ax, ay, az = rx - px, ry - py, rz - pz
            an = np.sqrt(ax * ax + ay * ay + az * az)
            a_dot_r = ax * rx + ay * ry + az * rz
            r_dot_r0 = rx * px + ry * py + rz * pz
            f = an * (rn * an + rn * rn - r_dot_r0)
            c_r = an * an / rn + a_dot_r / an + 2.0 * an + 2.0 * rn
            c_r0 = an + 2.0 * rn + a_dot_r / an
            gx = c_r * rx - c_r0 * px
            gy = c_r * ry - c_r0 * py
            gz = c_r * rz - c_r0 * pz
            g_u = gx * ux + gy * uy + gz * uz
            inv_f2 = FIELD_SCALE / (f * f)
            # e_c x r0 for c = x, y, z
            for c in range(3):
                if c == 0:
                    vx, vy, vz = 0.0, -pz, py
                elif c == 1:
                    vx, vy, vz = pz, 0.0, -px
                else:
                    vx, vy, vz = -py, px, 0.0
                v_u = vx * ux + vy * uy + vz * uz
                v_r = vx * rx + vy * ry + vz * rz
                out[i, 3 * k + c] = (f * v_u - v_r * g_u) * inv_f2
    return out


def _lead_field_np(points, sensors, orient):
    m = sensors.shape[0]
    n = points.shape[0]
    out = np.empty((m, n, 3))
    eye = np.eye(3)
    for i in range(m):
        r = sensors[i]
        u = orient[i]
        rn = np.linalg.norm(r)
        a = r - points
        an = np.sqrt(np.einsum("ij,ij->i", a, a))
        a_dot_r = a @ r
        r_dot_r0 = points @ r
        f = an * (rn * an + rn * rn - r_dot_r0)
        c_r = an * an / rn + a_dot_r / an + 2.0 * an + 2.0 * rn
        c_r0 = an + 2.0 * rn + a_dot_r / an
        grad_f = c_r[:, None] * r[None, :] - c_r0[:, None] * points
        g_u = grad_f @ u
        # v[k, c] = e_c x r0_k, shape (n, 3 axes, 3 xyz)
        v = np.cross(eye[None, :, :], points[:, None, :])
        v_u = v @ u
        v_r = v @ r
        out[i] = (f[:, None] * v_u - v_r * g_u[:, None]) * (FIELD_SCALE / (f * f))[:, None]
    return out.reshape(m, 3 * n)


def lead_field(points, sensors, orient):
    """Projected field at each sensor for unit x/y/z dipoles at each point.

    All positions are in mm relative to the sphere center. Returns an
    (M, 3N) array in fT per nAm with column ``3k + c`` for axis ``c`` of
    point ``k``.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    sensors = np.ascontiguousarray(sensors, dtype=np.float64)
    orient = np.ascontiguousarray(orient, dtype=np.float64)
    if _accel.USE_NUMBA:
        return _lead_field_nb(points, sensors, orient)
    return _lead_field_np(points, sensors, orient)
