"""Sequential numba kernels for the per-frame hot path.

Everything here is deliberately single-threaded (no prange): the pipeline is
specified to run on one thread and sequential accumulation keeps results
bit-reproducible for a fixed input order.
"""
from __future__ import annotations

import numpy as np
from numba import njit

# Fibonacci multiplicative hash constant for int64 keys.
_HASH_MULT = np.int64(-7046029254386353131)  # 0x9E3779B97F4A7C15 as signed


@njit(cache=True)
def hash_voxelize(
    points: np.ndarray,
    inv_voxel_size: float,
    table_keys: np.ndarray,
    table_rows: np.ndarray,
    counts: np.ndarray,
    stats: np.ndarray,
    key_lo: np.int64,
    key_hi: np.int64,
) -> int:
    """One pass over points: bin by floor(p / s) into an open-address table.

    table_keys must be a power-of-two size, prefilled with -1; counts/stats
    rows are claimed in first-touch order. stats columns are
    [sx, sy, sz, sxx, sxy, sxz, syy, syz, szz]. Returns the number of cells,
    or -1 if a lattice coordinate leaves the packable range.
    """
    mask = np.int64(len(table_keys) - 1)
    # Fibonacci hashing reads the TOP bits of the product; the low bits of
    # key * mult only see the low bits of the key and collide catastrophically
    # on flat scenes.
    shift = np.int64(64)
    cap = np.int64(len(table_keys))
    while cap > np.int64(1):
        cap >>= np.int64(1)
        shift -= np.int64(1)
    n_rows = 0
    for i in range(points.shape[0]):
        x = points[i, 0]
        y = points[i, 1]
        z = points[i, 2]
        ix = np.int64(np.floor(x * inv_voxel_size))
        iy = np.int64(np.floor(y * inv_voxel_size))
        iz = np.int64(np.floor(z * inv_voxel_size))
        if (
            ix < key_lo or ix > key_hi
            or iy < key_lo or iy > key_hi
            or iz < key_lo or iz > key_hi
        ):
            return -1
        key = (
            ((ix & np.int64(0x1FFFFF)) << 42)
            | ((iy & np.int64(0x1FFFFF)) << 21)
            | (iz & np.int64(0x1FFFFF))
        )
        slot = ((key * _HASH_MULT) >> shift) & mask
        while True:
            stored = table_keys[slot]
            if stored == key:
                row = table_rows[slot]
                break
            if stored == np.int64(-1):
                table_keys[slot] = key
                table_rows[slot] = n_rows
                row = n_rows
                n_rows += 1
                break
            slot = (slot + np.int64(1)) & mask
        counts[row] += 1
        stats[row, 0] += x
        stats[row, 1] += y
        stats[row, 2] += z
        stats[row, 3] += x * x
        stats[row, 4] += x * y
        stats[row, 5] += x * z
        stats[row, 6] += y * y
        stats[row, 7] += y * z
        stats[row, 8] += z * z
    return n_rows


@njit(cache=True)
def collect_rows(table_keys: np.ndarray, table_rows: np.ndarray, n_rows: int) -> np.ndarray:
    """Recover the packed key of each claimed row from the hash table."""
    keys = np.empty(n_rows, dtype=np.int64)
    for slot in range(len(table_keys)):
        if table_keys[slot] != np.int64(-1):
            keys[table_rows[slot]] = table_keys[slot]
    return keys


@njit(cache=True)
def _inv3(a, out):
    """Adjugate inverse of a 3x3; returns the determinant (<= 0 means bad)."""
    m00 = a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1]
    m01 = a[1, 2] * a[2, 0] - a[1, 0] * a[2, 2]
    m02 = a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0]
    det = a[0, 0] * m00 + a[0, 1] * m01 + a[0, 2] * m02
    if det <= 0.0 or not np.isfinite(det):
        return det
    inv_det = 1.0 / det
    out[0, 0] = m00 * inv_det
    out[0, 1] = (a[0, 2] * a[2, 1] - a[0, 1] * a[2, 2]) * inv_det
    out[0, 2] = (a[0, 1] * a[1, 2] - a[0, 2] * a[1, 1]) * inv_det
    out[1, 0] = m01 * inv_det
    out[1, 1] = (a[0, 0] * a[2, 2] - a[0, 2] * a[2, 0]) * inv_det
    out[1, 2] = (a[0, 2] * a[1, 0] - a[0, 0] * a[1, 2]) * inv_det
    out[2, 0] = m02 * inv_det
    out[2, 1] = (a[0, 1] * a[2, 0] - a[0, 0] * a[2, 1]) * inv_det
    out[2, 2] = (a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]) * inv_det
    return det


@njit(cache=True)
def _mat3_mul(a, b, out):
    for i in range(3):
        for j in range(3):
            out[i, j] = a[i, 0] * b[0, j] + a[i, 1] * b[1, j] + a[i, 2] * b[2, j]


@njit(cache=True)
def _rot_sandwich(rot, c, tmp, out):
    """out = rot @ c @ rot.T"""
    _mat3_mul(rot, c, tmp)
    for i in range(3):
        for j in range(3):
            out[i, j] = (
                tmp[i, 0] * rot[j, 0] + tmp[i, 1] * rot[j, 1] + tmp[i, 2] * rot[j, 2]
            )


@njit(cache=True)
def _fro3(a):
    acc = 0.0
    for i in range(3):
        for j in range(3):
            acc += a[i, j] * a[i, j]
    return np.sqrt(acc)


@njit(cache=True)
def _trace_prod(a, b):
    """Tr(a @ b)"""
    acc = 0.0
    for i in range(3):
        for j in range(3):
            acc += a[i, j] * b[j, i]
    return acc


@njit(cache=True)
def _shape_residual(rot, inv_p, cov_p_reg, cov_q_reg, inv_q, t1, t2):
    """s = Tr(R inv_p R^T cov_q) + Tr(inv_q R cov_p R^T) - 6 at rotation rot."""
    _rot_sandwich(rot, inv_p, t1, t2)
    s = _trace_prod(t2, cov_q_reg)
    _rot_sandwich(rot, cov_p_reg, t1, t2)
    s += _trace_prod(inv_q, t2)
    return s - 6.0


@njit(cache=True)
def freeze_coefficients(
    kind,
    lam,
    sigma_icp_sq,
    sigma_cov_sq,
    mu_p,
    cov_p,
    mu_q,
    cov_q,
    inv_p_reg,
    cov_p_reg,
    inv_q_reg,
    cov_q_reg,
    litamin_metric,
    rot,
    trans,
    metric_out,
    w_out,
    v_out,
):
    """Evaluate per-correspondence metric matrices and robust weights at a pose.

    Fills metric_out / w_out / v_out, the coefficients the Newton derivatives
    treat as constants. Returns (total reweighted cost, ok). kind codes:
    0 icp, 1 ndt, 2 gicp, 3 litamin, 4 litamin2-icp, 5 litamin2-icp-cov.
    """
    n = mu_p.shape[0]
    tmp1 = np.empty((3, 3))
    tmp2 = np.empty((3, 3))
    pooled = np.empty((3, 3))
    cost = 0.0
    for i in range(n):
        px = (
            rot[0, 0] * mu_p[i, 0] + rot[0, 1] * mu_p[i, 1] + rot[0, 2] * mu_p[i, 2]
        ) + trans[0]
        py = (
            rot[1, 0] * mu_p[i, 0] + rot[1, 1] * mu_p[i, 1] + rot[1, 2] * mu_p[i, 2]
        ) + trans[1]
        pz = (
            rot[2, 0] * mu_p[i, 0] + rot[2, 1] * mu_p[i, 1] + rot[2, 2] * mu_p[i, 2]
        ) + trans[2]
        rx = mu_q[i, 0] - px
        ry = mu_q[i, 1] - py
        rz = mu_q[i, 2] - pz

        m = metric_out[i]
        if kind == 0:
            for a in range(3):
                for b in range(3):
                    m[a, b] = 1.0 if a == b else 0.0
        elif kind == 1:
            for a in range(3):
                for b in range(3):
                    m[a, b] = inv_q_reg[i, a, b]
        elif kind == 3:
            for a in range(3):
                for b in range(3):
                    m[a, b] = litamin_metric[i, a, b]
        else:
            _rot_sandwich(rot, cov_p[i], tmp1, pooled)
            for a in range(3):
                for b in range(3):
                    pooled[a, b] += cov_q[i, a, b]
                pooled[a, a] += lam
            det = _inv3(pooled, m)
            if det <= 0.0 or not np.isfinite(det):
                return 0.0, False
            if kind >= 4:
                norm = _fro3(m)
                for a in range(3):
                    for b in range(3):
                        m[a, b] /= norm

        e_icp = (
            rx * (m[0, 0] * rx + m[0, 1] * ry + m[0, 2] * rz)
            + ry * (m[1, 0] * rx + m[1, 1] * ry + m[1, 2] * rz)
            + rz * (m[2, 0] * rx + m[2, 1] * ry + m[2, 2] * rz)
        )
        if kind >= 4:
            w = sigma_icp_sq / (e_icp + sigma_icp_sq)
        else:
            w = 1.0
        w_out[i] = w
        cost += w * e_icp

        if kind == 5:
            s = _shape_residual(rot, inv_p_reg[i], cov_p_reg[i], cov_q_reg[i], inv_q_reg[i], tmp1, tmp2)
            v = sigma_cov_sq / (s * s + sigma_cov_sq)
            v_out[i] = v
            cost += v * s
        else:
            v_out[i] = 0.0
    if not np.isfinite(cost):
        return cost, False
    return cost, True


@njit(cache=True)
def _shape_grad_hess_accum(a_mat, w_mat, v, grad, hess):
    """Accumulate v * d/domega of Tr(W Exp(omega) A Exp(omega)^T) at 0.

    grad += v * (-2 vee(AW - WA)); hess_oo += v * Hs with
    Hs_mn = P_mn - delta_mn tr(P) - Tr(W G_m A G_n) - Tr(W G_n A G_m),
    P = AW + WA, G_m the SO(3) generators. A and W must be symmetric.
    """
    k00 = a_mat[0, 0] * w_mat[0, 0] + a_mat[0, 1] * w_mat[1, 0] + a_mat[0, 2] * w_mat[2, 0]
    k01 = a_mat[0, 0] * w_mat[0, 1] + a_mat[0, 1] * w_mat[1, 1] + a_mat[0, 2] * w_mat[2, 1]
    k02 = a_mat[0, 0] * w_mat[0, 2] + a_mat[0, 1] * w_mat[1, 2] + a_mat[0, 2] * w_mat[2, 2]
    k10 = a_mat[1, 0] * w_mat[0, 0] + a_mat[1, 1] * w_mat[1, 0] + a_mat[1, 2] * w_mat[2, 0]
    k11 = a_mat[1, 0] * w_mat[0, 1] + a_mat[1, 1] * w_mat[1, 1] + a_mat[1, 2] * w_mat[2, 1]
    k12 = a_mat[1, 0] * w_mat[0, 2] + a_mat[1, 1] * w_mat[1, 2] + a_mat[1, 2] * w_mat[2, 2]
    k20 = a_mat[2, 0] * w_mat[0, 0] + a_mat[2, 1] * w_mat[1, 0] + a_mat[2, 2] * w_mat[2, 0]
    k21 = a_mat[2, 0] * w_mat[0, 1] + a_mat[2, 1] * w_mat[1, 1] + a_mat[2, 2] * w_mat[2, 1]
    k22 = a_mat[2, 0] * w_mat[0, 2] + a_mat[2, 1] * w_mat[1, 2] + a_mat[2, 2] * w_mat[2, 2]

    # AW - WA = K - K^T for symmetric A, W
    grad[0] -= 2.0 * v * (k21 - k12)
    grad[1] -= 2.0 * v * (k02 - k20)
    grad[2] -= 2.0 * v * (k10 - k01)

    # P = K + K^T, tr(P) = 2 tr(K)
    p00 = 2.0 * k00
    p11 = 2.0 * k11
    p22 = 2.0 * k22
    p01 = k01 + k10
    p02 = k02 + k20
    p12 = k12 + k21
    tr_p = p00 + p11 + p22

    # T_mn = Tr(W G_m A G_n); G_m A is a signed row shuffle of A and the
    # trailing G_n a signed column shuffle, expanded here by hand.
    a00 = a_mat[0, 0]; a01 = a_mat[0, 1]; a02 = a_mat[0, 2]
    a11 = a_mat[1, 1]; a12 = a_mat[1, 2]; a22 = a_mat[2, 2]
    w00 = w_mat[0, 0]; w01 = w_mat[0, 1]; w02 = w_mat[0, 2]
    w11 = w_mat[1, 1]; w12 = w_mat[1, 2]; w22 = w_mat[2, 2]

    # T_00: G_0 A G_0 = [[0,0,0],[0,-a22,a12],[0,a12,-a11]] pattern
    t00 = -w11 * a22 + 2.0 * w12 * a12 - w22 * a11
    t11 = -w00 * a22 + 2.0 * w02 * a02 - w22 * a00
    t22 = -w00 * a11 + 2.0 * w01 * a01 - w11 * a00
    # T_01 = Tr(W G_0 A G_1): G_0 A = [0; -row2; row1], then column shuffle
    # by G_1: cols -> [-col2, 0, col0]
    t01 = w01 * a22 - w02 * a12 - w12 * a02 + w22 * a01
    t02 = w02 * a11 - w01 * a12 - w12 * a01 + w11 * a02
    t12 = w12 * a00 - w01 * a02 - w02 * a01 + w00 * a12

    hess[0, 0] += v * (p00 - tr_p - 2.0 * t00)
    hess[1, 1] += v * (p11 - tr_p - 2.0 * t11)
    hess[2, 2] += v * (p22 - tr_p - 2.0 * t22)
    hess[0, 1] += v * (p01 - 2.0 * t01)
    hess[0, 2] += v * (p02 - 2.0 * t02)
    hess[1, 2] += v * (p12 - 2.0 * t12)


@njit(cache=True)
def frozen_grad_hess(
    mu_p,
    mu_q,
    metric,
    w_arr,
    v_arr,
    inv_p_reg,
    cov_p_reg,
    cov_q_reg,
    inv_q_reg,
    rot,
    trans,
    grad,
    hess,
):
    """Gradient and Hessian of the frozen-coefficient cost at delta = 0.

    Twist order [omega, nu]; coefficients (metric, w, v) come from
    freeze_coefficients and stay constant. Only the upper triangle of the
    rotation block is accumulated; the full matrix is symmetrized at the end.
    Returns ok = derivatives all finite.
    """
    for a in range(6):
        grad[a] = 0.0
        for b in range(6):
            hess[a, b] = 0.0
    tmp1 = np.empty((3, 3))
    a_mat = np.empty((3, 3))
    n = mu_p.shape[0]
    for i in range(n):
        y0 = (
            rot[0, 0] * mu_p[i, 0] + rot[0, 1] * mu_p[i, 1] + rot[0, 2] * mu_p[i, 2]
        ) + trans[0]
        y1 = (
            rot[1, 0] * mu_p[i, 0] + rot[1, 1] * mu_p[i, 1] + rot[1, 2] * mu_p[i, 2]
        ) + trans[1]
        y2 = (
            rot[2, 0] * mu_p[i, 0] + rot[2, 1] * mu_p[i, 1] + rot[2, 2] * mu_p[i, 2]
        ) + trans[2]
        r0 = mu_q[i, 0] - y0
        r1 = mu_q[i, 1] - y1
        r2 = mu_q[i, 2] - y2
        m = metric[i]
        w = w_arr[i]
        u0 = m[0, 0] * r0 + m[0, 1] * r1 + m[0, 2] * r2
        u1 = m[1, 0] * r0 + m[1, 1] * r1 + m[1, 2] * r2
        u2 = m[2, 0] * r0 + m[2, 1] * r1 + m[2, 2] * r2

        # gradient: omega part -2w (y x u), nu part -2w u
        cx = y1 * u2 - y2 * u1
        cy = y2 * u0 - y0 * u2
        cz = y0 * u1 - y1 * u0
        grad[0] -= 2.0 * w * cx
        grad[1] -= 2.0 * w * cy
        grad[2] -= 2.0 * w * cz
        grad[3] -= 2.0 * w * u0
        grad[4] -= 2.0 * w * u1
        grad[5] -= 2.0 * w * u2

        # H_nu_nu = 2 w M
        hess[3, 3] += 2.0 * w * m[0, 0]
        hess[3, 4] += 2.0 * w * m[0, 1]
        hess[3, 5] += 2.0 * w * m[0, 2]
        hess[4, 4] += 2.0 * w * m[1, 1]
        hess[4, 5] += 2.0 * w * m[1, 2]
        hess[5, 5] += 2.0 * w * m[2, 2]

        # H_omega_nu = 2 w yhat M + w uhat
        # yhat rows: [0,-y2,y1],[y2,0,-y0],[-y1,y0,0]
        ym00 = -y2 * m[1, 0] + y1 * m[2, 0]
        ym01 = -y2 * m[1, 1] + y1 * m[2, 1]
        ym02 = -y2 * m[1, 2] + y1 * m[2, 2]
        ym10 = y2 * m[0, 0] - y0 * m[2, 0]
        ym11 = y2 * m[0, 1] - y0 * m[2, 1]
        ym12 = y2 * m[0, 2] - y0 * m[2, 2]
        ym20 = -y1 * m[0, 0] + y0 * m[1, 0]
        ym21 = -y1 * m[0, 1] + y0 * m[1, 1]
        ym22 = -y1 * m[0, 2] + y0 * m[1, 2]
        hess[0, 3] += 2.0 * w * ym00
        hess[0, 4] += 2.0 * w * ym01 - w * u2
        hess[0, 5] += 2.0 * w * ym02 + w * u1
        hess[1, 3] += 2.0 * w * ym10 + w * u2
        hess[1, 4] += 2.0 * w * ym11
        hess[1, 5] += 2.0 * w * ym12 - w * u0
        hess[2, 3] += 2.0 * w * ym20 - w * u1
        hess[2, 4] += 2.0 * w * ym21 + w * u0
        hess[2, 5] += 2.0 * w * ym22

        # H_omega_omega = -2w yhat M yhat - w(u y^T + y u^T) + 2w (u.y) I
        # yhat M yhat: columns of (yhat M) crossed with y again
        # (yhat M yhat)_{ab} = sum_c (yhat M)_{ac} yhat_{cb}
        # yhat columns: col0 = (0, y2, -y1), col1 = (-y2, 0, y0), col2 = (y1, -y0, 0)
        ymy00 = ym01 * y2 - ym02 * y1
        ymy01 = -ym00 * y2 + ym02 * y0
        ymy02 = ym00 * y1 - ym01 * y0
        ymy11 = -ym10 * y2 + ym12 * y0
        ymy12 = ym10 * y1 - ym11 * y0
        ymy22 = ym20 * y1 - ym21 * y0
        udoty = u0 * y0 + u1 * y1 + u2 * y2
        hess[0, 0] += -2.0 * w * ymy00 - 2.0 * w * u0 * y0 + 2.0 * w * udoty
        hess[1, 1] += -2.0 * w * ymy11 - 2.0 * w * u1 * y1 + 2.0 * w * udoty
        hess[2, 2] += -2.0 * w * ymy22 - 2.0 * w * u2 * y2 + 2.0 * w * udoty
        hess[0, 1] += -2.0 * w * ymy01 - w * (u0 * y1 + y0 * u1)
        hess[0, 2] += -2.0 * w * ymy02 - w * (u0 * y2 + y0 * u2)
        hess[1, 2] += -2.0 * w * ymy12 - w * (u1 * y2 + y1 * u2)

        v = v_arr[i]
        if v != 0.0:
            _rot_sandwich(rot, inv_p_reg[i], tmp1, a_mat)
            _shape_grad_hess_accum(a_mat, cov_q_reg[i], v, grad, hess)
            _rot_sandwich(rot, cov_p_reg[i], tmp1, a_mat)
            _shape_grad_hess_accum(a_mat, inv_q_reg[i], v, grad, hess)

    # mirror the upper triangle
    ok = True
    for a in range(6):
        if not np.isfinite(grad[a]):
            ok = False
        for b in range(a + 1, 6):
            hess[b, a] = hess[a, b]
    for a in range(6):
        for b in range(6):
            if not np.isfinite(hess[a, b]):
                ok = False
    return ok


@njit(cache=True)
def prepare_tables(
    kind,
    lam,
    cov_p,
    cov_q,
    cov_p_reg,
    cov_q_reg,
    inv_p_reg,
    inv_q_reg,
    lit_metric,
):
    """Regularize covariances and precompute the inverses a cost kind needs.

    cov_*_reg are always filled; inv_p_reg only for kind 5, inv_q_reg for
    kinds 1/3/5, lit_metric (Frobenius-normalized inv_q_reg) for kind 3.
    Rows a kind never reads are left untouched. Returns False when a needed
    inverse has a non-positive or non-finite determinant.
    """
    n = cov_p.shape[0]
    for i in range(n):
        for a in range(3):
            for b in range(3):
                cov_p_reg[i, a, b] = cov_p[i, a, b]
                cov_q_reg[i, a, b] = cov_q[i, a, b]
            cov_p_reg[i, a, a] += lam
            cov_q_reg[i, a, a] += lam
        if kind == 5:
            det = _inv3(cov_p_reg[i], inv_p_reg[i])
            if det <= 0.0 or not np.isfinite(det):
                return False
        if kind == 1 or kind == 3 or kind == 5:
            det = _inv3(cov_q_reg[i], inv_q_reg[i])
            if det <= 0.0 or not np.isfinite(det):
                return False
        if kind == 3:
            norm = _fro3(inv_q_reg[i])
            for a in range(3):
                for b in range(3):
                    lit_metric[i, a, b] = inv_q_reg[i, a, b] / norm
    return True


@njit(cache=True)
def freeze_and_derivatives(
    kind,
    lam,
    sigma_icp_sq,
    sigma_cov_sq,
    mu_p,
    cov_p,
    mu_q,
    cov_q,
    inv_p_reg,
    cov_p_reg,
    inv_q_reg,
    cov_q_reg,
    litamin_metric,
    rot,
    trans,
    metric_out,
    w_out,
    v_out,
    grad,
    hess,
):
    """One sweep: freeze coefficients at a pose and differentiate there.

    Produces bit-identical results to freeze_coefficients followed by
    frozen_grad_hess at the same pose, touching each correspondence once.
    Returns (cost, ok).
    """
    n = mu_p.shape[0]
    tmp1 = np.empty((3, 3))
    tmp2 = np.empty((3, 3))
    pooled = np.empty((3, 3))
    a_mat = np.empty((3, 3))
    cost = 0.0
    for a in range(6):
        grad[a] = 0.0
        for b in range(6):
            hess[a, b] = 0.0
    for i in range(n):
        y0 = (
            rot[0, 0] * mu_p[i, 0] + rot[0, 1] * mu_p[i, 1] + rot[0, 2] * mu_p[i, 2]
        ) + trans[0]
        y1 = (
            rot[1, 0] * mu_p[i, 0] + rot[1, 1] * mu_p[i, 1] + rot[1, 2] * mu_p[i, 2]
        ) + trans[1]
        y2 = (
            rot[2, 0] * mu_p[i, 0] + rot[2, 1] * mu_p[i, 1] + rot[2, 2] * mu_p[i, 2]
        ) + trans[2]
        r0 = mu_q[i, 0] - y0
        r1 = mu_q[i, 1] - y1
        r2 = mu_q[i, 2] - y2

        m = metric_out[i]
        if kind == 0:
            for a in range(3):
                for b in range(3):
                    m[a, b] = 1.0 if a == b else 0.0
        elif kind == 1:
            for a in range(3):
                for b in range(3):
                    m[a, b] = inv_q_reg[i, a, b]
        elif kind == 3:
            for a in range(3):
                for b in range(3):
                    m[a, b] = litamin_metric[i, a, b]
        else:
            _rot_sandwich(rot, cov_p[i], tmp1, pooled)
            for a in range(3):
                for b in range(3):
                    pooled[a, b] += cov_q[i, a, b]
                pooled[a, a] += lam
            det = _inv3(pooled, m)
            if det <= 0.0 or not np.isfinite(det):
                return 0.0, False
            if kind >= 4:
                norm = _fro3(m)
                for a in range(3):
                    for b in range(3):
                        m[a, b] /= norm

        e_icp = (
            r0 * (m[0, 0] * r0 + m[0, 1] * r1 + m[0, 2] * r2)
            + r1 * (m[1, 0] * r0 + m[1, 1] * r1 + m[1, 2] * r2)
            + r2 * (m[2, 0] * r0 + m[2, 1] * r1 + m[2, 2] * r2)
        )
        if kind >= 4:
            w = sigma_icp_sq / (e_icp + sigma_icp_sq)
        else:
            w = 1.0
        w_out[i] = w
        cost += w * e_icp

        if kind == 5:
            s = _shape_residual(
                rot, inv_p_reg[i], cov_p_reg[i], cov_q_reg[i], inv_q_reg[i], tmp1, tmp2
            )
            v = sigma_cov_sq / (s * s + sigma_cov_sq)
            v_out[i] = v
            cost += v * s
        else:
            v = 0.0
            v_out[i] = 0.0

        u0 = m[0, 0] * r0 + m[0, 1] * r1 + m[0, 2] * r2
        u1 = m[1, 0] * r0 + m[1, 1] * r1 + m[1, 2] * r2
        u2 = m[2, 0] * r0 + m[2, 1] * r1 + m[2, 2] * r2

        cx = y1 * u2 - y2 * u1
        cy = y2 * u0 - y0 * u2
        cz = y0 * u1 - y1 * u0
        grad[0] -= 2.0 * w * cx
        grad[1] -= 2.0 * w * cy
        grad[2] -= 2.0 * w * cz
        grad[3] -= 2.0 * w * u0
        grad[4] -= 2.0 * w * u1
        grad[5] -= 2.0 * w * u2

        hess[3, 3] += 2.0 * w * m[0, 0]
        hess[3, 4] += 2.0 * w * m[0, 1]
        hess[3, 5] += 2.0 * w * m[0, 2]
        hess[4, 4] += 2.0 * w * m[1, 1]
        hess[4, 5] += 2.0 * w * m[1, 2]
        hess[5, 5] += 2.0 * w * m[2, 2]

        ym00 = -y2 * m[1, 0] + y1 * m[2, 0]
        ym01 = -y2 * m[1, 1] + y1 * m[2, 1]
        ym02 = -y2 * m[1, 2] + y1 * m[2, 2]
        ym10 = y2 * m[0, 0] - y0 * m[2, 0]
        ym11 = y2 * m[0, 1] - y0 * m[2, 1]
        ym12 = y2 * m[0, 2] - y0 * m[2, 2]
        ym20 = -y1 * m[0, 0] + y0 * m[1, 0]
        ym21 = -y1 * m[0, 1] + y0 * m[1, 1]
        ym22 = -y1 * m[0, 2] + y0 * m[1, 2]
        hess[0, 3] += 2.0 * w * ym00
        hess[0, 4] += 2.0 * w * ym01 - w * u2
        hess[0, 5] += 2.0 * w * ym02 + w * u1
        hess[1, 3] += 2.0 * w * ym10 + w * u2
        hess[1, 4] += 2.0 * w * ym11
        hess[1, 5] += 2.0 * w * ym12 - w * u0
        hess[2, 3] += 2.0 * w * ym20 - w * u1
        hess[2, 4] += 2.0 * w * ym21 + w * u0
        hess[2, 5] += 2.0 * w * ym22

        ymy00 = ym01 * y2 - ym02 * y1
        ymy01 = -ym00 * y2 + ym02 * y0
        ymy02 = ym00 * y1 - ym01 * y0
        ymy11 = -ym10 * y2 + ym12 * y0
        ymy12 = ym10 * y1 - ym11 * y0
        ymy22 = ym20 * y1 - ym21 * y0
        udoty = u0 * y0 + u1 * y1 + u2 * y2
        hess[0, 0] += -2.0 * w * ymy00 - 2.0 * w * u0 * y0 + 2.0 * w * udoty
        hess[1, 1] += -2.0 * w * ymy11 - 2.0 * w * u1 * y1 + 2.0 * w * udoty
        hess[2, 2] += -2.0 * w * ymy22 - 2.0 * w * u2 * y2 + 2.0 * w * udoty
        hess[0, 1] += -2.0 * w * ymy01 - w * (u0 * y1 + y0 * u1)
        hess[0, 2] += -2.0 * w * ymy02 - w * (u0 * y2 + y0 * u2)
        hess[1, 2] += -2.0 * w * ymy12 - w * (u1 * y2 + y1 * u2)

        if v != 0.0:
            _rot_sandwich(rot, inv_p_reg[i], tmp1, a_mat)
            _shape_grad_hess_accum(a_mat, cov_q_reg[i], v, grad, hess)
            _rot_sandwich(rot, cov_p_reg[i], tmp1, a_mat)
            _shape_grad_hess_accum(a_mat, inv_q_reg[i], v, grad, hess)

    ok = np.isfinite(cost)
    for a in range(6):
        if not np.isfinite(grad[a]):
            ok = False
        for b in range(a + 1, 6):
            hess[b, a] = hess[a, b]
    for a in range(6):
        for b in range(6):
            if not np.isfinite(hess[a, b]):
                ok = False
    return cost, ok


@njit(cache=True)
def absorb_stats(
    row_of,
    map_keys,
    map_counts,
    map_sums,
    map_outers,
    n,
    max_cells,
    keys,
    counts,
    sums,
    outers,
):
    """Upsert per-cell statistics into the map arrays; returns the cell count.

    row_of maps packed key to row. max_cells < 0 means unlimited; once the
    cap is reached, statistics for unseen keys are dropped.
    """
    for i in range(len(keys)):
        key = keys[i]
        if key in row_of:
            row = row_of[key]
        else:
            if max_cells >= 0 and n >= max_cells:
                continue
            row = n
            row_of[key] = row
            map_keys[row] = key
            map_counts[row] = 0
            for a in range(3):
                map_sums[row, a] = 0.0
                for b in range(3):
                    map_outers[row, a, b] = 0.0
            n += 1
        map_counts[row] += counts[i]
        for a in range(3):
            map_sums[row, a] += sums[i, a]
            for b in range(3):
                map_outers[row, a, b] += outers[i, a, b]
    return n


@njit(cache=True)
def frozen_cost(
    mu_p,
    mu_q,
    metric,
    w_arr,
    v_arr,
    inv_p_reg,
    cov_p_reg,
    cov_q_reg,
    inv_q_reg,
    rot,
    trans,
):
    """Total cost at (rot, trans) with coefficients frozen elsewhere."""
    tmp1 = np.empty((3, 3))
    tmp2 = np.empty((3, 3))
    n = mu_p.shape[0]
    cost = 0.0
    for i in range(n):
        y0 = (
            rot[0, 0] * mu_p[i, 0] + rot[0, 1] * mu_p[i, 1] + rot[0, 2] * mu_p[i, 2]
        ) + trans[0]
        y1 = (
            rot[1, 0] * mu_p[i, 0] + rot[1, 1] * mu_p[i, 1] + rot[1, 2] * mu_p[i, 2]
        ) + trans[1]
        y2 = (
            rot[2, 0] * mu_p[i, 0] + rot[2, 1] * mu_p[i, 1] + rot[2, 2] * mu_p[i, 2]
        ) + trans[2]
        r0 = mu_q[i, 0] - y0
        r1 = mu_q[i, 1] - y1
        r2 = mu_q[i, 2] - y2
        m = metric[i]
        w = w_arr[i]
        cost += w * (
            r0 * (m[0, 0] * r0 + m[0, 1] * r1 + m[0, 2] * r2)
            + r1 * (m[1, 0] * r0 + m[1, 1] * r1 + m[1, 2] * r2)
            + r2 * (m[2, 0] * r0 + m[2, 1] * r1 + m[2, 2] * r2)
        )
        v = v_arr[i]
        if v != 0.0:
            s = _shape_residual(
                rot, inv_p_reg[i], cov_p_reg[i], cov_q_reg[i], inv_q_reg[i], tmp1, tmp2
            )
            cost += v * s
    return cost


def warmup() -> None:
    """Pre-compile every kernel on tiny inputs (first call pays LLVM time)."""
    pts = np.array([[0.1, 0.2, 0.3], [0.2, 0.2, 0.3], [4.0, 4.0, 4.0]])
    cap = 16
    table_keys = np.full(cap, -1, dtype=np.int64)
    table_rows = np.zeros(cap, dtype=np.int64)
    counts = np.zeros(8, dtype=np.int64)
    stats = np.zeros((8, 9))
    n = hash_voxelize(
        pts, 1.0, table_keys, table_rows, counts, stats,
        np.int64(-(1 << 20)), np.int64((1 << 20) - 1),
    )
    collect_rows(table_keys, table_rows, n)

    mu_p = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    mu_q = np.array([[0.1, 0.0, 0.0], [1.1, 0.0, 0.0]])
    eye = np.broadcast_to(np.eye(3), (2, 3, 3)).copy()
    rot = np.eye(3)
    trans = np.zeros(3)
    metric = np.empty((2, 3, 3))
    w_arr = np.empty(2)
    v_arr = np.empty(2)
    grad = np.empty(6)
    hess = np.empty((6, 6))
    for kind in (0, 5):
        prepare_tables(
            kind, 1e-6, eye, eye,
            metric.copy(), metric.copy(), metric.copy(), metric.copy(), metric.copy(),
        )
        freeze_coefficients(
            kind, 1e-6, 0.25, 9.0, mu_p, eye, mu_q, eye,
            eye, eye, eye, eye, eye, rot, trans, metric, w_arr, v_arr,
        )
        frozen_grad_hess(
            mu_p, mu_q, metric, w_arr, v_arr, eye, eye, eye, eye,
            rot, trans, grad, hess,
        )
        freeze_and_derivatives(
            kind, 1e-6, 0.25, 9.0, mu_p, eye, mu_q, eye,
            eye, eye, eye, eye, eye, rot, trans, metric, w_arr, v_arr, grad, hess,
        )
        frozen_cost(
            mu_p, mu_q, metric, w_arr, v_arr, eye, eye, eye, eye, rot, trans,
        )

    from numba import typed, types

    row_of = typed.Dict.empty(types.int64, types.int64)
    absorb_stats(
        row_of,
        np.zeros(4, dtype=np.int64),
        np.zeros(4, dtype=np.int64),
        np.zeros((4, 3)),
        np.zeros((4, 3, 3)),
        0,
        -1,
        np.array([1, 2, 1], dtype=np.int64),
        np.array([3, 4, 5], dtype=np.int64),
        np.ones((3, 3)),
        np.ones((3, 3, 3)),
    )
