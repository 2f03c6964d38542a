"""Masked GRU scans over padded visit sequences.

These loops dominate training time. Each has a pure-numpy implementation and
a numba one with identical semantics; ``gru_scan_forward`` /
``gru_scan_backward`` dispatch to numba unless ``FAIRFL_DISABLE_NUMBA`` is set.

Inputs are pre-projected: ``xp = v @ Wx + b`` with shape ``(B, T, 3h)``. At a
step with ``mask == 0`` the state is carried unchanged, so tail padding never
touches the forward chain and keeps the reverse chain at its zero start.
"""

from __future__ import annotations

import numpy as np

from fairfl._accel import NUMBA_ENABLED, njit
from fairfl.diffcore import sigmoid


def _steps(T, reverse):
    return range(T - 1, -1, -1) if reverse else range(T)


def gru_scan_forward_numpy(xp, mask, Wh, reverse=False):
    B, T, G = xp.shape
    hs = G // 3
    hs_out = np.zeros((B, T, hs))
    z = np.zeros((B, T, hs))
    r = np.zeros((B, T, hs))
    n = np.zeros((B, T, hs))
    h_in = np.zeros((B, T, hs))
    h = np.zeros((B, hs))
    Wzr = Wh[:, : 2 * hs]
    Wn = Wh[:, 2 * hs :]
    for t in _steps(T, reverse):
        m = mask[:, t : t + 1]
        hp = h @ Wzr
        zt = sigmoid(xp[:, t, :hs] + hp[:, :hs])
        rt = sigmoid(xp[:, t, hs : 2 * hs] + hp[:, hs:])
        nt = np.tanh(xp[:, t, 2 * hs :] + (rt * h) @ Wn)
        h_new = (1.0 - zt) * h + zt * nt
        h_in[:, t] = h
        z[:, t], r[:, t], n[:, t] = zt, rt, nt
        h = m * h_new + (1.0 - m) * h
        hs_out[:, t] = h
    return hs_out, (z, r, n, h_in)


def gru_scan_backward_numpy(dh_out, mask, Wh, cache, reverse=False):
    z, r, n, h_in = cache
    B, T, hs = dh_out.shape
    dxp = np.zeros((B, T, 3 * hs))
    dWh = np.zeros_like(Wh)
    Wzr = Wh[:, : 2 * hs]
    Wn = Wh[:, 2 * hs :]
    carry = np.zeros((B, hs))
    for t in _steps(T, not reverse):
        m = mask[:, t : t + 1]
        dh = dh_out[:, t] + carry
        dnew = m * dh
        hp, zt, rt, nt = h_in[:, t], z[:, t], r[:, t], n[:, t]
        dprev = (1.0 - m) * dh + dnew * (1.0 - zt)
        daz = dnew * (nt - hp) * zt * (1.0 - zt)
        dan = dnew * zt * (1.0 - nt * nt)
        drh = dan @ Wn.T
        dar = drh * hp * rt * (1.0 - rt)
        dprev += drh * rt
        dzr = np.concatenate([daz, dar], axis=1)
        dprev += dzr @ Wzr.T
        dWh[:, : 2 * hs] += hp.T @ dzr
        dWh[:, 2 * hs :] += (rt * hp).T @ dan
        dxp[:, t, :hs] = daz
        dxp[:, t, hs : 2 * hs] = dar
        dxp[:, t, 2 * hs :] = dan
        carry = dprev
    return dxp, dWh


@njit(cache=True, nogil=True)
def _sig(x):
    if x >= 0.0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


@njit(cache=True, nogil=True)
def _scan_forward_nb(xp, mask, Wh, reverse):
    B, T, G = xp.shape
    hs = G // 3
    hs_out = np.zeros((B, T, hs))
    z = np.zeros((B, T, hs))
    r = np.zeros((B, T, hs))
    n = np.zeros((B, T, hs))
    h_in = np.zeros((B, T, hs))
    h = np.zeros(hs)
    a = np.zeros(3 * hs)
    for b in range(B):
        h[:] = 0.0
        for s in range(T):
            t = T - 1 - s if reverse else s
            m = mask[b, t]
            for j in range(hs):
                h_in[b, t, j] = h[j]
            # row-major sweeps over Wh keep the inner loop contiguous
            for j in range(3 * hs):
                a[j] = xp[b, t, j]
            for i in range(hs):
                hi = h[i]
                for j in range(2 * hs):
                    a[j] += hi * Wh[i, j]
            for j in range(hs):
                z[b, t, j] = _sig(a[j])
                r[b, t, j] = _sig(a[hs + j])
            for i in range(hs):
                rhi = r[b, t, i] * h[i]
                for j in range(hs):
                    a[2 * hs + j] += rhi * Wh[i, 2 * hs + j]
            for j in range(hs):
                n[b, t, j] = np.tanh(a[2 * hs + j])
            for j in range(hs):
                zt = z[b, t, j]
                h_new = (1.0 - zt) * h[j] + zt * n[b, t, j]
                h[j] = m * h_new + (1.0 - m) * h[j]
                hs_out[b, t, j] = h[j]
    return hs_out, z, r, n, h_in


@njit(cache=True, nogil=True)
def _scan_backward_nb(dh_out, mask, Wh, z, r, n, h_in, reverse):
    B, T, hs = dh_out.shape
    dxp = np.zeros((B, T, 3 * hs))
    dWh = np.zeros(Wh.shape)
    carry = np.zeros(hs)
    dprev = np.zeros(hs)
    dnew = np.zeros(hs)
    drh = np.zeros(hs)
    for b in range(B):
        carry[:] = 0.0
        for s in range(T):
            # walk steps in the opposite order to the forward scan
            t = s if reverse else T - 1 - s
            m = mask[b, t]
            for j in range(hs):
                dh = dh_out[b, t, j] + carry[j]
                dnew[j] = m * dh
                zt = z[b, t, j]
                nt = n[b, t, j]
                dprev[j] = (1.0 - m) * dh + dnew[j] * (1.0 - zt)
                dxp[b, t, j] = dnew[j] * (nt - h_in[b, t, j]) * zt * (1.0 - zt)
                dxp[b, t, 2 * hs + j] = dnew[j] * zt * (1.0 - nt * nt)
            for i in range(hs):
                acc = 0.0
                for j in range(hs):
                    acc += dxp[b, t, 2 * hs + j] * Wh[i, 2 * hs + j]
                drh[i] = acc
            for i in range(hs):
                ri = r[b, t, i]
                hp = h_in[b, t, i]
                dxp[b, t, hs + i] = drh[i] * hp * ri * (1.0 - ri)
                dprev[i] += drh[i] * ri
            for i in range(hs):
                hp = h_in[b, t, i]
                rhp = r[b, t, i] * hp
                acc = 0.0
                for j in range(2 * hs):
                    g = dxp[b, t, j]
                    acc += g * Wh[i, j]
                    dWh[i, j] += hp * g
                for j in range(hs):
                    dWh[i, 2 * hs + j] += rhp * dxp[b, t, 2 * hs + j]
                carry[i] = dprev[i] + acc
    return dxp, dWh


def gru_scan_forward_numba(xp, mask, Wh, reverse=False):
    out = _scan_forward_nb(
        np.ascontiguousarray(xp), np.ascontiguousarray(mask, dtype=np.float64),
        np.ascontiguousarray(Wh), bool(reverse),
    )
    return out[0], out[1:]


def gru_scan_backward_numba(dh_out, mask, Wh, cache, reverse=False):
    z, r, n, h_in = cache
    return _scan_backward_nb(
        np.ascontiguousarray(dh_out), np.ascontiguousarray(mask, dtype=np.float64),
        np.ascontiguousarray(Wh), z, r, n, h_in, bool(reverse),
    )


BACKENDS = {
    "numpy": (gru_scan_forward_numpy, gru_scan_backward_numpy),
    "numba": (gru_scan_forward_numba, gru_scan_backward_numba),
}
BACKEND = "numba" if NUMBA_ENABLED else "numpy"


def gru_scan_forward(xp, mask, Wh, reverse=False):
    return BACKENDS[BACKEND][0](xp, mask, Wh, reverse)


def gru_scan_backward(dh_out, mask, Wh, cache, reverse=False):
    return BACKENDS[BACKEND][1](dh_out, mask, Wh, cache, reverse)
