"""Numpy GRU recurrence: the fallback when the compiled kernel is absent."""
import numpy as np


def _sigmoid(v):
    return np.exp(-np.logaddexp(0.0, -v))


def gru_forward(gx, U):
    """Forward scan. Returns hidden states plus the gate activations backward needs."""
    B, L, H3 = gx.shape
    H = H3 // 3
    hs = np.empty((B, L, H))
    z = np.empty((B, L, H))
    r = np.empty((B, L, H))
    n = np.empty((B, L, H))
    Uzr = U[:, :2 * H]
    Un = U[:, 2 * H:]
    h = np.zeros((B, H))
    for t in range(L):
        a = gx[:, t, :2 * H] + h @ Uzr
        zt = _sigmoid(a[:, :H])
        rt = _sigmoid(a[:, H:])
        nt = np.tanh(gx[:, t, 2 * H:] + (rt * h) @ Un)
        h = (1.0 - zt) * h + zt * nt
        hs[:, t] = h
        z[:, t] = zt
        r[:, t] = rt
        n[:, t] = nt
    return hs, z, r, n


def gru_backward(dhs, U, hs, z, r, n):
    """Backprop through time; returns (d gx, d U)."""
    B, L, H = hs.shape
    dgx = np.empty((B, L, 3 * H))
    dU = np.zeros_like(U)
    Uzr = U[:, :2 * H]
    Un = U[:, 2 * H:]
    dh = np.zeros((B, H))
    for t in range(L - 1, -1, -1):
        dh = dh + dhs[:, t]
        h_prev = hs[:, t - 1] if t > 0 else np.zeros((B, H))
        zt, rt, nt = z[:, t], r[:, t], n[:, t]
        dn = dh * zt * (1.0 - nt * nt)
        dz = dh * (nt - h_prev) * zt * (1.0 - zt)
        rh = rt * h_prev
        drh = dn @ Un.T
        dr = drh * h_prev * rt * (1.0 - rt)
        dgx[:, t, :H] = dz
        dgx[:, t, H:2 * H] = dr
        dgx[:, t, 2 * H:] = dn
        dzr = dgx[:, t, :2 * H]
        dU[:, :2 * H] += h_prev.T @ dzr
        dU[:, 2 * H:] += rh.T @ dn
        dh = dh * (1.0 - zt) + drh * rt + dzr @ Uzr.T
    return dgx, dU
