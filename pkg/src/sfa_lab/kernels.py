"""Hot kernels of the reference forecaster.

Each kernel has a numba implementation (``*_nb``) and a numpy implementation
(``*_np``); the public name is bound to one of them at import time according
to :mod:`sfa_lab._accel`. Both reduce every layer to one large GEMM; they
differ in how the im2col gather, the gate nonlinearity and the scatter-add
are done (fused loops vs. array expressions). The test suite checks that the
two paths agree.

Array layout everywhere: ``(batch, time, sensor, channel)``, float64,
C-contiguous.
"""
import numpy as np

from ._accel import USE_NUMBA, njit


def _sigmoid(z):
    # tanh form does not overflow
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# --- gated temporal convolution (GLU) -------------------------------------

def _im2col_np(x, K):
    T_out = x.shape[1] - K + 1
    return np.concatenate([x[:, k:k + T_out] for k in range(K)], axis=-1)


def glu_conv_forward_np(x, w, b):
    """Valid 1-D convolution over time followed by a gated linear unit.

    x: (B, T, n, C), w: (K, C, 2H), b: (2H,). Returns ``(out, a, s)`` where
    ``out = a * s``, ``a`` is the linear half and ``s`` the sigmoid gate, all
    of shape (B, T-K+1, n, H).
    """
    K, C, H2 = w.shape
    H = H2 // 2
    B, T, n, _ = x.shape
    T_out = T - K + 1
    pre = _im2col_np(x, K).reshape(-1, K * C) @ w.reshape(K * C, H2)
    pre += b
    a = np.ascontiguousarray(pre[:, :H])
    s = _sigmoid(pre[:, H:])
    shp = (B, T_out, n, H)
    return (a * s).reshape(shp), a.reshape(shp), s.reshape(shp)


def glu_conv_backward_np(x, w, a, s, dout, need_w=True):
    """Gradients w.r.t. input, weights and bias; ``dw`` is zero unless ``need_w``."""
    K, C, H2 = w.shape
    T_out = dout.shape[1]
    dpre = np.concatenate((dout * s, dout * a * s * (1.0 - s)), axis=-1).reshape(-1, H2)
    if need_w:
        dw = (_im2col_np(x, K).reshape(-1, K * C).T @ dpre).reshape(K, C, H2)
    else:
        dw = np.zeros_like(w)
    db = dpre.sum(axis=0)
    dcol = (dpre @ w.reshape(K * C, H2).T).reshape(x.shape[0], T_out, x.shape[2], K * C)
    dx = np.zeros_like(x)
    for k in range(K):
        dx[:, k:k + T_out] += dcol[..., k * C:(k + 1) * C]
    return dx, dw, db


@njit(cache=True)
def _im2col_nb(x, K):
    B, T, n, C = x.shape
    T_out = T - K + 1
    col = np.empty((B * T_out * n, K * C))
    r = 0
    for bi in range(B):
        for t in range(T_out):
            for i in range(n):
                for k in range(K):
                    for c in range(C):
                        col[r, k * C + c] = x[bi, t + k, i, c]
                r += 1
    return col


@njit(cache=True)
def glu_conv_forward_nb(x, w, b):
    B, T, n, C = x.shape
    K = w.shape[0]
    H2 = w.shape[2]
    H = H2 // 2
    T_out = T - K + 1
    pre = np.dot(_im2col_nb(x, K), w.reshape(K * C, H2))
    rows = pre.shape[0]
    a = np.empty((rows, H))
    s = np.empty((rows, H))
    out = np.empty((rows, H))
    for r in range(rows):
        for h in range(H):
            av = pre[r, h] + b[h]
            gv = pre[r, H + h] + b[H + h]
            # exp overflow gives 1/inf = 0, which is the correct limit
            sv = 1.0 / (1.0 + np.exp(-gv))
            a[r, h] = av
            s[r, h] = sv
            out[r, h] = av * sv
    return (out.reshape((B, T_out, n, H)), a.reshape((B, T_out, n, H)),
            s.reshape((B, T_out, n, H)))


@njit(cache=True)
def glu_conv_backward_nb(x, w, a, s, dout, need_w=True):
    B, T, n, C = x.shape
    K = w.shape[0]
    H2 = w.shape[2]
    H = H2 // 2
    T_out = dout.shape[1]
    rows = B * T_out * n
    a2 = a.reshape((rows, H))
    s2 = s.reshape((rows, H))
    d2 = dout.reshape((rows, H))
    dpre = np.empty((rows, H2))
    db = np.zeros(H2)
    for r in range(rows):
        for h in range(H):
            sv = s2[r, h]
            g = d2[r, h]
            da = g * sv
            dg = g * a2[r, h] * sv * (1.0 - sv)
            dpre[r, h] = da
            dpre[r, H + h] = dg
            db[h] += da
            db[H + h] += dg
    if need_w:
        dw = np.dot(_im2col_nb(x, K).T, dpre).reshape((K, C, H2))
    else:
        dw = np.zeros((K, C, H2))
    dcol = np.dot(dpre, w.reshape(K * C, H2).T)
    dx = np.zeros_like(x)
    r = 0
    for bi in range(B):
        for t in range(T_out):
            for i in range(n):
                for k in range(K):
                    for c in range(C):
                        dx[bi, t + k, i, c] += dcol[r, k * C + c]
                r += 1
    return dx, dw, db


# --- spatial graph convolution ---------------------------------------------

def graph_conv_forward_np(h, A, w, b):
    """``relu(A @ h @ w + b)`` applied per (batch, time) slice.

    Returns ``(out, u)`` where ``u = A @ h`` is kept for the backward pass.
    """
    B, T, n, H = h.shape
    hs = h.transpose(2, 0, 1, 3).reshape(n, -1)
    u = np.ascontiguousarray((A @ hs).reshape(n, B, T, H).transpose(1, 2, 0, 3))
    z = u.reshape(-1, H) @ w
    z += b
    np.maximum(z, 0.0, out=z)
    return z.reshape(B, T, n, w.shape[1]), u


def graph_conv_backward_np(A, w, u, out, dout, need_w=True):
    B, T, n, H = u.shape
    dz = (dout * (out > 0.0)).reshape(-1, w.shape[1])
    dw = u.reshape(-1, H).T @ dz if need_w else np.zeros_like(w)
    db = dz.sum(axis=0)
    du = (dz @ w.T).reshape(B, T, n, H)
    dus = du.transpose(2, 0, 1, 3).reshape(n, -1)
    dh = np.ascontiguousarray((A.T @ dus).reshape(n, B, T, H).transpose(1, 2, 0, 3))
    return dh, dw, db


@njit(cache=True)
def _node_major_nb(h):
    B, T, n, H = h.shape
    out = np.empty((n, B * T * H))
    for bi in range(B):
        for t in range(T):
            base = (bi * T + t) * H
            for i in range(n):
                for c in range(H):
                    out[i, base + c] = h[bi, t, i, c]
    return out


@njit(cache=True)
def _batch_major_nb(m, B, T, H):
    n = m.shape[0]
    out = np.empty((B, T, n, H))
    for bi in range(B):
        for t in range(T):
            base = (bi * T + t) * H
            for i in range(n):
                for c in range(H):
                    out[bi, t, i, c] = m[i, base + c]
    return out


@njit(cache=True)
def graph_conv_forward_nb(h, A, w, b):
    B, T, n, H = h.shape
    H_out = w.shape[1]
    u = _batch_major_nb(np.dot(A, _node_major_nb(h)), B, T, H)
    z = np.dot(u.reshape((B * T * n, H)), w)
    for r in range(z.shape[0]):
        for j in range(H_out):
            v = z[r, j] + b[j]
            z[r, j] = v if v > 0.0 else 0.0
    return z.reshape((B, T, n, H_out)), u


@njit(cache=True)
def graph_conv_backward_nb(A, w, u, out, dout, need_w=True):
    B, T, n, H = u.shape
    H_out = w.shape[1]
    rows = B * T * n
    o2 = out.reshape((rows, H_out))
    d2 = dout.reshape((rows, H_out))
    dz = np.empty((rows, H_out))
    db = np.zeros(H_out)
    for r in range(rows):
        for j in range(H_out):
            g = d2[r, j] if o2[r, j] > 0.0 else 0.0
            dz[r, j] = g
            db[j] += g
    if need_w:
        dw = np.dot(u.reshape((rows, H)).T, dz)
    else:
        dw = np.zeros((H, H_out))
    du = np.dot(dz, w.T).reshape((B, T, n, H))
    dh = _batch_major_nb(np.dot(A.T, _node_major_nb(du)), B, T, H)
    return dh, dw, db


if USE_NUMBA:
    glu_conv_forward = glu_conv_forward_nb
    glu_conv_backward = glu_conv_backward_nb
    graph_conv_forward = graph_conv_forward_nb
    graph_conv_backward = graph_conv_backward_nb
else:
    glu_conv_forward = glu_conv_forward_np
    glu_conv_backward = glu_conv_backward_np
    graph_conv_forward = graph_conv_forward_np
    graph_conv_backward = graph_conv_backward_np
