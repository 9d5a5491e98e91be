"""Depthwise convolution inner loops.

The depthwise stage is the one primitive that maps to neither a GEMM nor a
cheap vector op, so it gets compiled kernels when numba is available, with
a pure-numpy fallback. Stride-1 kernels keep the innermost loop unit-stride
so it vectorizes. Loop order is fixed in every path; repeated runs in the
same environment are bitwise identical.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


@njit(cache=True)
def _dw_fwd_s1(xp, w, out):
    b_n, c_n, ho, wo = out.shape
    kh, kw = w.shape[1], w.shape[2]
    for b in range(b_n):
        for c in range(c_n):
            for i in range(ho):
                orow = out[b, c, i]
                for p in range(kh):
                    xrow = xp[b, c, i + p]
                    for q in range(kw):
                        wv = w[c, p, q]
                        for j in range(wo):
                            orow[j] += xrow[j + q] * wv


@njit(cache=True)
def _dw_fwd_any(xp, w, out, sh, sw):
    b_n, c_n, ho, wo = out.shape
    kh, kw = w.shape[1], w.shape[2]
    for b in range(b_n):
        for c in range(c_n):
            for i in range(ho):
                orow = out[b, c, i]
                for p in range(kh):
                    xrow = xp[b, c, i * sh + p]
                    for q in range(kw):
                        wv = w[c, p, q]
                        for j in range(wo):
                            orow[j] += xrow[j * sw + q] * wv


@njit(cache=True)
def _dw_bwd_dx_s1(w, g, dxp):
    b_n, c_n, ho, wo = g.shape
    kh, kw = w.shape[1], w.shape[2]
    for b in range(b_n):
        for c in range(c_n):
            for i in range(ho):
                grow = g[b, c, i]
                for p in range(kh):
                    dxrow = dxp[b, c, i + p]
                    for q in range(kw):
                        wv = w[c, p, q]
                        for j in range(wo):
                            dxrow[j + q] += grow[j] * wv


@njit(cache=True)
def _dw_bwd_dx_any(w, g, dxp, sh, sw):
    b_n, c_n, ho, wo = g.shape
    kh, kw = w.shape[1], w.shape[2]
    for b in range(b_n):
        for c in range(c_n):
            for i in range(ho):
                grow = g[b, c, i]
                for p in range(kh):
                    dxrow = dxp[b, c, i * sh + p]
                    for q in range(kw):
                        wv = w[c, p, q]
                        for j in range(wo):
                            dxrow[j * sw + q] += grow[j] * wv


# fastmath here only reassociates the per-row dot products; the compiled
# lane order is fixed, so results stay bitwise reproducible across runs
@njit(cache=True, fastmath=True)
def _dw_bwd_dw(xp, g, dw, sh, sw):
    # one pass over g per (b, i) row: all kh*kw taps accumulate together,
    # with a fixed reduction order (row partials, then rows)
    b_n, c_n, ho, wo = g.shape
    kh, kw = dw.shape[1], dw.shape[2]
    acc = np.zeros((c_n, kh, kw), dtype=np.float64)
    for b in range(b_n):
        for c in range(c_n):
            for i in range(ho):
                grow = g[b, c, i]
                for p in range(kh):
                    xrow = xp[b, c, i * sh + p]
                    for q in range(kw):
                        s = np.float32(0.0)
                        for j in range(wo):
                            s += xrow[j * sw + q] * grow[j]
                        acc[c, p, q] += s
    for c in range(c_n):
        for p in range(kh):
            for q in range(kw):
                dw[c, p, q] = acc[c, p, q]


def depthwise_forward(xp: np.ndarray, w3: np.ndarray, ho: int, wo: int,
                      sh: int, sw: int) -> np.ndarray:
    """Per-channel correlation of padded input xp with kernels w3 (C, kH, kW)."""
    b, c = xp.shape[0], xp.shape[1]
    out = np.zeros((b, c, ho, wo), dtype=xp.dtype)
    if HAVE_NUMBA:
        if sh == 1 and sw == 1:
            _dw_fwd_s1(xp, w3, out)
        else:
            _dw_fwd_any(xp, w3, out, sh, sw)
        return out
    kh, kw = w3.shape[1], w3.shape[2]
    tmp = np.empty_like(out)
    for i in range(kh):
        for j in range(kw):
            src = xp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]
            np.multiply(src, w3[None, :, i, j, None, None], out=tmp)
            out += tmp
    return out


def depthwise_backward(xp: np.ndarray, w3: np.ndarray, g: np.ndarray,
                       sh: int, sw: int) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the depthwise stage: (d padded input, d kernels)."""
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w3)
    if HAVE_NUMBA:
        if sh == 1 and sw == 1:
            _dw_bwd_dx_s1(w3, g, dxp)
        else:
            _dw_bwd_dx_any(w3, g, dxp, sh, sw)
        _dw_bwd_dw(xp, g, dw, sh, sw)
        return dxp, dw
    kh, kw = w3.shape[1], w3.shape[2]
    ho, wo = g.shape[2], g.shape[3]
    tmp = np.empty_like(g)
    for i in range(kh):
        for j in range(kw):
            sl_h = slice(i, i + sh * (ho - 1) + 1, sh)
            sl_w = slice(j, j + sw * (wo - 1) + 1, sw)
            np.multiply(g, w3[None, :, i, j, None, None], out=tmp)
            dxp[:, :, sl_h, sl_w] += tmp
            np.multiply(xp[:, :, sl_h, sl_w], g, out=tmp)
            dw[:, i, j] = tmp.sum(axis=(0, 2, 3))
    return dxp, dw
