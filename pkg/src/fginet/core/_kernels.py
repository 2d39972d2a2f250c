"""Compiled loops for depthwise convolution, where numpy slicing is slowest."""
import numpy as np
from numba import njit


@njit(cache=True)
def depthwise_forward(xp, w, sh, sw, Ho, Wo):
    N, C = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[1], w.shape[2]
    out = np.zeros((N, C, Ho, Wo), dtype=xp.dtype)
    for n in range(N):
        for c in range(C):
            xc = xp[n, c]
            oc = out[n, c]
            for ho in range(Ho):
                orow = oc[ho]
                for i in range(kh):
                    xrow = xc[ho * sh + i]
                    for j in range(kw):
                        wv = w[c, i, j]
                        # unit stride gets its own loop so it vectorizes
                        if sw == 1:
                            for wo in range(Wo):
                                orow[wo] += wv * xrow[wo + j]
                        else:
                            for wo in range(Wo):
                                orow[wo] += wv * xrow[wo * sw + j]
    return out


@njit(cache=True, fastmath=True)
def depthwise_grad_input(xshape, w, g, sh, sw):
    N, C = g.shape[0], g.shape[1]
    kh, kw = w.shape[1], w.shape[2]
    Ho, Wo = g.shape[2], g.shape[3]
    gxp = np.zeros(xshape, dtype=g.dtype)
    for n in range(N):
        for c in range(C):
            gc = g[n, c]
            gx = gxp[n, c]
            for ho in range(Ho):
                grow = gc[ho]
                for i in range(kh):
                    xrow = gx[ho * sh + i]
                    for j in range(kw):
                        wv = w[c, i, j]
                        if sw == 1:
                            for wo in range(Wo):
                                xrow[wo + j] += grow[wo] * wv
                        else:
                            for wo in range(Wo):
                                xrow[wo * sw + j] += grow[wo] * wv
    return gxp


@njit(cache=True, fastmath=True)
def depthwise_grad_weight(xp, g, sh, sw, kh, kw):
    N, C = xp.shape[0], xp.shape[1]
    Ho, Wo = g.shape[2], g.shape[3]
    gw = np.zeros((C, kh, kw), dtype=xp.dtype)
    for c in range(C):
        for n in range(N):
            xc = xp[n, c]
            gc = g[n, c]
            for i in range(kh):
                for j in range(kw):
                    acc = gw[c, i, j]
                    for ho in range(Ho):
                        grow = gc[ho]
                        xrow = xc[ho * sh + i]
                        for wo in range(Wo):
                            acc += grow[wo] * xrow[wo * sw + j]
                    gw[c, i, j] = acc
    return gw
