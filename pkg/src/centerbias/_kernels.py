"""Numba-jitted direct kernels for the 3x3/stride-1 convolution hot path.

Importing this module is optional: tensor_core falls back to its im2col+GEMM
path when numba is unavailable or CENTERBIAS_NO_JIT is set.  Each output cell
is owned by exactly one thread, so results are deterministic for any worker
count.  The forward and grad-weight kernels process output channels in pairs
so the three overlapping input-row loads are shared between two accumulators.
"""

import os

AVAILABLE = False

if not os.environ.get("CENTERBIAS_NO_JIT"):
    try:
        os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY",
                              "omp tbb workqueue")
        from numba import njit, prange

        @njit(parallel=True, fastmath=True, cache=True)
        def conv3x3_valid(xp, w, b, y):
            """Valid cross-correlation of padded input xp with 3x3 kernels."""
            n, c, hp, wp = xp.shape
            oc = w.shape[0]
            oh, ow = hp - 2, wp - 2
            for i in prange(n):
                o = 0
                while o + 2 <= oc:
                    accA = y[i, o]
                    accB = y[i, o + 1]
                    for p in range(oh):
                        rowA = accA[p]
                        rowB = accB[p]
                        for q in range(ow):
                            rowA[q] = b[o]
                            rowB[q] = b[o + 1]
                        for ci in range(c):
                            for u in range(3):
                                xr = xp[i, ci, p + u]
                                a0 = w[o, ci, u, 0]
                                a1 = w[o, ci, u, 1]
                                a2 = w[o, ci, u, 2]
                                b0 = w[o + 1, ci, u, 0]
                                b1 = w[o + 1, ci, u, 1]
                                b2 = w[o + 1, ci, u, 2]
                                for q in range(ow):
                                    x0 = xr[q]
                                    x1 = xr[q + 1]
                                    x2 = xr[q + 2]
                                    rowA[q] += a0 * x0 + a1 * x1 + a2 * x2
                                    rowB[q] += b0 * x0 + b1 * x1 + b2 * x2
                    o += 2
                if o < oc:
                    acc = y[i, o]
                    for p in range(oh):
                        row = acc[p]
                        for q in range(ow):
                            row[q] = b[o]
                        for ci in range(c):
                            for u in range(3):
                                xr = xp[i, ci, p + u]
                                w0 = w[o, ci, u, 0]
                                w1 = w[o, ci, u, 1]
                                w2 = w[o, ci, u, 2]
                                for q in range(ow):
                                    row[q] += (w0 * xr[q] + w1 * xr[q + 1]
                                               + w2 * xr[q + 2])

        @njit(parallel=True, fastmath=True, cache=True)
        def conv3x3_grad_weights(xp, g, gw, gbias):
            """gw[o,ci,u,v] = sum_{i,p,q} g[i,o,p,q] * xp[i,ci,p+u,q+v].

            Also accumulates gbias[o] = sum of g over (i,p,q) while g is
            streaming through anyway.
            """
            n, c, hp, wp = xp.shape
            oc = g.shape[1]
            oh, ow = hp - 2, wp - 2
            zero = xp[0, 0, 0, 0] * 0  # accumulator in the array dtype
            half = (oc // 2) * 2
            for oo in prange(oc // 2 + (oc - half)):
                o = 2 * oo
                if o + 2 <= oc:
                    ba = zero
                    bb2 = zero
                    for i in range(n):
                        for p in range(oh):
                            ga = g[i, o, p]
                            gb2 = g[i, o + 1, p]
                            for q in range(ow):
                                ba += ga[q]
                                bb2 += gb2[q]
                    gbias[o] = ba
                    gbias[o + 1] = bb2
                    for ci in range(c):
                        for u in range(3):
                            sa0 = zero; sa1 = zero; sa2 = zero
                            sb0 = zero; sb1 = zero; sb2 = zero
                            for i in range(n):
                                for p in range(oh):
                                    ga = g[i, o, p]
                                    gb = g[i, o + 1, p]
                                    xr = xp[i, ci, p + u]
                                    for q in range(ow):
                                        x0 = xr[q]
                                        x1 = xr[q + 1]
                                        x2 = xr[q + 2]
                                        va = ga[q]
                                        vb = gb[q]
                                        sa0 += va * x0
                                        sa1 += va * x1
                                        sa2 += va * x2
                                        sb0 += vb * x0
                                        sb1 += vb * x1
                                        sb2 += vb * x2
                            gw[o, ci, u, 0] = sa0
                            gw[o, ci, u, 1] = sa1
                            gw[o, ci, u, 2] = sa2
                            gw[o + 1, ci, u, 0] = sb0
                            gw[o + 1, ci, u, 1] = sb1
                            gw[o + 1, ci, u, 2] = sb2
                else:
                    o = oc - 1
                    bs = zero
                    for i in range(n):
                        for p in range(oh):
                            gr = g[i, o, p]
                            for q in range(ow):
                                bs += gr[q]
                    gbias[o] = bs
                    for ci in range(c):
                        for u in range(3):
                            s0 = zero; s1 = zero; s2 = zero
                            for i in range(n):
                                for p in range(oh):
                                    gr = g[i, o, p]
                                    xr = xp[i, ci, p + u]
                                    for q in range(ow):
                                        gv = gr[q]
                                        s0 += gv * xr[q]
                                        s1 += gv * xr[q + 1]
                                        s2 += gv * xr[q + 2]
                            gw[o, ci, u, 0] = s0
                            gw[o, ci, u, 1] = s1
                            gw[o, ci, u, 2] = s2

        @njit(parallel=True, fastmath=True, cache=True)
        def maxpool2x2(x, out, argmax):
            """2x2/stride-2 max with the flat index of each window maximum."""
            n, c, h, w = x.shape
            oh, ow = h // 2, w // 2
            for i in prange(n):
                for ci in range(c):
                    base = (i * c + ci) * h
                    for p in range(oh):
                        r0 = x[i, ci, 2 * p]
                        r1 = x[i, ci, 2 * p + 1]
                        orow = out[i, ci, p]
                        arow = argmax[i, ci, p]
                        for q in range(ow):
                            q0 = 2 * q
                            best = r0[q0]
                            k = 0
                            if r0[q0 + 1] > best:
                                best = r0[q0 + 1]
                                k = 1
                            if r1[q0] > best:
                                best = r1[q0]
                                k = 2
                            if r1[q0 + 1] > best:
                                best = r1[q0 + 1]
                                k = 3
                            orow[q] = best
                            arow[q] = ((base + 2 * p + (k >> 1)) * w
                                       + q0 + (k & 1))

        AVAILABLE = True
    except ImportError:  # pragma: no cover - exercised via the env toggle
        pass
