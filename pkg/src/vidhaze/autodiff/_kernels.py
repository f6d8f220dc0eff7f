"""Numba kernels for the windowed-attention hot path.

Row-major layouts keep every inner loop contiguous: the feature table is
[pixels, channels] and samples are [taps*positions, channels]. Falls back
to numpy upstream when numba is unavailable or coordinate gradients are
required.
"""

from __future__ import annotations

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - environment without numba
    HAVE_NUMBA = False


if HAVE_NUMBA:

    @numba.njit(parallel=True, cache=True)
    def attention_forward(flatT, i00, i01, i10, i11, w00, w01, w10, w11,
                          QT, d, samples, dot, kn2):
        """Gather bilinear K/V rows and accumulate Q.K and |K|^2 per tap.

        flatT: [HW, 2d]; QT: [N, d]; samples: [M, 2d]; dot/kn2: [M] with
        M = taps*N, row m belonging to query n = m % N.
        """
        M, C2 = samples.shape
        N = QT.shape[0]
        for m in numba.prange(M):
            n = m % N
            a, b, c, e = i00[m], i01[m], i10[m], i11[m]
            u, v, s, t = w00[m], w01[m], w10[m], w11[m]
            acc_dot = 0.0
            acc_kn = 0.0
            for ch in range(C2):
                val = (u * flatT[a, ch] + v * flatT[b, ch]
                       + s * flatT[c, ch] + t * flatT[e, ch])
                samples[m, ch] = val
                if ch < d:
                    acc_dot += val * QT[n, ch]
                    acc_kn += val * val
            dot[m] = acc_dot
            kn2[m] = acc_kn

    @numba.njit(cache=True)
    def attention_backward(samples, QT, g2T, att, gdot, gkscale,
                           i00, i01, i10, i11, w00, w01, w10, w11,
                           d, gaccT, gQT):
        """Build sample gradients, scatter them into the feature table, and
        accumulate the gradient of Q (bar its norm-correction term)."""
        M, C2 = samples.shape
        N = QT.shape[0]
        for m in range(M):
            n = m % N
            a, b, c, e = i00[m], i01[m], i10[m], i11[m]
            u, v, s, t = w00[m], w01[m], w10[m], w11[m]
            gd = gdot[m]
            gks = gkscale[m]
            am = att[m]
            for ch in range(C2):
                if ch < d:
                    gval = gd * QT[n, ch] + gks * samples[m, ch]
                    gQT[n, ch] += gd * samples[m, ch]
                else:
                    gval = am * g2T[n, ch - d]
                gaccT[a, ch] += u * gval
                gaccT[b, ch] += v * gval
                gaccT[c, ch] += s * gval
                gaccT[e, ch] += t * gval
