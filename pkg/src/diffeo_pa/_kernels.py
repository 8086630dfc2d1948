"""Compiled pairwise loops for the hot paths of shooting and matching.

Kernel matrices are exponentiated by numpy (vectorised ``exp`` is several
times faster than the scalar one inside a jitted loop); the accumulation
loops visit every unordered pair once.  The dense numpy forms in :mod:`diffeo_pa.geodesics`
are the reference these are tested against.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _neg_sqdist(a, b, inv):
    out = np.empty((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            out[i, j] = -(dx * dx + dy * dy) * inv
    return out


def gauss(a, b, sigma):
    return np.exp(_neg_sqdist(a, b, 1.0 / (sigma * sigma)))


def field(q, p, sigma):
    return _field(q, p, gauss(q, q, sigma), sigma)


def field_vjp(q, p, u, w, sigma):
    return _field_vjp(q, p, u, w, gauss(q, q, sigma), sigma)


def passive_velocity(x, q, p, sigma):
    return gauss(x, q, sigma) @ p


def currents_value_grad(x, cb, tb, bb, sigma):
    """Currents distance from polyline ``x`` to a fixed target and its vertex gradient."""
    c = 0.5 * (x[1:] + x[:-1])
    return _currents(x, c, gauss(c, c, sigma), gauss(c, cb, sigma), cb, tb, bb, sigma)


@njit(cache=True)
def _field(q, p, K, sigma):
    n = q.shape[0]
    inv = 1.0 / (sigma * sigma)
    s = 2.0 * inv
    dq = p.copy()
    dp = np.zeros_like(p)
    for a in range(n):
        qa0, qa1, pa0, pa1 = q[a, 0], q[a, 1], p[a, 0], p[a, 1]
        for b in range(a + 1, n):
            dx = qa0 - q[b, 0]
            dy = qa1 - q[b, 1]
            k = K[a, b]
            pb0, pb1 = p[b, 0], p[b, 1]
            dq[a, 0] += k * pb0
            dq[a, 1] += k * pb1
            dq[b, 0] += k * pa0
            dq[b, 1] += k * pa1
            c = s * k * (pa0 * pb0 + pa1 * pb1)
            dp[a, 0] += c * dx
            dp[a, 1] += c * dy
            dp[b, 0] -= c * dx
            dp[b, 1] -= c * dy
    return dq, dp


@njit(cache=True)
def _field_vjp(q, p, u, w, K, sigma):
    n = q.shape[0]
    inv = 1.0 / (sigma * sigma)
    s = 2.0 * inv
    gq = np.zeros_like(q)
    gp = u.copy()
    for a in range(n):
        qa0, qa1 = q[a, 0], q[a, 1]
        pa0, pa1 = p[a, 0], p[a, 1]
        ua0, ua1 = u[a, 0], u[a, 1]
        wa0, wa1 = w[a, 0], w[a, 1]
        for b in range(a + 1, n):
            dx = qa0 - q[b, 0]
            dy = qa1 - q[b, 1]
            k = K[a, b]
            pb0, pb1 = p[b, 0], p[b, 1]
            dw0 = wa0 - w[b, 0]
            dw1 = wa1 - w[b, 1]
            wd = dw0 * dx + dw1 * dy
            pp = pa0 * pb0 + pa1 * pb1
            # dq-cotangent and dp-cotangent contributions to gp
            gp[a, 0] += k * (u[b, 0] + s * wd * pb0)
            gp[a, 1] += k * (u[b, 1] + s * wd * pb1)
            gp[b, 0] += k * (ua0 + s * wd * pa0)
            gp[b, 1] += k * (ua1 + s * wd * pa1)
            msym = ua0 * pb0 + ua1 * pb1 + u[b, 0] * pa0 + u[b, 1] * pa1 + s * pp * wd
            c1 = -s * k * msym
            c2 = s * k * pp
            g0 = c1 * dx + c2 * dw0
            g1 = c1 * dy + c2 * dw1
            gq[a, 0] += g0
            gq[a, 1] += g1
            gq[b, 0] -= g0
            gq[b, 1] -= g1
    return gq, gp


@njit(cache=True)
def _currents(x, c, Kaa, Kab, cb, tb, bb, sigma):
    inv = 1.0 / (sigma * sigma)
    m = x.shape[0] - 1
    t = np.empty((m, 2))
    for f in range(m):
        t[f, 0] = x[f + 1, 0] - x[f, 0]
        t[f, 1] = x[f + 1, 1] - x[f, 1]
    gt = np.zeros((m, 2))
    gc = np.zeros((m, 2))
    val = bb
    for f in range(m):
        tf0, tf1 = t[f, 0], t[f, 1]
        val += tf0 * tf0 + tf1 * tf1
        gt[f, 0] += 2.0 * tf0
        gt[f, 1] += 2.0 * tf1
        for g in range(f + 1, m):
            dx = c[f, 0] - c[g, 0]
            dy = c[f, 1] - c[g, 1]
            k = Kaa[f, g]
            tt = tf0 * t[g, 0] + tf1 * t[g, 1]
            val += 2.0 * k * tt
            gt[f, 0] += 2.0 * k * t[g, 0]
            gt[f, 1] += 2.0 * k * t[g, 1]
            gt[g, 0] += 2.0 * k * tf0
            gt[g, 1] += 2.0 * k * tf1
            h = -4.0 * inv * k * tt
            gc[f, 0] += h * dx
            gc[f, 1] += h * dy
            gc[g, 0] -= h * dx
            gc[g, 1] -= h * dy
        for g in range(cb.shape[0]):
            dx = c[f, 0] - cb[g, 0]
            dy = c[f, 1] - cb[g, 1]
            k = Kab[f, g]
            tt = tf0 * tb[g, 0] + tf1 * tb[g, 1]
            val -= 2.0 * k * tt
            gt[f, 0] -= 2.0 * k * tb[g, 0]
            gt[f, 1] -= 2.0 * k * tb[g, 1]
            h = 4.0 * inv * k * tt
            gc[f, 0] += h * dx
            gc[f, 1] += h * dy
    gx = np.zeros_like(x)
    for f in range(m):
        for d in range(2):
            gx[f, d] += 0.5 * gc[f, d] - gt[f, d]
            gx[f + 1, d] += 0.5 * gc[f, d] + gt[f, d]
    return val, gx
