"""Compiled log-likelihood/gradient kernel for the flow stack.

Arrays are laid out (unit, point) so the inner loops run over points.
``lay`` has shape (K, 2, L, 4): for sub-flow k, net (0 = location,
1 = log-scale) and linear layer l it holds (W offset, b offset, fan_in,
fan_out) into the flat parameter vector.
"""

import math

import numpy as np
from numba import njit

_FM = {"reassoc", "contract", "nsz"}

@njit(cache=True, fastmath=_FM)
def mlp_forward(theta, lay, a, pre, n, L):
    # a: (L+1, h, n) activations, pre: (L, h, n)
    for l in range(L):
        wo = lay[l, 0]; bo = lay[l, 1]; fi = lay[l, 2]; fo = lay[l, 3]
        for o in range(fo):
            b = theta[bo + o]
            for i in range(n):
                pre[l, o, i] = b
            for j in range(fi):
                w = theta[wo + j * fo + o]
                for i in range(n):
                    pre[l, o, i] += w * a[l, j, i]
            if l == L - 1:
                for i in range(n):
                    a[l + 1, o, i] = pre[l, o, i]
            else:
                for i in range(n):
                    z = pre[l, o, i]
                    a[l + 1, o, i] = z if z > 0 else 0.01 * z

@njit(cache=True, fastmath=_FM)
def mlp_backward(theta, lay, a, pre, g, g2, grad, n, L):
    # g: (h, n) gradient wrt layer output; on return g[0] holds d/d input
    for l in range(L - 1, -1, -1):
        wo = lay[l, 0]; bo = lay[l, 1]; fi = lay[l, 2]; fo = lay[l, 3]
        if l != L - 1:
            for o in range(fo):
                for i in range(n):
                    if pre[l, o, i] <= 0:
                        g[o, i] *= 0.01
        for o in range(fo):
            acc = 0.0
            for i in range(n):
                acc += g[o, i]
            grad[bo + o] += acc
        for j in range(fi):
            for i in range(n):
                g2[j, i] = 0.0
            for o in range(fo):
                w = theta[wo + j * fo + o]
                acc = 0.0
                for i in range(n):
                    acc += a[l, j, i] * g[o, i]
                    g2[j, i] += w * g[o, i]
                grad[wo + j * fo + o] += acc
        for j in range(fi):
            for i in range(n):
                g[j, i] = g2[j, i]

@njit(cache=True, fastmath=_FM)
def loglik_grad(theta, lay, t1s1, cause, effect, prior, anm, clip, grad, ll, hmax, want_grad, A, P, C, E, S, OK, g, g2):
    K = lay.shape[0]; L = lay.shape[2]; n = cause.shape[0]
    S[:] = 0.0; OK[:] = 1.0
    logdet = np.zeros(n)
    for i in range(n):
        C[K, i] = cause[i]; E[K, i] = effect[i]
    for k in range(K - 1, -1, -1):
        for i in range(n):
            A[k, 0, 0, 0, i] = C[k + 1, i]
        mlp_forward(theta, lay[k, 0], A[k, 0], P[k, 0], n, L)
        s1 = 0.0
        if not anm:
            for i in range(n):
                A[k, 1, 0, 0, i] = C[k + 1, i]
            mlp_forward(theta, lay[k, 1], A[k, 1], P[k, 1], n, L)
            s1 = theta[t1s1[k, 1]]
            for i in range(n):
                s = A[k, 1, L, 0, i]
                if s > clip:
                    s = clip; OK[k, i] = 0.0
                elif s < -clip:
                    s = -clip; OK[k, i] = 0.0
                S[k, i] = s
        t1 = theta[t1s1[k, 0]]; es1 = math.exp(-s1)
        for i in range(n):
            E[k, i] = (E[k + 1, i] - A[k, 0, L, 0, i]) * math.exp(-S[k, i])
            C[k, i] = (C[k + 1, i] - t1) * es1
            logdet[i] -= s1 + S[k, i]
    gc = np.empty(n); ge = np.empty(n)
    for i in range(n):
        c = C[0, i]; e = E[0, i]
        if prior == 0:
            ll[i] = -2.0 * math.log(2.0) - abs(c) - abs(e) + logdet[i]
            gc[i] = -1.0 if c > 0 else (1.0 if c < 0 else 0.0)
            ge[i] = -1.0 if e > 0 else (1.0 if e < 0 else 0.0)
        else:
            ll[i] = -math.log(2 * math.pi) - 0.5 * (c * c + e * e) + logdet[i]
            gc[i] = -c; ge[i] = -e
    if not want_grad:
        return
    for k in range(K):
        s1 = 0.0 if anm else theta[t1s1[k, 1]]
        es1 = math.exp(-s1)
        acc_t1 = 0.0; acc_s1 = 0.0
        for i in range(n):
            acc_t1 += gc[i]
            acc_s1 += gc[i] * C[k, i]
        grad[t1s1[k, 0]] += -es1 * acc_t1
        # effect-location net
        for i in range(n):
            g[0, i] = -ge[i] * math.exp(-S[k, i])
        mlp_backward(theta, lay[k, 0], A[k, 0], P[k, 0], g, g2, grad, n, L)
        new_gc = np.empty(n)
        for i in range(n):
            new_gc[i] = gc[i] * es1 + g[0, i]
        if not anm:
            grad[t1s1[k, 1]] += -acc_s1 - n
            for i in range(n):
                g[0, i] = (-ge[i] * E[k, i] - 1.0) * OK[k, i]
            mlp_backward(theta, lay[k, 1], A[k, 1], P[k, 1], g, g2, grad, n, L)
            for i in range(n):
                new_gc[i] += g[0, i]
        for i in range(n):
            ge[i] = ge[i] * math.exp(-S[k, i])
            gc[i] = new_gc[i]
