# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; same contracts as ``xcae._kernels_py``.

Samples are processed one at a time with fused loops. Units whose activation
derivative and second derivative are both zero (inactive ReLUs) are skipped in
the Jacobian chain, since their rows of d h_l / d x vanish.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, tanh, fabs, sqrt
from libc.stdlib cimport malloc, calloc, free
from libc.string cimport memset

cnp.import_array()

DEF LINEAR = 0
DEF RELU = 1
DEF SIGMOID = 2


cdef inline void _activate(double* a, double* h, double* fp, double* fpp, Py_ssize_t n, int code) noexcept nogil:
    cdef Py_ssize_t k
    cdef double s
    if code == RELU:
        for k in range(n):
            if a[k] > 0.0:
                h[k] = a[k]
                fp[k] = 1.0
            else:
                h[k] = 0.0
                fp[k] = 0.0
            fpp[k] = 0.0
    elif code == SIGMOID:
        for k in range(n):
            s = 0.5 * (1.0 + tanh(0.5 * a[k]))
            h[k] = s
            fp[k] = s * (1.0 - s)
            fpp[k] = fp[k] * (1.0 - 2.0 * s)
    else:
        for k in range(n):
            h[k] = a[k]
            fp[k] = 1.0
            fpp[k] = 0.0


cdef inline double _softplus(double t) noexcept nogil:
    if t > 0:
        return t + log1p(exp(-t))
    return log1p(exp(t))


def cae_loss_grad(double[::1] params, const cnp.int64_t[::1] dims, const int[::1] acts,
                  const cnp.int64_t[::1] offsets, Py_ssize_t n_enc,
                  const double[:, ::1] X, const double[::1] y, const double[::1] alpha,
                  double lambda_c, bint want_grad=True):
    cdef Py_ssize_t L = acts.shape[0]
    cdef Py_ssize_t B = X.shape[0]
    cdef Py_ssize_t n = X.shape[1]
    cdef Py_ssize_t m = dims[n_enc]
    cdef Py_ssize_t hoff = offsets[L]
    cdef Py_ssize_t l, o, i, k, s, din, dout, woff, boff, pos
    cdef double acc, t, p, dt, rs, r, inv_b = 1.0 / B
    cdef double recon = 0.0, contr = 0.0, sup = 0.0
    cdef bint use_jac = lambda_c != 0.0

    grad_arr = np.zeros(params.shape[0])
    cdef double[::1] grad = grad_arr
    cdef double* P = &params[0]
    cdef double* gP = &grad[0]

    # activation buffers: unit offsets per layer
    cdef Py_ssize_t* uoff = <Py_ssize_t*> malloc((L + 2) * sizeof(Py_ssize_t))
    cdef Py_ssize_t total_units = 0, maxw = 0
    for l in range(L + 1):
        uoff[l] = total_units
        total_units += dims[l]
        if dims[l] > maxw:
            maxw = dims[l]
    uoff[L + 1] = total_units
    cdef double* A = <double*> malloc(total_units * sizeof(double))
    cdef double* H = <double*> malloc(total_units * sizeof(double))
    cdef double* FP = <double*> malloc(total_units * sizeof(double))
    cdef double* FPP = <double*> malloc(total_units * sizeof(double))
    cdef double* dh = <double*> malloc(maxw * sizeof(double))
    cdef double* dh2 = <double*> malloc(maxw * sizeof(double))
    cdef double* delta = <double*> malloc(maxw * sizeof(double))
    # Jacobian chain: rows per encoder layer (P_l and Q_l are dims[l+1] x n)
    cdef Py_ssize_t* joff = <Py_ssize_t*> malloc((n_enc + 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t jtot = 0
    for l in range(n_enc):
        joff[l] = jtot
        jtot += dims[l + 1] * n
    joff[n_enc] = jtot
    cdef double* JP = <double*> malloc((jtot + 1) * sizeof(double))
    cdef double* JQ = <double*> malloc((jtot + 1) * sizeof(double))
    cdef double* G = <double*> malloc((maxw * n + 1) * sizeof(double))
    cdef double* G2 = <double*> malloc((maxw * n + 1) * sizeof(double))
    cdef double* DG = <double*> malloc((maxw * n + 1) * sizeof(double))
    cdef double* tmp
    cdef double* Wl
    cdef double* Prev
    cdef double* Pl
    cdef double* Ql
    cdef double* fpl
    cdef double* fppl
    cdef double* hprev
    cdef double* gW

    try:
        with nogil:
            for s in range(B):
                # ---- forward ----
                for k in range(n):
                    H[k] = X[s, k]
                for l in range(L):
                    din = dims[l]
                    dout = dims[l + 1]
                    woff = offsets[l]
                    boff = woff + dout * din
                    for o in range(dout):
                        acc = P[boff + o]
                        Wl = P + woff + o * din
                        hprev = H + uoff[l]
                        for i in range(din):
                            acc = acc + Wl[i] * hprev[i]
                        A[uoff[l + 1] + o] = acc
                    _activate(A + uoff[l + 1], H + uoff[l + 1], FP + uoff[l + 1],
                              FPP + uoff[l + 1], dout, acts[l])
                t = P[hoff + m]
                for k in range(m):
                    t = t + P[hoff + k] * H[uoff[n_enc] + k]
                r = 0.0
                for k in range(n):
                    acc = H[uoff[L] + k] - X[s, k]
                    r = r + acc * acc
                recon += r
                sup += alpha[s] * (_softplus(t) - y[s] * t)

                # ---- Jacobian chain ----
                if use_jac:
                    for l in range(n_enc):
                        din = dims[l]
                        dout = dims[l + 1]
                        woff = offsets[l]
                        Pl = JP + joff[l]
                        Ql = JQ + joff[l]
                        fpl = FP + uoff[l + 1]
                        fppl = FPP + uoff[l + 1]
                        for o in range(dout):
                            if fpl[o] == 0.0 and fppl[o] == 0.0:
                                memset(Pl + o * n, 0, n * sizeof(double))
                                memset(Ql + o * n, 0, n * sizeof(double))
                                continue
                            Wl = P + woff + o * din
                            if l == 0:
                                for k in range(n):
                                    Ql[o * n + k] = Wl[k]
                            else:
                                memset(Ql + o * n, 0, n * sizeof(double))
                                Prev = JP + joff[l - 1]
                                for i in range(din):
                                    if FP[uoff[l] + i] == 0.0 and FPP[uoff[l] + i] == 0.0:
                                        continue
                                    acc = Wl[i]
                                    if acc == 0.0:
                                        continue
                                    for k in range(n):
                                        Ql[o * n + k] += acc * Prev[i * n + k]
                            for k in range(n):
                                Pl[o * n + k] = fpl[o] * Ql[o * n + k]
                    Pl = JP + joff[n_enc - 1]
                    acc = 0.0
                    for k in range(m * n):
                        acc = acc + Pl[k] * Pl[k]
                    contr += lambda_c * acc

                if not want_grad:
                    continue

                # ---- backward ----
                for k in range(n):
                    dh[k] = 2.0 * (H[uoff[L] + k] - X[s, k]) * inv_b
                if use_jac:
                    Pl = JP + joff[n_enc - 1]
                    for k in range(m * n):
                        G[k] = 2.0 * lambda_c * Pl[k] * inv_b
                for l in range(L - 1, -1, -1):
                    din = dims[l]
                    dout = dims[l + 1]
                    woff = offsets[l]
                    boff = woff + dout * din
                    fpl = FP + uoff[l + 1]
                    fppl = FPP + uoff[l + 1]
                    hprev = H + uoff[l]
                    if l + 1 == n_enc:
                        p = 0.5 * (1.0 + tanh(0.5 * t))
                        dt = alpha[s] * (p - y[s]) * inv_b
                        if dt != 0.0:
                            for k in range(m):
                                gP[hoff + k] += dt * H[uoff[n_enc] + k]
                                dh[k] += dt * P[hoff + k]
                            gP[hoff + m] += dt
                    for o in range(dout):
                        delta[o] = dh[o] * fpl[o]
                    if use_jac and l < n_enc:
                        Ql = JQ + joff[l]
                        gW = gP + woff
                        for o in range(dout):
                            if fpl[o] == 0.0 and fppl[o] == 0.0:
                                continue
                            if fppl[o] != 0.0:
                                rs = 0.0
                                for k in range(n):
                                    rs = rs + G[o * n + k] * Ql[o * n + k]
                                delta[o] += rs * fppl[o]
                            for k in range(n):
                                DG[o * n + k] = fpl[o] * G[o * n + k]
                        if l == 0:
                            for o in range(dout):
                                if fpl[o] == 0.0:
                                    continue
                                for k in range(n):
                                    gW[o * n + k] += DG[o * n + k]
                        else:
                            Prev = JP + joff[l - 1]
                            Wl = P + woff
                            for i in range(din):
                                if FP[uoff[l] + i] == 0.0 and FPP[uoff[l] + i] == 0.0:
                                    continue
                                for k in range(n):
                                    G2[i * n + k] = 0.0
                            for o in range(dout):
                                if fpl[o] == 0.0:
                                    continue
                                for i in range(din):
                                    if FP[uoff[l] + i] == 0.0 and FPP[uoff[l] + i] == 0.0:
                                        continue
                                    acc = 0.0
                                    for k in range(n):
                                        acc = acc + DG[o * n + k] * Prev[i * n + k]
                                    gW[o * din + i] += acc
                                    acc = Wl[o * din + i]
                                    for k in range(n):
                                        G2[i * n + k] += acc * DG[o * n + k]
                            tmp = G
                            G = G2
                            G2 = tmp
                    for o in range(dout):
                        if delta[o] == 0.0:
                            continue
                        gW = gP + woff + o * din
                        for i in range(din):
                            gW[i] += delta[o] * hprev[i]
                        gP[boff + o] += delta[o]
                    if l > 0:
                        for i in range(din):
                            dh2[i] = 0.0
                        for o in range(dout):
                            if delta[o] == 0.0:
                                continue
                            Wl = P + woff + o * din
                            for i in range(din):
                                dh2[i] += delta[o] * Wl[i]
                        tmp = dh
                        dh = dh2
                        dh2 = tmp
    finally:
        free(uoff); free(A); free(H); free(FP); free(FPP)
        free(dh); free(dh2); free(delta); free(joff); free(JP); free(JQ)
        free(G); free(G2); free(DG)

    return (recon * inv_b, contr * inv_b, sup * inv_b, grad_arr if want_grad else None)


def explainer_train(double[::1] params, const cnp.int64_t[::1] dims, const int[::1] acts,
                    const cnp.int64_t[::1] offsets, const double[:, ::1] X, const double[:, ::1] S,
                    const double[::1] delta_s, const double[::1] delta_full, double lr,
                    bint normalize, Py_ssize_t batch, bint use_adam, double[::1] adam_m,
                    double[::1] adam_v, long adam_t, double beta1=0.9, double beta2=0.999,
                    double eps=1e-8):
    cdef Py_ssize_t L = acts.shape[0]
    cdef Py_ssize_t d = dims[0]
    cdef Py_ssize_t dout_last = dims[L]
    cdef Py_ssize_t n_steps = X.shape[0] // batch
    cdef Py_ssize_t npar = params.shape[0]
    cdef Py_ssize_t step, b, row, l, o, i, k, din, dout, woff, boff
    cdef double acc, r, shift, gmean, loss, c1, c2, mh, vh
    cdef long t = adam_t

    losses_arr = np.empty(n_steps)
    cdef double[::1] losses = losses_arr
    cdef double* P = &params[0]
    cdef double* gP = <double*> calloc(npar, sizeof(double))
    cdef double* Mm = &adam_m[0] if use_adam else NULL
    cdef double* Vv = &adam_v[0] if use_adam else NULL

    cdef Py_ssize_t* uoff = <Py_ssize_t*> malloc((L + 2) * sizeof(Py_ssize_t))
    cdef Py_ssize_t total_units = 0, maxw = 0
    for l in range(L + 1):
        uoff[l] = total_units
        total_units += dims[l]
        if dims[l] > maxw:
            maxw = dims[l]
    cdef double* A = <double*> malloc(total_units * sizeof(double))
    cdef double* H = <double*> malloc(total_units * sizeof(double))
    cdef double* FP = <double*> malloc(total_units * sizeof(double))
    cdef double* FPP = <double*> malloc(total_units * sizeof(double))
    cdef double* phi = <double*> malloc(dout_last * sizeof(double))
    cdef double* dh = <double*> malloc(maxw * sizeof(double))
    cdef double* dh2 = <double*> malloc(maxw * sizeof(double))
    cdef double* delta = <double*> malloc(maxw * sizeof(double))
    cdef double* tmp
    cdef double* Wl
    cdef double* hprev
    cdef double* gW

    try:
        with nogil:
            for step in range(n_steps):
                memset(gP, 0, npar * sizeof(double))
                loss = 0.0
                for b in range(batch):
                    row = step * batch + b
                    for k in range(d):
                        H[k] = X[row, k]
                    for l in range(L):
                        din = dims[l]
                        dout = dims[l + 1]
                        woff = offsets[l]
                        boff = woff + dout * din
                        hprev = H + uoff[l]
                        for o in range(dout):
                            acc = P[boff + o]
                            Wl = P + woff + o * din
                            for i in range(din):
                                acc = acc + Wl[i] * hprev[i]
                            A[uoff[l + 1] + o] = acc
                        _activate(A + uoff[l + 1], H + uoff[l + 1], FP + uoff[l + 1],
                                  FPP + uoff[l + 1], dout, acts[l])
                    acc = 0.0
                    for k in range(dout_last):
                        phi[k] = H[uoff[L] + k]
                        acc = acc + phi[k]
                    if normalize:
                        shift = (delta_full[row] - acc) / dout_last
                        for k in range(dout_last):
                            phi[k] += shift
                    r = delta_s[row]
                    for k in range(dout_last):
                        r = r - S[row, k] * phi[k]
                    loss += r * r
                    gmean = 0.0
                    for k in range(dout_last):
                        dh[k] = -2.0 * r * S[row, k] / batch
                        gmean = gmean + dh[k]
                    if normalize:
                        gmean = gmean / dout_last
                        for k in range(dout_last):
                            dh[k] -= gmean
                    for l in range(L - 1, -1, -1):
                        din = dims[l]
                        dout = dims[l + 1]
                        woff = offsets[l]
                        boff = woff + dout * din
                        hprev = H + uoff[l]
                        for o in range(dout):
                            delta[o] = dh[o] * FP[uoff[l + 1] + o]
                        for o in range(dout):
                            if delta[o] == 0.0:
                                continue
                            gW = gP + woff + o * din
                            for i in range(din):
                                gW[i] += delta[o] * hprev[i]
                            gP[boff + o] += delta[o]
                        if l > 0:
                            for i in range(din):
                                dh2[i] = 0.0
                            for o in range(dout):
                                if delta[o] == 0.0:
                                    continue
                                Wl = P + woff + o * din
                                for i in range(din):
                                    dh2[i] += delta[o] * Wl[i]
                            tmp = dh
                            dh = dh2
                            dh2 = tmp
                losses[step] = loss / batch
                if use_adam:
                    t += 1
                    c1 = 1.0 - beta1 ** t
                    c2 = 1.0 - beta2 ** t
                    for k in range(npar):
                        Mm[k] = beta1 * Mm[k] + (1.0 - beta1) * gP[k]
                        Vv[k] = beta2 * Vv[k] + (1.0 - beta2) * gP[k] * gP[k]
                        mh = Mm[k] / c1
                        vh = Vv[k] / c2
                        P[k] -= lr * mh / (sqrt(vh) + eps)
                else:
                    for k in range(npar):
                        P[k] -= lr * gP[k]
    finally:
        free(gP); free(uoff); free(A); free(H); free(FP); free(FPP)
        free(phi); free(dh); free(dh2); free(delta)

    return losses_arr, t
