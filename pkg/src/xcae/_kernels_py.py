"""Pure-numpy kernels. Reference implementation and fallback for ``_ckernels``.

Parameters live in one flat float64 vector. For layer ``l`` with fan-in
``dims[l]`` and fan-out ``dims[l+1]`` the weight block (row-major, out x in)
starts at ``offsets[l]`` and the bias follows it. When a head is present its
weights (1 x dims[n_enc]) and bias sit at ``offsets[L]``.
"""
from __future__ import annotations

import numpy as np

LINEAR, RELU, SIGMOID = 0, 1, 2


def _act(a, code):
    if code == RELU:
        h = np.maximum(a, 0.0)
        return h, (a > 0.0).astype(np.float64), np.zeros_like(a)
    if code == SIGMOID:
        h = 0.5 * (1.0 + np.tanh(0.5 * a))
        fp = h * (1.0 - h)
        return h, fp, fp * (1.0 - 2.0 * h)
    return a.copy(), np.ones_like(a), np.zeros_like(a)


def _views(params, dims, offsets, n_layers):
    Ws, bs = [], []
    for l in range(n_layers):
        o, i = dims[l + 1], dims[l]
        off = offsets[l]
        Ws.append(params[off:off + o * i].reshape(o, i))
        bs.append(params[off + o * i:off + o * i + o])
    return Ws, bs


def mlp_forward(params, dims, acts, offsets, X):
    """Plain forward pass, returns the list of activations h[0..L]."""
    L = len(acts)
    Ws, bs = _views(params, dims, offsets, L)
    hs = [X]
    h = X
    for l in range(L):
        h, _, _ = _act(h @ Ws[l].T + bs[l], acts[l])
        hs.append(h)
    return hs


def _softplus(t):
    return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))


def cae_loss_grad(params, dims, acts, offsets, n_enc, X, y, alpha, lambda_c, want_grad=True):
    """Loss terms and gradient of the semi-supervised contractive autoencoder.

    Returns (recon, contractive, supervised, grad); all terms are batch means.
    """
    L = len(acts)
    B, n = X.shape
    Ws, bs = _views(params, dims, offsets, L)
    hoff = offsets[L]
    m = dims[n_enc]
    ws = params[hoff:hoff + m]
    b_s = params[hoff + m]

    hs, fps, fpps = [X], [], []
    h = X
    for l in range(L):
        h, fp, fpp = _act(h @ Ws[l].T + bs[l], acts[l])
        hs.append(h)
        fps.append(fp)
        fpps.append(fpp)
    z, xhat = hs[n_enc], hs[L]
    t = z @ ws + b_s

    diff = xhat - X
    recon = float(np.mean(np.sum(diff * diff, axis=1)))

    # Jacobian chain stored as (width, batch, n) so each layer is one GEMM.
    contractive = 0.0
    Ps, Qs = [None], [None]
    if lambda_c != 0.0:
        P = None
        for l in range(n_enc):
            o = dims[l + 1]
            if l == 0:
                Q = np.broadcast_to(Ws[0][:, None, :], (o, B, n))
            else:
                Q = (Ws[l] @ P.reshape(dims[l], B * n)).reshape(o, B, n)
            P = fps[l].T[:, :, None] * Q
            Qs.append(Q)
            Ps.append(P)
        contractive = float(lambda_c * np.sum(P * P) / B)

    bce = _softplus(t) - y * t
    supervised = float(np.mean(alpha * bce))

    if not want_grad:
        return recon, contractive, supervised, None

    grad = np.zeros_like(params)
    gWs, gbs = _views(grad, dims, offsets, L)
    dh = 2.0 * diff / B
    G = 2.0 * lambda_c * Ps[n_enc] / B if lambda_c != 0.0 else None
    for l in range(L - 1, -1, -1):
        if l + 1 == n_enc:
            p = 0.5 * (1.0 + np.tanh(0.5 * t))
            dt = alpha * (p - y) / B
            grad[hoff:hoff + m] = dt @ z
            grad[hoff + m] = dt.sum()
            dh = dh + dt[:, None] * ws[None, :]
        delta = dh * fps[l]
        if G is not None and l < n_enc:
            # Jacobian path: P_l = diag(f'(a_l)) W_l P_{l-1}
            o, i = dims[l + 1], dims[l]
            delta = delta + np.sum(G * Qs[l + 1], axis=2).T * fpps[l]
            DG = fps[l].T[:, :, None] * G
            if l == 0:
                gWs[0] += DG.sum(axis=1)
            else:
                DG2 = DG.reshape(o, B * n)
                gWs[l] += DG2 @ Ps[l].reshape(i, B * n).T
                G = (Ws[l].T @ DG2).reshape(i, B, n)
        gWs[l] += delta.T @ hs[l]
        gbs[l] += delta.sum(axis=0)
        if l > 0:
            dh = delta @ Ws[l]
    return recon, contractive, supervised, grad


def explainer_train(params, dims, acts, offsets, X, S, delta_s, delta_full, lr, normalize,
                    batch, use_adam, adam_m, adam_v, adam_t, beta1=0.9, beta2=0.999, eps=1e-8):
    """Run ``len(X) // batch`` optimizer steps in place; returns (losses, adam_t).

    Step k uses rows [k*batch, (k+1)*batch). Loss per row is
    (delta_s - s . phi)^2 with phi optionally shifted to satisfy efficiency.
    """
    L = len(acts)
    d = dims[0]
    Ws, bs = _views(params, dims, offsets, L)
    n_steps = X.shape[0] // batch
    losses = np.empty(n_steps)
    t = adam_t
    for k in range(n_steps):
        sl = slice(k * batch, (k + 1) * batch)
        x, s, ds, df = X[sl], S[sl], delta_s[sl], delta_full[sl]
        hs, fps = [x], []
        h = x
        for l in range(L):
            h, fp, _ = _act(h @ Ws[l].T + bs[l], acts[l])
            hs.append(h)
            fps.append(fp)
        phi = h
        if normalize:
            phi = phi + (df - phi.sum(axis=1))[:, None] / d
        r = ds - np.sum(s * phi, axis=1)
        losses[k] = np.mean(r * r)
        g = -2.0 * r[:, None] * s / batch
        if normalize:
            g = g - g.mean(axis=1, keepdims=True)
        grad = np.zeros_like(params)
        gWs, gbs = _views(grad, dims, offsets, L)
        dh = g
        for l in range(L - 1, -1, -1):
            delta = dh * fps[l]
            gWs[l] += delta.T @ hs[l]
            gbs[l] += delta.sum(axis=0)
            if l > 0:
                dh = delta @ Ws[l]
        if use_adam:
            t += 1
            adam_m *= beta1
            adam_m += (1.0 - beta1) * grad
            adam_v *= beta2
            adam_v += (1.0 - beta2) * grad * grad
            mh = adam_m / (1.0 - beta1 ** t)
            vh = adam_v / (1.0 - beta2 ** t)
            params -= lr * mh / (np.sqrt(vh) + eps)
        else:
            params -= lr * grad
    return losses, t
