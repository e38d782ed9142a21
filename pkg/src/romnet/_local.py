"""Compiled per-point kernels of the slip-system update.

Parameter rows of ``P`` (shape ``(n, 10, 18)``) follow ``FLOW_KEYS`` in
:mod:`romnet.material`: eps_h, K_h, n_h, c, d, M, m, r0, Q, b.
"""

import numpy as np
from numba import njit

EPS_H, K_H, N_H, C_, D_, M_, MEXP, R0, Q_, B_ = range(10)


@njit(cache=True)
def _pow_m1(y, m):
    """``y ** (m - 1)`` with fast paths for the usual integer exponents."""
    if m == 3.0:
        return y * y
    if m == 2.0:
        return y
    return y ** (m - 1.0)


@njit(cache=True)
def backstress_scalar(x_old, dg, dt, c, d, M, m):
    """Implicit kinematic hardening with restorative static recovery.

    Solves ``x (1 + d|dg|) + dt c (|x|/M)^m sign(x) = x_old + c dg``;
    returns ``(x, dx/d(dg))``.
    """
    a = 1.0 + d * abs(dg)
    k = dt * c / M ** m
    h = x_old + c * dg
    target = abs(h)
    y = target / a
    if k > 0.0 and y > 0.0:
        # convex in y, so Newton from this upper bound decreases monotonically
        for _ in range(100):
            ym1 = _pow_m1(y, m)
            g = a * y + k * ym1 * y - target
            step = g / (a + k * m * ym1)
            y_new = y - step
            if y_new < 0.0:
                y_new = 0.5 * y
            y = y_new
            if abs(step) <= 1e-15 * (1.0 + y):
                break
    x = y if h >= 0.0 else -y
    sgn = 1.0 if dg > 0.0 else (-1.0 if dg < 0.0 else 0.0)
    dxdg = (c - d * sgn * x) / (a + k * m * _pow_m1(y, m))
    return x, dxdg


@njit(cache=True)
def backstress_batch(x_old, dg, dt, P):
    n, s = x_old.shape
    x = np.empty((n, s))
    dxdg = np.empty((n, s))
    for i in range(n):
        for j in range(s):
            x[i, j], dxdg[i, j] = backstress_scalar(x_old[i, j], dg[i, j], dt, P[i, C_, j],
                                                    P[i, D_, j], P[i, M_, j], P[i, MEXP, j])
    return x, dxdg


@njit(cache=True)
def _solve_inplace(J, b, out):
    """Gaussian elimination with partial pivoting; destroys ``J`` and ``b``."""
    n = b.size
    for k in range(n):
        piv = k
        best = abs(J[k, k])
        for r in range(k + 1, n):
            v = abs(J[r, k])
            if v > best:
                best = v
                piv = r
        if piv != k:
            for c in range(k, n):
                tmp = J[k, c]
                J[k, c] = J[piv, c]
                J[piv, c] = tmp
            tmp = b[k]
            b[k] = b[piv]
            b[piv] = tmp
        inv = 1.0 / J[k, k]
        for r in range(k + 1, n):
            f = J[r, k] * inv
            if f != 0.0:
                for c in range(k + 1, n):
                    J[r, c] -= f * J[k, c]
                b[r] -= f * b[k]
    for k in range(n - 1, -1, -1):
        acc = b[k]
        for c in range(k + 1, n):
            acc -= J[k, c] * out[c]
        out[k] = acc / J[k, k]


@njit(cache=True)
def _schmid_products(C, sig, S, A, tau):
    """``A = S C S^T`` and ``tau = S sig`` without temporaries."""
    ns = S.shape[0]
    CS = np.empty((6, ns))
    for a in range(6):
        for s in range(ns):
            acc = 0.0
            for b in range(6):
                acc += C[a, b] * S[s, b]
            CS[a, s] = acc
    for s in range(ns):
        acc = 0.0
        for a in range(6):
            acc += S[s, a] * sig[a]
        tau[s] = acc
        for t in range(ns):
            acc = 0.0
            for a in range(6):
                acc += S[s, a] * CS[a, t]
            A[s, t] = acc


@njit(cache=True)
def _residual(g, tau_tr, A, x_old, nu_old, dt, P, scale, R, x, dxdg, D, sz, drdg):
    """Fill the flow-rule residual and its ingredients; return the capped count."""
    ns = g.size
    capped = 0
    for s in range(ns):
        x[s], dxdg[s] = backstress_scalar(x_old[s], g[s], dt, P[C_, s], P[D_, s], P[M_, s],
                                          P[MEXP, s])
    for s in range(ns):
        tau = tau_tr[s]
        for t in range(ns):
            tau -= A[s, t] * g[t]
        z = tau - x[s]
        nu = nu_old[s] + abs(g[s])
        ebn = np.exp(-P[B_, s] * nu)
        r = P[R0, s] + P[Q_, s] * (1.0 - ebn)
        f = (abs(z) - r) / P[K_H, s]
        n_h = P[N_H, s]
        if f > 0.0:
            fn1 = _pow_m1(f, n_h)
            phi = fn1 * f
            D[s] = n_h * fn1 / P[K_H, s]
            if phi > 50.0:
                capped += 1
        else:
            phi = 0.0
            D[s] = 0.0
        sz[s] = 1.0 if z > 0.0 else (-1.0 if z < 0.0 else 0.0)
        sg = 1.0 if g[s] > 0.0 else (-1.0 if g[s] < 0.0 else sz[s])
        drdg[s] = P[Q_, s] * P[B_, s] * ebn * sg
        R[s] = np.arcsinh(g[s] / scale[s]) - phi * sz[s]
    return capped


@njit(cache=True)
def local_solve(C, sig_tr, x_old, nu_old, dt, P, S, tol, max_iter, G0):
    """Backward-Euler slip increments for a batch of points.

    The flow rule is solved as ``asinh(dg / (dt eps_h)) = <(|tau-x|-r)/K>^n sign(tau-x)``
    with a damped Newton iteration (step bound + backtracking on ``|R|^2``)
    started from ``G0``.

    Returns ``(dgamma, x, converged, iterations, capped)``.
    """
    n = sig_tr.shape[0]
    ns = S.shape[0]
    G = np.zeros((n, ns))
    X = np.zeros((n, ns))
    conv = np.zeros(n, dtype=np.bool_)
    iters = np.zeros(n, dtype=np.int64)
    capped = np.zeros(n, dtype=np.int64)
    R = np.empty(ns)
    x = np.empty(ns)
    dxdg = np.empty(ns)
    D = np.empty(ns)
    sz = np.empty(ns)
    drdg = np.empty(ns)
    Rt = np.empty(ns)
    xt = np.empty(ns)
    dxt = np.empty(ns)
    Dt = np.empty(ns)
    szt = np.empty(ns)
    drt = np.empty(ns)
    J = np.empty((ns, ns))
    A = np.empty((ns, ns))
    tau_tr = np.empty(ns)
    gb = np.empty(ns)
    g = np.empty(ns)
    gt = np.empty(ns)
    dg = np.empty(ns)
    rhs = np.empty(ns)
    for i in range(n):
        _schmid_products(C[i], sig_tr[i], S, A, tau_tr)
        scale = dt * P[i, EPS_H]
        bound = 0.0
        for s in range(ns):
            bound = max(bound, abs(tau_tr[s]) + abs(x_old[i, s]))
        for s in range(ns):
            gb[s] = 2.0 * bound / A[s, s] + 10.0 * scale[s]
        g[:] = G0[i]
        cap = _residual(g, tau_tr, A, x_old[i], nu_old[i], dt, P[i], scale, R, x, dxdg, D, sz, drdg)
        it = 0
        ok = False
        while True:
            err = 0.0
            for s in range(ns):
                err = max(err, abs(R[s]))
            if err <= tol:
                ok = True
                break
            if it >= max_iter:
                break
            it += 1
            for s in range(ns):
                for t in range(ns):
                    J[s, t] = D[s] * A[s, t]
                J[s, s] += 1.0 / np.sqrt(scale[s] ** 2 + g[s] ** 2) + D[s] * dxdg[s] + D[s] * sz[s] * drdg[s]
            for s in range(ns):
                rhs[s] = -R[s]
            _solve_inplace(J, rhs, dg)
            over = 0.0
            for s in range(ns):
                over = max(over, abs(g[s] + dg[s]) / gb[s])
            if over > 1.0:
                for s in range(ns):
                    dg[s] /= over
            norm0 = 0.0
            for s in range(ns):
                norm0 += R[s] ** 2
            lam = 1.0
            for _ in range(20):
                for s in range(ns):
                    gt[s] = g[s] + lam * dg[s]
                cap = _residual(gt, tau_tr, A, x_old[i], nu_old[i], dt, P[i], scale, Rt, xt, dxt, Dt,
                                szt, drt)
                nt = 0.0
                for s in range(ns):
                    nt += Rt[s] ** 2
                if nt <= (1.0 - 1e-4 * lam) * norm0:
                    break
                lam *= 0.5
            g[:] = gt
            R[:] = Rt
            x[:] = xt
            dxdg[:] = dxt
            D[:] = Dt
            sz[:] = szt
            drdg[:] = drt
        G[i] = g
        X[i] = x
        conv[i] = ok
        iters[i] = it
        capped[i] = cap
    return G, X, conv, iters, capped


@njit(cache=True)
def consistent_terms(C, sig_tr, x_old, nu_old, dt, P, S, G):
    """Jacobian pieces at converged slips, for the analytic tangent ``dsigma/deps``.

    Returns ``(J, Dvec)`` with ``J`` the local Newton matrix and ``Dvec`` the
    flow-rule slope; ``dg/deps = J^{-1} diag(D) S C``.
    """
    n = sig_tr.shape[0]
    ns = S.shape[0]
    Jout = np.empty((n, ns, ns))
    Dout = np.empty((n, ns))
    R = np.empty(ns)
    x = np.empty(ns)
    dxdg = np.empty(ns)
    D = np.empty(ns)
    sz = np.empty(ns)
    drdg = np.empty(ns)
    A = np.empty((ns, ns))
    tau_tr = np.empty(ns)
    for i in range(n):
        _schmid_products(C[i], sig_tr[i], S, A, tau_tr)
        scale = dt * P[i, EPS_H]
        g = G[i].copy()
        _residual(g, tau_tr, A, x_old[i], nu_old[i], dt, P[i], scale, R, x, dxdg, D, sz, drdg)
        for s in range(ns):
            for t in range(ns):
                Jout[i, s, t] = D[s] * A[s, t]
            Jout[i, s, s] += 1.0 / np.sqrt(scale[s] ** 2 + g[s] ** 2) + D[s] * dxdg[s] + D[s] * sz[s] * drdg[s]
        Dout[i] = D
    return Jout, Dout
