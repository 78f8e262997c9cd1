"""Compiled inner loops for the GP-mean rollout used by the NMPC solver."""

import numpy as np
from numba import njit


@njit(cache=True)
def rollout_with_sensitivities(x0, U, zm, zs, ym, ys, Zn, W, A):
    """Roll the GP mean forward and propagate ``dX/dU``.

    Parameters
    ----------
    x0 : (n_x,) physical initial state
    U : (H, n_u) physical controls
    zm, zs : input scaler mean / std, (n_z,)
    ym, ys : output scaler mean / std, (n_x,)
    Zn : (N, n_z) normalized training inputs
    W : (n_x, n_z) inverse squared length-scales per output
    A : (n_x, N) ``zeta^2 * Sigma_Y^-1 Y`` per output

    Returns
    -------
    X : (H+1, n_x) physical states, ``X[0] = x0``
    S : (H+1, n_x, H*n_u) sensitivities of ``X`` w.r.t. the flattened ``U``
    """
    H, nu = U.shape
    nx = x0.shape[0]
    nz = nx + nu
    N = Zn.shape[0]
    m = H * nu
    X = np.zeros((H + 1, nx))
    S = np.zeros((H + 1, nx, m))
    X[0, :] = x0
    zn = np.empty(nz)
    diff = np.empty(nz)
    grad = np.empty(nz)
    J = np.empty((nx, nz))
    for k in range(H):
        for d in range(nx):
            zn[d] = (X[k, d] - zm[d]) / zs[d]
        for d in range(nu):
            zn[nx + d] = (U[k, d] - zm[nx + d]) / zs[nx + d]
        for i in range(nx):
            mu = 0.0
            for d in range(nz):
                grad[d] = 0.0
            for j in range(N):
                s = 0.0
                for d in range(nz):
                    diff[d] = zn[d] - Zn[j, d]
                    s += diff[d] * diff[d] * W[i, d]
                e = A[i, j] * np.exp(-0.5 * s)
                mu += e
                for d in range(nz):
                    grad[d] -= e * diff[d] * W[i, d]
            X[k + 1, i] = ym[i] + ys[i] * mu
            for d in range(nz):
                J[i, d] = ys[i] * grad[d] / zs[d]
        for i in range(nx):
            for c in range(k * nu):
                acc = 0.0
                for d in range(nx):
                    acc += J[i, d] * S[k, d, c]
                S[k + 1, i, c] = acc
            for d in range(nu):
                S[k + 1, i, k * nu + d] = J[i, nx + d]
    return X, S


@njit(cache=True)
def rollout_mean(x0, U, zm, zs, ym, ys, Zn, W, A):
    """Mean-only variant of :func:`rollout_with_sensitivities`."""
    H, nu = U.shape
    nx = x0.shape[0]
    nz = nx + nu
    N = Zn.shape[0]
    X = np.zeros((H + 1, nx))
    X[0, :] = x0
    zn = np.empty(nz)
    for k in range(H):
        for d in range(nx):
            zn[d] = (X[k, d] - zm[d]) / zs[d]
        for d in range(nu):
            zn[nx + d] = (U[k, d] - zm[nx + d]) / zs[nx + d]
        for i in range(nx):
            mu = 0.0
            for j in range(N):
                s = 0.0
                for d in range(nz):
                    df = zn[d] - Zn[j, d]
                    s += df * df * W[i, d]
                mu += A[i, j] * np.exp(-0.5 * s)
            X[k + 1, i] = ym[i] + ys[i] * mu
    return X


@njit(cache=True)
def ocp_terms(x0, s, lo, span, R, prev_u, has_prev, w_term, c_step, c_row, c_off,
              zm, zs, ym, ys, Zn, W, A):
    """Objective (without variance penalty), constraints and their gradients in scaled controls.

    Returns ``(f, grad_f, c, Jc, U, X, S)`` where ``S`` is the physical
    sensitivity tensor of the rollout.
    """
    nu = lo.shape[0]
    H = s.shape[0] // nu
    U = np.empty((H, nu))
    for k in range(H):
        for d in range(nu):
            U[k, d] = lo[d] + span[d] * s[k * nu + d]
    X, S = rollout_with_sensitivities(x0, U, zm, zs, ym, ys, Zn, W, A)
    nx = x0.shape[0]
    m = H * nu
    f = 0.0
    g = np.zeros(m)
    for i in range(nx):
        f += w_term[i] * X[H, i]
        for c in range(m):
            g[c] += w_term[i] * S[H, i, c]
    for k in range(H):
        for d in range(nu):
            if k > 0:
                du = U[k, d] - U[k - 1, d]
            elif has_prev:
                du = U[0, d] - prev_u[d]
            else:
                continue
            f += R[d] * du * du
            g[k * nu + d] += 2.0 * R[d] * du
            if k > 0:
                g[(k - 1) * nu + d] -= 2.0 * R[d] * du
    nc = c_off.shape[0]
    cv = np.empty(nc)
    Jc = np.zeros((nc, m))
    for r in range(nc):
        k = c_step[r]
        acc = c_off[r]
        for i in range(nx):
            acc += c_row[r, i] * X[k, i]
            for c in range(m):
                Jc[r, c] += c_row[r, i] * S[k, i, c]
        cv[r] = acc
    for c in range(m):
        sc = span[c % nu]
        g[c] *= sc
        for r in range(nc):
            Jc[r, c] *= sc
    return f, g, cv, Jc, U, X, S
