"""Pure-numpy fallback for the compiled shooting kernels.

Same call surface as ``_ckernels`` except that the model enters as a
right-hand-side callable ``rhs(x, u)`` accepting either single vectors or
stacked rows ``(B, n)``/``(B, m)``.
"""
import numpy as np

BACKEND = "python"


def _rk4(rhs, x, u, w, h):
    k1 = rhs(x, u) + w
    k2 = rhs(x + 0.5 * h * k1, u) + w
    k3 = rhs(x + 0.5 * h * k2, u) + w
    k4 = rhs(x + h * k3, u) + w
    return x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _quad(M, v):
    return np.einsum("...i,ij,...j->...", v, M, v)


def rk4_steps(rhs, x0, U, W, H):
    K = len(H)
    X = np.empty((K + 1, len(x0)))
    x = np.array(x0, dtype=float)
    X[0] = x
    for k in range(K):
        x = _rk4(rhs, x, U[k], W[k], H[k])
        X[k + 1] = x
    return X


def _segments(rhs, x, U, j0, j1, sps, h, Q, R):
    # x may be (n,) or (B, n); U is (N, m) or (B, N, m)
    cost = np.zeros(x.shape[:-1])
    zero = np.zeros_like(x)
    total = np.zeros(x.shape[:-1])
    for j in range(j0, j1):
        u = U[..., j, :]
        ru = _quad(R, u)
        qa = _quad(Q, x)
        cost = np.zeros(x.shape[:-1])
        for _ in range(sps):
            x = _rk4(rhs, x, u, zero, h)
            qb = _quad(Q, x)
            cost = cost + h * (0.5 * (qa + qb) + ru)
            qa = qb
        total = total + cost
    return x, total


def shoot(rhs, x0, U, sps, h, Q, R):
    N = U.shape[0]
    X = np.empty((N * sps + 1, len(x0)))
    x = np.array(x0, dtype=float)
    X[0] = x
    zero = np.zeros_like(x)
    cost = 0.0
    qa = _quad(Q, x)
    k = 0
    for j in range(N):
        ru = _quad(R, U[j])
        for _ in range(sps):
            x = _rk4(rhs, x, U[j], zero, h)
            k += 1
            X[k] = x
            qb = _quad(Q, x)
            cost += h * (0.5 * (qa + qb) + ru)
            qa = qb
    return X, float(cost)


def cost_terminal(rhs, x0, U, sps, h, Q, R, P):
    x = np.array(x0, dtype=float)
    J = 0.0
    for j in range(U.shape[0]):
        x, c = _segments(rhs, x, U, j, j + 1, sps, h, Q, R)
        J = J + float(c)
    vT = float(_quad(P, x))
    if not (np.isfinite(J) and np.isfinite(vT)):
        return np.inf, np.inf
    return J, vT


def cost_terminal_grad(rhs, x0, U, sps, h, Q, R, P, fd_step):
    """Central differences, all perturbed rollouts advanced together as one batch."""
    N, m = U.shape
    J, vT = cost_terminal(rhs, x0, U, sps, h, Q, R, P)
    batch = np.repeat(U[None, :, :], 2 * N * m, axis=0)
    idx = 0
    for j in range(N):
        for c in range(m):
            batch[idx, j, c] += fd_step
            batch[idx + 1, j, c] -= fd_step
            idx += 2
    x = np.repeat(np.asarray(x0, dtype=float)[None, :], 2 * N * m, axis=0)
    total = np.zeros(2 * N * m)
    for j in range(N):
        x, c = _segments(rhs, x, batch, j, j + 1, sps, h, Q, R)
        total = total + c
    v = _quad(P, x)
    gJ = ((total[0::2] - total[1::2]) / (2.0 * fd_step)).reshape(N, m)
    gV = ((v[0::2] - v[1::2]) / (2.0 * fd_step)).reshape(N, m)
    return J, vT, gJ, gV
