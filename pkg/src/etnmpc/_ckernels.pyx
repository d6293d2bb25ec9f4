# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled RK4 shooting kernels.

Model codes: 0 = Chen-Allgower benchmark (params = [mu]),
1 = linear x' = A x + B u (params = A.ravel() ++ B.ravel()).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport isfinite

cnp.import_array()

cdef enum:
    MAXN = 16
    MAXM = 8

BACKEND = "cython"


cdef inline void _rhs(int code, const double* p, int n, int m, const double* x,
                      const double* u, const double* w, double* out) noexcept nogil:
    cdef int i, j
    cdef double s, mu
    if code == 0:
        mu = p[0]
        out[0] = x[1] + u[0] * (mu + (1.0 - mu) * x[0]) + w[0]
        out[1] = x[0] + u[0] * (mu - 4.0 * (1.0 - mu) * x[1]) + w[1]
    else:
        for i in range(n):
            s = 0.0
            for j in range(n):
                s += p[i * n + j] * x[j]
            for j in range(m):
                s += p[n * n + i * m + j] * u[j]
            out[i] = s + w[i]


cdef inline void _rk4(int code, const double* p, int n, int m, double* x,
                      const double* u, const double* w, double h) noexcept nogil:
    cdef double k1[MAXN]
    cdef double k2[MAXN]
    cdef double k3[MAXN]
    cdef double k4[MAXN]
    cdef double xt[MAXN]
    cdef int i
    _rhs(code, p, n, m, x, u, w, k1)
    for i in range(n):
        xt[i] = x[i] + 0.5 * h * k1[i]
    _rhs(code, p, n, m, xt, u, w, k2)
    for i in range(n):
        xt[i] = x[i] + 0.5 * h * k2[i]
    _rhs(code, p, n, m, xt, u, w, k3)
    for i in range(n):
        xt[i] = x[i] + h * k3[i]
    _rhs(code, p, n, m, xt, u, w, k4)
    for i in range(n):
        x[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


cdef inline double _quad(const double* M, const double* v, int n) noexcept nogil:
    cdef double s = 0.0, r
    cdef int i, j
    for i in range(n):
        r = 0.0
        for j in range(n):
            r += M[i * n + j] * v[j]
        s += v[i] * r
    return s


cdef double _segments(int code, const double* p, int n, int m, double* x,
                      const double* U, int j0, int N, int sps, double h,
                      const double* Q, const double* R, const double* zero) noexcept nogil:
    """Roll x forward through segments j0..N-1, returning the trapezoid stage cost."""
    cdef int j, s
    cdef double cost = 0.0, qa, qb, ru
    qa = _quad(Q, x, n)
    for j in range(j0, N):
        ru = _quad(R, &U[j * m], m)
        for s in range(sps):
            _rk4(code, p, n, m, x, &U[j * m], zero, h)
            qb = _quad(Q, x, n)
            cost += h * (0.5 * (qa + qb) + ru)
            qa = qb
    return cost


def _check(int n, int m):
    if n > MAXN or m > MAXM:
        raise ValueError(f"compiled kernel supports n <= {MAXN}, m <= {MAXM}")


def rk4_steps(int code, double[::1] params, int n, int m, double[::1] x0,
              double[:, ::1] U, double[:, ::1] W, double[::1] H):
    """Per-step constant (u, w) RK4; returns the (K+1, n) state history."""
    _check(n, m)
    cdef Py_ssize_t K = H.shape[0], k
    cdef int i
    out = np.empty((K + 1, n))
    cdef double[:, ::1] X = out
    cdef double x[MAXN]
    for i in range(n):
        x[i] = x0[i]
        X[0, i] = x[i]
    with nogil:
        for k in range(K):
            _rk4(code, &params[0], n, m, x, &U[k, 0], &W[k, 0], H[k])
            for i in range(n):
                X[k + 1, i] = x[i]
    return out


def shoot(int code, double[::1] params, int n, int m, double[::1] x0,
          double[:, ::1] U, int sps, double h, double[:, ::1] Q, double[:, ::1] R):
    """Dense nominal rollout over piecewise-constant controls plus its stage cost."""
    _check(n, m)
    cdef int N = U.shape[0], j, s, i
    cdef Py_ssize_t k = 0
    out = np.empty((N * sps + 1, n))
    cdef double[:, ::1] X = out
    cdef double x[MAXN]
    cdef double zero[MAXN]
    cdef double cost = 0.0, qa, qb, ru
    for i in range(n):
        x[i] = x0[i]
        zero[i] = 0.0
        X[0, i] = x[i]
    with nogil:
        qa = _quad(&Q[0, 0], x, n)
        for j in range(N):
            ru = _quad(&R[0, 0], &U[j, 0], m)
            for s in range(sps):
                _rk4(code, &params[0], n, m, x, &U[j, 0], zero, h)
                k += 1
                for i in range(n):
                    X[k, i] = x[i]
                qb = _quad(&Q[0, 0], x, n)
                cost += h * (0.5 * (qa + qb) + ru)
                qa = qb
    return out, cost


def cost_terminal(int code, double[::1] params, int n, int m, double[::1] x0,
                  double[:, ::1] U, int sps, double h, double[:, ::1] Q, double[:, ::1] R,
                  double[:, ::1] P):
    """Returns (stage cost J, terminal V_f); inf when the rollout blows up."""
    _check(n, m)
    cdef int N = U.shape[0], i, j
    cdef double x[MAXN]
    cdef double zero[MAXN]
    cdef double J = 0.0, vT
    for i in range(n):
        x[i] = x0[i]
        zero[i] = 0.0
    with nogil:
        for j in range(N):
            J = J + _segments(code, &params[0], n, m, x, &U[0, 0], j, j + 1, sps, h,
                              &Q[0, 0], &R[0, 0], zero)
        vT = _quad(&P[0, 0], x, n)
    if not isfinite(J) or not isfinite(vT):
        return np.inf, np.inf
    return J, vT


def cost_terminal_grad(int code, double[::1] params, int n, int m, double[::1] x0,
                       double[:, ::1] U, int sps, double h, double[:, ::1] Q,
                       double[:, ::1] R, double[:, ::1] P, double fd_step):
    """(J, V_f) and their central-difference gradients over segment values.

    A perturbation of segment j leaves segments < j untouched, so each
    perturbed rollout restarts from the cached state at the start of j.
    """
    _check(n, m)
    cdef int N = U.shape[0], i, j, c, sgn
    cdef double x[MAXN]
    cdef double zero[MAXN]
    cdef double J, vT, Jp, vp, orig
    cdef double jplus = 0.0, vplus = 0.0
    starts_arr = np.empty((N + 1, n))
    prefix_arr = np.empty(N + 1)
    gJ_arr = np.empty((N, m))
    gV_arr = np.empty((N, m))
    Uw_arr = np.array(U, copy=True)
    cdef double[:, ::1] starts = starts_arr
    cdef double[::1] prefix = prefix_arr
    cdef double[:, ::1] gJ = gJ_arr
    cdef double[:, ::1] gV = gV_arr
    cdef double[:, ::1] Uw = Uw_arr
    for i in range(n):
        x[i] = x0[i]
        zero[i] = 0.0
    with nogil:
        prefix[0] = 0.0
        for j in range(N):
            for i in range(n):
                starts[j, i] = x[i]
            prefix[j + 1] = prefix[j] + _segments(code, &params[0], n, m, x, &Uw[0, 0], j, j + 1,
                                                  sps, h, &Q[0, 0], &R[0, 0], zero)
        J = prefix[N]
        vT = _quad(&P[0, 0], x, n)
        for j in range(N):
            for c in range(m):
                orig = Uw[j, c]
                for sgn in range(2):
                    Uw[j, c] = orig + fd_step if sgn == 0 else orig - fd_step
                    for i in range(n):
                        x[i] = starts[j, i]
                    Jp = prefix[j] + _segments(code, &params[0], n, m, x, &Uw[0, 0], j, N,
                                               sps, h, &Q[0, 0], &R[0, 0], zero)
                    vp = _quad(&P[0, 0], x, n)
                    if sgn == 0:
                        jplus = Jp
                        vplus = vp
                Uw[j, c] = orig
                gJ[j, c] = (jplus - Jp) / (2.0 * fd_step)
                gV[j, c] = (vplus - vp) / (2.0 * fd_step)
    if not isfinite(J) or not isfinite(vT):
        return np.inf, np.inf, gJ_arr, gV_arr
    return J, vT, gJ_arr, gV_arr
