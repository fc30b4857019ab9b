"""Independent reference implementations used by the tests.

Everything here is written with plain Python loops over scalars so that it
shares no code path with the vectorized package.
"""

import math

import numpy as np


def mat(n, fill=0.0):
    return [[fill] * n for _ in range(n)]


def eye(n):
    m = mat(n)
    for i in range(n):
        m[i][i] = 1.0
    return m


def matmul(a, b):
    n, k, m = len(a), len(b), len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return out


def matvec(a, x):
    return [sum(a[i][j] * x[j] for j in range(len(x))) for i in range(len(a))]


def lu_det(a):
    """Determinant by Gaussian elimination with partial pivoting."""
    n = len(a)
    m = [row[:] for row in a]
    det = 1.0
    for c in range(n):
        p = max(range(c, n), key=lambda r: abs(m[r][c]))
        if m[p][c] == 0.0:
            return 0.0
        if p != c:
            m[c], m[p] = m[p], m[c]
            det = -det
        det *= m[c][c]
        for r in range(c + 1, n):
            f = m[r][c] / m[c][c]
            for j in range(c, n):
                m[r][j] -= f * m[c][j]
    return det


def gauss_jordan_inverse(a):
    n = len(a)
    m = [row[:] + e for row, e in zip(a, eye(n))]
    for c in range(n):
        p = max(range(c, n), key=lambda r: abs(m[r][c]))
        m[c], m[p] = m[p], m[c]
        piv = m[c][c]
        m[c] = [v / piv for v in m[c]]
        for r in range(n):
            if r != c:
                f = m[r][c]
                m[r] = [vr - f * vc for vr, vc in zip(m[r], m[c])]
    return [row[n:] for row in m]


def operator(kind, W, rho, p=10):
    """Dense A(rho) for SAR, SMA or truncated SME from loops."""
    n = len(W)
    sar = [[(1.0 if i == j else 0.0) - rho * W[i][j] for j in range(n)] for i in range(n)]
    if kind == "SAR":
        return sar
    if kind == "SMA":
        return gauss_jordan_inverse(sar)
    out = eye(n)
    term = eye(n)
    for i in range(1, p + 1):
        term = matmul(term, W)
        term = [[v * rho / i for v in row] for row in term]
        out = [[o + t for o, t in zip(ro, rt)] for ro, rt in zip(out, term)]
    return out


def loglik(kind, W, y, Z, theta):
    """Gaussian log-likelihood of the log-SHE model by explicit sums."""
    n = len(y)
    rho, gamma = theta[0], theta[1:]
    A = operator(kind, W, rho)
    ly = [math.log(v * v) for v in y]
    total = 0.0
    for i in range(n):
        a_i = sum(A[i][j] * ly[j] for j in range(n))
        zg = sum(Z[i][k] * gamma[k] for k in range(len(gamma)))
        log_h = ly[i] - (a_i - zg)
        total += math.log(2 * math.pi) + log_h + y[i] * y[i] / math.exp(log_h)
    return -0.5 * total + math.log(lu_det(A))


def residual_u(kind, W, y, Z, theta):
    n = len(y)
    rho, gamma = theta[0], theta[1:]
    A = operator(kind, W, rho)
    ly = [math.log(v * v) for v in y]
    u = []
    for i in range(n):
        a_i = sum(A[i][j] * ly[j] for j in range(n))
        zg = sum(Z[i][k] * gamma[k] for k in range(len(gamma)))
        u.append(math.exp(a_i - zg) - 1.0)
    return u


def quad_form(P, u):
    """u' P u by a double loop."""
    n = len(u)
    return sum(u[i] * P[i][j] * u[j] for i in range(n) for j in range(n))


def moment_vector(kind, W, y, Z, theta, P_list, Q):
    u = residual_u(kind, W, y, Z, theta)
    n = len(u)
    out = [quad_form(P, u) for P in P_list]
    for c in range(len(Q[0])):
        out.append(sum(Q[i][c] * u[i] for i in range(n)))
    return out


def neumann_effects(rho, beta, beta_m, W, terms=200):
    """ATE and ADE of (I - rho W)^{-1}(beta I + beta_m W) by the power series."""
    n = len(W)
    M = [[beta * (1.0 if i == j else 0.0) + beta_m * W[i][j] for j in range(n)] for i in range(n)]
    S = mat(n)
    term = M
    for _ in range(terms):
        S = [[s + t for s, t in zip(rs, rt)] for rs, rt in zip(S, term)]
        term = [[rho * v for v in row] for row in matmul(W, term)]
    ate = sum(sum(row) for row in S) / n
    ade = sum(S[i][i] for i in range(n)) / n
    return ate, ade


def central_gradient(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def central_jacobian(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = step
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * step))
    return np.column_stack(cols)


def hand_weights(n, seed):
    """Small row-standardized W with a random sparsity pattern and unequal weights."""
    rng = np.random.default_rng(seed)
    m = rng.random((n, n)) * (rng.random((n, n)) < 0.6)
    np.fill_diagonal(m, 0.0)
    for i in range(n):
        if m[i].sum() == 0:
            m[i, (i + 1) % n] = 1.0
    return (m / m.sum(axis=1, keepdims=True)).tolist()
