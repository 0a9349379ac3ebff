"""Compiled per-instance kernels behind the staged solver.

Every function here is numba-compiled over contiguous float64 arrays and
releases the GIL, so the batch executor can spread instance chunks over a
thread pool. Linear algebra is written as explicit loops with a fixed
accumulation order: a given instance therefore produces bit-identical numbers
regardless of batch size, chunking, or which execution mode drives the kernel.

The ``*_range`` kernels operate on a slice of instances ``[i_lo, i_hi)`` and a
slice of timesteps ``[t_lo, t_hi)``; a fused dispatch covers the whole horizon
in one call, a per-timestep dispatch passes a single step. State carried
between timesteps (rollout states, value-function terms, candidate costs)
lives in caller-owned workspace arrays, which is what makes the two dispatch
granularities numerically indistinguishable.
"""

import math

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True)

KIND_DOUBLE_INTEGRATOR = 0
KIND_PLANAR_QUADROTOR = 1
KIND_LINEAR = 2

BOXQP_OK = 0
BOXQP_NOT_PD = -1

_ARMIJO = 0.1
_STEP_DEC = 0.6
_MIN_STEP = 1e-20
_LAM_INIT = 1e-6
_LAM_MAX = 1e-2


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------


@njit(**_JIT)
def step_one(kind, mp, dt, x, u, out):
    n_x = x.shape[0]
    n_u = u.shape[0]
    if kind == KIND_DOUBLE_INTEGRATOR:
        d = n_u
        for i in range(d):
            out[i] = x[i] + dt * x[d + i]
            out[d + i] = x[d + i] + dt * u[i]
    elif kind == KIND_PLANAR_QUADROTOR:
        m = mp[0]
        arm = mp[1]
        inertia = mp[2]
        g = mp[3]
        s = math.sin(x[2])
        c = math.cos(x[2])
        thrust = u[0] + u[1]
        out[0] = x[0] + dt * x[3]
        out[1] = x[1] + dt * x[4]
        out[2] = x[2] + dt * x[5]
        out[3] = x[3] + dt * (-thrust * s / m)
        out[4] = x[4] + dt * (thrust * c / m - g)
        out[5] = x[5] + dt * (arm * (u[1] - u[0]) / inertia)
    else:  # KIND_LINEAR: mp = [A row-major, B row-major]
        for i in range(n_x):
            acc = 0.0
            for j in range(n_x):
                acc += mp[i * n_x + j] * x[j]
            for j in range(n_u):
                acc += mp[n_x * n_x + i * n_u + j] * u[j]
            out[i] = acc


@njit(**_JIT)
def jac_one(kind, mp, dt, x, u, A, B):
    n_x = x.shape[0]
    n_u = u.shape[0]
    for i in range(n_x):
        for j in range(n_x):
            A[i, j] = 0.0
        for j in range(n_u):
            B[i, j] = 0.0
    if kind == KIND_DOUBLE_INTEGRATOR:
        d = n_u
        for i in range(n_x):
            A[i, i] = 1.0
        for i in range(d):
            A[i, d + i] = dt
            B[d + i, i] = dt
    elif kind == KIND_PLANAR_QUADROTOR:
        m = mp[0]
        arm = mp[1]
        inertia = mp[2]
        s = math.sin(x[2])
        c = math.cos(x[2])
        thrust = u[0] + u[1]
        for i in range(6):
            A[i, i] = 1.0
        A[0, 3] = dt
        A[1, 4] = dt
        A[2, 5] = dt
        A[3, 2] = -dt * thrust * c / m
        A[4, 2] = -dt * thrust * s / m
        B[3, 0] = -dt * s / m
        B[3, 1] = -dt * s / m
        B[4, 0] = dt * c / m
        B[4, 1] = dt * c / m
        B[5, 0] = -dt * arm / inertia
        B[5, 1] = dt * arm / inertia
    else:
        for i in range(n_x):
            for j in range(n_x):
                A[i, j] = mp[i * n_x + j]
            for j in range(n_u):
                B[i, j] = mp[n_x * n_x + i * n_u + j]


@njit(**_JIT)
def stage_cost_one(Ct, ct, z):
    n = z.shape[0]
    acc = 0.0
    for i in range(n):
        row = 0.0
        for j in range(n):
            row += Ct[i, j] * z[j]
        acc += 0.5 * z[i] * row + ct[i] * z[i]
    return acc


@njit(**_JIT)
def _stage_cost_xu(Ct, ct, x, u):
    # same expression tree as stage_cost_one, indexed over the [x; u] blocks
    n_x = x.shape[0]
    n = ct.shape[0]
    acc = 0.0
    for i in range(n):
        zi = x[i] if i < n_x else u[i - n_x]
        row = 0.0
        for j in range(n):
            zj = x[j] if j < n_x else u[j - n_x]
            row += Ct[i, j] * zj
        acc += 0.5 * zi * row + ct[i] * zi
    return acc


@njit(**_JIT)
def _finite_vec(v):
    for i in range(v.shape[0]):
        if not math.isfinite(v[i]):
            return False
    return True


# ---------------------------------------------------------------------------
# stage 1: rollout (with running cost) and linearization
# ---------------------------------------------------------------------------


@njit(**_JIT)
def rollout_range(kind, mp, dt, X, U, C, c, J, fail_t, active, i_lo, i_hi, t_lo, t_hi):
    """Roll instances forward over [t_lo, t_hi), accumulating stage cost in J.

    On a non-finite state, fail_t[i] records the offending timestep and the
    instance is deactivated; fail_t stays -1 otherwise.
    """
    for i in range(i_lo, i_hi):
        if active[i] == 0:
            continue
        for t in range(t_lo, t_hi):
            J[i] += _stage_cost_xu(C[i, t], c[i, t], X[i, t], U[i, t])
            step_one(kind, mp, dt, X[i, t], U[i, t], X[i, t + 1])
            if not _finite_vec(X[i, t + 1]):
                fail_t[i] = t
                active[i] = 0
                J[i] = np.inf
                break


@njit(**_JIT)
def linearize_range(kind, mp, dt, X, U, A, B, active, i_lo, i_hi, t_lo, t_hi):
    for i in range(i_lo, i_hi):
        if active[i] == 0:
            continue
        for t in range(t_lo, t_hi):
            jac_one(kind, mp, dt, X[i, t], U[i, t], A[i, t], B[i, t])


# ---------------------------------------------------------------------------
# box-constrained stage QP (projected Newton)
# ---------------------------------------------------------------------------


@njit(**_JIT)
def _chol_factor(H, L, idx, nf):
    """Lower Cholesky of the nf x nf submatrix H[idx, idx] into L. True on success."""
    for a in range(nf):
        for b in range(a + 1):
            s = H[idx[a], idx[b]]
            for r in range(b):
                s -= L[a, r] * L[b, r]
            if a == b:
                if s <= 0.0:
                    return False
                L[a, a] = math.sqrt(s)
            else:
                L[a, b] = s / L[b, b]
    return True


@njit(**_JIT)
def _chol_solve(L, b, out, nf):
    # L L' out = b
    for a in range(nf):
        s = b[a]
        for r in range(a):
            s -= L[a, r] * out[r]
        out[a] = s / L[a, a]
    for a in range(nf - 1, -1, -1):
        s = out[a]
        for r in range(a + 1, nf):
            s -= L[r, a] * out[r]
        out[a] = s / L[a, a]


@njit(**_JIT)
def _qp_value(H, g, u):
    n = u.shape[0]
    acc = 0.0
    for a in range(n):
        row = 0.0
        for b in range(n):
            row += H[a, b] * u[b]
        acc += 0.5 * u[a] * row + g[a] * u[a]
    return acc


@njit(**_JIT)
def boxqp_one(H, g, lo, hi, u, free, L, idx, grad, search, rhs, cand, max_iter, tol):
    """Minimize 0.5 u'Hu + g'u subject to lo <= u <= hi, starting from u.

    Projected Newton with Armijo backtracking. u is updated in place; free
    marks the non-clamped dimensions of the final iterate. Returns BOXQP_OK or
    BOXQP_NOT_PD. The scratch arrays (L, idx, grad, search, rhs, cand) are
    caller-owned so hot loops do not allocate.
    """
    n = u.shape[0]
    for a in range(n):
        if u[a] < lo[a]:
            u[a] = lo[a]
        elif u[a] > hi[a]:
            u[a] = hi[a]
        free[a] = 1
    value = _qp_value(H, g, u)
    for _ in range(max_iter):
        # gradient and clamp detection
        n_free = 0
        for a in range(n):
            s = g[a]
            for b in range(n):
                s += H[a, b] * u[b]
            grad[a] = s
            clamped = (u[a] <= lo[a] and s > 0.0) or (u[a] >= hi[a] and s < 0.0)
            if clamped:
                free[a] = 0
            else:
                free[a] = 1
                idx[n_free] = a
                n_free += 1
        if n_free == 0:
            return BOXQP_OK
        gnorm = 0.0
        for a in range(n_free):
            gnorm += grad[idx[a]] * grad[idx[a]]
        if math.sqrt(gnorm) <= tol:
            return BOXQP_OK
        # Newton target on the free subspace: H_ff t = g_f + H_fc u_c
        if not _chol_factor(H, L, idx, n_free):
            return BOXQP_NOT_PD
        for a in range(n_free):
            s = g[idx[a]]
            for b in range(n):
                if free[b] == 0:
                    s += H[idx[a], b] * u[b]
            rhs[a] = s
        _chol_solve(L, rhs, cand, n_free)
        for a in range(n):
            search[a] = 0.0
        sdotg = 0.0
        for a in range(n_free):
            step_a = -cand[a] - u[idx[a]]
            search[idx[a]] = step_a
            sdotg += step_a * grad[idx[a]]
        if sdotg >= 0.0:
            return BOXQP_OK
        # backtracking projected line search
        step = 1.0
        accepted = False
        while step > _MIN_STEP:
            for a in range(n):
                v = u[a] + step * search[a]
                if v < lo[a]:
                    v = lo[a]
                elif v > hi[a]:
                    v = hi[a]
                cand[a] = v
            vc = _qp_value(H, g, cand)
            if vc - value <= _ARMIJO * step * sdotg:
                accepted = True
                break
            step *= _STEP_DEC
        if not accepted:
            return BOXQP_OK
        for a in range(n):
            u[a] = cand[a]
        value = vc
    return BOXQP_OK


# ---------------------------------------------------------------------------
# stage 2: Riccati backward sweep with input bounds
# ---------------------------------------------------------------------------


@njit(**_JIT)
def backward_range(
    A,
    B,
    C,
    c,
    X,
    U,
    u_min,
    u_max,
    Vx,
    Vxx,
    K,
    k,
    clamped,
    fail_t,
    active,
    i_lo,
    i_hi,
    t_lo,
    t_hi,
    boxqp_max_iter,
    boxqp_tol,
):
    """Backward value recursion over [t_hi-1, t_lo], one stage QP per step.

    Vx/Vxx carry the value expansion between calls (the caller zeroes them
    before the first stage of a sweep). Feedback rows of clamped dimensions
    are exactly zero; fail_t[i] records the stage index if a stage Hessian
    cannot be made positive definite.
    """
    n_x = X.shape[2]
    n_u = U.shape[2]
    n_z = n_x + n_u
    # per-call scratch, reused across instances and stages
    gz = np.empty(n_z)
    qx = np.empty(n_x)
    qu = np.empty(n_u)
    qxx = np.empty((n_x, n_x))
    qux = np.empty((n_u, n_x))
    quu = np.empty((n_u, n_u))
    quu_try = np.empty((n_u, n_u))
    MA = np.empty((n_x, n_x))
    NB = np.empty((n_x, n_u))
    lo = np.empty(n_u)
    hi = np.empty(n_u)
    du = np.empty(n_u)
    free = np.empty(n_u, dtype=np.uint8)
    L = np.empty((n_u, n_u))
    idx = np.empty(n_u, dtype=np.int64)
    grad = np.empty(n_u)
    search = np.empty(n_u)
    rhs = np.empty(n_u)
    cand = np.empty(n_u)
    kcol = np.empty(n_u)
    newVx = np.empty(n_x)
    newVxx = np.empty((n_x, n_x))
    for i in range(i_lo, i_hi):
        if active[i] == 0:
            continue
        for t in range(t_hi - 1, t_lo - 1, -1):
            At = A[i, t]
            Bt = B[i, t]
            Ct = C[i, t]
            ct = c[i, t]
            x = X[i, t]
            u = U[i, t]
            vx = Vx[i]
            vxx = Vxx[i]
            # stage-cost gradient at the nominal point: gz = C z + c
            for a in range(n_z):
                s = ct[a]
                for b in range(n_z):
                    s += Ct[a, b] * (x[b] if b < n_x else u[b - n_x])
                gz[a] = s
            for a in range(n_x):
                s = gz[a]
                for b in range(n_x):
                    s += At[b, a] * vx[b]
                qx[a] = s
            for a in range(n_u):
                s = gz[n_x + a]
                for b in range(n_x):
                    s += Bt[b, a] * vx[b]
                qu[a] = s
            for a in range(n_x):
                for b in range(n_x):
                    s = 0.0
                    for r in range(n_x):
                        s += vxx[a, r] * At[r, b]
                    MA[a, b] = s
                for b in range(n_u):
                    s = 0.0
                    for r in range(n_x):
                        s += vxx[a, r] * Bt[r, b]
                    NB[a, b] = s
            for a in range(n_x):
                for b in range(n_x):
                    s = Ct[a, b]
                    for r in range(n_x):
                        s += At[r, a] * MA[r, b]
                    qxx[a, b] = s
            for a in range(n_u):
                for b in range(n_x):
                    s = Ct[n_x + a, b]
                    for r in range(n_x):
                        s += Bt[r, a] * MA[r, b]
                    qux[a, b] = s
            for a in range(n_u):
                for b in range(n_u):
                    s = Ct[n_x + a, n_x + b]
                    for r in range(n_x):
                        s += Bt[r, a] * NB[r, b]
                    quu[a, b] = s
            # stage QP on the control increment, bounds relative to the nominal
            for a in range(n_u):
                lo[a] = u_min[a] - u[a]
                hi[a] = u_max[a] - u[a]
            lam = 0.0
            ok = False
            while True:
                for a in range(n_u):
                    for b in range(n_u):
                        quu_try[a, b] = quu[a, b] + (lam if a == b else 0.0)
                for a in range(n_u):
                    du[a] = 0.0
                st = boxqp_one(
                    quu_try, qu, lo, hi, du, free, L, idx, grad, search, rhs, cand,
                    boxqp_max_iter, boxqp_tol,
                )
                if st == BOXQP_OK:
                    n_free = 0
                    for a in range(n_u):
                        if free[a] == 1:
                            idx[n_free] = a
                            n_free += 1
                    if n_free == 0 or _chol_factor(quu_try, L, idx, n_free):
                        ok = True
                        break
                lam = _LAM_INIT if lam == 0.0 else lam * 10.0
                if lam > _LAM_MAX:
                    break
            if not ok:
                fail_t[i] = t
                active[i] = 0
                break
            n_free = 0
            for a in range(n_u):
                if free[a] == 1:
                    idx[n_free] = a
                    n_free += 1
                clamped[i, t, a] = 0 if free[a] == 1 else 1
                k[i, t, a] = du[a]
                for b in range(n_x):
                    K[i, t, a, b] = 0.0
            # feedback on the free subspace: K_f = -Quu_ff^{-1} Qux_f
            for col in range(n_x):
                if n_free == 0:
                    break
                for a in range(n_free):
                    rhs[a] = qux[idx[a], col]
                _chol_solve(L, rhs, kcol, n_free)
                for a in range(n_free):
                    K[i, t, idx[a], col] = -kcol[a]
            # value update (unregularized Quu)
            for a in range(n_x):
                s = qx[a]
                for r in range(n_u):
                    rowq = 0.0
                    for b in range(n_u):
                        rowq += quu[r, b] * k[i, t, b]
                    s += K[i, t, r, a] * (rowq + qu[r]) + qux[r, a] * k[i, t, r]
                newVx[a] = s
            for a in range(n_x):
                for b in range(n_x):
                    s = qxx[a, b]
                    for r in range(n_u):
                        rowq = 0.0
                        for q2 in range(n_u):
                            rowq += quu[r, q2] * K[i, t, q2, b]
                        s += K[i, t, r, a] * rowq + K[i, t, r, a] * qux[r, b] + qux[r, a] * K[i, t, r, b]
                    newVxx[a, b] = s
            for a in range(n_x):
                vx[a] = newVx[a]
            for a in range(n_x):
                for b in range(n_x):
                    vxx[a, b] = 0.5 * (newVxx[a, b] + newVxx[b, a])


# ---------------------------------------------------------------------------
# stage 3: line-search rollouts over candidate step sizes
# ---------------------------------------------------------------------------


@njit(**_JIT)
def linesearch_range(
    kind,
    mp,
    dt,
    Xnom,
    Unom,
    K,
    k,
    alphas,
    u_min,
    u_max,
    C,
    c,
    Xc,
    Uc,
    Jc,
    dead,
    active,
    c_lo,
    c_hi,
    t_lo,
    t_hi,
):
    """Roll candidate (instance, alpha) trajectories over [t_lo, t_hi).

    Items are flattened candidate indices ci = i * n_alpha + a. A diverging
    candidate is marked dead with infinite cost; the caller treats an
    all-dead instance as failed.
    """
    n_alpha = alphas.shape[0]
    n_u = Unom.shape[2]
    for ci in range(c_lo, c_hi):
        i = ci // n_alpha
        a = ci % n_alpha
        if active[i] == 0 or dead[i, a] == 1:
            continue
        alpha = alphas[a]
        for t in range(t_lo, t_hi):
            xc = Xc[i, a, t]
            for r in range(n_u):
                v = Unom[i, t, r] + alpha * k[i, t, r]
                for b in range(Xnom.shape[2]):
                    v += K[i, t, r, b] * (xc[b] - Xnom[i, t, b])
                if v < u_min[r]:
                    v = u_min[r]
                elif v > u_max[r]:
                    v = u_max[r]
                Uc[i, a, t, r] = v
            Jc[i, a] += _stage_cost_xu(C[i, t], c[i, t], xc, Uc[i, a, t])
            step_one(kind, mp, dt, xc, Uc[i, a, t], Xc[i, a, t + 1])
            if not _finite_vec(Xc[i, a, t + 1]) or not math.isfinite(Jc[i, a]):
                dead[i, a] = 1
                Jc[i, a] = np.inf
                break


# ---------------------------------------------------------------------------
# implicit-differentiation sweeps (auxiliary LQR at the solution)
# ---------------------------------------------------------------------------


@njit(**_JIT)
def aux_backward_range(
    A, B, C, sx, su, clamped, Vx, Vxx, K, k, fail_t, active, i_lo, i_hi, t_lo, t_hi
):
    """Riccati sweep of the auxiliary LQR whose linear cost is the seed.

    Clamped control dimensions are frozen: their rows/columns of the stage
    Hessian are zeroed with a unit diagonal and their linear terms dropped, so
    the resulting gains keep those differentials exactly zero. The caller
    initializes Vx to the terminal state seed and Vxx to zero; after the
    sweep reaches t_lo == 0, Vx holds the loss gradient w.r.t. the initial
    state.
    """
    n_x = A.shape[2]
    n_u = B.shape[3]
    qx = np.empty(n_x)
    qu = np.empty(n_u)
    qxx = np.empty((n_x, n_x))
    qux = np.empty((n_u, n_x))
    quu = np.empty((n_u, n_u))
    MA = np.empty((n_x, n_x))
    NB = np.empty((n_x, n_u))
    L = np.empty((n_u, n_u))
    idx = np.empty(n_u, dtype=np.int64)
    rhs = np.empty(n_u)
    sol = np.empty(n_u)
    newVx = np.empty(n_x)
    newVxx = np.empty((n_x, n_x))
    for i in range(i_lo, i_hi):
        if active[i] == 0:
            continue
        for t in range(t_hi - 1, t_lo - 1, -1):
            At = A[i, t]
            Bt = B[i, t]
            Ct = C[i, t]
            vx = Vx[i]
            vxx = Vxx[i]
            for a in range(n_x):
                s = sx[i, t, a]
                for b in range(n_x):
                    s += At[b, a] * vx[b]
                qx[a] = s
            for a in range(n_u):
                s = su[i, t, a]
                for b in range(n_x):
                    s += Bt[b, a] * vx[b]
                qu[a] = s
            for a in range(n_x):
                for b in range(n_x):
                    s = 0.0
                    for r in range(n_x):
                        s += vxx[a, r] * At[r, b]
                    MA[a, b] = s
                for b in range(n_u):
                    s = 0.0
                    for r in range(n_x):
                        s += vxx[a, r] * Bt[r, b]
                    NB[a, b] = s
            for a in range(n_x):
                for b in range(n_x):
                    s = Ct[a, b]
                    for r in range(n_x):
                        s += At[r, a] * MA[r, b]
                    qxx[a, b] = s
            for a in range(n_u):
                for b in range(n_x):
                    s = Ct[n_x + a, b]
                    for r in range(n_x):
                        s += Bt[r, a] * MA[r, b]
                    qux[a, b] = s
            for a in range(n_u):
                for b in range(n_u):
                    s = Ct[n_x + a, n_x + b]
                    for r in range(n_x):
                        s += Bt[r, a] * NB[r, b]
                    quu[a, b] = s
            # freeze clamped dimensions
            for a in range(n_u):
                if clamped[i, t, a] == 1:
                    qu[a] = 0.0
                    for b in range(n_x):
                        qux[a, b] = 0.0
                    for b in range(n_u):
                        quu[a, b] = 0.0
                        quu[b, a] = 0.0
                    quu[a, a] = 1.0
            n_free = n_u
            for a in range(n_u):
                idx[a] = a
            if not _chol_factor(quu, L, idx, n_free):
                fail_t[i] = t
                active[i] = 0
                break
            for a in range(n_u):
                rhs[a] = qu[a]
            _chol_solve(L, rhs, sol, n_free)
            for a in range(n_u):
                k[i, t, a] = -sol[a]
            for col in range(n_x):
                for a in range(n_u):
                    rhs[a] = qux[a, col]
                _chol_solve(L, rhs, sol, n_free)
                for a in range(n_u):
                    K[i, t, a, col] = -sol[a]
            for a in range(n_x):
                s = qx[a]
                for r in range(n_u):
                    rowq = 0.0
                    for b in range(n_u):
                        rowq += quu[r, b] * k[i, t, b]
                    s += K[i, t, r, a] * (rowq + qu[r]) + qux[r, a] * k[i, t, r]
                newVx[a] = s
            for a in range(n_x):
                for b in range(n_x):
                    s = qxx[a, b]
                    for r in range(n_u):
                        rowq = 0.0
                        for q2 in range(n_u):
                            rowq += quu[r, q2] * K[i, t, q2, b]
                        s += K[i, t, r, a] * rowq + K[i, t, r, a] * qux[r, b] + qux[r, a] * K[i, t, r, b]
                    newVxx[a, b] = s
            for a in range(n_x):
                vx[a] = newVx[a]
            for a in range(n_x):
                for b in range(n_x):
                    vxx[a, b] = 0.5 * (newVxx[a, b] + newVxx[b, a])


@njit(**_JIT)
def aux_rollout_range(A, B, K, k, dX, dU, active, i_lo, i_hi, t_lo, t_hi):
    """Roll the differential dynamics under the auxiliary gains (dX[:, 0] = 0)."""
    n_x = A.shape[2]
    n_u = B.shape[3]
    for i in range(i_lo, i_hi):
        if active[i] == 0:
            continue
        for t in range(t_lo, t_hi):
            for r in range(n_u):
                s = k[i, t, r]
                for b in range(n_x):
                    s += K[i, t, r, b] * dX[i, t, b]
                dU[i, t, r] = s
            for a in range(n_x):
                s = 0.0
                for b in range(n_x):
                    s += A[i, t, a, b] * dX[i, t, b]
                for b in range(n_u):
                    s += B[i, t, a, b] * dU[i, t, b]
                dX[i, t + 1, a] = s


@njit(**_JIT)
def aux_assemble_range(X, U, dX, dU, clamped, dC, dc, active, i_lo, i_hi, t_lo, t_hi):
    """Map differentials to parameter gradients: dc = dz, dC = sym(dz z')."""
    n_x = X.shape[2]
    n_u = U.shape[2]
    n_z = n_x + n_u
    for i in range(i_lo, i_hi):
        if active[i] == 0:
            continue
        for t in range(t_lo, t_hi):
            for a in range(n_z):
                da = dX[i, t, a] if a < n_x else dU[i, t, a - n_x]
                dc[i, t, a] = da
                za = X[i, t, a] if a < n_x else U[i, t, a - n_x]
                for b in range(n_z):
                    db = dX[i, t, b] if b < n_x else dU[i, t, b - n_x]
                    zb = X[i, t, b] if b < n_x else U[i, t, b - n_x]
                    dC[i, t, a, b] = 0.5 * (da * zb + za * db)
            for a in range(n_u):
                if clamped[i, t, a] == 1:
                    dc[i, t, n_x + a] = 0.0
                    for b in range(n_z):
                        dC[i, t, n_x + a, b] = 0.0
                        dC[i, t, b, n_x + a] = 0.0
