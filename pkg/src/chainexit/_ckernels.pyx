# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled path and line-solve kernels.

Same contracts as :mod:`chainexit._pykernels`; every routine releases the GIL
so blocks of paths can run on a thread pool.
"""
from libc.math cimport sqrt, exp, log, sin, cos, tanh, fabs, pow, isfinite, ceil, fmin, fmax, M_PI
from libc.stdlib cimport malloc, free
from libc.stdint cimport uint32_t, uint64_t, int32_t

cdef enum:
    CENSORED = 0
    GAMMA_PLUS = 1
    GAMMA_ZERO = 2
    GAMMA_MINUS = 3
    FAILED = -1
    UNIFORM_TAG = 0x40000000

cdef double BRIDGE_CUTOFF = 50.0

cdef double TWO_M53 = 1.0 / 9007199254740992.0


cdef inline void philox(uint32_t* c, uint32_t k0, uint32_t k1) noexcept nogil:
    cdef uint64_t p0, p1
    cdef uint32_t n0, n1, n2, n3
    cdef int r
    for r in range(10):
        if r:
            k0 = k0 + <uint32_t>0x9E3779B9
            k1 = k1 + <uint32_t>0xBB67AE85
        p0 = <uint64_t>0xD2511F53 * <uint64_t>c[0]
        p1 = <uint64_t>0xCD9E8D57 * <uint64_t>c[2]
        n0 = <uint32_t>(p1 >> 32) ^ c[1] ^ k0
        n1 = <uint32_t>p1
        n2 = <uint32_t>(p0 >> 32) ^ c[3] ^ k1
        n3 = <uint32_t>p0
        c[0] = n0
        c[1] = n1
        c[2] = n2
        c[3] = n3


cdef inline void block_uniforms(uint32_t word, uint32_t step, uint64_t stream, uint64_t seed,
                                double* u1, double* u2) noexcept nogil:
    cdef uint32_t c[4]
    c[0] = word
    c[1] = step
    c[2] = <uint32_t>stream
    c[3] = <uint32_t>(stream >> 32)
    philox(c, <uint32_t>seed, <uint32_t>(seed >> 32))
    cdef uint64_t a = ((<uint64_t>c[0]) | ((<uint64_t>c[1]) << 32)) >> 11
    cdef uint64_t b = ((<uint64_t>c[2]) | ((<uint64_t>c[3]) << 32)) >> 11
    u1[0] = (<double>a + 1.0) * TWO_M53
    u2[0] = (<double>b) * TWO_M53


cdef inline void fill_normals(double* z, int nslots, uint32_t step, uint64_t stream, uint64_t seed) noexcept nogil:
    cdef int q
    cdef double u1, u2, r, ang
    for q in range((nslots + 1) // 2):
        block_uniforms(<uint32_t>q, step, stream, seed, &u1, &u2)
        r = sqrt(-2.0 * log(u1))
        ang = 2.0 * M_PI * u2
        z[2 * q] = r * cos(ang)
        if 2 * q + 1 < nslots:
            z[2 * q + 1] = r * sin(ang)


cdef inline double vm(const int32_t* code, int start, int length, const double* consts,
                      const double* slots, double* stack, int* err) noexcept nogil:
    cdef int sp = 0
    cdef int j, op, arg
    cdef double a, b, r
    for j in range(length):
        op = code[start + 2 * j]
        arg = code[start + 2 * j + 1]
        if op == 0:
            stack[sp] = consts[arg]
            sp += 1
            continue
        if op == 1:
            stack[sp] = slots[arg]
            sp += 1
            continue
        if op >= 7 and op <= 14:
            a = stack[sp - 1]
            if op == 7:
                r = -a
            elif op == 8:
                r = sin(a)
            elif op == 9:
                r = cos(a)
            elif op == 10:
                r = exp(a)
            elif op == 11:
                r = log(a)
            elif op == 12:
                r = tanh(a)
            elif op == 13:
                r = sqrt(a)
            else:
                r = fabs(a)
            stack[sp - 1] = r
        else:
            b = stack[sp - 1]
            a = stack[sp - 2]
            sp -= 1
            if op == 2:
                r = a + b
            elif op == 3:
                r = a - b
            elif op == 4:
                r = a * b
            elif op == 5:
                r = a / b
            elif op == 6:
                r = pow(a, b)
            elif op == 15:
                r = fmin(a, b)
            else:
                r = fmax(a, b)
            stack[sp - 1] = r
        if not isfinite(r):
            err[0] = 1
    r = stack[0]
    if not isfinite(r):
        err[0] = 1
    return r


cdef inline double signed_distance(int kind, const double* par, const double* x, int d) noexcept nogil:
    cdef int c
    cdef double q, acc = 0.0, mx = -1e308, v
    if kind == 1:
        for c in range(d):
            v = x[c] - par[c]
            acc += v * v
        return sqrt(acc) - par[d]
    for c in range(d):
        q = fabs(x[c] - (par[c] + par[d + c]) * 0.5) - (par[d + c] - par[c]) * 0.5
        if q > 0:
            acc += q * q
        if q > mx:
            mx = q
    return sqrt(acc) + fmin(mx, 0.0)


cdef inline void project_normal(int kind, const double* par, double* x, double* n, int d) noexcept nogil:
    """Overwrites ``x`` with its boundary projection and fills the outward normal."""
    cdef int c, k = 0
    cdef double r = 0.0, v, q, mx = -1e308, cen
    if kind == 1:
        for c in range(d):
            v = x[c] - par[c]
            r += v * v
        r = sqrt(r)
        if not r > 0:
            r = 1.0
        for c in range(d):
            n[c] = (x[c] - par[c]) / r
            x[c] = par[c] + par[d] * n[c]
        return
    for c in range(d):
        q = fabs(x[c] - (par[c] + par[d + c]) * 0.5) - (par[d + c] - par[c]) * 0.5
        if q > mx:
            mx = q
            k = c
    for c in range(d):
        n[c] = 0.0
        x[c] = fmin(fmax(x[c], par[c]), par[d + c])
    cen = (par[k] + par[d + k]) * 0.5
    n[k] = 1.0 if (x[k] - cen >= 0) else -1.0
    x[k] = par[d + k] if n[k] > 0 else par[k]


cdef inline double bridge_box(const double* par, const double* x0, const double* x1, const double* var,
                              double h, int d, int* axis, double* side) noexcept nogil:
    cdef int c, s
    cdef double surv = 1.0, best = 0.0, a, b, arg, p, bound, sgn
    axis[0] = 0
    side[0] = 1.0
    for c in range(d):
        for s in range(2):
            if s == 0:
                sgn = -1.0
                bound = par[c]
            else:
                sgn = 1.0
                bound = par[d + c]
            a = (x0[c] - bound) * -sgn
            b = (x1[c] - bound) * -sgn
            arg = 2.0 * a * b / (var[c] * h)
            p = exp(-fmin(arg, BRIDGE_CUTOFF)) if arg < BRIDGE_CUTOFF else 0.0
            surv *= 1.0 - p
            if p > best:
                best = p
                axis[0] = c
                side[0] = sgn
    return 1.0 - surv


def n_steps(double s, double T, double dt):
    if T <= s:
        return 0
    return max(1, <long>ceil((T - s) / dt * (1.0 - 1e-12)))


def run_paths(tables, int d, int m, int ell, const double[::1] init, double s, double T, double dt,
              double eps, const double[::1] deltas, uint64_t seed, uint64_t path0, long npaths,
              int dom_kind, dom_params, int target, double tol,
              bint monitor_all=False, bint bridge=True):
    """Euler-Maruyama ensemble with first-exit detection.

    Returns a dict with ``theta``, ``cls``, ``xexit``, ``transv``, ``sub_tau``
    and ``fail_step`` arrays indexed by path.
    """
    import numpy as np
    arr = np.asarray(dom_params, dtype=np.float64)
    if arr.ndim == 1:
        arr = np.tile(arr, (ell, 1))
    if arr.shape[0] != ell:
        raise ValueError("need one domain parameter row per subsystem")
    cdef const double[:, ::1] par = np.ascontiguousarray(arr)
    cdef const int32_t[::1] code = tables[0]
    cdef const int32_t[::1] starts = tables[1]
    cdef const int32_t[::1] lens = tables[2]
    cdef const double[::1] consts = tables[3]
    cdef int max_stack = tables[4]
    cdef int nd = ell * d
    cdef long K = n_steps(s, T, dt)
    if ell > 64:
        raise ValueError("at most 64 subsystems per path kernel")
    cdef int has_delta = 0
    cdef int j
    for j in range(1, ell):
        if deltas[j] > 0:
            has_delta = 1
    cdef int nslots = (m + (ell - 1) * d) if has_delta else (m if eps > 0 else 0)

    theta_a = np.full(npaths, T)
    cls_a = np.zeros(npaths, dtype=np.int8)
    xexit_a = np.zeros((npaths, nd))
    transv_a = np.zeros(npaths)
    sub_tau_a = np.full((npaths, ell), np.inf)
    fail_a = np.full(npaths, -1, dtype=np.int32)
    cdef double[::1] theta = theta_a
    cdef signed char[::1] cls = cls_a
    cdef double[:, ::1] xexit = xexit_a
    cdef double[::1] transv = transv_a
    cdef double[:, ::1] sub_tau = sub_tau_a
    cdef int32_t[::1] fail_step = fail_a

    cdef int nbuf = 6 * (nd + 1) + d * m + nslots + max_stack + 8 * d + 8
    cdef double* buf = <double*>malloc(nbuf * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    with nogil:
        _run(&code[0], &starts[0], &lens[0], &consts[0], d, m, ell, &init[0], s, T, dt, K, eps,
             &deltas[0], seed, path0, npaths, dom_kind, &par[0, 0], par.shape[1], target, tol, monitor_all,
             bridge, nslots, buf, &theta[0], &cls[0], &xexit[0, 0], &transv[0], &sub_tau[0, 0],
             &fail_step[0])
    free(buf)
    return {"theta": theta_a, "cls": cls_a, "xexit": xexit_a, "transv": transv_a,
            "sub_tau": sub_tau_a, "fail_step": fail_a}


cdef void _run(const int32_t* code, const int32_t* starts, const int32_t* lens, const double* consts,
               int d, int m, int ell, const double* init, double s, double T, double dt, long K,
               double eps, const double* deltas, uint64_t seed, uint64_t path0, long npaths,
               int kind, const double* par_all, int npar, int target, double tol, bint monitor_all, bint bridge,
               int nslots, double* buf, double* theta, signed char* cls, double* xexit,
               double* transv, double* sub_tau, int32_t* fail_step) noexcept nogil:
    cdef int nd = ell * d
    cdef double* x = buf
    cdef double* xn = x + nd
    cdef double* F = xn + nd
    cdef double* slots = F + nd
    cdef double* xs = slots + nd + 1
    cdef double* nrm = xs + nd
    cdef double* S = nrm + d
    cdef double* z = S + d * m
    cdef double* var = z + nslots + 1
    cdef double* stack = var + d + 1
    cdef long p, k
    cdef int i, r, c, jj, j, err, crossed, hit, exited_all, done, ax, nexited
    cdef uint64_t stream
    cdef double t, h, sh, acc, sd0, sd1, frac, tau, pb, U, u1, side, nr, tr, fl, sq_eps = sqrt(eps)
    cdef int lo_j = 1 if monitor_all else target
    cdef int hi_j = ell if monitor_all else target
    cdef char exited[64]
    cdef const double* par
    for p in range(npaths):
        stream = path0 + <uint64_t>p
        for i in range(nd):
            x[i] = init[i]
        for j in range(ell):
            exited[j] = 0
        nexited = 0
        done = 0
        for k in range(K):
            t = s + k * dt
            h = (T - t) if k == K - 1 else dt
            err = 0
            slots[0] = t
            for i in range(nd):
                slots[1 + i] = x[i]
            for i in range(nd):
                F[i] = vm(code, starts[i], lens[i], consts, slots, stack, &err)
                xn[i] = x[i] + F[i] * h
            if eps > 0:
                for i in range(d * m):
                    S[i] = vm(code, starts[nd + i], lens[nd + i], consts, slots, stack, &err)
            if nslots:
                fill_normals(z, nslots, <uint32_t>k, stream, seed)
            if eps > 0:
                sh = sq_eps * sqrt(h)
                for r in range(d):
                    acc = S[r * m] * z[0]
                    for c in range(1, m):
                        acc = acc + S[r * m + c] * z[c]
                    xn[r] += sh * acc
            for j in range(2, ell + 1):
                if deltas[j - 1] > 0:
                    sh = sqrt(deltas[j - 1]) * sqrt(h)
                    for c in range(d):
                        xn[(j - 1) * d + c] += sh * z[m + (j - 2) * d + c]
            for i in range(nd):
                if not isfinite(xn[i]):
                    err = 1
            if err:
                fail_step[p] = <int32_t>k
                cls[p] = FAILED
                theta[p] = t
                done = 2
                break
            for j in range(lo_j, hi_j + 1):
                if exited[j - 1]:
                    continue
                par = par_all + (j - 1) * npar
                sd0 = signed_distance(kind, par, x + (j - 1) * d, d)
                sd1 = signed_distance(kind, par, xn + (j - 1) * d, d)
                crossed = sd1 >= 0.0
                hit = 0
                frac = 0.0
                if crossed:
                    frac = sd0 / (sd0 - sd1)
                    if not frac >= 0.0:
                        frac = 0.0
                    if frac > 1.0:
                        frac = 1.0
                elif bridge and ((j == 1 and eps > 0) or (j > 1 and deltas[j - 1] > 0)):
                    ax = 0
                    side = 1.0
                    if kind == 0:
                        for c in range(d):
                            if j == 1:
                                acc = 0.0
                                for r in range(m):
                                    acc = acc + S[c * m + r] * S[c * m + r]
                                var[c] = eps * acc
                            else:
                                var[c] = deltas[j - 1]
                        pb = bridge_box(par, x + (j - 1) * d, xn + (j - 1) * d, var, h, d, &ax, &side)
                    else:
                        if j == 1:
                            nr = 0.0
                            for c in range(d):
                                nrm[c] = 0.5 * (x[c] + xn[c]) - par[c]
                                nr += nrm[c] * nrm[c]
                            nr = sqrt(nr)
                            if nr > 0:
                                for c in range(d):
                                    nrm[c] = nrm[c] / nr
                            else:
                                for c in range(d):
                                    nrm[c] = 0.0
                                nrm[0] = 1.0
                            acc = 0.0
                            for r in range(m):
                                u1 = 0.0
                                for c in range(d):
                                    u1 = u1 + nrm[c] * S[c * m + r]
                                acc = acc + u1 * u1
                            var[0] = eps * acc
                        else:
                            var[0] = deltas[j - 1]
                        sd0 = -sd0
                        sd1 = -sd1
                        acc = 2.0 * sd0 * sd1 / (var[0] * h)
                        pb = exp(-fmin(acc, BRIDGE_CUTOFF)) if acc < BRIDGE_CUTOFF else 0.0
                    if pb > 0:
                        block_uniforms(<uint32_t>(UNIFORM_TAG | j), <uint32_t>k, stream, seed, &u1, &U)
                        if U < pb:
                            crossed = 1
                            hit = 1
                            frac = 0.5
                if not crossed:
                    continue
                tau = t + frac * h
                sub_tau[p * ell + j - 1] = tau
                exited[j - 1] = 1
                nexited += 1
                if j != target:
                    continue
                for i in range(nd):
                    xs[i] = x[i] + frac * (xn[i] - x[i])
                project_normal(kind, par, xs + (j - 1) * d, nrm, d)
                if kind == 0 and hit:
                    for c in range(d):
                        nrm[c] = 0.0
                    nrm[ax] = side
                    xs[(j - 1) * d + ax] = par[d + ax] if side > 0 else par[ax]
                slots[0] = tau
                for i in range(nd):
                    slots[1 + i] = xs[i]
                tr = 0.0
                for c in range(d):
                    fl = vm(code, starts[(target - 1) * d + c], lens[(target - 1) * d + c], consts,
                            slots, stack, &err)
                    tr = tr + fl * nrm[c]
                theta[p] = tau
                for i in range(nd):
                    xexit[p * nd + i] = xs[i]
                transv[p] = tr
                if tr > tol:
                    cls[p] = GAMMA_PLUS
                elif tr < -tol:
                    cls[p] = GAMMA_MINUS
                else:
                    cls[p] = GAMMA_ZERO
            for i in range(nd):
                x[i] = xn[i]
            if exited[target - 1] and (not monitor_all or nexited == hi_j - lo_j + 1):
                done = 1
                break
        if cls[p] == CENSORED:
            for i in range(nd):
                xexit[p * nd + i] = x[i]


def tridiag_solve(double[:, ::1] lower, double[:, ::1] diag, double[:, ::1] upper, double[:, ::1] rhs):
    """Thomas algorithm for a batch of tridiagonal systems (rows are systems)."""
    import numpy as np
    cdef Py_ssize_t B = diag.shape[0], n = diag.shape[1], b, i
    out_a = np.empty((B, n))
    cw_a = np.empty(n)
    cdef double[:, ::1] y = out_a
    cdef double[::1] cw = cw_a
    cdef double den
    with nogil:
        for b in range(B):
            cw[0] = upper[b, 0] / diag[b, 0]
            y[b, 0] = rhs[b, 0] / diag[b, 0]
            for i in range(1, n):
                den = diag[b, i] - lower[b, i] * cw[i - 1]
                cw[i] = upper[b, i] / den
                y[b, i] = (rhs[b, i] - lower[b, i] * y[b, i - 1]) / den
            for i in range(n - 2, -1, -1):
                y[b, i] = y[b, i] - cw[i] * y[b, i + 1]
    return out_a
