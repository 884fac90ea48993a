"""Pure numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` operation for operation; the compiled module is
preferred when it imports (see :mod:`chainexit._backend`).
"""
from __future__ import annotations

import math

import numpy as np

from .rng import normal_pair, uniforms

# opcode numbers match expr.OPCODES
_UNARY = {7: np.negative, 8: np.sin, 9: np.cos, 10: np.exp, 11: np.log, 12: np.tanh,
          13: np.sqrt, 14: np.abs}
_BINARY = {2: np.add, 3: np.subtract, 4: np.multiply, 5: np.divide, 6: np.power,
           15: np.minimum, 16: np.maximum}

CENSORED, GAMMA_PLUS, GAMMA_ZERO, GAMMA_MINUS, FAILED = 0, 1, 2, 3, -1
BRIDGE_CUTOFF = 50.0


def vm_eval(code, start, length, consts, slots, bad):
    """Evaluate one stack program on ``slots``; flags non-finite lanes in ``bad``."""
    stack = []
    with np.errstate(all="ignore"):
        for j in range(start, start + 2 * length, 2):
            op, arg = code[j], code[j + 1]
            if op == 0:
                stack.append(consts[arg])
                continue
            if op == 1:
                stack.append(slots[arg])
                continue
            if op in _UNARY:
                r = _UNARY[op](stack.pop())
            else:
                b = stack.pop()
                r = _BINARY[op](stack.pop(), b)
            bad |= ~np.isfinite(r)
            stack.append(r)
    out = np.broadcast_to(stack.pop(), bad.shape).astype(float)
    bad |= ~np.isfinite(out)
    return out


def _drifts(tables, nprog, t, X, bad):
    code, starts, lens, consts = tables[:4]
    slots = [np.broadcast_to(t, X.shape[:1])] + [X[:, j] for j in range(X.shape[1])]
    return np.stack([vm_eval(code, starts[p], lens[p], consts, slots, bad) for p in range(nprog)],
                    axis=1)


def _sigma(tables, ell, d, m, t, X, bad):
    code, starts, lens, consts = tables[:4]
    slots = [np.broadcast_to(t, X.shape[:1])] + [X[:, j] for j in range(d)]
    out = np.empty((X.shape[0], d, m))
    for r in range(d):
        for c in range(m):
            p = ell * d + r * m + c
            out[:, r, c] = vm_eval(code, starts[p], lens[p], consts, slots, bad)
    return out


def n_steps(s: float, T: float, dt: float) -> int:
    if T <= s:
        return 0
    return max(1, int(math.ceil((T - s) / dt * (1.0 - 1e-12))))


def _signed_distance(kind, params, x):
    d = x.shape[1]
    if kind == 1:
        return np.sqrt(np.sum((x - params[:d]) ** 2, axis=1)) - params[d]
    lo, hi = params[:d], params[d:2 * d]
    q = np.abs(x - (lo + hi) * 0.5) - (hi - lo) * 0.5
    outside = np.sqrt(np.sum(np.maximum(q, 0.0) ** 2, axis=1))
    return outside + np.minimum(np.max(q, axis=1), 0.0)


def _project_normal(kind, params, x):
    """Projection onto the boundary and outward normal there."""
    d = x.shape[1]
    if kind == 1:
        c, rad = params[:d], params[d]
        v = x - c
        r = np.sqrt(np.sum(v * v, axis=1))
        r = np.where(r > 0, r, 1.0)
        n = v / r[:, None]
        return c + rad * n, n
    lo, hi = params[:d], params[d:2 * d]
    c = (lo + hi) * 0.5
    q = np.abs(x - c) - (hi - lo) * 0.5
    k = np.argmax(q, axis=1)
    rows = np.arange(x.shape[0])
    sgn = np.where(x[rows, k] - c[k] >= 0, 1.0, -1.0)
    n = np.zeros_like(x)
    n[rows, k] = sgn
    p = np.clip(x, lo, hi)
    p[rows, k] = np.where(sgn > 0, hi[k], lo[k])
    return p, n


def _bridge_prob(kind, params, x0, x1, var, h):
    """Probability that a Brownian bridge from x0 to x1 (both inside) left the domain.

    ``var`` has shape (P, d) (per-axis variance rate) for boxes and (P,) for balls.
    Returns the crossing probability and, for boxes, the most likely face
    (axis, +1/-1).
    """
    d = x0.shape[1]
    if kind == 1:
        c, rad = params[:d], params[d]
        a = rad - np.sqrt(np.sum((x0 - c) ** 2, axis=1))
        b = rad - np.sqrt(np.sum((x1 - c) ** 2, axis=1))
        arg = 2.0 * a * b / (var * h)
        p = np.where(arg < BRIDGE_CUTOFF, np.exp(-np.minimum(arg, BRIDGE_CUTOFF)), 0.0)
        return p, None, None
    lo, hi = params[:d], params[d:2 * d]
    surv = np.ones(x0.shape[0])
    best = np.zeros(x0.shape[0])
    axis = np.zeros(x0.shape[0], dtype=np.int64)
    side = np.ones(x0.shape[0])
    for c in range(d):
        for sgn, bound in ((-1.0, lo[c]), (1.0, hi[c])):
            a = (x0[:, c] - bound) * -sgn
            b = (x1[:, c] - bound) * -sgn
            arg = 2.0 * a * b / (var[:, c] * h)
            p = np.where(arg < BRIDGE_CUTOFF, np.exp(-np.minimum(arg, BRIDGE_CUTOFF)), 0.0)
            surv *= 1.0 - p
            upd = p > best
            best = np.where(upd, p, best)
            axis = np.where(upd, c, axis)
            side = np.where(upd, sgn, side)
    return 1.0 - surv, axis, side


def run_paths(tables, d, m, ell, init, s, T, dt, eps, deltas, seed, path0, npaths,
              dom_kind, dom_params, target, tol, monitor_all=False, bridge=True, record=False):
    """Euler-Maruyama ensemble with first-exit detection; see ``_ckernels.run_paths``.

    ``dom_params`` is one parameter row per subsystem (shape ``(ell, P)``) or a
    single row shared by all of them.
    """
    nd = ell * d
    K = n_steps(s, T, dt)
    init = np.asarray(init, dtype=float)
    deltas = np.asarray(deltas, dtype=float)
    params = np.asarray(dom_params, dtype=float)
    if params.ndim == 1:
        params = np.tile(params, (ell, 1))
    streams = np.uint64(path0) + np.arange(npaths, dtype=np.uint64)
    has_delta = bool(np.any(deltas[1:] > 0))
    nslots = (m + (ell - 1) * d) if has_delta else (m if eps > 0 else 0)
    sq_eps = math.sqrt(eps)

    X = np.tile(init, (npaths, 1))
    theta = np.full(npaths, T)
    cls = np.zeros(npaths, dtype=np.int8)
    xexit = np.zeros((npaths, nd))
    transv = np.zeros(npaths)
    fail_step = np.full(npaths, -1, dtype=np.int32)
    monitored = list(range(1, ell + 1)) if monitor_all else [target]
    sub_tau = np.full((npaths, ell), np.inf)
    exited = np.zeros((npaths, ell), dtype=bool)
    active = np.ones(npaths, dtype=bool)
    if record:
        traj = np.full((npaths, K + 1, nd), np.nan)
        traj[:, 0] = init
        noise = np.zeros((npaths, K, max(nslots, 0)))

    for k in range(K):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        t = s + k * dt
        h = (T - t) if k == K - 1 else dt
        x = X[idx]
        bad = np.zeros(idx.size, dtype=bool)
        F = _drifts(tables, nd, t, x, bad)
        xn = x + F * h
        S = None
        if eps > 0:
            S = _sigma(tables, ell, d, m, t, x[:, :d], bad)
        z = None
        if nslots:
            z = np.empty((idx.size, nslots))
            for q in range((nslots + 1) // 2):
                z0, z1 = normal_pair(q, k, streams[idx], seed)
                z[:, 2 * q] = z0
                if 2 * q + 1 < nslots:
                    z[:, 2 * q + 1] = z1
            if record:
                noise[idx, k] = z * math.sqrt(h)
        if eps > 0:
            sh = sq_eps * math.sqrt(h)
            for r in range(d):
                acc = S[:, r, 0] * z[:, 0]
                for c in range(1, m):
                    acc = acc + S[:, r, c] * z[:, c]
                xn[:, r] += sh * acc
        for j in range(2, ell + 1):
            if deltas[j - 1] > 0:
                sh = math.sqrt(deltas[j - 1]) * math.sqrt(h)
                base = m + (j - 2) * d
                for c in range(d):
                    xn[:, (j - 1) * d + c] += sh * z[:, base + c]
        bad |= ~np.all(np.isfinite(xn), axis=1)
        if bad.any():
            b = idx[bad]
            fail_step[b] = k
            cls[b] = FAILED
            theta[b] = t
            active[b] = False
            keep = ~bad
            idx, x, xn, F = idx[keep], x[keep], xn[keep], F[keep]
            if S is not None:
                S = S[keep]
        for j in monitored:
            sel = ~exited[idx, j - 1]
            if not sel.any():
                continue
            ii = idx[sel]
            cols = slice((j - 1) * d, j * d)
            pj = params[j - 1]
            a0 = x[sel, cols]
            a1 = xn[sel, cols]
            sd0 = _signed_distance(dom_kind, pj, a0)
            sd1 = _signed_distance(dom_kind, pj, a1)
            crossed = sd1 >= 0.0
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = np.where(crossed, sd0 / (sd0 - sd1), 0.0)
            frac = np.clip(frac, 0.0, 1.0)
            face_axis = face_side = None
            if bridge:
                if j == 1:
                    var = None
                    if eps > 0:
                        a_mat = S[sel] @ np.swapaxes(S[sel], 1, 2)
                        if dom_kind == 1:
                            mid = 0.5 * (a0 + a1) - pj[:d]
                            nr = np.sqrt(np.sum(mid * mid, axis=1))
                            e0 = np.zeros_like(mid)
                            e0[:, 0] = 1.0
                            nv = np.where((nr > 0)[:, None], mid / np.where(nr > 0, nr, 1.0)[:, None], e0)
                            var = eps * np.einsum("pi,pij,pj->p", nv, a_mat, nv)
                        else:
                            var = eps * np.diagonal(a_mat, axis1=1, axis2=2)
                else:
                    var = None
                    if deltas[j - 1] > 0:
                        var = np.full((a0.shape[0], d) if dom_kind == 0 else a0.shape[0], deltas[j - 1])
                if var is not None:
                    pb, face_axis, face_side = _bridge_prob(dom_kind, pj, a0, a1, var, h)
                    cand = ~crossed & (pb > 0)
                    if cand.any():
                        U = np.ones(a0.shape[0])
                        U[cand] = uniforms(j, k, streams[ii[cand]], seed)
                        hit = cand & (U < pb)
                        crossed = crossed | hit
                        frac = np.where(hit, 0.5, frac)
                    else:
                        hit = cand
                else:
                    hit = np.zeros(a0.shape[0], dtype=bool)
            else:
                hit = np.zeros(a0.shape[0], dtype=bool)
            if not crossed.any():
                continue
            tau = t + frac * h
            sub_tau[ii[crossed], j - 1] = tau[crossed]
            exited[ii[crossed], j - 1] = True
            if j != target:
                continue
            cs = np.flatnonzero(crossed)
            rows = np.flatnonzero(sel)[cs]
            xs = x[rows] + frac[cs, None] * (xn[rows] - x[rows])
            pt = xs[:, cols]
            proj, nrm = _project_normal(dom_kind, pj, pt)
            if dom_kind == 0 and face_axis is not None:
                hb = hit[cs]
                if hb.any():
                    ax = face_axis[cs][hb]
                    sd_ = face_side[cs][hb]
                    pb_pt = pt[hb].copy()
                    r_ = np.arange(pb_pt.shape[0])
                    lo, hi = pj[:d], pj[d:2 * d]
                    pb_pt[r_, ax] = np.where(sd_ > 0, hi[ax], lo[ax])
                    nn = np.zeros_like(pb_pt)
                    nn[r_, ax] = sd_
                    proj[hb] = pb_pt
                    nrm[hb] = nn
            xs[:, cols] = proj
            bad2 = np.zeros(cs.size, dtype=bool)
            code, starts, lens, consts = tables[:4]
            slots = [tau[cs]] + [xs[:, q] for q in range(nd)]
            fl = np.stack([vm_eval(code, starts[(target - 1) * d + c], lens[(target - 1) * d + c],
                                   consts, slots, bad2) for c in range(d)], axis=1)
            tr = np.sum(fl * nrm, axis=1)
            tgt = ii[cs]
            theta[tgt] = tau[cs]
            xexit[tgt] = xs
            transv[tgt] = tr
            cls[tgt] = np.where(tr > tol, GAMMA_PLUS, np.where(tr < -tol, GAMMA_MINUS, GAMMA_ZERO))
        X[idx] = xn
        if record:
            traj[idx, k + 1] = xn
        done = exited[idx, target - 1]
        if monitor_all:
            done = np.all(exited[idx], axis=1)
        active[idx[done]] = False

    cens = cls == CENSORED
    xexit[cens] = X[cens]
    out = {"theta": theta, "cls": cls, "xexit": xexit, "transv": transv,
           "sub_tau": sub_tau, "fail_step": fail_step}
    if record:
        out["traj"] = traj
        out["noise"] = noise
    return out


def tridiag_solve(lower, diag, upper, rhs):
    """Thomas algorithm for a batch of tridiagonal systems.

    All arrays have shape ``(B, n)``; ``lower[:, 0]`` and ``upper[:, -1]`` are
    ignored.  Assumes diagonal dominance (no pivoting).
    """
    n = diag.shape[1]
    c = np.empty_like(diag)
    y = np.empty_like(rhs)
    c[:, 0] = upper[:, 0] / diag[:, 0]
    y[:, 0] = rhs[:, 0] / diag[:, 0]
    for i in range(1, n):
        den = diag[:, i] - lower[:, i] * c[:, i - 1]
        c[:, i] = upper[:, i] / den
        y[:, i] = (rhs[:, i] - lower[:, i] * y[:, i - 1]) / den
    for i in range(n - 2, -1, -1):
        y[:, i] -= c[:, i] * y[:, i + 1]
    return y
