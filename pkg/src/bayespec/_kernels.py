"""Compiled inner loops shared by the model, prior and sampler modules.

Everything here works on flat float64 arrays. The parameter vector layout is
``[a_1, mu_1, tau_1, ..., a_K, mu_K, tau_K, <background>]`` where the
background block is ``[B]`` (constant) or ``[c, h_start]`` (Shirley).
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange
from scipy.special import erfcx

GAUSSIAN = 0
PSEUDO_VOIGT = 1

CONSTANT = 0
SHIRLEY = 1

PRIOR_GAMMA = 0
PRIOR_NORMAL = 1

# 70:30 product-form pseudo-Voigt: exp(-PV_G*b*d^2) / (1 + PV_L*b*d^2)
PV_G = 0.3 * math.log(2.0)
PV_L = 0.7
# integral over the real line of the pseudo-Voigt at b = 1
PV_UNIT_MASS = math.pi / math.sqrt(PV_L) * float(erfcx(math.sqrt(PV_G / PV_L)))
# b*d^2 beyond which exp(-PV_G*b*d^2) underflows
_PV_CUTOFF = 745.0 / PV_G
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

# no reassociation: keeps the range reductions exact and results schedule-independent
_FM = {"nnan", "ninf", "nsz", "arcp", "contract"}
_LN2_HI = 6.93147180369123816490e-01
_LN2_LO = 1.90821492927058770002e-10
_INV_LN2 = 1.0 / math.log(2.0)
_MIN_NORMAL = 2.2250738585072014e-308
_LOG_TABLE_BITS = 8
_LOG_C = 1.0 + (np.arange(2**_LOG_TABLE_BITS) + 0.5) / 2**_LOG_TABLE_BITS
_LOG_INV_C = 1.0 / _LOG_C
_LOG_LOG_C = np.log(_LOG_C)


@njit(cache=True, fastmath=_FM)
def vexp_nonpos(x, out, ibuf):
    """out = exp(x) for x <= 0, written so the loops vectorize. Below -708 the result is 0."""
    n = x.size
    for i in range(n):
        xi = max(x[i], -708.0)
        k = math.floor(xi * _INV_LN2 + 0.5)
        r = (xi - k * _LN2_HI) - k * _LN2_LO
        out[i] = 1.0 + r * (1.0 + r * (1 / 2 + r * (1 / 6 + r * (1 / 24 + r * (1 / 120 + r * (
            1 / 720 + r * (1 / 5040 + r * (1 / 40320 + r * (1 / 362880 + r * (1 / 3628800 + r * (
                1 / 39916800 + r * (1 / 479001600 + r * (1 / 6227020800.0)))))))))))))
        ibuf[i] = np.int64(k + 1023.0) << 52
    scale = ibuf.view(np.float64)
    for i in range(n):
        v = out[i] * scale[i]
        out[i] = v if x[i] >= -708.0 else 0.0


@njit(cache=True, fastmath=_FM)
def vlog_normal(x, out, ibuf):
    """out = log(x) for positive normal x (absolute error ~2e-16 * max(1, |log x|))."""
    xb = x.view(np.int64)
    ob = out.view(np.int64)
    n = x.size
    for i in range(n):
        b = xb[i]
        ibuf[i] = b
        ob[i] = (b & 0x000FFFFFFFFFFFFF) | 0x3FF0000000000000
    for i in range(n):
        b = ibuf[i]
        e = ((b >> 52) & 0x7FF) - 1023
        j = (b >> 44) & 0xFF
        t = (out[i] - _LOG_C[j]) * _LOG_INV_C[j]
        p = t * (1.0 + t * (-0.5 + t * (1 / 3 + t * (-0.25 + t * (0.2 + t * (-1 / 6 + t * (1 / 7)))))))
        out[i] = e * _LN2_HI + (_LOG_LOG_C[j] + (p + e * _LN2_LO))


@njit(cache=True)
def basis_value(d2tau, basis):
    if basis == GAUSSIAN:
        return math.exp(-0.5 * d2tau)
    return math.exp(-PV_G * d2tau) / (1.0 + PV_L * d2tau)


@njit(cache=True, fastmath=_FM)
def profile(x, mu, tau, basis, out, ibuf):
    n = x.size
    if basis == GAUSSIAN:
        for i in range(n):
            d = x[i] - mu
            out[i] = -0.5 * d * d * tau
        vexp_nonpos(out, out, ibuf)
        return
    for i in range(n):
        d = x[i] - mu
        out[i] = -PV_G * d * d * tau
    vexp_nonpos(out, out, ibuf)
    for i in range(n):
        d = x[i] - mu
        out[i] = out[i] / (1.0 + PV_L * d * d * tau)


@njit(cache=True)
def _pv_segment(lo, hi, tau):
    """Composite Simpson integral of the unit pseudo-Voigt over [lo, hi] (offsets from mu)."""
    if hi <= lo:
        return 0.0
    # the tail beyond the cutoff contributes nothing representable
    tmax = math.sqrt(_PV_CUTOFF / tau)
    if lo >= tmax or hi <= -tmax:
        return 0.0
    if lo < -tmax:
        lo = -tmax
    if hi > tmax:
        hi = tmax
    hmax = 0.05 / math.sqrt(tau)
    m = int(math.ceil((hi - lo) / hmax))
    if m < 2:
        m = 2
    if m % 2 == 1:
        m += 1
    h = (hi - lo) / m
    s = basis_value(lo * lo * tau, PSEUDO_VOIGT) + basis_value(hi * hi * tau, PSEUDO_VOIGT)
    for j in range(1, m):
        t = lo + j * h
        w = 4.0 if j % 2 == 1 else 2.0
        s += w * basis_value(t * t * tau, PSEUDO_VOIGT)
    return s * h / 3.0


@njit(cache=True)
def _pv_lower_tail(d, tau):
    """Integral of the unit pseudo-Voigt from -inf to offset d, summed outward one width at a time."""
    w = 1.0 / math.sqrt(tau)
    tmax = math.sqrt(_PV_CUTOFF / tau)
    total = 0.0
    hi = d
    while hi > -tmax:
        part = _pv_segment(hi - w, hi, tau)
        total += part
        if part <= 1e-17 * total:
            break
        hi -= w
    return total


@njit(cache=True)
def cumulative_profile(x, mu, tau, basis, out):
    """Integral of the unit-amplitude basis from -inf up to every grid point."""
    n = x.size
    if basis == GAUSSIAN:
        s = math.sqrt(0.5 * tau)
        scale = 0.5 * math.sqrt(2.0 * math.pi / tau)
        for i in range(n):
            out[i] = scale * math.erfc(-(x[i] - mu) * s)
        return
    half = 0.5 * PV_UNIT_MASS / math.sqrt(tau)
    d0 = x[0] - mu
    if d0 >= 0.0:
        out[0] = half + _pv_segment(0.0, d0, tau)
    elif d0 * d0 * tau < 4.0:
        out[0] = half - _pv_segment(d0, 0.0, tau)
    else:
        # far below the centre the subtraction above would cancel
        out[0] = _pv_lower_tail(d0, tau)
    for i in range(1, n):
        out[i] = out[i - 1] + _pv_segment(x[i - 1] - mu, x[i] - mu, tau)


@njit(cache=True)
def log_prior_1d(value, kind, p1, p2):
    if kind == PRIOR_GAMMA:
        if not value > 0.0:
            return -np.inf
        return p1 * math.log(p2) - math.lgamma(p1) + (p1 - 1.0) * math.log(value) - p2 * value
    z = (value - p1) / p2
    return -0.5 * z * z - math.log(p2) - _LOG_SQRT_2PI


@njit(cache=True, fastmath=_FM)
def assemble(params, K, bg_kind, prof, cprof, f):
    """Fill f with the model spectrum from cached unit profiles."""
    n = f.size
    if bg_kind == CONSTANT:
        b = params[3 * K]
        for i in range(n):
            f[i] = b
        for k in range(K):
            a = params[3 * k]
            for i in range(n):
                f[i] += a * prof[k, i]
    else:
        c = params[3 * K]
        h = params[3 * K + 1]
        for i in range(n):
            f[i] = h
        for k in range(K):
            a = params[3 * k]
            ac = a * c
            for i in range(n):
                f[i] += a * prof[k, i] + ac * cprof[k, i]


@njit(cache=True, fastmath=_FM)
def poisson_ll(y, f, lbuf, ibuf):
    """sum(y log f - f), or -inf if any rate is nonpositive. ln(y!) is left out."""
    n = f.size
    fmin = np.inf
    for i in range(n):
        fmin = min(fmin, f[i])
    if not fmin > 0.0:
        return -np.inf
    if fmin < _MIN_NORMAL:
        for i in range(n):
            lbuf[i] = math.log(f[i])
    else:
        vlog_normal(f, lbuf, ibuf)
    s0 = 0.0
    s1 = 0.0
    s2 = 0.0
    s3 = 0.0
    n4 = n - n % 4
    for i in range(0, n4, 4):
        s0 += y[i] * lbuf[i] - f[i]
        s1 += y[i + 1] * lbuf[i + 1] - f[i + 1]
        s2 += y[i + 2] * lbuf[i + 2] - f[i + 2]
        s3 += y[i + 3] * lbuf[i + 3] - f[i + 3]
    for i in range(n4, n):
        s0 += y[i] * lbuf[i] - f[i]
    return (s0 + s1) + (s2 + s3)


@njit(cache=True)
def init_state(params, K, basis, bg_kind, x, y, prof, cprof, f):
    n = x.size
    ibuf = np.empty(n, dtype=np.int64)
    lbuf = np.empty(n)
    for k in range(K):
        profile(x, params[3 * k + 1], params[3 * k + 2], basis, prof[k], ibuf)
        if bg_kind == SHIRLEY:
            cumulative_profile(x, params[3 * k + 1], params[3 * k + 2], basis, cprof[k])
    assemble(params, K, bg_kind, prof, cprof, f)
    return poisson_ll(y, f, lbuf, ibuf)


@njit(cache=True)
def log_prior_total(params, pkind, p1, p2):
    s = 0.0
    for j in range(params.size):
        s += log_prior_1d(params[j], pkind[j], p1[j], p2[j])
    return s


@njit(cache=True)
def metropolis_accept(log_ratio, log_u):
    """Metropolis rule on a log acceptance ratio; NaN and -inf reject."""
    return log_u < log_ratio


@njit(cache=True)
def update_coordinate(j, beta, step, z, log_u, params, prof, cprof, f, ll, K, basis, bg_kind,
                      x, y, pkind, p1, p2, s_prof, s_cprof, s_f, s_params, s_lbuf, s_ibuf):
    """One random-walk proposal on coordinate j. Returns (accepted, new_ll, delta_log_prior).

    Gamma-prior (positive) coordinates move in log space; the Jacobian enters the ratio.
    """
    old = params[j]
    positive = pkind[j] == PRIOR_GAMMA
    if positive:
        new = old * math.exp(step * z)
        log_jac = step * z
    else:
        new = old + step * z
        log_jac = 0.0
    dlp = log_prior_1d(new, pkind[j], p1[j], p2[j]) - log_prior_1d(old, pkind[j], p1[j], p2[j])
    if not dlp > -np.inf:
        return False, ll, 0.0
    for q in range(params.size):
        s_params[q] = params[q]
    s_params[j] = new
    n = x.size
    k = j // 3
    field = j % 3
    shape_move = j < 3 * K and field != 0
    if shape_move:
        mu = s_params[3 * k + 1]
        tau = s_params[3 * k + 2]
        profile(x, mu, tau, basis, s_prof, s_ibuf)
        if bg_kind == SHIRLEY:
            cumulative_profile(x, mu, tau, basis, s_cprof)
        # temporarily swap the row in so assemble() sees it
        for i in range(n):
            t = prof[k, i]
            prof[k, i] = s_prof[i]
            s_prof[i] = t
        if bg_kind == SHIRLEY:
            for i in range(n):
                t = cprof[k, i]
                cprof[k, i] = s_cprof[i]
                s_cprof[i] = t
    assemble(s_params, K, bg_kind, prof, cprof, s_f)
    new_ll = poisson_ll(y, s_f, s_lbuf, s_ibuf)
    ok = new_ll > -np.inf and metropolis_accept(beta * (new_ll - ll) + dlp + log_jac, log_u)
    if ok:
        params[j] = new
        for i in range(n):
            f[i] = s_f[i]
        return True, new_ll, dlp
    if shape_move:
        for i in range(n):
            prof[k, i] = s_prof[i]
        if bg_kind == SHIRLEY:
            for i in range(n):
                cprof[k, i] = s_cprof[i]
    return False, ll, 0.0


@njit(cache=True)
def sweep_state(s, m, beta, steps, free, z, log_u, params, prof, cprof, f, ll, lp, K, basis,
                bg_kind, x, y, pkind, p1, p2, s_prof, s_cprof, s_f, s_params, s_lbuf, s_ibuf, acc, att):
    """Sequential single-coordinate sweep of state s held by temperature slot m."""
    P = params.shape[1]
    for j in range(P):
        if not free[j]:
            continue
        ok, new_ll, dlp = update_coordinate(
            j, beta, steps[m, j], z[j], log_u[j], params[s], prof[s], cprof[s], f[s], ll[s],
            K, basis, bg_kind, x, y, pkind, p1, p2, s_prof[m], s_cprof[m], s_f[m], s_params[m],
            s_lbuf[m], s_ibuf[m])
        att[m, j] += 1
        if ok:
            acc[m, j] += 1
            ll[s] = new_ll
            lp[s] += dlp


@njit(cache=True)
def exchange_pairs(order, ll, betas, u, parity, xacc, xatt):
    """Neighbour swaps over pairs (m, m+1) with m = parity, parity+2, ...

    log v = (beta_{m+1} - beta_m) * n * (E_{m+1} - E_m), and n*E = const - ll.
    """
    M = betas.size
    for m in range(parity, M - 1, 2):
        a = order[m]
        b = order[m + 1]
        log_v = (betas[m + 1] - betas[m]) * (ll[a] - ll[b])
        xatt[m] += 1
        if metropolis_accept(log_v, u[m]):
            order[m] = b
            order[m + 1] = a
            xacc[m] += 1


def _run_block_py(order, params, prof, cprof, f, ll, lp, K, basis, bg_kind, x, y, pkind, p1, p2,
                  betas, steps, free, z, log_u, log_ux, sweep0, exchange_period, exch_count,
                  burn_in, thin, rec_params, rec_ll, rec_lp, rec_count, acc, att, xacc, xatt,
                  s_prof, s_cprof, s_f, s_params, s_lbuf, s_ibuf):
    M = betas.size
    B = z.shape[1]
    for b in range(B):
        for m in prange(M):
            sweep_state(order[m], m, betas[m], steps, free, z[m, b], log_u[m, b], params, prof,
                        cprof, f, ll, lp, K, basis, bg_kind, x, y, pkind, p1, p2, s_prof,
                        s_cprof, s_f, s_params, s_lbuf, s_ibuf, acc, att)
        sweep = sweep0 + b + 1
        if sweep % exchange_period == 0:
            exchange_pairs(order, ll, betas, log_ux[b], exch_count[0] % 2, xacc, xatt)
            exch_count[0] += 1
        if sweep > burn_in and (sweep - burn_in) % thin == 0:
            r = rec_count[0]
            for m in range(M):
                s = order[m]
                for q in range(params.shape[1]):
                    rec_params[m, r, q] = params[s, q]
                rec_ll[m, r] = ll[s]
                rec_lp[m, r] = lp[s]
            rec_count[0] += 1


run_block_serial = njit(cache=True)(_run_block_py)
_run_block_parallel = None


def run_block_parallel(*args):
    global _run_block_parallel
    if _run_block_parallel is None:
        _run_block_parallel = njit(cache=True, parallel=True)(_run_block_py)
    return _run_block_parallel(*args)
