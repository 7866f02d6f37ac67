"""Hot per-path loops, each with a numba and a pure-numpy implementation.

The public function of each pair dispatches on :func:`numba_enabled`. Both
variants follow the same left-to-right time ordering and the same fixed path
blocking, so they agree to rounding; they are not guaranteed bitwise equal
to each other (BLAS vs explicit loops), only each to itself.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ._accel import njit, numba_enabled

#: Paths per reduction block and per RNG stream. Fixed so that results do not
#: depend on the number of workers.
BLOCK = 4096


def _blocks(n: int, block: int = BLOCK):
    return [(s, min(s + block, n)) for s in range(0, n, block)]


# --------------------------------------------------------------------------
# log of the discrete stochastic exponential over [i, j)


@njit
def _log_stoch_exp_nb(beta, dX, dt, i, j):
    n_paths = dX.shape[0]
    d = dX.shape[2]
    out = np.zeros(n_paths)
    for p in range(n_paths):
        acc = 0.0
        for k in range(i, j):
            for q in range(d):
                b = beta[p, k, q]
                acc += b * dX[p, k, q] - 0.5 * b * b * dt
        out[p] = acc
    return out


def _log_stoch_exp_np(beta, dX, dt, i, j):
    b = beta[:, i:j, :]
    step = (b * dX[:, i:j, :] - 0.5 * dt * b * b).sum(axis=2)
    # cumsum keeps the left-to-right order of the loop version
    if step.shape[1] == 0:
        return np.zeros(dX.shape[0])
    return np.cumsum(step, axis=1)[:, -1]


def log_stoch_exp(beta, dX, dt, i, j):
    """Per-path ``sum_{k=i}^{j-1} beta_k . dX_k - dt |beta_k|^2 / 2``."""
    beta = np.ascontiguousarray(beta, dtype=np.float64)
    dX = np.ascontiguousarray(dX, dtype=np.float64)
    if numba_enabled():
        return _log_stoch_exp_nb(beta, dX, float(dt), int(i), int(j))
    return _log_stoch_exp_np(beta, dX, float(dt), int(i), int(j))


# --------------------------------------------------------------------------
# sum_{i < stop} Gamma_i c_i dt with Gamma_i = exp(sum_{k<i} a_k dt) E(-sum b.dX)


@njit
def _weighted_sum_nb(a, b, c, dX, dt, stop):
    n_paths, n_steps = c.shape
    d = dX.shape[2]
    total = np.zeros(n_paths)
    for p in range(n_paths):
        logw = 0.0
        acc = 0.0
        for i in range(min(stop[p], n_steps)):
            acc += np.exp(logw) * c[p, i] * dt
            inc = a[p, i] * dt
            for q in range(d):
                bq = b[p, i, q]
                inc += -bq * dX[p, i, q] - 0.5 * bq * bq * dt
            logw += inc
        total[p] = acc
    return total


def _weighted_sum_np(a, b, c, dX, dt, stop):
    n_paths, n_steps = c.shape
    inc = a * dt - (b * dX).sum(axis=2) - 0.5 * dt * (b * b).sum(axis=2)
    logw = np.zeros((n_paths, n_steps))
    if n_steps > 1:
        logw[:, 1:] = np.cumsum(inc[:, :-1], axis=1)
    live = np.arange(n_steps)[None, :] < stop[:, None]
    terms = np.where(live, np.exp(logw) * c * dt, 0.0)
    # cumsum for loop-compatible ordering
    return np.cumsum(terms, axis=1)[:, -1] if n_steps else np.zeros(n_paths)


def weighted_sum(a, b, c, dX, dt, stop):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    c = np.ascontiguousarray(c, dtype=np.float64)
    dX = np.ascontiguousarray(dX, dtype=np.float64)
    stop = np.ascontiguousarray(stop, dtype=np.int64)
    if numba_enabled():
        return _weighted_sum_nb(a, b, c, dX, float(dt), stop)
    return _weighted_sum_np(a, b, c, dX, float(dt), stop)


# --------------------------------------------------------------------------
# normal equations accumulated block by block


@njit
def _gram_nb(C, T, block):
    n, m = C.shape
    k = T.shape[1]
    G = np.zeros((m, m))
    R = np.zeros((m, k))
    for s in range(0, n, block):
        e = min(s + block, n)
        Cb = C[s:e]
        CbT = np.ascontiguousarray(Cb.T)
        # BLAS through numba's np.dot; blocks still summed in fixed order
        G += np.dot(CbT, Cb)
        R += np.dot(CbT, T[s:e])
    return G, R


def _gram_np(C, T, block, workers=1):
    m, k = C.shape[1], T.shape[1]
    spans = _blocks(C.shape[0], block)

    def part(span):
        s, e = span
        return C[s:e].T @ C[s:e], C[s:e].T @ T[s:e]

    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(part, spans))
    else:
        parts = [part(sp) for sp in spans]
    G = np.zeros((m, m))
    R = np.zeros((m, k))
    for Gb, Rb in parts:  # fixed order
        G += Gb
        R += Rb
    return G, R


def gram(C, T=None, block: int = BLOCK, workers: int = 1):
    """Return ``(C.T @ C, C.T @ T)`` summed over fixed path blocks in order.

    ``T=None`` computes the Gram matrix alone (the second output is empty).
    """
    C = np.ascontiguousarray(C, dtype=np.float64)
    T = np.empty((C.shape[0], 0)) if T is None else np.ascontiguousarray(T, dtype=np.float64)
    if T.ndim == 1:
        T = T[:, None]
    if numba_enabled():
        return _gram_nb(C, T, int(block))
    return _gram_np(C, T, int(block), workers)


# --------------------------------------------------------------------------
# first index where gap <= tol


@njit
def _first_hit_nb(gap, tol):
    n_paths, n_nodes = gap.shape
    out = np.empty(n_paths, dtype=np.int64)
    for p in range(n_paths):
        hit = n_nodes - 1
        for i in range(n_nodes):
            if gap[p, i] <= tol[i]:
                hit = i
                break
        out[p] = hit
    return out


def _first_hit_np(gap, tol):
    touched = gap <= tol[None, :]
    out = np.argmax(touched, axis=1).astype(np.int64)
    out[~touched.any(axis=1)] = gap.shape[1] - 1
    return out


def first_hit(gap, tol):
    gap = np.ascontiguousarray(gap, dtype=np.float64)
    tol = np.ascontiguousarray(tol, dtype=np.float64)
    if numba_enabled():
        return _first_hit_nb(gap, tol)
    return _first_hit_np(gap, tol)


# --------------------------------------------------------------------------
# polynomial features


@njit
def _poly_nb(state, exponents):
    n, q = state.shape
    m = exponents.shape[0]
    out = np.ones((n, m))
    for p in range(n):
        for j in range(m):
            v = 1.0
            for r in range(q):
                for _ in range(exponents[j, r]):
                    v *= state[p, r]
            out[p, j] = v
    return out


def _poly_np(state, exponents):
    out = np.ones((state.shape[0], exponents.shape[0]))
    for j, row in enumerate(exponents):
        for r, e in enumerate(row):
            for _ in range(int(e)):
                out[:, j] *= state[:, r]
    return out


def poly_features(state, exponents):
    state = np.ascontiguousarray(state, dtype=np.float64)
    exponents = np.ascontiguousarray(exponents, dtype=np.int64)
    if numba_enabled():
        return _poly_nb(state, exponents)
    return _poly_np(state, exponents)


# --------------------------------------------------------------------------
# binomial-lattice optimal stopping (infimum over stopping times)


@njit
def _tree_nb(g, allowed):
    n_levels = g.shape[0]
    M = n_levels - 1
    V = g[M, : M + 1].copy()
    stop = np.zeros((n_levels, n_levels), dtype=np.uint8)
    for j in range(M + 1):
        stop[M, j] = 1
    for k in range(M - 1, -1, -1):
        newV = np.empty(k + 1)
        for j in range(k + 1):
            cont = 0.5 * (V[j] + V[j + 1])
            if allowed[k] and g[k, j] <= cont:
                newV[j] = g[k, j]
                stop[k, j] = 1
            else:
                newV[j] = cont
        V = newV
    return V[0], stop


def _tree_np(g, allowed):
    M = g.shape[0] - 1
    V = g[M, : M + 1].copy()
    stop = np.zeros(g.shape, dtype=np.uint8)
    stop[M, :] = 1
    for k in range(M - 1, -1, -1):
        cont = 0.5 * (V[:-1] + V[1:])
        gk = g[k, : k + 1]
        ex = (gk <= cont) & bool(allowed[k])
        stop[k, : k + 1] = ex
        V = np.where(ex, gk, cont)
    return float(V[0]), stop


def stopping_tree(g, allowed=None):
    """Backward induction on a recombining lattice.

    ``g[k, j]`` is the obstacle at level ``k`` node ``j`` (``j`` up-moves).
    ``allowed[k]`` (default all true) says whether stopping is permitted at
    level ``k``; the last level always stops. Returns the root value of
    ``min(g, E[next])`` and the stop mask.
    """
    g = np.ascontiguousarray(g, dtype=np.float64)
    allowed = (np.ones(g.shape[0], dtype=np.uint8) if allowed is None
               else np.ascontiguousarray(allowed, dtype=np.uint8))
    if numba_enabled():
        v, stop = _tree_nb(g, allowed)
        return float(v), stop
    return _tree_np(g, allowed)
