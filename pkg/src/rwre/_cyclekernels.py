"""Compiled kernels for regeneration-cycle simulation and cycle weights."""

import numpy as np
from numba import njit

from .envlaw import site_atom

KEY_OFFSET = 1 << 14
KEY_BASE = 1 << 15
MAX_KEY_DIM = 4


@njit(cache=True)
def _draw(cdf, rng):
    v = rng.random()
    k = 0
    while k < cdf.shape[0] - 1 and v >= cdf[k]:
        k += 1
    return k


@njit(cache=True)
def walk_cycles(cdf, ell_index, K, n_cycles, rng, max_steps):
    """Run one auxiliary walk and cut it at confirmed regeneration times.

    A time is a candidate when the walk reaches a strictly new maximal level
    along ell; an undershoot below a candidate's level discards it and every
    later candidate; the oldest candidate is confirmed once the walk stands
    ``K`` levels above it.  The segment before the first confirmed time is
    dropped, so the returned cycles are the stationary ones.

    Returns ``(steps, ends, violations, n_steps)``: direction indices of the
    kept segment, exclusive end offsets of each cycle inside ``steps``, the
    number of later undershoots of confirmed levels, and the total number of
    steps simulated.
    """
    cap = 1024
    buf = np.empty(cap, dtype=np.int8)
    cand_time = np.empty(256, dtype=np.int64)
    cand_level = np.empty(256, dtype=np.int64)
    head = 0
    tail = 0
    confirmed = np.empty(n_cycles + 1, dtype=np.int64)
    n_conf = 0
    last_conf_level = np.int64(-(1 << 62))
    level = 0
    max_level = 0
    t = 0
    violations = 0
    ell_neg = ell_index ^ 1
    while n_conf < n_cycles + 1:
        if t >= max_steps:
            break
        e = _draw(cdf, rng)
        if t >= cap:
            nb = np.empty(cap * 2, dtype=np.int8)
            nb[:cap] = buf
            buf = nb
            cap *= 2
        buf[t] = e
        t += 1
        if e == ell_index:
            level += 1
        elif e == ell_neg:
            level -= 1
            while tail > head and cand_level[tail - 1] > level:
                tail -= 1
            if level < last_conf_level:
                violations += 1
                last_conf_level = level
        if level > max_level:
            max_level = level
            if tail >= cand_time.shape[0]:
                # compact the queue, then grow if still full
                live = tail - head
                if head > 0:
                    cand_time[:live] = cand_time[head:tail].copy()
                    cand_level[:live] = cand_level[head:tail].copy()
                    head = 0
                    tail = live
                if tail >= cand_time.shape[0]:
                    nt = np.empty(2 * cand_time.shape[0], dtype=np.int64)
                    nl = np.empty(2 * cand_time.shape[0], dtype=np.int64)
                    nt[:tail] = cand_time[:tail]
                    nl[:tail] = cand_level[:tail]
                    cand_time = nt
                    cand_level = nl
            cand_time[tail] = t
            cand_level[tail] = level
            tail += 1
        while head < tail and level >= cand_level[head] + K and n_conf < n_cycles + 1:
            confirmed[n_conf] = cand_time[head]
            last_conf_level = cand_level[head]
            n_conf += 1
            head += 1
    if n_conf < 2:
        return np.empty(0, dtype=np.int8), np.empty(0, dtype=np.int64), violations, t
    start = confirmed[0]
    steps = buf[start:confirmed[n_conf - 1]].copy()
    ends = np.empty(n_conf - 1, dtype=np.int64)
    for i in range(1, n_conf):
        ends[i - 1] = confirmed[i] - start
    return steps, ends, violations, t


@njit(cache=True)
def first_renewal_times(cdf_level, K, n_walks, rng, max_steps):
    """First regeneration time of ``n_walks`` walks projected on ell.

    ``cdf_level`` is the CDF of the projected step over (+1, -1, 0).
    Returns -1 for a walk that did not confirm within ``max_steps``.
    """
    out = np.empty(n_walks, dtype=np.int64)
    cand_time = np.empty(max_steps + 1, dtype=np.int64)
    cand_level = np.empty(max_steps + 1, dtype=np.int64)
    for w in range(n_walks):
        head = 0
        tail = 0
        level = 0
        max_level = 0
        t = 0
        res = -1
        while t < max_steps:
            v = rng.random()
            t += 1
            if v < cdf_level[0]:
                level += 1
            elif v < cdf_level[1]:
                level -= 1
                while tail > head and cand_level[tail - 1] > level:
                    tail -= 1
            if level > max_level:
                max_level = level
                cand_time[tail] = t
                cand_level[tail] = level
                tail += 1
            if head < tail and level >= cand_level[head] + K:
                res = cand_time[head]
                break
        out[w] = res
    return out


@njit(cache=True)
def no_backtrack_trials(p_up, p_down, K, n_trials, rng, max_steps):
    """Count projected walks that reach level ``K`` before dropping below 0."""
    ok = 0
    for _ in range(n_trials):
        level = 0
        t = 0
        while t < max_steps:
            v = rng.random()
            t += 1
            if v < p_up:
                level += 1
                if level >= K:
                    ok += 1
                    break
            elif v < p_up + p_down:
                level -= 1
                if level < 0:
                    break
    return ok


@njit(cache=True)
def projected_levels(p_up, p_down, checkpoints, n_walks, rng):
    """Level along ell at each checkpoint time for ``n_walks`` independent walks."""
    kmax = checkpoints[-1]
    out = np.empty((n_walks, checkpoints.shape[0]), dtype=np.int64)
    for w in range(n_walks):
        level = 0
        c = 0
        for t in range(1, kmax + 1):
            v = rng.random()
            if v < p_up:
                level += 1
            elif v < p_up + p_down:
                level -= 1
            while c < checkpoints.shape[0] and checkpoints[c] == t:
                out[w, c] = level
                c += 1
    return out


@njit(cache=True)
def _encode(x):
    key = np.int64(0)
    for a in range(x.shape[0]):
        key = key * KEY_BASE + (x[a] + KEY_OFFSET)
    return key


@njit(cache=True)
def _log_moment(counts_row, log_table, log_probs):
    K = log_table.shape[0]
    m = -np.inf
    vals = np.empty(K)
    for k in range(K):
        s = log_probs[k]
        for e in range(counts_row.shape[0]):
            if counts_row[e]:
                s += counts_row[e] * log_table[k, e]
        vals[k] = s
        if s > m:
            m = s
    acc = 0.0
    for k in range(K):
        acc += np.exp(vals[k] - m)
    return m + np.log(acc)


@njit(cache=True)
def _grouped_log_weight(keys, dirs, m, log_table, log_probs):
    """Sum over distinct keys of the log mixture moment of that key's direction counts."""
    n = keys.shape[0]
    if n == 0:
        return 0.0
    idx = np.argsort(keys)
    total = 0.0
    counts = np.zeros(m, dtype=np.int64)
    j = 0
    while j < n:
        key = keys[idx[j]]
        counts[:] = 0
        while j < n and keys[idx[j]] == key:
            counts[dirs[idx[j]]] += 1
            j += 1
        total += _log_moment(counts, log_table, log_probs)
    return total


@njit(cache=True)
def cycle_summaries(steps, ends, d, ell_index, log_table, log_probs, with_weight):
    """Per-cycle duration, displacement, level gain and annealed log xi-weight."""
    n = ends.shape[0]
    tau = np.empty(n, dtype=np.int64)
    disp = np.zeros((n, d), dtype=np.int64)
    logw = np.zeros(n)
    m = 2 * d
    start = 0
    x = np.zeros(d, dtype=np.int64)
    for c in range(n):
        stop = ends[c]
        L = stop - start
        tau[c] = L
        keys = np.empty(L, dtype=np.int64)
        dirs = np.empty(L, dtype=np.int64)
        x[:] = 0
        for j in range(L):
            e = steps[start + j]
            keys[j] = _encode(x)
            dirs[j] = e
            if e % 2 == 0:
                x[e // 2] += 1
            else:
                x[e // 2] -= 1
        for a in range(d):
            disp[c, a] = x[a]
        if with_weight:
            logw[c] = _grouped_log_weight(keys, dirs, m, log_table, log_probs)
        start = stop
    return tau, disp, logw


@njit(cache=True)
def quenched_cycle_weights(steps, ends, d, seed, cdf, log_xi_table):
    """Log of prod xi along each cycle at the walk's absolute positions."""
    from_site = np.zeros(d, dtype=np.int64)
    n = ends.shape[0]
    out = np.zeros(n)
    start = 0
    for c in range(n):
        s = 0.0
        for j in range(start, ends[c]):
            e = steps[j]
            s += log_xi_table[site_atom(seed, from_site, cdf), e]
            if e % 2 == 0:
                from_site[e // 2] += 1
            else:
                from_site[e // 2] -= 1
        out[c] = s
        start = ends[c]
    return out


@njit(cache=True)
def chain_phi(levels, log_terms, n_values, n_chains, start_cycle):
    """Direct-route evaluation of the discounted renewal weight at each level in ``n_values``.

    Chains concatenate consecutive cycles from ``start_cycle`` on.  For each
    chain and target ``n`` the value is ``exp(sum of log_terms)`` over the
    cycles up to the one that lands exactly on ``n``, or 0 if level ``n`` is
    jumped over.  Returns ``(values, next_cycle)``; ``next_cycle`` is -1 if
    the pool ran out.
    """
    nv = n_values.shape[0]
    out = np.zeros((n_chains, nv))
    n_max = n_values[-1]
    c = start_cycle
    total = levels.shape[0]
    for ch in range(n_chains):
        lev = 0
        acc = 0.0
        j = 0
        while lev < n_max:
            if c >= total:
                return out, -1
            lev += levels[c]
            acc += log_terms[c]
            c += 1
            while j < nv and n_values[j] < lev:
                j += 1
            if j < nv and n_values[j] == lev:
                out[ch, j] = np.exp(acc)
                j += 1
        # loop ends once the chain reaches n_max
    return out, c


@njit(cache=True)
def chain_path(steps, ends, levels, start_cycle, target, d):
    """Steps of a chain of consecutive cycles run until level ``target`` is reached or passed.

    Returns ``(step_list, hit_time, next_cycle)``; ``hit_time`` is the time
    at which the chain lands exactly on ``target`` (-1 if it jumps over).
    """
    c = start_cycle
    lev = 0
    seg_start = 0 if c == 0 else ends[c - 1]
    seg_stop = seg_start
    hit = -1
    total = ends.shape[0]
    while lev < target:
        if c >= total:
            return np.empty(0, dtype=np.int8), -2, -1
        lev += levels[c]
        seg_stop = ends[c]
        c += 1
    if lev == target:
        hit = seg_stop - seg_start
    return steps[seg_start:seg_stop].copy(), hit, c


@njit(cache=True)
def joint_log_weight(steps_a, steps_b, start_b, d, log_table, log_probs):
    """Log mixture moment of the combined visit counts of two paths.

    Path ``a`` starts at the origin, path ``b`` at ``start_b``.
    """
    na = steps_a.shape[0]
    nb = steps_b.shape[0]
    keys = np.empty(na + nb, dtype=np.int64)
    dirs = np.empty(na + nb, dtype=np.int64)
    x = np.zeros(d, dtype=np.int64)
    for j in range(na):
        keys[j] = _encode(x)
        e = steps_a[j]
        dirs[j] = e
        x[e // 2] += 1 if e % 2 == 0 else -1
    for a in range(d):
        x[a] = start_b[a]
    for j in range(nb):
        keys[na + j] = _encode(x)
        e = steps_b[j]
        dirs[na + j] = e
        x[e // 2] += 1 if e % 2 == 0 else -1
    return _grouped_log_weight(keys, dirs, 2 * d, log_table, log_probs)


@njit(cache=True)
def positions_of(steps, start, d):
    n = steps.shape[0]
    pos = np.empty((n + 1, d), dtype=np.int64)
    for a in range(d):
        pos[0, a] = start[a]
    for j in range(n):
        for a in range(d):
            pos[j + 1, a] = pos[j, a]
        e = steps[j]
        pos[j + 1, e // 2] += 1 if e % 2 == 0 else -1
    return pos


@njit(cache=True)
def two_walk_kernel(pos_a, pos_b, ell_axis, ell_sign, horizon, regen_a, regen_b, n_query):
    """Intersection bookkeeping for two paths given as position arrays.

    ``regen_a``/``regen_b`` flag regeneration levels 0..horizon of each walk.
    Returns ``(zeta, sigma, common_flags, I)`` with -1 for a censored level.
    """
    na = pos_a.shape[0]
    nb = pos_b.shape[0]
    ka = np.empty(na - 1, dtype=np.int64)
    for i in range(1, na):
        ka[i - 1] = _encode(pos_a[i])
    order = np.argsort(ka)
    ka_sorted = ka[order]
    zeta = -1
    for j in range(1, nb):
        lev = pos_b[j, ell_axis] * ell_sign
        if lev > horizon or (zeta >= 0 and lev >= zeta):
            continue
        key = _encode(pos_b[j])
        p = np.searchsorted(ka_sorted, key)
        if p < ka_sorted.shape[0] and ka_sorted[p] == key:
            zeta = lev
    common = np.zeros(horizon + 1, dtype=np.bool_)
    for m in range(horizon + 1):
        common[m] = regen_a[m] and regen_b[m]
    sigma = -1
    if zeta >= 0:
        for m in range(zeta + 1, horizon + 1):
            if common[m]:
                sigma = m
                break
    # I_n: overlap of departure counts up to the hitting times of level n
    I = np.full(n_query.shape[0], -1, dtype=np.int64)
    for q in range(n_query.shape[0]):
        n = n_query[q]
        La = -1
        for i in range(na):
            if pos_a[i, ell_axis] * ell_sign == n:
                La = i
                break
        Lb = -1
        for i in range(nb):
            if pos_b[i, ell_axis] * ell_sign == n:
                Lb = i
                break
        if La < 0 or Lb < 0:
            continue
        kx = np.empty(La, dtype=np.int64)
        for i in range(La):
            kx[i] = _encode(pos_a[i])
        ky = np.empty(Lb, dtype=np.int64)
        for i in range(Lb):
            ky[i] = _encode(pos_b[i])
        kx.sort()
        ky.sort()
        i = 0
        j = 0
        tot = 0
        while i < La and j < Lb:
            if kx[i] < ky[j]:
                i += 1
            elif kx[i] > ky[j]:
                j += 1
            else:
                key = kx[i]
                ci = 0
                while i < La and kx[i] == key:
                    ci += 1
                    i += 1
                cj = 0
                while j < Lb and ky[j] == key:
                    cj += 1
                    j += 1
                tot += min(ci, cj)
        I[q] = tot
    return zeta, sigma, common, I
