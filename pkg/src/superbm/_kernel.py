"""Numba kernel for the branching Brownian replicate loop.

One replicate is a sequential sweep over grid steps; within a step every
particle is processed depth-first: exponential waits at rate ``rate`` per
particle resolve every branch event at its exact time, offspring inherit the
remaining step time with fresh clocks, and Brownian increments bridge the
intervals between events.  All draws come scalar-by-scalar from one
counter-based generator, so a replicate is bit-reproducible from its key
regardless of how replicates are scheduled across processes.

Buffers grow by doubling; the caller trims them to the reported lengths.
"""

from __future__ import annotations

import numpy as np
from numba import njit

STATUS_OK = 0
STATUS_CAPPED = 1


@njit(cache=True, inline="always")
def _grow1f(buf, needed):
    if needed <= buf.shape[0]:
        return buf
    cap = buf.shape[0]
    while cap < needed:
        cap *= 2
    out = np.empty(cap, dtype=np.float64)
    out[:buf.shape[0]] = buf
    return out


@njit(cache=True, inline="always")
def _grow1b(buf, needed):
    if needed <= buf.shape[0]:
        return buf
    cap = buf.shape[0]
    while cap < needed:
        cap *= 2
    out = np.empty(cap, dtype=np.int8)
    out[:buf.shape[0]] = buf
    return out


@njit(cache=True, inline="always")
def _grow2f(buf, needed):
    if needed <= buf.shape[0]:
        return buf
    cap = buf.shape[0]
    while cap < needed:
        cap *= 2
    out = np.empty((cap, buf.shape[1]), dtype=np.float64)
    out[:buf.shape[0]] = buf
    return out


@njit(cache=True)
def run_replicate(gen, pos0, n_steps, dt, rate, cap, record_states, record_events,
                  track_motion=True):
    """Simulate one replicate; see module docstring.

    Returns (status, capped_step, counts, states_flat, states_len, offsets,
    ev_times, ev_pos, ev_signs, ev_len, n_events_total).
    """
    dim = pos0.shape[1]
    n = pos0.shape[0]

    counts = np.zeros(n_steps + 1, dtype=np.int64)
    counts[0] = n
    offsets = np.zeros(n_steps + 2, dtype=np.int64)

    st_cap = (n + 16) * (n_steps + 1) if record_states else 1
    if st_cap > 4_000_000:
        st_cap = 4_000_000
    states_flat = np.empty((st_cap, dim), dtype=np.float64)
    st_len = 0
    if record_states:
        states_flat = _grow2f(states_flat, n)
        states_flat[:n] = pos0
        st_len = n
    offsets[1] = st_len

    ev_cap = 1024
    ev_times = np.empty(ev_cap, dtype=np.float64)
    ev_pos = np.empty((ev_cap, dim), dtype=np.float64)
    ev_signs = np.empty(ev_cap, dtype=np.int8)
    ev_len = 0
    n_events_total = 0

    cur = np.empty((max(n, 1), dim), dtype=np.float64)
    cur[:n] = pos0
    nxt = np.empty((max(2 * n, 16), dim), dtype=np.float64)

    stack_pos = np.empty((64, dim), dtype=np.float64)
    stack_rem = np.empty(64, dtype=np.float64)

    x = np.empty(dim, dtype=np.float64)
    status = STATUS_OK
    capped_step = -1

    for k in range(n_steps):
        t0 = k * dt
        ev_step_lo = ev_len
        out_n = 0
        for i in range(n):
            # seed the lineage stack with particle i
            depth = 0
            for j in range(dim):
                stack_pos[0, j] = cur[i, j]
            stack_rem[0] = dt
            depth = 1
            while depth > 0:
                depth -= 1
                for j in range(dim):
                    x[j] = stack_pos[depth, j]
                rem = stack_rem[depth]
                alive = True
                while alive:
                    w = gen.standard_exponential() / rate
                    if w >= rem:
                        # settles at the step end
                        if track_motion:
                            s = np.sqrt(rem)
                            for j in range(dim):
                                x[j] += gen.standard_normal() * s
                        if out_n >= nxt.shape[0]:
                            nxt = _grow2f(nxt, out_n + 1)
                        for j in range(dim):
                            nxt[out_n, j] = x[j]
                        out_n += 1
                        alive = False
                    else:
                        # branch event at absolute time t0 + (dt - rem + w)
                        if track_motion:
                            s = np.sqrt(w)
                            for j in range(dim):
                                x[j] += gen.standard_normal() * s
                        rem -= w
                        split = gen.random() < 0.5
                        if record_events:
                            if ev_len == ev_times.shape[0]:
                                ev_times = _grow1f(ev_times, ev_len + 1)
                                ev_pos = _grow2f(ev_pos, ev_len + 1)
                                ev_signs = _grow1b(ev_signs, ev_len + 1)
                            ev_times[ev_len] = t0 + (dt - rem)
                            for j in range(dim):
                                ev_pos[ev_len, j] = x[j]
                            ev_signs[ev_len] = 1 if split else -1
                            ev_len += 1
                        n_events_total += 1
                        if split:
                            # push one offspring, keep following the other
                            if depth >= stack_rem.shape[0]:
                                new_sp = np.empty((2 * stack_rem.shape[0], dim),
                                                  dtype=np.float64)
                                new_sr = np.empty(2 * stack_rem.shape[0], dtype=np.float64)
                                new_sp[:stack_rem.shape[0]] = stack_pos
                                new_sr[:stack_rem.shape[0]] = stack_rem
                                stack_pos = new_sp
                                stack_rem = new_sr
                            for j in range(dim):
                                stack_pos[depth, j] = x[j]
                            stack_rem[depth] = rem
                            depth += 1
                        else:
                            alive = False

        # sort this step's events by time (depth-first order interleaves lineages)
        if record_events and ev_len > ev_step_lo:
            seg = ev_times[ev_step_lo:ev_len]
            order = np.argsort(seg, kind="mergesort")
            ev_times[ev_step_lo:ev_len] = seg[order]
            ev_pos[ev_step_lo:ev_len] = ev_pos[ev_step_lo:ev_len][order]
            ev_signs[ev_step_lo:ev_len] = ev_signs[ev_step_lo:ev_len][order]

        # swap buffers
        tmp = cur
        cur = nxt
        nxt = tmp
        n = out_n
        counts[k + 1] = n
        if record_states:
            states_flat = _grow2f(states_flat, st_len + n)
            states_flat[st_len:st_len + n] = cur[:n]
            st_len += n
        offsets[k + 2] = st_len
        if n > cap:
            status = STATUS_CAPPED
            capped_step = k
            for kk in range(k + 1, n_steps):
                offsets[kk + 2] = st_len
            break

    return (status, capped_step, counts, states_flat, st_len, offsets,
            ev_times, ev_pos, ev_signs, ev_len, n_events_total)
