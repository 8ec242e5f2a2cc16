# cython: boundscheck=False, wraparound=False, cdivision=True
"""Per-sample plan interpreter.

The hot loop of the whole system: for each sample, walk the DSP nodes
in topological order, accumulate each node's inputs, apply its
transform, and keep only the current value (plus history for delay
lines and two state variables per biquad). Arithmetic must match
_numpy_backend.run expression for expression; the equivalence test
asserts bit identity between the two.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def run(plan):
    cdef Py_ssize_t n = plan.n
    cdef Py_ssize_t m = plan.kinds.shape[0]

    cdef cnp.int32_t[::1] kinds = plan.kinds
    cdef cnp.int32_t[::1] tap_ref = plan.tap_ref
    cdef cnp.int32_t[::1] in_off = plan.in_off
    cdef cnp.int32_t[::1] in_list = plan.in_list
    cdef cnp.int32_t[::1] parr_ref = plan.parr_ref
    cdef cnp.int32_t[::1] delay_slot = plan.delay_slot
    cdef cnp.int32_t[::1] biquad_slot = plan.biquad_slot
    cdef double[:, ::1] par = plan.par
    cdef double[:, ::1] taps = plan.taps
    cdef double[:, ::1] parrs = plan.parrs

    cur_arr = np.zeros(m)
    hist_arr = np.zeros((plan.n_delay if plan.n_delay else 1, n))
    z_arr = np.zeros((plan.n_biquad if plan.n_biquad else 1, 2))
    out_arr = np.zeros(n)
    cdef double[::1] cur = cur_arr
    cdef double[:, ::1] hist = hist_arr
    cdef double[:, ::1] z = z_arr
    cdef double[::1] out = out_arr

    cdef Py_ssize_t i, j, e, d, slot
    cdef Py_ssize_t out_pos = plan.out_pos
    cdef int kind
    cdef double acc, y, u, amount, x

    with nogil:
        for i in range(n):
            for j in range(m):
                acc = 0.0
                if tap_ref[j] >= 0:
                    acc = acc + taps[tap_ref[j], i]
                for e in range(in_off[j], in_off[j + 1]):
                    acc = acc + cur[in_list[e]]
                kind = kinds[j]
                if kind == 0:  # gain
                    if parr_ref[j] >= 0:
                        amount = parrs[parr_ref[j], i]
                    else:
                        amount = par[j, 0]
                    y = acc * amount
                elif kind == 2:  # delay-line
                    slot = delay_slot[j]
                    hist[slot, i] = acc
                    d = <Py_ssize_t> par[j, 0]
                    if i >= d:
                        y = 0.5 * (acc + hist[slot, i - d])
                    else:
                        y = 0.5 * (acc + 0.0)
                elif kind == 3:  # biquad, transposed direct form II
                    slot = biquad_slot[j]
                    x = acc
                    y = par[j, 0] * x + z[slot, 0]
                    z[slot, 0] = par[j, 1] * x + z[slot, 1] - par[j, 3] * y
                    z[slot, 1] = par[j, 2] * x - par[j, 4] * y
                elif kind == 4:  # wave-shaper
                    if parr_ref[j] >= 0:
                        u = acc * parrs[parr_ref[j], i]
                    else:
                        u = acc * par[j, 0]
                    if u <= -1.0:
                        y = -1.0
                    elif u >= 1.0:
                        y = 1.0
                    else:
                        y = 1.5 * u - 0.5 * (u * u * u)
                else:  # mix, output
                    y = acc
                cur[j] = y
            out[i] = cur[out_pos]
    return out_arr
