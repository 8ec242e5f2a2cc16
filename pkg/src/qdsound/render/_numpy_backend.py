"""Vectorized plan interpreter.

Processes whole buffers node by node in topological order. Because the
DSP graph has no feedback edges, this is sample-for-sample equivalent
to the compiled per-sample interpreter; every arithmetic expression
below is written to match it exactly.
"""

import numpy as np
from scipy.signal import lfilter

from qdsound.render.plan import BIQUAD, DELAY, GAIN, SHAPER, Plan


def run(plan: Plan) -> np.ndarray:
    n = plan.n
    m = plan.kinds.shape[0]
    outs = np.zeros((m, n))
    for j in range(m):
        acc = np.zeros(n)
        if plan.tap_ref[j] >= 0:
            acc = acc + plan.taps[plan.tap_ref[j]]
        for e in range(plan.in_off[j], plan.in_off[j + 1]):
            acc = acc + outs[plan.in_list[e]]
        kind = plan.kinds[j]
        if kind == GAIN:
            if plan.parr_ref[j] >= 0:
                y = acc * plan.parrs[plan.parr_ref[j]]
            else:
                y = acc * plan.par[j, 0]
        elif kind == DELAY:
            d = int(plan.par[j, 0])
            if d == 0:
                delayed = acc
            elif d >= n:
                delayed = np.zeros(n)
            else:
                delayed = np.concatenate([np.zeros(d), acc[:-d]])
            y = 0.5 * (acc + delayed)
        elif kind == BIQUAD:
            b = plan.par[j, 0:3]
            a = np.array([1.0, plan.par[j, 3], plan.par[j, 4]])
            y = lfilter(b, a, acc)
        elif kind == SHAPER:
            if plan.parr_ref[j] >= 0:
                u = acc * plan.parrs[plan.parr_ref[j]]
            else:
                u = acc * plan.par[j, 0]
            with np.errstate(all="ignore"):
                c = 1.5 * u - 0.5 * (u * u * u)
                y = np.where(u <= -1.0, -1.0, np.where(u >= 1.0, 1.0, c))
        else:  # mix, output
            y = acc
        outs[j] = y
    return outs[plan.out_pos].copy()
