"""Flatten a genome into an executable render plan.

Everything numerically delicate but cheap happens here, once per
render, in plain NumPy: CPPN evaluation, parameter mapping, filter
coefficient computation. The per-sample DSP interpretation is left to
a backend (compiled or NumPy), both of which consume the same plan and
must produce bit-identical buffers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from qdsound.genome import PARAM_SPECS, Genome, topological_order

# DSP kind codes shared with both backends.
GAIN, MIX, DELAY, BIQUAD, SHAPER, OUTPUT = range(6)

_KIND_CODE = {
    "gain": GAIN,
    "mix": MIX,
    "delay-line": DELAY,
    "biquad-filter": BIQUAD,
    "wave-shaper": SHAPER,
    "output": OUTPUT,
}


@dataclass
class Plan:
    """Topologically ordered node programs plus their input signals.

    ``kinds[j]`` is the kind code of the j-th node in evaluation order.
    ``tap_ref[j]`` indexes a row of ``taps`` injected as audio into node
    j (or -1). Edge inputs for node j are ``in_list[in_off[j]:in_off[j+1]]``,
    each an index of an earlier node, listed in connection-id order.
    ``par[j]`` holds resolved scalar parameters (gain amount, delay
    length in samples, biquad coefficients b0 b1 b2 a1 a2, shaper
    drive); ``parr_ref[j]`` indexes a row of ``parrs`` when the node's
    drivable parameter is bound to a tap at audio rate (or -1).
    """

    n: int
    kinds: np.ndarray
    tap_ref: np.ndarray
    in_off: np.ndarray
    in_list: np.ndarray
    par: np.ndarray
    parr_ref: np.ndarray
    delay_slot: np.ndarray
    n_delay: int
    n_biquad: int
    biquad_slot: np.ndarray
    taps: np.ndarray
    parrs: np.ndarray
    out_pos: int
    nonfinite_taps: int


def _activation(name: str, u: np.ndarray) -> np.ndarray:
    if name == "identity":
        return u
    if name == "sine":
        return np.sin(2.0 * np.pi * u)
    if name == "square":
        return np.sign(np.sin(2.0 * np.pi * u))
    if name == "sawtooth":
        return 2.0 * (u - np.floor(u)) - 1.0
    # triangle
    return 1.0 - 4.0 * np.abs(u - np.floor(u) - 0.5)


def evaluate_cppn(cppn, t: np.ndarray, pitch: np.ndarray):
    """Run the CPPN over the whole sample grid.

    Returns (taps, nonfinite_count): one row per tap, already
    sanitized. Non-finite values can arise from deep identity chains;
    they are zeroed and counted rather than allowed to poison the DSP
    stage.
    """
    n = t.shape[0]
    vals = {cppn.inputs[0]: t, cppn.inputs[1]: pitch}
    by_target: dict = {}
    for cid in sorted(cppn.connections):
        conn = cppn.connections[cid]
        if conn.enabled:
            by_target.setdefault(conn.target, []).append(conn)
    order = topological_order(
        cppn.nodes, [(c.source, c.target) for c in cppn.connections.values()]
    )
    with np.errstate(all="ignore"):
        for nid in order:
            if nid in vals:
                continue
            acc = np.zeros(n)
            for conn in by_target.get(nid, ()):
                acc = acc + conn.weight * vals[conn.source]
            vals[nid] = _activation(cppn.nodes[nid].activation, acc)
    taps = np.empty((len(cppn.taps), n))
    for i, nid in enumerate(cppn.taps):
        taps[i] = vals[nid]
    finite = np.isfinite(taps)
    bad = int(taps.size - np.count_nonzero(finite))
    if bad:
        taps = np.where(finite, taps, 0.0)
    return np.ascontiguousarray(taps), bad


def _map_unit(scale: str, lo: float, hi: float, u):
    if scale == "lin":
        return lo + u * (hi - lo)
    return np.exp(np.log(lo) + u * (np.log(hi) - np.log(lo)))


def biquad_coefficients(mode: str, cutoff_hz: float, q: float, sample_rate: int):
    """RBJ cookbook coefficients, normalized, as (b0, b1, b2, a1, a2)."""
    w0 = 2.0 * np.pi * cutoff_hz / sample_rate
    cw = np.cos(w0)
    sw = np.sin(w0)
    alpha = sw / (2.0 * q)
    if mode == "lowpass":
        b0 = (1.0 - cw) / 2.0
        b1 = 1.0 - cw
        b2 = b0
    elif mode == "highpass":
        b0 = (1.0 + cw) / 2.0
        b1 = -(1.0 + cw)
        b2 = b0
    elif mode == "bandpass":
        b0 = alpha
        b1 = 0.0
        b2 = -alpha
    else:
        raise ValueError(f"unknown biquad mode {mode!r}")
    a0 = 1.0 + alpha
    return (
        float(b0 / a0),
        float(b1 / a0),
        float(b2 / a0),
        float(-2.0 * cw / a0),
        float((1.0 - alpha) / a0),
    )


def build_plan(
    genome: Genome, duration_s: float, sample_rate: int, pitch_hz: float
) -> Plan:
    n = int(round(sample_rate * duration_s))
    t = np.linspace(0.0, 1.0, n)
    pitch = np.sin(2.0 * np.pi * pitch_hz * duration_s * t)
    taps, bad = evaluate_cppn(genome.cppn, t, pitch)

    dsp = genome.dsp
    order = topological_order(
        dsp.nodes, [(c.source, c.target) for c in dsp.connections.values()]
    )
    pos = {nid: j for j, nid in enumerate(order)}
    m = len(order)

    kinds = np.empty(m, dtype=np.int32)
    tap_ref = np.full(m, -1, dtype=np.int32)
    par = np.zeros((m, 5))
    parr_ref = np.full(m, -1, dtype=np.int32)
    delay_slot = np.full(m, -1, dtype=np.int32)
    biquad_slot = np.full(m, -1, dtype=np.int32)
    in_off = np.zeros(m + 1, dtype=np.int32)
    in_list: list = []
    parrs: list = []

    by_target: dict = {}
    for cid in sorted(dsp.connections):
        conn = dsp.connections[cid]
        by_target.setdefault(conn.target, []).append(conn)

    n_delay = 0
    n_biquad = 0
    for j, nid in enumerate(order):
        node = dsp.nodes[nid]
        kinds[j] = _KIND_CODE[node.kind]
        if node.audio_tap is not None:
            tap_ref[j] = node.audio_tap
        for conn in by_target.get(nid, ()):
            in_list.append(pos[conn.source])
        in_off[j + 1] = len(in_list)

        spec = PARAM_SPECS[node.kind]
        resolved = {}
        for name, (scale, lo, hi, rate) in spec.items():
            slot = node.params[name]
            if slot.tap is not None:
                u = np.clip((taps[slot.tap] + 1.0) * 0.5, 0.0, 1.0)
                if rate == "audio":
                    parr_ref[j] = len(parrs)
                    parrs.append(_map_unit(scale, lo, hi, u))
                    resolved[name] = None
                else:
                    resolved[name] = float(_map_unit(scale, lo, hi, float(np.mean(u))))
            else:
                resolved[name] = float(_map_unit(scale, lo, hi, slot.value))

        if node.kind == "gain":
            par[j, 0] = resolved["amount"] if resolved["amount"] is not None else 0.0
        elif node.kind == "delay-line":
            par[j, 0] = float(int(np.rint(resolved["time_s"] * sample_rate)))
            delay_slot[j] = n_delay
            n_delay += 1
        elif node.kind == "biquad-filter":
            par[j, :] = biquad_coefficients(
                node.mode, resolved["cutoff_hz"], resolved["q"], sample_rate
            )
            biquad_slot[j] = n_biquad
            n_biquad += 1
        elif node.kind == "wave-shaper":
            par[j, 0] = resolved["drive"] if resolved["drive"] is not None else 0.0

    parrs_arr = (
        np.ascontiguousarray(np.stack(parrs)) if parrs else np.zeros((0, n))
    )
    return Plan(
        n=n,
        kinds=kinds,
        tap_ref=tap_ref,
        in_off=in_off,
        in_list=np.asarray(in_list, dtype=np.int32),
        par=np.ascontiguousarray(par),
        parr_ref=parr_ref,
        delay_slot=delay_slot,
        n_delay=n_delay,
        n_biquad=n_biquad,
        biquad_slot=biquad_slot,
        taps=taps,
        parrs=parrs_arr,
        out_pos=pos[dsp.output_id],
        nonfinite_taps=bad,
    )
