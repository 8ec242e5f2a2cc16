"""Genome-to-audio rendering.

Two interchangeable plan interpreters exist: a compiled per-sample
loop (Cython) and a vectorized NumPy fallback. The compiled one is
picked when its extension imported cleanly; QDSOUND_BACKEND=numpy or
=compiled forces the choice. Both produce bit-identical buffers, so
the selection is purely a speed matter.
"""

from __future__ import annotations

import os
import wave
from dataclasses import dataclass

import numpy as np

from qdsound.render import _numpy_backend
from qdsound.render.plan import Plan, build_plan

try:
    from qdsound.render import _core

    _HAVE_CORE = True
except ImportError:
    _core = None
    _HAVE_CORE = False

_BACKENDS = {}
_BACKENDS["numpy"] = _numpy_backend.run
if _HAVE_CORE:
    _BACKENDS["compiled"] = _core.run

_active = "compiled" if _HAVE_CORE else "numpy"
_env = os.environ.get("QDSOUND_BACKEND")
if _env:
    if _env not in ("compiled", "numpy"):
        raise RuntimeError(f"QDSOUND_BACKEND must be 'compiled' or 'numpy', got {_env!r}")
    if _env == "compiled" and not _HAVE_CORE:
        raise RuntimeError("QDSOUND_BACKEND=compiled but the extension is not built")
    _active = _env


def active_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    if name not in _BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}")
    global _active
    _active = name


def available_backends():
    return tuple(sorted(_BACKENDS))


@dataclass
class SoundBuffer:
    samples: np.ndarray
    sample_rate: int
    duration: float


@dataclass
class RenderReport:
    nonfinite_taps: int
    nonfinite_out: int
    peak: float
    normalized: bool

    @property
    def flagged(self) -> bool:
        return self.nonfinite_taps > 0 or self.nonfinite_out > 0


def run_plan(plan: Plan, backend: str = None) -> np.ndarray:
    return _BACKENDS[backend or _active](plan)


def render_debug(
    genome,
    duration_s: float = 4.0,
    sample_rate: int = 16000,
    pitch_hz: float = 220.0,
    backend: str = None,
):
    """Render and also report peaks, normalization, non-finite repairs."""
    if duration_s <= 0.0:
        raise ValueError("duration_s must be positive")
    if sample_rate not in (16000, 48000):
        raise ValueError("sample_rate must be 16000 or 48000")
    if pitch_hz <= 0.0:
        raise ValueError("pitch_hz must be positive")
    plan = build_plan(genome, duration_s, sample_rate, pitch_hz)
    raw = run_plan(plan, backend)
    finite = np.isfinite(raw)
    bad = int(raw.size - np.count_nonzero(finite))
    if bad:
        raw = np.where(finite, raw, 0.0)
    peak = float(np.max(np.abs(raw))) if raw.size else 0.0
    normalized = peak > 1.0
    if normalized:
        raw = raw / peak
    samples = np.clip(raw, -1.0, 1.0)
    buf = SoundBuffer(samples=samples, sample_rate=sample_rate, duration=duration_s)
    report = RenderReport(
        nonfinite_taps=plan.nonfinite_taps,
        nonfinite_out=bad,
        peak=peak,
        normalized=normalized,
    )
    return buf, report


def render(
    genome,
    duration_s: float = 4.0,
    sample_rate: int = 16000,
    pitch_hz: float = 220.0,
) -> SoundBuffer:
    return render_debug(genome, duration_s, sample_rate, pitch_hz)[0]


def pcm16(samples: np.ndarray) -> bytes:
    """Quantize [-1, 1] float samples to little-endian 16-bit PCM."""
    q = np.clip(np.rint(samples * 32767.0), -32768.0, 32767.0)
    return q.astype("<i2").tobytes()


def write_wav(path, buf: SoundBuffer) -> None:
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(buf.sample_rate)
        fh.writeframes(pcm16(buf.samples))
