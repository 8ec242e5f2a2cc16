"""Quality scores for candidate sounds.

Three regimes. Single-reference scores cosine similarity of the 96-dim
feature vector against one fixed reference. Multiple-reference averages
similarity over the k nearest entries of a reference store. The
reference-free score needs no corpus at all: it combines six artifact
detectors with a compressibility measure.

All scores land in [0,1]; a power factor p (default 1) sharpens or
softens the similarity-based ones.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from qdsound import refdb as R

DEFAULT_POWER = 1.0

COMPRESS_LEVEL = 6  # DEFLATE level, pinned so scores are comparable across runs

# Detector analysis geometry and thresholds.
DETECT_FRAME = 1024
DETECT_HOP = 512
CLICK_THRESHOLD = 0.5  # max |second difference| within a frame
GAP_RMS = 1e-4  # a frame this quiet is a gap, if the buffer itself is not
CLIP_LEVEL = 0.999
CLIP_RUN = 3
BURST_SIGMA = 4.0
BURST_FLATNESS = 0.6
SATURATION_LEVEL = 0.98
SATURATION_FRACTION = 0.5
DC_THRESHOLD = 0.05

PROBLEM_NAMES = (
    "clicks",
    "gaps",
    "clipping",
    "noise_bursts",
    "saturation",
    "dc_offset",
)


@dataclass
class ProblemReport:
    proportions: dict  # name -> fraction of frames
    frame_counts: dict  # name -> frames detected
    total_frames: int

    def as_array(self) -> np.ndarray:
        return np.array([self.proportions[name] for name in PROBLEM_NAMES])


@dataclass
class CompressionScore:
    c: float
    raw_bytes: int
    compressed_bytes: int


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na2 = float(a @ a)
    nb2 = float(b @ b)
    if na2 == 0.0 or nb2 == 0.0:
        raise ValueError("cosine distance undefined for zero vectors")
    # sqrt of the product (not product of sqrts) so a vector compared
    # with itself lands on similarity 1.0 exactly
    sim = float(a @ b) / float(np.sqrt(na2 * nb2))
    return 1.0 - max(min(sim, 1.0), -1.0)


def q_single_ref(fs: np.ndarray, fr: np.ndarray, p: float = DEFAULT_POWER) -> float:
    base = max(1.0 - cosine_distance(fs, fr), 0.0)
    return base**p


def q_multi_ref(
    fs: np.ndarray, store: R.ReferenceStore, k: int, p: float = DEFAULT_POWER
) -> float:
    if len(store) == 0:
        raise ValueError("reference store is empty")
    norm = float(np.sqrt(np.asarray(fs, dtype=np.float64) @ fs))
    if norm == 0.0:
        return 0.0  # no direction to compare against anything
    hits = store.index.query(fs, k)
    sims = [1.0 - dist for _, dist in hits]
    base = max(sum(sims) / len(sims), 0.0)
    return base**p


def _frame_starts(n: int):
    if n <= DETECT_FRAME:
        return [0], n
    return list(range(0, n - DETECT_FRAME + 1, DETECT_HOP)), DETECT_FRAME


def _flatness(frame: np.ndarray) -> float:
    """Geometric over arithmetic mean of the magnitude spectrum.

    Magnitude, not power: white noise then sits near 0.85 and tonal
    frames near zero, so the burst threshold separates the two. On the
    power spectrum white noise would plateau around 0.56 and the burst
    detector could never fire.
    """
    mag = np.abs(np.fft.rfft(frame))
    arith = float(mag.mean())
    if arith == 0.0:
        return 1.0
    geo = float(np.exp(np.log(mag + 1e-20).mean()))
    return min(geo / arith, 1.0)


def detect_problems(buf) -> ProblemReport:
    x = np.asarray(buf.samples if hasattr(buf, "samples") else buf, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot analyse an empty buffer")
    starts, width = _frame_starts(x.size)
    nf = len(starts)
    frames = np.stack([x[s : s + width] for s in starts])

    energies = (frames * frames).sum(axis=1)
    rms = np.sqrt(energies / width)
    buffer_rms = float(np.sqrt(np.mean(x * x)))

    counts = dict.fromkeys(PROBLEM_NAMES, 0)

    if width >= 3:
        second = np.abs(frames[:, 2:] - 2.0 * frames[:, 1:-1] + frames[:, :-2])
        counts["clicks"] = int((second.max(axis=1) > CLICK_THRESHOLD).sum())

    if buffer_rms >= 10.0 * GAP_RMS:
        counts["gaps"] = int((rms < GAP_RMS).sum())

    high = np.abs(frames) >= CLIP_LEVEL
    if width >= CLIP_RUN:
        runs = high[:, 2:] & high[:, 1:-1] & high[:, :-2]
        counts["clipping"] = int(runs.any(axis=1).sum())

    mu = float(energies.mean())
    sigma = float(energies.std())
    burst = energies > mu + BURST_SIGMA * sigma
    for i in np.flatnonzero(burst):
        if _flatness(frames[i]) > BURST_FLATNESS:
            counts["noise_bursts"] += 1

    sat = (np.abs(frames) >= SATURATION_LEVEL).mean(axis=1)
    counts["saturation"] = int((sat >= SATURATION_FRACTION).sum())

    counts["dc_offset"] = int((np.abs(frames.mean(axis=1)) > DC_THRESHOLD).sum())

    proportions = {name: counts[name] / nf for name in PROBLEM_NAMES}
    return ProblemReport(proportions, counts, nf)


def canonical_pcm16(samples: np.ndarray) -> bytes:
    """16-bit PCM with polarity normalized (first nonzero sample > 0),
    so compressibility is exactly invariant under sign flips."""
    x = np.asarray(samples, dtype=np.float64)
    nz = np.flatnonzero(x)
    if nz.size and x[nz[0]] < 0.0:
        x = -x
    q = np.clip(np.rint(x * 32767.0), -32768.0, 32767.0)
    return q.astype("<i2").tobytes()


def compression_score(buf) -> CompressionScore:
    x = buf.samples if hasattr(buf, "samples") else buf
    pcm = canonical_pcm16(x)
    if not pcm:
        return CompressionScore(0.0, 0, 0)
    compressed = zlib.compress(pcm, COMPRESS_LEVEL)
    c = max(1.0 - len(compressed) / len(pcm), 0.0)
    return CompressionScore(c, len(pcm), len(compressed))


def q_ref_free(buf) -> float:
    report = detect_problems(buf)
    score = compression_score(buf)
    total = sum(1.0 - report.proportions[name] for name in PROBLEM_NAMES)
    return (total + score.c) / 7.0
