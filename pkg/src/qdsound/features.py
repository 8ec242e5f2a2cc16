"""Audio feature extraction and z-score normalization.

The descriptor vector is 96-dimensional: 13 MFCCs per frame with
coefficient 0 dropped, first-order deltas of the remaining 12, and
{mean, std, min, max} over frames for each coefficient, MFCC blocks
first. Alongside it, ten classic instantaneous spectral features are
computed on the same STFT and frame-averaged.

Analysis geometry: 400-sample frames, hop 160 (overlap 240), periodic
Hann window, FFT size 400, 40 triangular mel bands spanning 0-8 kHz,
natural log with a 1e-10 floor, orthonormal DCT-II.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct, rfft

FRAME = 400
HOP = 160
N_BINS = FRAME // 2 + 1
N_MELS = 40
N_MFCC = 13
SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8

SPECTRAL_NAMES = (
    "centroid",
    "spread",
    "skewness",
    "kurtosis",
    "rolloff",
    "decrease",
    "slope",
    "flux",
    "flatness",
    "crest",
)


@dataclass
class SpectralFeatureSet:
    centroid: float
    spread: float
    skewness: float
    kurtosis: float
    rolloff: float
    decrease: float
    slope: float
    flux: float
    flatness: float
    crest: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in SPECTRAL_NAMES])


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    floored: np.ndarray  # dims whose raw std fell below the floor

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "floored": self.floored.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NormStats":
        return cls(
            mean=np.asarray(doc["mean"], dtype=np.float64),
            std=np.asarray(doc["std"], dtype=np.float64),
            floored=np.asarray(doc["floored"], dtype=bool),
        )


def _samples(buf) -> np.ndarray:
    x = buf.samples if hasattr(buf, "samples") else buf
    return np.asarray(x, dtype=np.float64)


def _frame_matrix(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    if n < FRAME:
        raise ValueError(
            f"insufficient frames: need at least {FRAME} samples, got {n}"
        )
    nf = (n - FRAME) // HOP + 1
    idx = HOP * np.arange(nf)[:, None] + np.arange(FRAME)[None, :]
    return x[idx]


_WINDOW = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(FRAME) / FRAME)

_BIN_HZ = np.arange(N_BINS) * (SAMPLE_RATE / FRAME)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank() -> np.ndarray:
    """Triangular filters with mel-spaced corner frequencies, (40, 201)."""
    corners = mel_to_hz(np.linspace(0.0, hz_to_mel(SAMPLE_RATE / 2), N_MELS + 2))
    fb = np.zeros((N_MELS, N_BINS))
    for j in range(N_MELS):
        lo, mid, hi = corners[j], corners[j + 1], corners[j + 2]
        rising = (_BIN_HZ - lo) / (mid - lo)
        falling = (hi - _BIN_HZ) / (hi - mid)
        fb[j] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


_MEL_FB = mel_filterbank()


def stft_magnitude(x: np.ndarray) -> np.ndarray:
    """Magnitude spectra of windowed frames, shape (n_frames, 201)."""
    frames = _frame_matrix(x) * _WINDOW
    return np.abs(rfft(frames, axis=1))


def mfcc_frames(mag: np.ndarray) -> np.ndarray:
    """13 MFCCs per frame from an STFT magnitude matrix."""
    energies = (mag * mag) @ _MEL_FB.T
    logs = np.log(np.maximum(energies, LOG_FLOOR))
    return dct(logs, type=2, norm="ortho", axis=1)[:, :N_MFCC]


def _deltas(c: np.ndarray) -> np.ndarray:
    padded = np.concatenate([c[:1], c, c[-1:]], axis=0)
    return (padded[2:] - padded[:-2]) / 2.0


def _block_stats(block: np.ndarray) -> np.ndarray:
    """(frames, coeffs) -> coeff-major [mean, std, min, max] flat vector."""
    stats = np.stack(
        [
            block.mean(axis=0),
            block.std(axis=0),
            block.min(axis=0),
            block.max(axis=0),
        ],
        axis=1,
    )
    return stats.ravel()


def extract_mfcc96(buf) -> np.ndarray:
    x = _samples(buf)
    rate = getattr(buf, "sample_rate", SAMPLE_RATE)
    if rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz input, got {rate}")
    mag = stft_magnitude(x)
    coeffs = mfcc_frames(mag)[:, 1:]
    return np.concatenate([_block_stats(coeffs), _block_stats(_deltas(coeffs))])


def spectral_frames(mag: np.ndarray) -> np.ndarray:
    """Per-frame spectral features, shape (n_frames, 10).

    Silent frames (all-zero magnitude) take convention values:
    flatness and crest 1, everything else 0.
    """
    nf = mag.shape[0]
    f = _BIN_HZ
    tot = mag.sum(axis=1)
    silent = tot == 0.0
    safe = np.where(silent, 1.0, tot)

    centroid = (mag @ f) / safe
    dev = f[None, :] - centroid[:, None]
    spread = np.sqrt(((dev * dev) * mag).sum(axis=1) / safe)
    with np.errstate(invalid="ignore", divide="ignore"):
        m3 = ((dev**3) * mag).sum(axis=1) / safe
        m4 = ((dev**4) * mag).sum(axis=1) / safe
        skewness = np.where(spread > 0.0, m3 / spread**3, 0.0)
        kurtosis = np.where(spread > 0.0, m4 / spread**4, 0.0)
    centroid = np.where(silent, 0.0, centroid)
    spread = np.where(silent, 0.0, spread)

    power = mag * mag
    cum = np.cumsum(power, axis=1)
    rolloff = f[np.argmax(cum >= 0.85 * cum[:, -1:], axis=1)]
    rolloff = np.where(silent, 0.0, rolloff)

    tail = mag[:, 1:]
    tail_sum = tail.sum(axis=1)
    dec_num = ((tail - mag[:, :1]) / np.arange(1, N_BINS)).sum(axis=1)
    decrease = np.where(tail_sum > 0.0, dec_num / np.where(tail_sum == 0, 1, tail_sum), 0.0)

    fc = f - f.mean()
    slope = (mag @ fc) / (fc @ fc)

    norms = np.sqrt(power.sum(axis=1))
    unit = mag / np.where(norms == 0.0, 1.0, norms)[:, None]
    flux = np.zeros(nf)
    if nf > 1:
        diff = unit[1:] - unit[:-1]
        flux[1:] = np.sqrt((diff * diff).sum(axis=1))

    arith = power.mean(axis=1)
    geo = np.exp(np.log(power + 1e-20).mean(axis=1))
    flatness = np.where(silent, 1.0, np.clip(geo / np.where(arith == 0, 1, arith), 0.0, 1.0))

    crest = np.where(silent, 1.0, mag.max(axis=1) / (safe / N_BINS))

    return np.stack(
        [
            centroid,
            spread,
            skewness,
            kurtosis,
            rolloff,
            decrease,
            slope,
            flux,
            flatness,
            crest,
        ],
        axis=1,
    )


def extract_spectral(buf) -> SpectralFeatureSet:
    x = _samples(buf)
    rate = getattr(buf, "sample_rate", SAMPLE_RATE)
    if rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz input, got {rate}")
    means = spectral_frames(stft_magnitude(x)).mean(axis=0)
    return SpectralFeatureSet(*(float(v) for v in means))


def extract_all(buf):
    """One STFT pass feeding both extractors; the engine's fast path."""
    x = _samples(buf)
    mag = stft_magnitude(x)
    coeffs = mfcc_frames(mag)[:, 1:]
    vec = np.concatenate([_block_stats(coeffs), _block_stats(_deltas(coeffs))])
    means = spectral_frames(mag).mean(axis=0)
    return vec, SpectralFeatureSet(*(float(v) for v in means))


# ---------------------------------------------------------------------------
# normalization


def fit_norm(population) -> NormStats:
    pop = np.asarray(population, dtype=np.float64)
    if pop.ndim != 2 or pop.shape[0] == 0:
        raise ValueError("population must be a non-empty 2-d array")
    raw_std = pop.std(axis=0)
    floored = raw_std < STD_FLOOR
    return NormStats(
        mean=pop.mean(axis=0),
        std=np.maximum(raw_std, STD_FLOOR),
        floored=floored,
    )


def apply_norm(v: np.ndarray, stats: NormStats) -> np.ndarray:
    return (np.asarray(v, dtype=np.float64) - stats.mean) / stats.std


# ---------------------------------------------------------------------------
# feature store files


_BIN_MAGIC = b"QDFB"


def write_features_csv(path, ids, vectors, spectral=None) -> None:
    vectors = np.asarray(vectors)
    cols = [f"f{i}" for i in range(vectors.shape[1])]
    if spectral is not None:
        cols += list(SPECTRAL_NAMES)
    with open(path, "w") as fh:
        fh.write("id," + ",".join(cols) + "\n")
        for i, sid in enumerate(ids):
            row = [repr(float(v)) for v in vectors[i]]
            if spectral is not None:
                row += [repr(float(v)) for v in np.asarray(spectral[i])]
            fh.write(str(sid) + "," + ",".join(row) + "\n")


def read_features_csv(path):
    ids = []
    rows = []
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split(",")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            ids.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    return ids, np.asarray(rows), header[1:]


def write_features_bin(path, ids, vectors) -> None:
    data = np.ascontiguousarray(vectors, dtype=np.float64)
    ids_blob = json.dumps([str(s) for s in ids]).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_BIN_MAGIC)
        fh.write(struct.pack("<II", data.shape[0], data.shape[1]))
        fh.write(struct.pack("<I", len(ids_blob)))
        fh.write(ids_blob)
        fh.write(data.tobytes())


def read_features_bin(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _BIN_MAGIC:
            raise ValueError(f"{path}: not a feature store file")
        count, dim = struct.unpack("<II", fh.read(8))
        (ids_len,) = struct.unpack("<I", fh.read(4))
        ids = json.loads(fh.read(ids_len).decode("utf-8"))
        data = np.frombuffer(fh.read(count * dim * 8), dtype=np.float64)
    if data.size != count * dim or len(ids) != count:
        raise ValueError(f"{path}: truncated feature store")
    return ids, data.reshape(count, dim).copy()
