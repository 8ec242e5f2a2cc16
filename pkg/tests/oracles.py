"""Independent reference implementations used only by tests.

Everything here is written the slow, explicit way on purpose: explicit
DFT matrices, loop-built filterbanks, textbook formulas. These are the
second opinion that the production code is checked against, so they
must not share code with the package.
"""

import math
import zlib

import numpy as np


def mfcc96_reference(x: np.ndarray) -> np.ndarray:
    """96-dim MFCC statistics vector, computed from first principles."""
    x = np.asarray(x, dtype=np.float64)
    frame, hop, n_mels, sr = 400, 160, 40, 16000
    n_bins = frame // 2 + 1
    nf = (len(x) - frame) // hop + 1

    window = np.array(
        [0.5 - 0.5 * math.cos(2.0 * math.pi * k / frame) for k in range(frame)]
    )

    # explicit DFT matrix, first 201 bins
    kk = np.arange(n_bins)[:, None]
    tt = np.arange(frame)[None, :]
    dft = np.exp(-2j * math.pi * kk * tt / frame)

    # triangular mel filterbank with HTK mel corners
    def to_mel(f):
        return 2595.0 * math.log10(1.0 + f / 700.0)

    def to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    top = to_mel(sr / 2.0)
    corners = [to_hz(top * i / (n_mels + 1)) for i in range(n_mels + 2)]
    bin_hz = [i * sr / frame for i in range(n_bins)]
    fb = np.zeros((n_mels, n_bins))
    for j in range(n_mels):
        lo, mid, hi = corners[j], corners[j + 1], corners[j + 2]
        for i, f in enumerate(bin_hz):
            if lo < f <= mid:
                fb[j, i] = (f - lo) / (mid - lo)
            elif mid < f < hi:
                fb[j, i] = (hi - f) / (hi - mid)
            elif f == lo == mid:
                fb[j, i] = 1.0

    # orthonormal DCT-II matrix, 13 x 40
    dct = np.zeros((13, n_mels))
    for k in range(13):
        scale = math.sqrt(1.0 / n_mels) if k == 0 else math.sqrt(2.0 / n_mels)
        for m in range(n_mels):
            dct[k, m] = scale * math.cos(math.pi * k * (2 * m + 1) / (2.0 * n_mels))

    coeffs = np.zeros((nf, 13))
    for f0 in range(nf):
        seg = x[f0 * hop : f0 * hop + frame] * window
        spec = dft @ seg
        power = spec.real**2 + spec.imag**2
        mels = fb @ power
        logs = np.array([math.log(max(e, 1e-10)) for e in mels])
        coeffs[f0] = dct @ logs
    coeffs = coeffs[:, 1:]

    deltas = np.zeros_like(coeffs)
    for t in range(nf):
        nxt = coeffs[min(t + 1, nf - 1)]
        prv = coeffs[max(t - 1, 0)]
        deltas[t] = (nxt - prv) / 2.0

    out = []
    for block in (coeffs, deltas):
        for c in range(12):
            col = block[:, c]
            mu = float(np.mean(col))
            sd = float(np.sqrt(np.mean((col - mu) ** 2)))
            out += [mu, sd, float(np.min(col)), float(np.max(col))]
    return np.array(out)


def pca_reference(data: np.ndarray, n_components: int):
    """PCA via dense eigendecomposition of the covariance matrix."""
    data = np.asarray(data, dtype=np.float64)
    mean = data.mean(axis=0)
    centered = data - mean
    cov = (centered.T @ centered) / data.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:n_components]
    comps = evecs[:, order].T
    return mean, comps, evals[order]


def diversity_reference(vectors: np.ndarray) -> float:
    """Mean pairwise cosine distance, plain double loop.

    Zero vectors are excluded before pairing; fewer than two usable
    vectors gives 0.
    """
    rows = [v for v in vectors if math.sqrt(float(v @ v)) > 0.0]
    n = len(rows)
    if n < 2:
        return 0.0
    total = 0.0
    count = 0
    for i in range(n):
        for j in range(i + 1, n):
            a, b = rows[i], rows[j]
            na = math.sqrt(float(a @ a))
            nb = math.sqrt(float(b @ b))
            total += 1.0 - float(a @ b) / (na * nb)
            count += 1
    return total / count


def compressibility_reference(samples: np.ndarray) -> float:
    """1 - compressed/original on polarity-canonicalized 16-bit PCM.

    Canonical polarity: the first nonzero sample is positive. This
    makes the score exactly invariant under sign flips.
    """
    x = np.asarray(samples, dtype=np.float64)
    for v in x:
        if v != 0.0:
            if v < 0.0:
                x = -x
            break
    pcm = np.clip(np.rint(x * 32767.0), -32768, 32767).astype("<i2").tobytes()
    if not pcm:
        return 0.0
    ratio = len(zlib.compress(pcm, 6)) / len(pcm)
    return max(0.0, 1.0 - ratio)
