"""Behaviour descriptors: feature-space projections onto a 2D grid.

Three projector families share one interface: a manual pair of spectral
features, top-2 PCA over the 96-dim vectors, and a small autoencoder
whose 2-unit bottleneck is the behaviour space. Each carries per-axis
min/max calibration mapping raw projections into [0,1]; cells are the
floor-discretized coordinates.

Dynamic regimes refit their projector while a run is in flight; the
schedule spaces events at cumulative generations f·k(k+1)/2 (50, 150,
300, 500, 750, ... for the default factor 50).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from qdsound.features import SPECTRAL_NAMES

GRID_SIZE = 100


@dataclass
class BehaviourCoord:
    x: float
    y: float
    cell: tuple
    clamped: bool = False


def coords_to_cell(x: float, y: float, grid_size: int = GRID_SIZE) -> tuple:
    row = min(int(x * grid_size), grid_size - 1)
    col = min(int(y * grid_size), grid_size - 1)
    return (row, col)


class DegenerateTrainingSet(ValueError):
    pass


def _spectral_values(v) -> np.ndarray:
    if hasattr(v, "as_array"):
        return v.as_array()
    return np.asarray(v, dtype=np.float64)


class _Calibrated:
    """Shared calibration + discretization logic."""

    lo: np.ndarray
    hi: np.ndarray
    generation: int

    def _raw(self, v) -> np.ndarray:
        raise NotImplementedError

    def calibrate(self, training, generation: int = 0) -> None:
        raws = np.asarray([self._raw(v) for v in training])
        self.lo = raws.min(axis=0)
        self.hi = raws.max(axis=0)
        self.generation = generation
        if not np.all(self.hi > self.lo):
            raise DegenerateTrainingSet(
                "degenerate training set: an axis has zero projected range"
            )

    def project(self, v, grid_size: int = GRID_SIZE) -> BehaviourCoord:
        raw = self._raw(v)
        unit = (raw - self.lo) / (self.hi - self.lo)
        clamped = bool(np.any(unit < 0.0) or np.any(unit > 1.0))
        unit = np.clip(unit, 0.0, 1.0)
        x, y = float(unit[0]), float(unit[1])
        return BehaviourCoord(x, y, coords_to_cell(x, y, grid_size), clamped)


class ManualProjector(_Calibrated):
    """Reads two named spectral features, min-max scaled over a corpus."""

    kind = "manual"

    def __init__(self, feature_x: str = "slope", feature_y: str = "rolloff"):
        for name in (feature_x, feature_y):
            if name not in SPECTRAL_NAMES:
                raise ValueError(f"unknown spectral feature {name!r}")
        self.feature_x = feature_x
        self.feature_y = feature_y
        self._ix = SPECTRAL_NAMES.index(feature_x)
        self._iy = SPECTRAL_NAMES.index(feature_y)
        self.generation = 0

    def _raw(self, v) -> np.ndarray:
        vals = _spectral_values(v)
        return np.array([vals[self._ix], vals[self._iy]])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "feature_x": self.feature_x,
            "feature_y": self.feature_y,
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
            "generation": self.generation,
        }


class PcaProjector(_Calibrated):
    kind = "pca"

    def __init__(self, mean: np.ndarray, components: np.ndarray, explained: np.ndarray):
        self.mean = mean
        self.components = components  # (2, dim)
        self.explained_variance = explained

    def _raw(self, v) -> np.ndarray:
        return self.components @ (np.asarray(v, dtype=np.float64) - self.mean)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "explained_variance": self.explained_variance.tolist(),
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
            "generation": self.generation,
        }


def fit_pca(training, generation: int = 0) -> PcaProjector:
    """Top-2 principal components via SVD of the centered data.

    Components are sign-fixed so each one's largest-magnitude loading
    is positive, making the fit reproducible across SVD backends.
    """
    data = np.asarray(training, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 3:
        raise DegenerateTrainingSet("need at least 3 training vectors")
    mean = data.mean(axis=0)
    centered = data - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    explained = (svals**2) / data.shape[0]
    if explained.shape[0] < 2 or explained[1] <= 1e-12 * max(1.0, explained[0]):
        raise DegenerateTrainingSet(
            "degenerate training set: feature rank below 2"
        )
    components = vt[:2].copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0.0:
            row *= -1.0
    proj = PcaProjector(mean, components, explained[:2])
    proj.calibrate(data, generation)
    return proj


# ---------------------------------------------------------------------------
# autoencoder

_AE_LAYERS = ((96, 64), (64, 32), (32, 2), (2, 32), (32, 64), (64, 96))
_AE_LINEAR = (2, 5)  # bottleneck and reconstruction layers skip tanh

AE_EPOCHS_INITIAL = 200
AE_EPOCHS_FINETUNE = 50
AE_LEARNING_RATE = 1e-3
AE_BATCH = 32


def _ae_init(rng: np.random.Generator):
    params = []
    for fan_in, fan_out in _AE_LAYERS:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(
            [rng.uniform(-limit, limit, (fan_in, fan_out)), np.zeros(fan_out)]
        )
    return params


def _ae_forward(params, x: np.ndarray):
    acts = [x]
    for i, (w, b) in enumerate(params):
        z = acts[-1] @ w + b
        acts.append(z if i in _AE_LINEAR else np.tanh(z))
    return acts


def ae_loss(params, x: np.ndarray) -> float:
    recon = _ae_forward(params, x)[-1]
    err = recon - x
    return float(np.mean(err * err))


def ae_gradients(params, x: np.ndarray):
    """Backprop gradients of the mean-squared reconstruction loss."""
    acts = _ae_forward(params, x)
    err = acts[-1] - x
    loss = float(np.mean(err * err))
    delta = (2.0 / err.size) * err
    grads = [None] * len(params)
    for i in reversed(range(len(params))):
        out = acts[i + 1]
        if i not in _AE_LINEAR:
            delta = delta * (1.0 - out * out)
        w, _ = params[i]
        grads[i] = [acts[i].T @ delta, delta.sum(axis=0)]
        delta = delta @ w.T
    return loss, grads


class _Adam:
    def __init__(self, params, lr: float):
        self.lr = lr
        self.b1, self.b2, self.eps = 0.9, 0.999, 1e-8
        self.t = 0
        self.m = [[np.zeros_like(w), np.zeros_like(b)] for w, b in params]
        self.v = [[np.zeros_like(w), np.zeros_like(b)] for w, b in params]

    def step(self, params, grads) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for layer, grad in enumerate(grads):
            for slot in range(2):
                g = grad[slot]
                m = self.m[layer][slot]
                v = self.v[layer][slot]
                m *= self.b1
                m += (1.0 - self.b1) * g
                v *= self.b2
                v += (1.0 - self.b2) * (g * g)
                params[layer][slot] -= (
                    self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                )


class AutoencoderProjector(_Calibrated):
    kind = "autoencoder"

    def __init__(self, params):
        self.params = params

    def _raw(self, v) -> np.ndarray:
        x = np.asarray(v, dtype=np.float64)[None, :]
        return _ae_forward(self.params, x)[3][0]  # bottleneck activations

    def copy_params(self):
        return [[w.copy(), b.copy()] for w, b in self.params]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": [[w.tolist(), b.tolist()] for w, b in self.params],
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
            "generation": self.generation,
        }


def fit_autoencoder(
    training,
    prior: Optional[AutoencoderProjector] = None,
    epochs: int = None,
    lr: float = AE_LEARNING_RATE,
    seed: int = 0,
    generation: int = 0,
) -> AutoencoderProjector:
    """Train (or fine-tune, when ``prior`` is given) the 96-2-96 model.

    Keeps the parameters from the best epoch seen, so the result never
    reconstructs worse than its starting point.
    """
    data = np.asarray(training, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 8:
        raise DegenerateTrainingSet("need at least 8 training vectors")
    if epochs is None:
        epochs = AE_EPOCHS_FINETUNE if prior is not None else AE_EPOCHS_INITIAL
    rng = np.random.default_rng(seed)
    if prior is not None:
        params = prior.copy_params()
    else:
        params = _ae_init(rng)

    opt = _Adam(params, lr)
    best_loss = ae_loss(params, data)
    best = [[w.copy(), b.copy()] for w, b in params]
    n = data.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, AE_BATCH):
            batch = data[order[start : start + AE_BATCH]]
            loss, grads = ae_gradients(params, batch)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"autoencoder training diverged at epoch {epoch} (lr={lr})"
                )
            opt.step(params, grads)
        epoch_loss = ae_loss(params, data)
        if not np.isfinite(epoch_loss):
            raise RuntimeError(
                f"autoencoder training diverged at epoch {epoch} (lr={lr})"
            )
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best = [[w.copy(), b.copy()] for w, b in params]

    proj = AutoencoderProjector(best)
    proj.calibrate(data, generation)
    return proj


# ---------------------------------------------------------------------------
# persistence and schedule


def projector_from_dict(doc: dict):
    kind = doc["kind"]
    if kind == "manual":
        proj = ManualProjector(doc["feature_x"], doc["feature_y"])
    elif kind == "pca":
        proj = PcaProjector(
            np.asarray(doc["mean"]),
            np.asarray(doc["components"]),
            np.asarray(doc["explained_variance"]),
        )
    elif kind == "autoencoder":
        proj = AutoencoderProjector(
            [[np.asarray(w), np.asarray(b)] for w, b in doc["params"]]
        )
    else:
        raise ValueError(f"unknown projector kind {kind!r}")
    proj.lo = np.asarray(doc["lo"], dtype=np.float64)
    proj.hi = np.asarray(doc["hi"], dtype=np.float64)
    proj.generation = int(doc["generation"])
    return proj


@dataclass
class RetrainSchedule:
    """Cumulative retrain generations 50, 150, 300, ... (f·k(k+1)/2)."""

    increment: int = 50
    n: int = 1

    @property
    def next_generation(self) -> int:
        return self.increment * self.n * (self.n + 1) // 2

    def advance(self) -> None:
        self.n += 1

    def due(self, generation: int) -> bool:
        return generation == self.next_generation


def next_retrain_generation(sched: RetrainSchedule) -> int:
    return sched.next_generation
