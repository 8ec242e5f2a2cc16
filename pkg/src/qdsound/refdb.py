"""Reference corpus: ingestion, normalization, and k-NN queries.

A ReferenceStore holds one 96-dim feature vector per reference sound,
the z-score stats fitted over all of them, and a cosine-distance k-NN
index over the normalized vectors. Small stores use an exact scan;
larger ones get an HNSW graph built in insertion order from a fixed
seed, so stores are bit-reproducible.
"""

from __future__ import annotations

import json
import logging
import struct
import wave
from dataclasses import dataclass, field
from heapq import heappop, heappush
from math import log
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.signal import resample_poly

from qdsound import features as F

logger = logging.getLogger(__name__)

# Entry count at or below which an exact scan replaces the graph index.
# A scan over a few thousand 96-dim rows is a single matrix-vector
# product and is both faster to build and trivially exact.
EXACT_SCAN_MAX = 2048

HNSW_M = 16
HNSW_EF_CONSTRUCTION = 200
HNSW_EF_SEARCH = 64
INDEX_SEED = 1347


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.sqrt((mat * mat).sum(axis=1))
    return mat / np.where(norms == 0.0, 1.0, norms)[:, None]


def _unit_query(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.sqrt(v @ v))
    if norm == 0.0:
        raise ValueError("cannot query with a zero vector under cosine distance")
    return v / norm


def _check_k(k: int, count: int) -> None:
    if not 1 <= k <= count:
        raise ValueError(f"k must be in [1, {count}], got {k}")


class ExactIndex:
    """Brute-force cosine k-NN; the reference answer by construction."""

    kind = "exact"

    def __init__(self, vectors: np.ndarray):
        self._unit = _unit_rows(np.asarray(vectors, dtype=np.float64))

    def __len__(self) -> int:
        return self._unit.shape[0]

    def query(self, v: np.ndarray, k: int):
        _check_k(k, len(self))
        dists = 1.0 - self._unit @ _unit_query(v)
        order = np.argsort(dists, kind="stable")[:k]
        return [(int(i), float(dists[i])) for i in order]


class HnswIndex:
    """Hierarchical navigable small-world graph under cosine distance.

    Insertion order and the level RNG are fixed, distance ties break on
    id, and neighbor lists are built deterministically, so the same
    vectors always produce the same graph.
    """

    kind = "hnsw"

    def __init__(
        self,
        dim: int,
        m: int = HNSW_M,
        ef_construction: int = HNSW_EF_CONSTRUCTION,
        ef_search: int = HNSW_EF_SEARCH,
        seed: int = INDEX_SEED,
    ):
        self.dim = dim
        self.m = m
        self.m0 = 2 * m
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self.seed = seed
        self._ml = 1.0 / log(m)
        self._rng = np.random.default_rng(seed)
        self._mat = np.empty((0, dim))
        self._count = 0
        self._levels: list = []
        self._graph: list = []  # node -> level -> list of neighbor ids
        self._entry = -1
        self._max_level = -1

    def __len__(self) -> int:
        return self._count

    def _grow(self, need: int) -> None:
        cap = self._mat.shape[0]
        if need > cap:
            new = np.empty((max(need, 2 * cap, 64), self.dim))
            new[: self._count] = self._mat[: self._count]
            self._mat = new

    def _dist_many(self, q: np.ndarray, ids) -> np.ndarray:
        return 1.0 - self._mat[ids] @ q

    def _search_layer(self, q: np.ndarray, entry_points, ef: int, layer: int):
        """Best-first beam search on one layer; returns sorted (dist, id)."""
        dists = {}
        for e in entry_points:
            if e not in dists:
                dists[e] = float(1.0 - self._mat[e] @ q)
        cand_heap = sorted((d, e) for e, d in dists.items())
        results = [(-d, e) for d, e in cand_heap[:ef]]
        results.sort()
        while cand_heap:
            d, c = heappop(cand_heap)
            if results and d > -results[0][0] and len(results) >= ef:
                break
            fresh = [nb for nb in self._graph[c][layer] if nb not in dists]
            if not fresh:
                continue
            nd = self._dist_many(q, fresh)
            for nb, dn in zip(fresh, nd):
                dn = float(dn)
                dists[nb] = dn
                if len(results) < ef or dn < -results[0][0]:
                    heappush(cand_heap, (dn, nb))
                    heappush(results, (-dn, nb))
                    if len(results) > ef:
                        heappop(results)
        return sorted((-nd, e) for nd, e in results)

    def _select_neighbors(self, cands, m: int):
        """Diversity-preserving selection (closer to the query than to
        any already chosen neighbor), topped up with pruned candidates."""
        chosen = []
        discarded = []
        for d, e in cands:
            if len(chosen) >= m:
                break
            vec = self._mat[e]
            keep = True
            for _, c in chosen:
                if float(1.0 - self._mat[c] @ vec) < d:
                    keep = False
                    break
            if keep:
                chosen.append((d, e))
            else:
                discarded.append((d, e))
        for d, e in discarded:
            if len(chosen) >= m:
                break
            chosen.append((d, e))
        return chosen

    def _shrink(self, node: int, layer: int) -> None:
        cap = self.m0 if layer == 0 else self.m
        nbs = self._graph[node][layer]
        if len(nbs) <= cap:
            return
        q = self._mat[node]
        cands = sorted((float(1.0 - self._mat[nb] @ q), nb) for nb in nbs)
        self._graph[node][layer] = [e for _, e in self._select_neighbors(cands, cap)]

    def add(self, vec: np.ndarray) -> int:
        vec = np.asarray(vec, dtype=np.float64)
        norm = float(np.sqrt(vec @ vec))
        unit = vec / norm if norm > 0.0 else vec
        node = self._count
        self._grow(node + 1)
        self._mat[node] = unit
        self._count += 1
        level = int(-log(1.0 - float(self._rng.random())) * self._ml)
        self._levels.append(level)
        self._graph.append([[] for _ in range(level + 1)])

        if self._entry < 0:
            self._entry = node
            self._max_level = level
            return node

        cur = [self._entry]
        for layer in range(self._max_level, level, -1):
            cur = [self._search_layer(unit, cur, 1, layer)[0][1]]
        for layer in range(min(level, self._max_level), -1, -1):
            found = self._search_layer(unit, cur, self.ef_construction, layer)
            cap = self.m0 if layer == 0 else self.m
            selected = self._select_neighbors(found, self.m)
            self._graph[node][layer] = [e for _, e in selected]
            for d, e in selected:
                self._graph[e][layer].append(node)
                self._shrink(e, layer)
            cur = [e for _, e in found]
        if level > self._max_level:
            self._entry = node
            self._max_level = level
        return node

    def query(self, v: np.ndarray, k: int, ef: int = None):
        _check_k(k, self._count)
        q = _unit_query(v)
        ef = max(self.ef_search if ef is None else ef, k)
        cur = [self._entry]
        for layer in range(self._max_level, 0, -1):
            cur = [self._search_layer(q, cur, 1, layer)[0][1]]
        found = self._search_layer(q, cur, ef, 0)
        return [(int(e), float(d)) for d, e in found[:k]]

    # -- persistence --------------------------------------------------

    _MAGIC = b"QDHN"

    def to_bytes(self) -> bytes:
        out = [self._MAGIC]
        out.append(
            struct.pack(
                "<6i",
                self._count,
                self.m,
                self.ef_construction,
                self.ef_search,
                self._entry,
                self.seed,
            )
        )
        out.append(np.asarray(self._levels, dtype=np.int32).tobytes())
        for node in range(self._count):
            for layer in range(self._levels[node] + 1):
                nbs = self._graph[node][layer]
                out.append(struct.pack("<i", len(nbs)))
                out.append(np.asarray(nbs, dtype=np.int32).tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes, vectors: np.ndarray) -> "HnswIndex":
        if data[:4] != cls._MAGIC:
            raise ValueError("not an hnsw index blob")
        count, m, efc, efs, entry, seed = struct.unpack_from("<6i", data, 4)
        idx = cls(vectors.shape[1], m, efc, efs, seed)
        off = 4 + 24
        levels = np.frombuffer(data, dtype=np.int32, count=count, offset=off)
        off += 4 * count
        idx._levels = [int(v) for v in levels]
        idx._count = count
        # normalize row by row with the same arithmetic as add(), so a
        # reloaded index answers queries bit-for-bit like the original
        mat = np.asarray(vectors, dtype=np.float64)
        idx._mat = np.empty_like(mat)
        for i, row in enumerate(mat):
            norm = float(np.sqrt(row @ row))
            idx._mat[i] = row / norm if norm > 0.0 else row
        idx._entry = entry
        idx._max_level = max(idx._levels) if count else -1
        for node in range(count):
            layers = []
            for _ in range(idx._levels[node] + 1):
                (n_nb,) = struct.unpack_from("<i", data, off)
                off += 4
                nbs = np.frombuffer(data, dtype=np.int32, count=n_nb, offset=off)
                off += 4 * n_nb
                layers.append([int(v) for v in nbs])
            idx._graph.append(layers)
        return idx


def build_index(vectors: np.ndarray, force_hnsw: bool = False):
    if len(vectors) <= EXACT_SCAN_MAX and not force_hnsw:
        return ExactIndex(vectors)
    index = HnswIndex(vectors.shape[1])
    for row in vectors:
        index.add(row)
    return index


# ---------------------------------------------------------------------------
# WAV decoding


def load_wav(path) -> np.ndarray:
    """Decode a WAV file to mono float64 at 16 kHz."""
    with wave.open(str(path), "rb") as fh:
        rate = fh.getframerate()
        width = fh.getsampwidth()
        channels = fh.getnchannels()
        raw = fh.readframes(fh.getnframes())
    if width == 2:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 1:
        x = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif width == 4:
        x = np.frombuffer(raw, dtype="<i4").astype(np.float64) / 2147483648.0
    else:
        raise ValueError(f"unsupported sample width {width}")
    if channels > 1:
        x = x.reshape(-1, channels).mean(axis=1)
    if rate != F.SAMPLE_RATE:
        g = np.gcd(int(rate), F.SAMPLE_RATE)
        x = resample_poly(x, F.SAMPLE_RATE // g, int(rate) // g)
    return x


# ---------------------------------------------------------------------------
# the store


@dataclass
class IngestReport:
    ingested: int = 0
    skipped: list = field(default_factory=list)  # (path, reason)


@dataclass
class ReferenceStore:
    ids: list
    sources: list
    vectors: np.ndarray  # raw 96-dim features, one row per entry
    norm: F.NormStats
    index: object
    spectral: Optional[np.ndarray] = None  # (count, 10) low-level features

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def normalized(self) -> np.ndarray:
        return F.apply_norm(self.vectors, self.norm)


def ingest(dir_path, force_hnsw: bool = False):
    """Extract features for every decodable WAV under ``dir_path``.

    Returns (store, report). Files that fail to decode are skipped and
    listed in the report; an empty result is a hard error.
    """
    root = Path(dir_path)
    paths = sorted(root.glob("*.wav")) + sorted(root.glob("*.WAV"))
    report = IngestReport()
    ids = []
    sources = []
    rows = []
    spectral_rows = []
    seen = set()
    for path in paths:
        try:
            x = load_wav(path)
            vec, spec = F.extract_all(x)
        except Exception as exc:  # noqa: BLE001 - every decode failure is a skip
            logger.warning("skipping %s: %s", path, exc)
            report.skipped.append((str(path), str(exc)))
            continue
        sid = path.stem
        n_dup = 2
        while sid in seen:
            sid = f"{path.stem}~{n_dup}"
            n_dup += 1
        seen.add(sid)
        ids.append(sid)
        sources.append(str(path))
        rows.append(vec)
        spectral_rows.append(spec.as_array())
    if not rows:
        raise ValueError(f"no decodable wav files in {root}")
    report.ingested = len(rows)
    vectors = np.asarray(rows)
    norm = F.fit_norm(vectors)
    index = build_index(F.apply_norm(vectors, norm), force_hnsw=force_hnsw)
    store = ReferenceStore(
        ids, sources, vectors, norm, index, np.asarray(spectral_rows)
    )
    return store, report


def query_knn(store: ReferenceStore, v: np.ndarray, k: int):
    """k nearest reference entries to a normalized query vector."""
    if not 1 <= k <= len(store):
        raise ValueError(f"k must be in [1, {len(store)}], got {k}")
    hits = store.index.query(v, k)
    return [(store.ids[pos], dist) for pos, dist in hits]


# ---------------------------------------------------------------------------
# persistence: manifest JSON + feature binary + index binary


def save_store(store: ReferenceStore, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    F.write_features_bin(out / "features.bin", store.ids, store.vectors)
    if store.spectral is not None:
        F.write_features_bin(out / "spectral.bin", store.ids, store.spectral)
    if store.index.kind == "hnsw":
        (out / "index.bin").write_bytes(store.index.to_bytes())
    else:
        (out / "index.bin").write_bytes(b"QDEX")
    manifest = {
        "version": 1,
        "count": len(store),
        "dim": int(store.vectors.shape[1]),
        "index": store.index.kind,
        "sources": store.sources,
        "norm": store.norm.to_dict(),
        "spectral": store.spectral is not None,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True)
    )


def load_store(in_dir) -> ReferenceStore:
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    ids, vectors = F.read_features_bin(root / "features.bin")
    norm = F.NormStats.from_dict(manifest["norm"])
    normalized = F.apply_norm(vectors, norm)
    blob = (root / "index.bin").read_bytes()
    if manifest["index"] == "hnsw":
        index = HnswIndex.from_bytes(blob, normalized)
    else:
        index = ExactIndex(normalized)
    spectral = None
    if manifest.get("spectral"):
        spec_ids, spectral = F.read_features_bin(root / "spectral.bin")
        if spec_ids != ids:
            raise ValueError("spectral.bin ids do not match features.bin")
    return ReferenceStore(ids, manifest["sources"], vectors, norm, index, spectral)
