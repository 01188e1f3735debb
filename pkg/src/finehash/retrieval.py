"""Bit-packed Hamming retrieval with optional feature re-ranking.

Codes live in {-1, +1}^bits.  For search each code is packed into
ceil(bits / 64) little-endian words, bit b set iff entry b is +1, so a
whole-database scan is one XOR plus popcount pass per query.  Hamming
distance relates to the inner product by u . v = bits - 2 * d_H.

Ranking is deterministic: ties are broken by database id, both in the
coarse Hamming pass and in the Euclidean re-ranking of the head.
"""

from __future__ import annotations

import csv
import logging
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from statistics import median

import numpy as np

from .errors import ContractError, DimensionError, DomainError, FileFormatError, IngestionError

logger = logging.getLogger(__name__)

CODE_MAGIC = b"FHC1"
FEATURE_MAGIC = b"FHF1"
LABEL_HEADER = ("id", "label")


def _words_per_code(bits: int) -> int:
    return -(-bits // 64)


@dataclass
class PackedCodes:
    """Database codes packed into [n, ceil(bits / 64)] uint64 words."""

    words: np.ndarray
    bits: int

    def __post_init__(self):
        self.words = np.ascontiguousarray(self.words, dtype=np.uint64)
        if self.bits < 1:
            raise ContractError(f"PackedCodes: bits must be >= 1, got {self.bits}")
        if self.words.ndim != 2 or self.words.shape[1] != _words_per_code(self.bits):
            raise DimensionError(
                f"PackedCodes: words shape {self.words.shape}, expected "
                f"[n, {_words_per_code(self.bits)}] for {self.bits} bits"
            )
        used = self.bits - 64 * (self.words.shape[1] - 1)
        if used < 64:
            mask = np.uint64(~((1 << used) - 1) & 0xFFFFFFFFFFFFFFFF)
            if np.any(self.words[:, -1] & mask):
                raise ContractError("PackedCodes: bits beyond the code length must be zero")

    def __len__(self) -> int:
        return self.words.shape[0]


def pack_codes(codes: np.ndarray) -> PackedCodes:
    """Pack a [n, bits] +/-1 matrix, least significant bit first."""
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim != 2 or codes.shape[1] < 1:
        raise DimensionError(f"pack_codes: codes shape {codes.shape}, expected [n, bits]")
    if not np.all(np.abs(codes) == 1.0):
        raise DomainError("pack_codes: entries must be +/-1")
    count, bits = codes.shape
    packed = np.packbits(codes > 0, axis=1, bitorder="little")
    pad = -packed.shape[1] % 8
    if pad:
        packed = np.concatenate([packed, np.zeros((count, pad), dtype=np.uint8)], axis=1)
    words = np.ascontiguousarray(packed).view("<u8")
    return PackedCodes(words=words, bits=bits)


def unpack_codes(packed: PackedCodes) -> np.ndarray:
    """Inverse of pack_codes, back to a +/-1 float64 matrix."""
    count = len(packed)
    raw = packed.words.astype("<u8").view(np.uint8).reshape(count, -1)
    bits01 = np.unpackbits(raw, axis=1, bitorder="little")[:, : packed.bits]
    return np.where(bits01 > 0, 1.0, -1.0)


def hamming_distances(packed: PackedCodes, query_words: np.ndarray) -> np.ndarray:
    """Hamming distance from one packed query to every database row."""
    query_words = np.asarray(query_words, dtype=np.uint64)
    if query_words.shape != (packed.words.shape[1],):
        raise DimensionError(
            f"hamming_distances: query words shape {query_words.shape}, expected "
            f"({packed.words.shape[1]},)"
        )
    return np.bitwise_count(packed.words ^ query_words[None, :]).sum(axis=1, dtype=np.int64)


def coarse_rank(packed: PackedCodes, query_code: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Full Hamming ranking of the database for one +/-1 query code.

    Returns (order, distances); order sorts by distance with ties broken
    by database id.
    """
    query_code = np.asarray(query_code, dtype=np.float64)
    if query_code.shape != (packed.bits,):
        raise DimensionError(
            f"coarse_rank: query shape {query_code.shape}, expected ({packed.bits},)"
        )
    query_words = pack_codes(query_code[None, :]).words[0]
    dists = hamming_distances(packed, query_words)
    order = np.lexsort((np.arange(len(packed)), dists))
    return order, dists


def rerank(order: np.ndarray, features: np.ndarray, query_feature: np.ndarray,
           topn: int) -> np.ndarray:
    """Re-sort the first topn of order by Euclidean feature distance.

    The tail keeps its coarse order; ties in the head fall back to id.
    """
    if topn < 0:
        raise ContractError(f"rerank: topn must be >= 0, got {topn}")
    order = np.asarray(order)
    features = np.asarray(features)
    query_feature = np.asarray(query_feature)
    if features.ndim != 2 or query_feature.shape != (features.shape[1],):
        raise DimensionError(
            f"rerank: features {features.shape} vs query {query_feature.shape}"
        )
    head = order[:topn]
    diffs = features[head].astype(np.float64) - query_feature.astype(np.float64)
    sq_dists = np.sum(diffs * diffs, axis=1)
    return np.concatenate([head[np.lexsort((head, sq_dists))], order[topn:]])


def precision_at_k(ranked_labels: np.ndarray, query_label, k: int) -> float:
    """Fraction of the first k results sharing the query label."""
    ranked_labels = np.asarray(ranked_labels)
    if not 1 <= k <= len(ranked_labels):
        raise ContractError(f"precision_at_k: k={k} outside [1, {len(ranked_labels)}]")
    return float(np.mean(ranked_labels[:k] == query_label))


def average_precision(ranked_labels: np.ndarray, query_label) -> float | None:
    """Mean precision at each relevant rank; None when nothing is relevant."""
    relevant = np.asarray(ranked_labels) == query_label
    hits = np.flatnonzero(relevant)
    if len(hits) == 0:
        return None
    precisions = np.arange(1, len(hits) + 1) / (hits + 1)
    return float(np.mean(precisions))


def mean_average_precision(ranked_label_rows, query_labels) -> float:
    """Mean AP over queries; zero-relevant queries are skipped with a warning."""
    values = []
    for ranked, label in zip(ranked_label_rows, query_labels, strict=True):
        ap = average_precision(ranked, label)
        if ap is None:
            logger.warning("query with label %r has no relevant database items; skipped", label)
        else:
            values.append(ap)
    if not values:
        raise ContractError("mean_average_precision: no query has relevant items")
    return float(np.mean(values))


def code_memory_bytes(count: int, bits: int) -> float:
    """Reported code footprint: count * bits / 8 bytes."""
    if count < 0 or bits < 1:
        raise ContractError(f"code_memory_bytes: bad count={count} bits={bits}")
    return count * bits / 8


def code_ram_bytes(count: int, bits: int) -> int:
    """Actual packed layout: count * ceil(bits / 64) * 8 bytes."""
    if count < 0 or bits < 1:
        raise ContractError(f"code_ram_bytes: bad count={count} bits={bits}")
    return count * _words_per_code(bits) * 8


def feature_memory_bytes(count: int, dim: int) -> int:
    """float32 re-ranking features: count * dim * 4 bytes."""
    if count < 0 or dim < 0:
        raise ContractError(f"feature_memory_bytes: bad count={count} dim={dim}")
    return count * dim * 4


def format_bytes(size: float) -> str:
    """Decimal units with one fractional digit: 404000 -> '404.0KB'."""
    if size < 0:
        raise ContractError(f"format_bytes: size must be >= 0, got {size}")
    value = float(size)
    for unit in ("B", "KB", "MB", "GB"):
        if value < 1000.0 or unit == "GB":
            return f"{value:.1f}{unit}"
        value /= 1000.0
    raise AssertionError("unreachable")


def save_packed(path: str | Path, packed: PackedCodes) -> None:
    """FHC1 file: magic, u64 count, u64 bits, row-major code words."""
    with open(path, "wb") as fh:
        fh.write(CODE_MAGIC)
        fh.write(struct.pack("<QQ", len(packed), packed.bits))
        fh.write(packed.words.astype("<u8").tobytes(order="C"))


def load_packed(path: str | Path) -> PackedCodes:
    blob = Path(path).read_bytes()
    if blob[:4] != CODE_MAGIC:
        raise FileFormatError(f"{path}: bad code file magic {blob[:4]!r}")
    if len(blob) < 20:
        raise FileFormatError(f"{path}: truncated code file header")
    count, bits = struct.unpack("<QQ", blob[4:20])
    if bits < 1:
        raise FileFormatError(f"{path}: stored bits must be >= 1")
    words = _words_per_code(bits)
    expected = 20 + count * words * 8
    if len(blob) != expected:
        raise FileFormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob[20:], dtype="<u8").reshape(int(count), words)
    try:
        return PackedCodes(words=data.copy(), bits=int(bits))
    except ContractError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc


def save_features(path: str | Path, features: np.ndarray) -> None:
    """FHF1 file: magic, u64 count, u64 dim, float32 little-endian values."""
    features = np.asarray(features)
    if features.ndim != 2:
        raise DimensionError(f"save_features: shape {features.shape}, expected [n, dim]")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<QQ", features.shape[0], features.shape[1]))
        fh.write(features.astype("<f4").tobytes(order="C"))


def load_features(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != FEATURE_MAGIC:
        raise FileFormatError(f"{path}: bad feature file magic {blob[:4]!r}")
    if len(blob) < 20:
        raise FileFormatError(f"{path}: truncated feature file header")
    count, dim = struct.unpack("<QQ", blob[4:20])
    expected = 20 + count * dim * 4
    if len(blob) != expected:
        raise FileFormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    return np.frombuffer(blob[20:], dtype="<f4").reshape(int(count), int(dim)).copy()


def save_labels(path: str | Path, labels: np.ndarray) -> None:
    """CSV with an id,label header and one row per database item."""
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DimensionError(f"save_labels: shape {labels.shape}, expected [n]")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LABEL_HEADER)
        for item_id, label in enumerate(labels):
            writer.writerow([item_id, int(label)])


def load_labels(path: str | Path) -> np.ndarray:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise IngestionError(f"{path}: cannot read labels: {exc}") from exc
    rows = list(csv.reader(lines))
    if not rows or tuple(cell.strip() for cell in rows[0]) != LABEL_HEADER:
        raise IngestionError(f"{path}: line 1: expected id,label header")
    labels = []
    for line_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise IngestionError(f"{path}: line {line_no}: expected id,label")
        try:
            item_id, label = int(row[0]), int(row[1])
        except ValueError:
            raise IngestionError(f"{path}: line {line_no}: non-integer field") from None
        if item_id != len(labels):
            raise IngestionError(
                f"{path}: line {line_no}: ids must run 0..n-1 in order, got {item_id}"
            )
        labels.append(label)
    return np.array(labels, dtype=np.int64)


class RetrievalIndex:
    """Packed codes plus optional labels and re-ranking features."""

    def __init__(self, packed: PackedCodes, labels: np.ndarray | None = None,
                 features: np.ndarray | None = None):
        self.packed = packed
        self.labels = None if labels is None else np.asarray(labels)
        self.features = None if features is None else np.asarray(features)
        if self.labels is not None and len(self.labels) != len(packed):
            raise DimensionError(
                f"RetrievalIndex: {len(self.labels)} labels for {len(packed)} codes"
            )
        if self.features is not None and self.features.shape[0] != len(packed):
            raise DimensionError(
                f"RetrievalIndex: {self.features.shape[0]} feature rows for {len(packed)} codes"
            )

    def __len__(self) -> int:
        return len(self.packed)

    def search(self, query_code: np.ndarray, query_feature: np.ndarray | None = None,
               topn: int | None = None) -> np.ndarray:
        """Coarse Hamming ranking, then feature re-ranking of the head."""
        order, _ = coarse_rank(self.packed, query_code)
        if topn is None:
            return order
        if self.features is None or query_feature is None:
            raise ContractError("search: re-ranking requested without features")
        return rerank(order, self.features, query_feature, topn)


def evaluate_queries(index: RetrievalIndex, query_codes: np.ndarray,
                     query_labels: np.ndarray, query_features: np.ndarray | None = None,
                     topn: int | None = None, ks: tuple[int, ...] = (1, 5, 10)) -> dict:
    """Mean AP and precision@k over a query set against one index."""
    if index.labels is None:
        raise ContractError("evaluate_queries: index has no labels")
    query_codes = np.asarray(query_codes)
    query_labels = np.asarray(query_labels)
    if len(query_codes) != len(query_labels) or len(query_codes) == 0:
        raise ContractError("evaluate_queries: empty or mismatched query set")
    for k in ks:
        if not 1 <= k <= len(index):
            raise ContractError(f"evaluate_queries: k={k} outside [1, {len(index)}]")
    ranked_rows = []
    for i in range(len(query_codes)):
        feature = None if query_features is None else query_features[i]
        order = index.search(query_codes[i], feature, topn)
        ranked_rows.append(index.labels[order])
    result = {
        "map": mean_average_precision(ranked_rows, query_labels),
        "precision_at": {
            k: float(np.mean([precision_at_k(row, label, k)
                              for row, label in zip(ranked_rows, query_labels)]))
            for k in ks
        },
        "queries": len(query_codes),
    }
    return result


def bench_scan(codes: np.ndarray, query_codes: np.ndarray, reps: int = 5) -> dict:
    """Median wall time of the distance pass, packed versus float32.

    Both modes loop over queries and compute every database distance; the
    float32 baseline stores each code as a float vector and runs a full
    Euclidean scan.  Sorting is excluded so the figure isolates the scan.
    """
    if reps < 1:
        raise ContractError(f"bench_scan: reps must be >= 1, got {reps}")
    codes = np.asarray(codes, dtype=np.float64)
    query_codes = np.asarray(query_codes, dtype=np.float64)
    packed = pack_codes(codes)
    query_words = pack_codes(query_codes).words
    floats = codes.astype(np.float32)
    query_floats = query_codes.astype(np.float32)

    sink = 0.0

    def run_packed() -> float:
        nonlocal sink
        started = time.perf_counter()
        for row in query_words:
            dists = np.bitwise_count(packed.words ^ row[None, :]).sum(axis=1)
            sink += float(dists[0])
        return time.perf_counter() - started

    def run_float() -> float:
        nonlocal sink
        started = time.perf_counter()
        for row in query_floats:
            diffs = floats - row[None, :]
            dists = np.sum(diffs * diffs, axis=1)
            sink += float(dists[0])
        return time.perf_counter() - started

    packed_times = [run_packed() for _ in range(reps)]
    float_times = [run_float() for _ in range(reps)]
    packed_seconds = median(packed_times)
    float_seconds = median(float_times)
    return {
        "database": len(packed),
        "queries": query_codes.shape[0],
        "bits": packed.bits,
        "reps": reps,
        "packed_seconds": packed_seconds,
        "float_seconds": float_seconds,
        "packed_spread": max(packed_times) - min(packed_times),
        "float_spread": max(float_times) - min(float_times),
        "speedup": float_seconds / packed_seconds,
    }
