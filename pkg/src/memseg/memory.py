"""Confidence-driven memory base.

A bounded store of (mask_feature, positional_encoding, iou_confidence,
image_embedding) tuples with two retrieval policies and a confidence-gated
replacement rule:

* top-K retrieval ranks entries by cosine similarity of image embeddings
  plus the sigmoid-squashed confidence, descending, ties broken by lower
  insertion index;
* replacement into a full base evicts the entry whose mask feature is most
  similar to the incoming one, but only when the incoming confidence is
  strictly higher.

Confidences are stored raw (logit scale); the sigmoid squash is applied
only inside the retrieval score, and replacement compares raw values
(sigmoid is monotone, so either reading agrees).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .kernels import sigmoid

MAGIC = b"SMB2"
VERSION = 1


class MemoryFileError(ValueError):
    """Base class for memory-file persistence errors."""


class BadMagicError(MemoryFileError):
    pass


class VersionMismatchError(MemoryFileError):
    pass


class TruncatedFileError(MemoryFileError):
    pass


class ShapeInconsistencyError(MemoryFileError):
    pass


@dataclass
class MemoryEntry:
    """One stored tuple: mask feature, positional encoding, raw confidence
    (logit scale), image embedding, and an opaque provenance tag."""

    mask_feature: np.ndarray
    positional_encoding: np.ndarray
    y_hat: float
    image_embedding: np.ndarray
    source_tag: str = ""

    def __post_init__(self):
        self.y_hat = float(self.y_hat)
        if not np.isfinite(self.y_hat):
            raise ValueError(f"y_hat must be finite, got {self.y_hat}")


@dataclass
class RetrievalResult:
    """Selected entries with their indices and combined scores, ordered by
    non-increasing score."""

    indices: list[int]
    scores: list[float]
    entries: list[tuple[np.ndarray, np.ndarray]]


@dataclass
class ReplaceOutcome:
    """What an insert did: appended, replaced(index, old_confidence), or
    rejected.  s_max is the best mask-feature similarity when it was
    computed (full base), else None."""

    kind: str  # appended | replaced | rejected
    index: int | None = None
    old_confidence: float | None = None
    s_max: float | None = None


@dataclass
class MemoryBase:
    """Bounded ordered collection of MemoryEntry, capacity N, with one
    declared feature shape (C, H, W) that all entries must match."""

    capacity: int
    feature_shape: tuple[int, int, int]
    entries: list[MemoryEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class MemoryStats:
    count: int
    capacity: int
    min_y_hat: float | None
    max_y_hat: float | None
    mean_y_hat: float | None
    mean_pairwise_similarity: float | None


def new_base(capacity: int, feature_shape: tuple[int, int, int]) -> MemoryBase:
    """Create an empty base. Capacity 0 is legal: retrieval returns empty
    and every insert is rejected."""
    if capacity < 0:
        raise ValueError(f"capacity must be non-negative, got {capacity}")
    shape = tuple(int(s) for s in feature_shape)
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise ValueError(f"feature_shape must be three positive extents, got {shape}")
    return MemoryBase(capacity=int(capacity), feature_shape=shape, entries=[])


def _check_entry(base: MemoryBase, entry: MemoryEntry) -> None:
    for name, t in (
        ("mask_feature", entry.mask_feature),
        ("positional_encoding", entry.positional_encoding),
        ("image_embedding", entry.image_embedding),
    ):
        if tuple(t.shape) != base.feature_shape:
            raise ValueError(
                f"{name} shape {tuple(t.shape)} does not conform to base"
                f" feature_shape {base.feature_shape}"
            )


def _cosine_rows(mat: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Cosine of each row of mat against vec; rows or vec with norm < 1e-12
    score 0."""
    vn = np.linalg.norm(vec)
    norms = np.linalg.norm(mat, axis=1)
    if vn < 1e-12:
        return np.zeros(mat.shape[0])
    sims = np.zeros(mat.shape[0])
    ok = norms >= 1e-12
    sims[ok] = mat[ok] @ vec / (norms[ok] * vn)
    return np.clip(sims, -1.0, 1.0)


def _scores(base: MemoryBase, query: np.ndarray, use_confidence: bool) -> np.ndarray:
    emb = np.stack([e.image_embedding.ravel() for e in base.entries])
    sims = _cosine_rows(emb, query.ravel())
    if not use_confidence:
        return sims
    conf = sigmoid(np.array([e.y_hat for e in base.entries]))
    return sims + conf


def retrieve_topk(
    base: MemoryBase, embedding_new: np.ndarray, k: int, use_confidence: bool = True
) -> RetrievalResult:
    """Select the min(k, len) entries maximizing cos(E_i, E_new) + sigmoid(y_hat_i).

    Descending score order; exact ties resolved toward the lower insertion
    index. Never mutates the base.  ``use_confidence=False`` drops the
    squashed-confidence term, ranking by similarity alone (the ablation's
    plain memory-retrieval variant).
    """
    if k < 1:
        raise ValueError(f"k must be a positive integer, got {k}")
    embedding_new = np.asarray(embedding_new, dtype=np.float64)
    if tuple(embedding_new.shape) != base.feature_shape:
        raise ValueError(
            f"query shape {tuple(embedding_new.shape)} does not conform to"
            f" base feature_shape {base.feature_shape}"
        )
    if not base.entries:
        return RetrievalResult([], [], [])
    scores = _scores(base, embedding_new, use_confidence)
    # lexsort: primary key -scores ascending (= scores descending), ties by index
    order = np.lexsort((np.arange(len(scores)), -scores))[: min(k, len(scores))]
    idx = [int(i) for i in order]
    return RetrievalResult(
        indices=idx,
        scores=[float(scores[i]) for i in idx],
        entries=[
            (base.entries[i].mask_feature, base.entries[i].positional_encoding)
            for i in idx
        ],
    )


def retrieve_random(base: MemoryBase, k: int, rng_seed: int) -> RetrievalResult:
    """Uniform sample of min(k, len) entries without replacement,
    deterministic per seed.  Scores are reported for the sampled entries
    (and the result is ordered by them) but play no part in selection."""
    if k < 1:
        raise ValueError(f"k must be a positive integer, got {k}")
    if not base.entries:
        return RetrievalResult([], [], [])
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(len(base.entries), size=min(k, len(base.entries)), replace=False)
    # no query embedding is involved, so the similarity term is 0 and the
    # reported score is just the squashed confidence
    scored = sorted(
        ((float(sigmoid(np.float64(base.entries[i].y_hat))), int(i)) for i in chosen),
        key=lambda t: (-t[0], t[1]),
    )
    idx = [i for _, i in scored]
    return RetrievalResult(
        indices=idx,
        scores=[s for s, _ in scored],
        entries=[
            (base.entries[i].mask_feature, base.entries[i].positional_encoding)
            for i in idx
        ],
    )


def insert_or_replace(base: MemoryBase, new: MemoryEntry) -> ReplaceOutcome:
    """Append below capacity; otherwise replace the stored entry whose mask
    feature is most cosine-similar to the new one, but only if its
    confidence is strictly lower than the new entry's.  Ties in similarity
    go to the lowest insertion index."""
    _check_entry(base, new)
    if base.capacity == 0:
        return ReplaceOutcome(kind="rejected")
    if len(base.entries) < base.capacity:
        base.entries.append(new)
        return ReplaceOutcome(kind="appended", index=len(base.entries) - 1)
    feats = np.stack([e.mask_feature.ravel() for e in base.entries])
    sims = _cosine_rows(feats, new.mask_feature.ravel())
    i_star = int(np.argmax(sims))  # argmax takes the first (lowest-index) max
    s_max = float(sims[i_star])
    old = base.entries[i_star]
    if old.y_hat < new.y_hat:
        base.entries[i_star] = new
        return ReplaceOutcome(
            kind="replaced", index=i_star, old_confidence=old.y_hat, s_max=s_max
        )
    return ReplaceOutcome(kind="rejected", s_max=s_max)


def stats(base: MemoryBase) -> MemoryStats:
    """Count/capacity plus confidence moments and the mean pairwise cosine
    similarity of stored image embeddings (None where undefined)."""
    n = len(base.entries)
    if n == 0:
        return MemoryStats(0, base.capacity, None, None, None, None)
    ys = np.array([e.y_hat for e in base.entries])
    mean_sim = None
    if n >= 2:
        emb = np.stack([e.image_embedding.ravel() for e in base.entries])
        norms = np.linalg.norm(emb, axis=1)
        norms[norms < 1e-12] = 1.0  # zero rows contribute 0 similarity
        unit = emb / norms[:, None]
        gram = unit @ unit.T
        mean_sim = float((gram.sum() - np.trace(gram)) / (n * (n - 1)))
    return MemoryStats(
        count=n,
        capacity=base.capacity,
        min_y_hat=float(ys.min()),
        max_y_hat=float(ys.max()),
        mean_y_hat=float(ys.mean()),
        mean_pairwise_similarity=mean_sim,
    )


# ---------------------------------------------------------------------------
# persistence
#
# Little-endian layout:
#   magic "SMB2" | u32 version=1 | u32 capacity | u32 count | u32 C,H,W
#   per entry: f64 y_hat | u32 tag_len | tag utf-8
#              | F, PE, E as raw f64 arrays of C*H*W values each


def base_bytes(base: MemoryBase) -> bytes:
    """Serialized image of the base; also used for byte-level comparisons."""
    c, h, w = base.feature_shape
    parts = [
        MAGIC,
        struct.pack("<IIIIII", VERSION, base.capacity, len(base.entries), c, h, w),
    ]
    for e in base.entries:
        tag = e.source_tag.encode("utf-8")
        parts.append(struct.pack("<d", e.y_hat))
        parts.append(struct.pack("<I", len(tag)))
        parts.append(tag)
        for t in (e.mask_feature, e.positional_encoding, e.image_embedding):
            parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return b"".join(parts)


def save_base(base: MemoryBase, path) -> None:
    """Write the base in the binary memory-file format (bit-exact floats)."""
    with open(path, "wb") as fh:
        fh.write(base_bytes(base))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"truncated file: needed {n} bytes for {what}, had"
                f" {len(self.data) - self.pos}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def load_base(path) -> MemoryBase:
    """Read a memory file written by save_base; round-trips bit-exactly."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic: expected {MAGIC!r}, got {magic!r}")
    version, capacity, count, c, h, w = struct.unpack("<IIIIII", r.take(24, "header"))
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}, expected {VERSION}")
    if c < 1 or h < 1 or w < 1:
        raise ShapeInconsistencyError(f"non-positive feature shape ({c}, {h}, {w})")
    if count > capacity:
        raise ShapeInconsistencyError(f"count {count} exceeds capacity {capacity}")
    base = new_base(capacity, (c, h, w))
    n = c * h * w
    for i in range(count):
        (y_hat,) = struct.unpack("<d", r.take(8, f"entry {i} confidence"))
        (tag_len,) = struct.unpack("<I", r.take(4, f"entry {i} tag length"))
        tag = r.take(tag_len, f"entry {i} tag").decode("utf-8")
        arrays = []
        for what in ("mask feature", "positional encoding", "image embedding"):
            raw = r.take(8 * n, f"entry {i} {what}")
            arrays.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(c, h, w))
        base.entries.append(
            MemoryEntry(arrays[0], arrays[1], y_hat, arrays[2], source_tag=tag)
        )
    if r.pos != len(r.data):
        raise ShapeInconsistencyError(
            f"{len(r.data) - r.pos} unexpected trailing bytes"
        )
    return base
