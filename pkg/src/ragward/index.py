"""Exact dot-product retrieval over pooled document embeddings."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderPair, encode, fingerprint_pair
from .errors import (
    ConfigInvalid,
    DimensionMismatch,
    EmptyCorpus,
    FormatVersionMismatch,
    IoError,
)

INDEX_MAGIC = b"RAGWIDX\x00"
INDEX_VERSION = 1


@dataclass
class RankedEntry:
    doc_id: str
    score: float


@dataclass
class RankedList:
    query_id: str
    entries: list[RankedEntry]
    k: int
    underfilled: bool = False

    def doc_ids(self) -> list[str]:
        return [e.doc_id for e in self.entries]


@dataclass
class RetrievalIndex:
    doc_ids: tuple[str, ...]
    embeddings: np.ndarray
    params_fingerprint: str
    _row_of: dict[str, int] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        if len(self.doc_ids) != self.embeddings.shape[0]:
            raise ConfigInvalid("doc_ids and embedding rows disagree")
        if not self._row_of:
            self._row_of = {d: i for i, d in enumerate(self.doc_ids)}
        if len(self._row_of) != len(self.doc_ids):
            raise ConfigInvalid("duplicate doc ids in index")

    @property
    def size(self) -> int:
        return len(self.doc_ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def build_index(pair: EncoderPair, documents) -> RetrievalIndex:
    documents = list(documents)
    if not documents:
        raise EmptyCorpus("cannot index an empty corpus")
    rows = np.stack([encode(pair.doc, d.token_ids) for d in documents])
    return RetrievalIndex(doc_ids=tuple(d.doc_id for d in documents),
                          embeddings=rows,
                          params_fingerprint=fingerprint_pair(pair))


def _ranked_order(index: RetrievalIndex, q_vec: np.ndarray) -> list[tuple[str, float]]:
    """Full ranking: score descending, doc_id ascending on ties."""
    if q_vec.shape != (index.dim,):
        raise DimensionMismatch(f"query vector {q_vec.shape}, index dim {index.dim}")
    scores = index.embeddings @ q_vec
    order = sorted(range(index.size), key=lambda i: (-scores[i], index.doc_ids[i]))
    return [(index.doc_ids[i], float(scores[i])) for i in order]


def top_k(index: RetrievalIndex, q_vec: np.ndarray, k: int,
          query_id: str = "") -> RankedList:
    if k < 1:
        raise ConfigInvalid("k must be >= 1")
    ranked = _ranked_order(index, q_vec)[:k]
    return RankedList(query_id=query_id,
                      entries=[RankedEntry(d, s) for d, s in ranked],
                      k=k, underfilled=len(ranked) < k)


def refill(index: RetrievalIndex, q_vec: np.ndarray, kept: list[RankedEntry],
           k: int, excluded: set[str], admit=None, query_id: str = "") -> RankedList:
    """Extend a filtered list back to k from the exact ranking.

    Walks the full ranking past the already-delivered and excluded
    documents; each new candidate passes through ``admit`` (the active
    defense) before delivery.  The result is marked underfilled when
    the corpus runs out before k survivors are found.
    """
    if k < 1:
        raise ConfigInvalid("k must be >= 1")
    entries = list(kept)
    have = {e.doc_id for e in entries}
    skip = have | set(excluded)
    for doc_id, score in _ranked_order(index, q_vec):
        if len(entries) >= k:
            break
        if doc_id in skip:
            continue
        skip.add(doc_id)
        if admit is not None and not admit(doc_id, score):
            continue
        entries.append(RankedEntry(doc_id, score))
    return RankedList(query_id=query_id, entries=entries, k=k,
                      underfilled=len(entries) < k)


def save_index(index: RetrievalIndex, path) -> None:
    n, d = index.size, index.dim
    fp = index.params_fingerprint.encode()
    try:
        with open(path, "wb") as fh:
            fh.write(INDEX_MAGIC)
            fh.write(struct.pack("<IQQH", INDEX_VERSION, n, d, len(fp)))
            fh.write(fp)
            for doc_id in index.doc_ids:
                b = doc_id.encode()
                fh.write(struct.pack("<H", len(b)))
                fh.write(b)
            fh.write(index.embeddings.astype("<f8", copy=False).tobytes())
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_index(path) -> RetrievalIndex:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if blob[:len(INDEX_MAGIC)] != INDEX_MAGIC:
        raise FormatVersionMismatch("not an index file")
    off = len(INDEX_MAGIC)
    version, n, d, fp_len = struct.unpack_from("<IQQH", blob, off)
    if version != INDEX_VERSION:
        raise FormatVersionMismatch(f"unsupported version {version}")
    off += struct.calcsize("<IQQH")
    fp = blob[off:off + fp_len].decode()
    off += fp_len
    doc_ids = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", blob, off)
        off += 2
        doc_ids.append(blob[off:off + ln].decode())
        off += ln
    need = n * d * 8
    if len(blob) - off != need:
        raise IoError(f"expected {need} embedding bytes, found {len(blob) - off}")
    emb = np.frombuffer(blob, dtype="<f8", count=n * d, offset=off).copy().reshape(n, d)
    return RetrievalIndex(doc_ids=tuple(doc_ids), embeddings=emb,
                          params_fingerprint=fp)
