"""Differentiable bag-of-tokens bi-encoder.

A sequence is pooled by softmax attention: logit s_t = (w . e_t) * scale
with scale = 1/sqrt(D), weights alpha = softmax(s), embedding
h = sum_t alpha_t e_t.  Query/document similarity is the dot product.
The gradient of that similarity with respect to one document token
embedding has the closed form

    alpha_t * q + alpha_t * ((q . e_t) - (q . h)) * scale * w

which the kernels evaluate without autodiff.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import (
    ConfigInvalid,
    DimensionMismatch,
    EmptyInput,
    FormatVersionMismatch,
    IdOutOfRange,
    IoError,
)

MAGIC = b"RAGWENC\x00"
FORMAT_VERSION = 1


@dataclass
class EncoderParams:
    """Token embedding table E (V x D) and attention vector w (D,)."""

    E: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.E = np.ascontiguousarray(self.E, dtype=np.float64)
        self.w = np.ascontiguousarray(self.w, dtype=np.float64)
        if self.E.ndim != 2 or self.w.ndim != 1:
            raise ConfigInvalid("E must be 2-d and w 1-d")
        if self.E.shape[1] != self.w.shape[0]:
            raise DimensionMismatch(f"E is {self.E.shape}, w is {self.w.shape}")
        if self.E.shape[1] < 2:
            raise ConfigInvalid("embedding dimension must be >= 2")
        if not (np.isfinite(self.E).all() and np.isfinite(self.w).all()):
            raise ConfigInvalid("parameters must be finite")

    @property
    def V(self) -> int:
        return self.E.shape[0]

    @property
    def D(self) -> int:
        return self.E.shape[1]

    @property
    def scale(self) -> float:
        return 1.0 / float(np.sqrt(self.D))


@dataclass
class EncoderPair:
    query: EncoderParams
    doc: EncoderParams
    shared: bool

    def __post_init__(self):
        if self.shared and self.query is not self.doc:
            raise ConfigInvalid("shared pair must reference one parameter set")
        if self.query.D != self.doc.D:
            raise DimensionMismatch("query and doc dimensions differ")
        if self.query.V != self.doc.V:
            raise DimensionMismatch("query and doc vocabularies differ")


def init_params(V: int, D: int, seed: int) -> EncoderParams:
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(D)
    E = rng.uniform(-bound, bound, size=(V, D))
    w = rng.uniform(-bound, bound, size=D)
    return EncoderParams(E=E, w=w)


def init_pair(V: int, D: int, seed: int, shared: bool = True) -> EncoderPair:
    q = init_params(V, D, seed)
    d = q if shared else init_params(V, D, seed + 1)
    return EncoderPair(query=q, doc=d, shared=shared)


def _check_ids(params: EncoderParams, token_ids) -> np.ndarray:
    ids = np.ascontiguousarray(token_ids, dtype=np.int64)
    if ids.size == 0:
        raise EmptyInput("cannot encode an empty sequence")
    if ids.min() < 0 or ids.max() >= params.V:
        raise IdOutOfRange(f"token id outside vocabulary of {params.V}")
    return ids


def encode(params: EncoderParams, token_ids) -> np.ndarray:
    ids = _check_ids(params, token_ids)
    h, _ = kernels.pool(params.E, params.w, params.scale, ids)
    return h


def attention(params: EncoderParams, token_ids) -> np.ndarray:
    ids = _check_ids(params, token_ids)
    _, a = kernels.pool(params.E, params.w, params.scale, ids)
    return a


def similarity(q_vec: np.ndarray, d_vec: np.ndarray) -> float:
    if q_vec.shape != d_vec.shape:
        raise DimensionMismatch(f"{q_vec.shape} vs {d_vec.shape}")
    return float(np.dot(q_vec, d_vec))


@dataclass
class GradientProfile:
    """Per-position gradient norms of similarity wrt document embeddings."""

    doc_id: str
    norms: np.ndarray
    mean: float

    def __post_init__(self):
        self.norms = np.asarray(self.norms, dtype=np.float64)
        if not np.isfinite(self.norms).all() or (self.norms < 0).any():
            raise ConfigInvalid("gradient norms must be finite and non-negative")


def gradient_profile(params: EncoderParams, q_vec: np.ndarray, doc_id: str,
                     token_ids) -> GradientProfile:
    ids = _check_ids(params, token_ids)
    if q_vec.shape != (params.D,):
        raise DimensionMismatch(f"query vector {q_vec.shape}, expected ({params.D},)")
    norms = kernels.grad_norms(params.E, params.w, params.scale, ids,
                               np.ascontiguousarray(q_vec, dtype=np.float64))
    return GradientProfile(doc_id=doc_id, norms=norms, mean=float(norms.mean()))


def token_gradients(pair: EncoderPair, query, doc) -> GradientProfile:
    """Gradient profile of sim(query, doc) over the document's positions."""
    q_vec = encode(pair.query, query.token_ids)
    return gradient_profile(pair.doc, q_vec, doc.doc_id, doc.token_ids)


def embedding_l2norm(params: EncoderParams, token_ids) -> float:
    return float(np.linalg.norm(encode(params, token_ids)))


@dataclass
class TrainResult:
    pair: EncoderPair
    epoch_losses: list[float]


def _token_ids(obj):
    return getattr(obj, "token_ids", obj)


def _backward(E, w, scale, ids, upstream, dE, dw):
    # recompute forward quantities, then accumulate parameter gradients
    X = E[ids]
    s = (X @ w) * scale
    s = s - s.max()
    a = np.exp(s)
    a /= a.sum()
    h = a @ X
    ue = X @ upstream
    uh = float(upstream @ h)
    ds = a * (ue - uh)
    dX = np.outer(a, upstream) + np.outer(ds * scale, w)
    np.add.at(dE, ids, dX)
    dw += scale * (X.T @ ds)


def train_contrastive(pair: EncoderPair, pairs, epochs: int, learning_rate: float,
                      batch_size: int, seed: int) -> TrainResult:
    """SGD on in-batch-negative cross entropy over (query, document) pairs.

    Each batch forms a B x B dot-product logit matrix; the diagonal is
    the positive class.  Batches with fewer than 2 examples are skipped
    since they carry no negatives.
    """
    if batch_size < 2:
        raise ConfigInvalid("batch_size must be >= 2")
    if epochs < 1:
        raise ConfigInvalid("epochs must be >= 1")
    if learning_rate < 0:
        raise ConfigInvalid("learning_rate must be >= 0")
    data = [(np.ascontiguousarray(_token_ids(q), dtype=np.int64),
             np.ascontiguousarray(_token_ids(d), dtype=np.int64)) for q, d in pairs]
    if len(data) < 2:
        raise ConfigInvalid("need at least 2 training pairs")

    shared = pair.shared
    Eq = pair.query.E.copy()
    wq = pair.query.w.copy()
    if shared:
        Ed, wd = Eq, wq
    else:
        Ed = pair.doc.E.copy()
        wd = pair.doc.w.copy()
    scale = pair.query.scale

    rng = np.random.default_rng(seed)
    losses: list[float] = []
    for _ in range(epochs):
        order = rng.permutation(len(data))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = [data[i] for i in order[start:start + batch_size]]
            B = len(batch)
            if B < 2:
                continue
            qv = np.stack([_pool_np(Eq, wq, scale, q) for q, _ in batch])
            dv = np.stack([_pool_np(Ed, wd, scale, d) for _, d in batch])
            logits = qv @ dv.T
            shifted = logits - logits.max(axis=1, keepdims=True)
            expl = np.exp(shifted)
            P = expl / expl.sum(axis=1, keepdims=True)
            idx = np.arange(B)
            loss = float(np.mean(np.log(expl.sum(axis=1)) - shifted[idx, idx]))
            total += loss * B
            count += B

            dlogits = (P - np.eye(B)) / B
            dq = dlogits @ dv
            dd = dlogits.T @ qv
            dEq = np.zeros_like(Eq)
            dwq = np.zeros_like(wq)
            if shared:
                dEd, dwd = dEq, dwq
            else:
                dEd = np.zeros_like(Ed)
                dwd = np.zeros_like(wd)
            for i, (q_ids, d_ids) in enumerate(batch):
                _backward(Eq, wq, scale, q_ids, dq[i], dEq, dwq)
                _backward(Ed, wd, scale, d_ids, dd[i], dEd, dwd)
            Eq -= learning_rate * dEq
            wq -= learning_rate * dwq
            if not shared:
                Ed -= learning_rate * dEd
                wd -= learning_rate * dwd
        losses.append(total / count if count else 0.0)

    q_params = EncoderParams(E=Eq, w=wq)
    d_params = q_params if shared else EncoderParams(E=Ed, w=wd)
    return TrainResult(pair=EncoderPair(query=q_params, doc=d_params, shared=shared),
                       epoch_losses=losses)


def _pool_np(E, w, scale, ids):
    X = E[ids]
    s = (X @ w) * scale
    s = s - s.max()
    a = np.exp(s)
    a /= a.sum()
    return a @ X


def fingerprint_pair(pair: EncoderPair) -> str:
    dig = hashlib.sha256()
    dig.update(b"shared" if pair.shared else b"split")
    dig.update(pair.query.E.tobytes())
    dig.update(pair.query.w.tobytes())
    if not pair.shared:
        dig.update(pair.doc.E.tobytes())
        dig.update(pair.doc.w.tobytes())
    return dig.hexdigest()


def save_params(pair: EncoderPair, path) -> None:
    """Binary layout: magic, u32 version, u64 V, u64 D, u8 shared, payload.

    Payload is float64 little-endian: query E then w, then doc E and w
    when the pair is not shared.  Round trip is bit-exact.
    """
    header = MAGIC + struct.pack("<IQQB", FORMAT_VERSION, pair.query.V,
                                 pair.query.D, 1 if pair.shared else 0)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(pair.query.E.astype("<f8", copy=False).tobytes())
            fh.write(pair.query.w.astype("<f8", copy=False).tobytes())
            if not pair.shared:
                fh.write(pair.doc.E.astype("<f8", copy=False).tobytes())
                fh.write(pair.doc.w.astype("<f8", copy=False).tobytes())
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_params(path) -> EncoderPair:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    head_len = len(MAGIC) + struct.calcsize("<IQQB")
    if len(blob) < head_len or blob[:len(MAGIC)] != MAGIC:
        raise FormatVersionMismatch("not an encoder parameter file")
    version, V, D, shared = struct.unpack_from("<IQQB", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"unsupported version {version}")
    sets = 1 if shared else 2
    expected = head_len + sets * (V * D + D) * 8
    if len(blob) != expected:
        raise IoError(f"expected {expected} bytes, file has {len(blob)}")
    off = head_len

    def take(n_items):
        nonlocal off
        arr = np.frombuffer(blob, dtype="<f8", count=n_items, offset=off).copy()
        off += n_items * 8
        return arr

    Eq = take(V * D).reshape(V, D)
    wq = take(D)
    qp = EncoderParams(E=Eq, w=wq)
    if shared:
        return EncoderPair(query=qp, doc=qp, shared=True)
    Ed = take(V * D).reshape(V, D)
    wd = take(D)
    return EncoderPair(query=qp, doc=EncoderParams(E=Ed, w=wd), shared=False)
