"""Count-based language models over token-id sequences.

BidirectionalNGramModel scores how predictable a token is from its
surrounding context: five context patterns (two tokens each side, one
each side, left only, right only, none) are interpolated with fixed
weights, each component additively smoothed.  Patterns that fall off a
sequence boundary are dropped and the remaining weights renormalized.
The token at the scored position itself is never part of the context,
so scoring is equivalent to masking the position first.

CausalNGramModel is a conventional left-to-right model used for
perplexity: each position is predicted from its longest available
preceding context up to order-1 tokens, no interpolation.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import (
    ConfigInvalid,
    EmptyCorpus,
    EmptyInput,
    FormatVersionMismatch,
    IoError,
    PositionOutOfRange,
)

PROB_FLOOR = 1e-9

# pattern layout: offsets of context tokens relative to the masked position
_PATTERNS = (
    (-2, -1, 1, 2),
    (-1, 1),
    (-1,),
    (1,),
    (),
)

DEFAULT_MU = (0.40, 0.25, 0.15, 0.15, 0.05)
DEFAULT_DELTA = 0.1

# alternate profile: no 5-token pattern, sharper smoothing
PROFILES = {
    "default": ((0.40, 0.25, 0.15, 0.15, 0.05), 0.1),
    "narrow": ((0.0, 0.45, 0.20, 0.20, 0.15), 0.05),
}


@dataclass
class MlmConfig:
    mu: tuple[float, ...] = DEFAULT_MU
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        self.mu = tuple(float(m) for m in self.mu)
        if len(self.mu) != len(_PATTERNS):
            raise ConfigInvalid(f"mu must have {len(_PATTERNS)} weights")
        if any(m < 0 for m in self.mu):
            raise ConfigInvalid("mu weights must be non-negative")
        if abs(sum(self.mu) - 1.0) > 1e-9:
            raise ConfigInvalid("mu weights must sum to 1")
        if self.delta <= 0:
            raise ConfigInvalid("delta must be positive")

    @classmethod
    def from_profile(cls, name: str) -> "MlmConfig":
        if name not in PROFILES:
            raise ConfigInvalid(f"unknown mlm profile {name!r}")
        mu, delta = PROFILES[name]
        return cls(mu=mu, delta=delta)


class MaskedTokenModel(Protocol):
    vocab_size: int

    def masked_prob(self, token_ids, position: int) -> float: ...

    def top_candidates(self, token_ids, position: int, n: int) -> list[int]: ...

    @property
    def mlm_id(self) -> str: ...


def _context(ids, pos: int, offsets) -> tuple[int, ...] | None:
    T = len(ids)
    ctx = []
    for off in offsets:
        j = pos + off
        if not 0 <= j < T:
            return None
        ctx.append(int(ids[j]))
    return tuple(ctx)


class BidirectionalNGramModel:
    def __init__(self, vocab_size: int, config: MlmConfig | None = None):
        if vocab_size < 1:
            raise ConfigInvalid("vocab_size must be >= 1")
        self.vocab_size = vocab_size
        self.config = config or MlmConfig()
        self.tables: list[dict[tuple[int, ...], dict[int, int]]] = [
            {} for _ in _PATTERNS
        ]
        self.totals: list[dict[tuple[int, ...], int]] = [{} for _ in _PATTERNS]
        self._id: str | None = None

    def _count(self, ids) -> None:
        for pos in range(len(ids)):
            tok = int(ids[pos])
            for kind, offsets in enumerate(_PATTERNS):
                ctx = _context(ids, pos, offsets)
                if ctx is None:
                    continue
                inner = self.tables[kind].setdefault(ctx, {})
                inner[tok] = inner.get(tok, 0) + 1
                self.totals[kind][ctx] = self.totals[kind].get(ctx, 0) + 1
        self._id = None

    def _weights(self, ids, pos: int):
        """Available (kind, ctx) pairs with renormalized weights."""
        avail = []
        for kind, offsets in enumerate(_PATTERNS):
            ctx = _context(ids, pos, offsets)
            if ctx is not None:
                avail.append((kind, ctx))
        mass = sum(self.config.mu[k] for k, _ in avail)
        if mass <= 0:
            # degenerate profile at this boundary: fall back to unigram
            return [(len(_PATTERNS) - 1, (), 1.0)]
        return [(k, c, self.config.mu[k] / mass) for k, c in avail]

    def masked_prob(self, token_ids, position: int) -> float:
        T = len(token_ids)
        if not 0 <= position < T:
            raise PositionOutOfRange(f"position {position} outside length {T}")
        tok = int(token_ids[position])
        delta = self.config.delta
        dV = delta * self.vocab_size
        p = 0.0
        for kind, ctx, wgt in self._weights(token_ids, position):
            count = self.tables[kind].get(ctx, {}).get(tok, 0)
            total = self.totals[kind].get(ctx, 0)
            p += wgt * (count + delta) / (total + dV)
        return max(p, PROB_FLOOR)

    def full_distribution(self, token_ids, position: int) -> np.ndarray:
        """Interpolated distribution over the whole vocabulary at position."""
        T = len(token_ids)
        if not 0 <= position < T:
            raise PositionOutOfRange(f"position {position} outside length {T}")
        delta = self.config.delta
        dV = delta * self.vocab_size
        vec = np.zeros(self.vocab_size, dtype=np.float64)
        for kind, ctx, wgt in self._weights(token_ids, position):
            total = self.totals[kind].get(ctx, 0)
            denom = total + dV
            vec += wgt * delta / denom
            for t, c in self.tables[kind].get(ctx, {}).items():
                vec[t] += wgt * c / denom
        return vec

    def top_candidates(self, token_ids, position: int, n: int) -> list[int]:
        if n < 1:
            raise ConfigInvalid("n must be >= 1")
        vec = self.full_distribution(token_ids, position)
        # ties break toward the smaller token id
        order = np.lexsort((np.arange(self.vocab_size), -vec))
        return [int(i) for i in order[:n]]

    def _rows(self):
        for kind in range(len(_PATTERNS)):
            for ctx in sorted(self.tables[kind]):
                inner = self.tables[kind][ctx]
                ctx_s = ",".join(str(c) for c in ctx) if ctx else "-"
                for tok in sorted(inner):
                    yield f"{kind}\t{ctx_s}\t{tok}\t{inner[tok]}\n"

    def _header(self):
        mu_s = ",".join(repr(m) for m in self.config.mu)
        return (f"ragward-mlm v1\nkind bidirectional\nvocab {self.vocab_size}\n"
                f"mu {mu_s}\ndelta {self.config.delta!r}\n")

    @property
    def mlm_id(self) -> str:
        if self._id is None:
            dig = hashlib.sha256()
            dig.update(self._header().encode())
            for row in self._rows():
                dig.update(row.encode())
            self._id = dig.hexdigest()
        return self._id

    def save(self, path) -> None:
        try:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(self._header())
                for row in self._rows():
                    fh.write(row)
        except OSError as exc:
            raise IoError(str(exc)) from exc


def fit_mlm(documents, vocab_size: int, config: MlmConfig | None = None) -> BidirectionalNGramModel:
    documents = list(documents)
    if not documents:
        raise EmptyCorpus("no documents to fit on")
    model = BidirectionalNGramModel(vocab_size, config)
    for doc in documents:
        model._count(getattr(doc, "token_ids", doc))
    return model


def load_mlm(path):
    """Load either model kind from the counted-pattern text format."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if not lines or lines[0] != "ragward-mlm v1":
        raise FormatVersionMismatch("not an mlm file")
    meta = {}
    body_at = 1
    for i, line in enumerate(lines[1:], start=1):
        if "\t" in line:
            body_at = i
            break
        key, _, val = line.partition(" ")
        meta[key] = val
        body_at = i + 1
    kind = meta.get("kind")
    if kind == "bidirectional":
        mu = tuple(float(x) for x in meta["mu"].split(","))
        model = BidirectionalNGramModel(int(meta["vocab"]),
                                        MlmConfig(mu=mu, delta=float(meta["delta"])))
        for line in lines[body_at:]:
            if not line:
                continue
            k_s, ctx_s, tok_s, cnt_s = line.split("\t")
            ctx = () if ctx_s == "-" else tuple(int(c) for c in ctx_s.split(","))
            k = int(k_s)
            model.tables[k].setdefault(ctx, {})[int(tok_s)] = int(cnt_s)
            model.totals[k][ctx] = model.totals[k].get(ctx, 0) + int(cnt_s)
        return model
    if kind == "causal":
        model = CausalNGramModel(int(meta["vocab"]), order=int(meta["order"]),
                                 delta=float(meta["delta"]))
        for line in lines[body_at:]:
            if not line:
                continue
            ctx_s, tok_s, cnt_s = line.split("\t")
            ctx = () if ctx_s == "-" else tuple(int(c) for c in ctx_s.split(","))
            model.table.setdefault(ctx, {})[int(tok_s)] = int(cnt_s)
            model.totals[ctx] = model.totals.get(ctx, 0) + int(cnt_s)
        return model
    raise FormatVersionMismatch(f"unknown model kind {kind!r}")


class CausalNGramModel:
    def __init__(self, vocab_size: int, order: int = 3, delta: float = 0.1):
        if vocab_size < 1:
            raise ConfigInvalid("vocab_size must be >= 1")
        if order < 1:
            raise ConfigInvalid("order must be >= 1")
        if delta <= 0:
            raise ConfigInvalid("delta must be positive")
        self.vocab_size = vocab_size
        self.order = order
        self.delta = delta
        self.table: dict[tuple[int, ...], dict[int, int]] = {}
        self.totals: dict[tuple[int, ...], int] = {}
        self._id: str | None = None

    def _count(self, ids) -> None:
        for pos in range(len(ids)):
            lo = max(0, pos - (self.order - 1))
            ctx = tuple(int(i) for i in ids[lo:pos])
            tok = int(ids[pos])
            inner = self.table.setdefault(ctx, {})
            inner[tok] = inner.get(tok, 0) + 1
            self.totals[ctx] = self.totals.get(ctx, 0) + 1
        self._id = None

    def logprob(self, ids, pos: int) -> float:
        lo = max(0, pos - (self.order - 1))
        ctx = tuple(int(i) for i in ids[lo:pos])
        tok = int(ids[pos])
        count = self.table.get(ctx, {}).get(tok, 0)
        total = self.totals.get(ctx, 0)
        return math.log((count + self.delta) / (total + self.delta * self.vocab_size))

    def _header(self):
        return (f"ragward-mlm v1\nkind causal\nvocab {self.vocab_size}\n"
                f"order {self.order}\ndelta {self.delta!r}\n")

    def _rows(self):
        for ctx in sorted(self.table):
            inner = self.table[ctx]
            ctx_s = ",".join(str(c) for c in ctx) if ctx else "-"
            for tok in sorted(inner):
                yield f"{ctx_s}\t{tok}\t{inner[tok]}\n"

    @property
    def mlm_id(self) -> str:
        if self._id is None:
            dig = hashlib.sha256()
            dig.update(self._header().encode())
            for row in self._rows():
                dig.update(row.encode())
            self._id = dig.hexdigest()
        return self._id

    def save(self, path) -> None:
        try:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(self._header())
                for row in self._rows():
                    fh.write(row)
        except OSError as exc:
            raise IoError(str(exc)) from exc


def fit_causal(documents, vocab_size: int, order: int = 3,
               delta: float = 0.1) -> CausalNGramModel:
    documents = list(documents)
    if not documents:
        raise EmptyCorpus("no documents to fit on")
    model = CausalNGramModel(vocab_size, order=order, delta=delta)
    for doc in documents:
        model._count(getattr(doc, "token_ids", doc))
    return model


def perplexity(model: CausalNGramModel, token_ids) -> float:
    ids = list(token_ids)
    if not ids:
        raise EmptyInput("cannot score an empty sequence")
    nll = -sum(model.logprob(ids, p) for p in range(len(ids))) / len(ids)
    return math.exp(nll)
