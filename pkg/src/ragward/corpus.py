"""Corpus model: vocabulary, documents, queries, ingestion, synthesis.

The synthetic generator builds a phrase-based language: each topic owns
a small set of exclusive phrases, a shared pool of background phrases
fills the rest of every document, and queries are concatenations of
their topic's phrases.  Phrase structure is what gives clean text
predictable tokens under a masked-token model while leaving
adversarially chosen tokens in never-seen contexts.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigInvalid,
    EmptyCorpus,
    FormatVersionMismatch,
    IdOutOfRange,
    IoError,
    MalformedLine,
    MissingField,
)

MASK_TOKEN = "[MASK]"
UNK_TOKEN = "[UNK]"

_WORD_RE = re.compile(r"[a-z0-9_]+")


@dataclass(frozen=True)
class Vocabulary:
    """Dense token-string/id bijection with reserved mask and unk ids."""

    tokens: tuple[str, ...]
    mask_id: int
    unk_id: int
    id_of: dict[str, int] = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        if not self.id_of:
            object.__setattr__(self, "id_of", {t: i for i, t in enumerate(self.tokens)})
        if len(self.id_of) != len(self.tokens):
            raise ConfigInvalid("vocabulary tokens are not unique")
        for special in (self.mask_id, self.unk_id):
            if not 0 <= special < len(self.tokens):
                raise ConfigInvalid("special token id out of range")
        if self.mask_id == self.unk_id:
            raise ConfigInvalid("mask and unk ids must differ")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def render(self, token_ids) -> str:
        for i in token_ids:
            if not 0 <= i < len(self.tokens):
                raise IdOutOfRange(f"token id {i} outside vocabulary of {len(self.tokens)}")
        return " ".join(self.tokens[i] for i in token_ids)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Lowercase word tokenizer; unknown words map to the unk id."""
    get = vocab.id_of.get
    unk = vocab.unk_id
    return [get(tok, unk) for tok in _WORD_RE.findall(text.lower())]


def build_vocab(texts, min_count: int = 1) -> Vocabulary:
    """Frequency-filtered vocabulary over word tokens, specials first.

    Tokens sort by descending count then lexicographically, so the id
    assignment is deterministic for a given corpus.
    """
    if min_count < 1:
        raise ConfigInvalid("min_count must be >= 1")
    texts = list(texts)
    if not texts:
        raise EmptyCorpus("no texts to build a vocabulary from")
    counts: dict[str, int] = {}
    for text in texts:
        for tok in _WORD_RE.findall(text.lower()):
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted(
        (t for t, c in counts.items() if c >= min_count),
        key=lambda t: (-counts[t], t),
    )
    tokens = (MASK_TOKEN, UNK_TOKEN, *kept)
    return Vocabulary(tokens=tokens, mask_id=0, unk_id=1)


@dataclass
class Document:
    doc_id: str
    token_ids: tuple[int, ...]
    source_text: str
    label: str = "clean"
    cheating_positions: frozenset[int] = frozenset()
    payload_positions: frozenset[int] = frozenset()
    attack_mode: str | None = None

    def __post_init__(self):
        self.token_ids = tuple(int(i) for i in self.token_ids)
        if not self.token_ids:
            raise ConfigInvalid(f"document {self.doc_id} has no tokens")
        if self.label not in ("clean", "poisoned"):
            raise ConfigInvalid(f"document {self.doc_id}: bad label {self.label!r}")
        self.cheating_positions = frozenset(self.cheating_positions)
        self.payload_positions = frozenset(self.payload_positions)
        T = len(self.token_ids)
        for p in self.cheating_positions | self.payload_positions:
            if not 0 <= p < T:
                raise ConfigInvalid(f"document {self.doc_id}: position {p} outside length {T}")
        if self.label == "clean" and self.cheating_positions:
            raise ConfigInvalid(f"document {self.doc_id}: clean docs cannot carry cheating positions")


@dataclass
class QueryRecord:
    query_id: str
    token_ids: tuple[int, ...]
    trigger: int | None = None
    qrels: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.token_ids = tuple(int(i) for i in self.token_ids)
        if not self.token_ids:
            raise ConfigInvalid(f"query {self.query_id} has no tokens")
        if self.trigger is not None and self.token_ids[-1] != self.trigger:
            raise ConfigInvalid(f"query {self.query_id}: trigger token must be terminal")
        for d, gain in self.qrels.items():
            if gain < 0:
                raise ConfigInvalid(f"query {self.query_id}: negative gain for {d}")


@dataclass
class CorpusBundle:
    """A corpus, its queries, and the calibration/eval query split."""

    vocabulary: Vocabulary
    documents: list[Document]
    queries: list[QueryRecord]
    split_calibration: tuple[str, ...]
    split_eval: tuple[str, ...]

    def __post_init__(self):
        seen: set[str] = set()
        for d in self.documents:
            if d.doc_id in seen:
                raise ConfigInvalid(f"duplicate doc_id {d.doc_id}")
            seen.add(d.doc_id)
        qids = {q.query_id for q in self.queries}
        if len(qids) != len(self.queries):
            raise ConfigInvalid("duplicate query ids")
        overlap = set(self.split_calibration) & set(self.split_eval)
        if overlap:
            raise ConfigInvalid(f"splits overlap: {sorted(overlap)[:3]}")
        for qid in (*self.split_calibration, *self.split_eval):
            if qid not in qids:
                raise ConfigInvalid(f"split references unknown query {qid}")

    def doc_map(self) -> dict[str, Document]:
        return {d.doc_id: d for d in self.documents}

    def query_map(self) -> dict[str, QueryRecord]:
        return {q.query_id: q for q in self.queries}

    def queries_in(self, split: str) -> list[QueryRecord]:
        ids = self.split_calibration if split == "calibration" else self.split_eval
        qmap = self.query_map()
        return [qmap[q] for q in ids]


@dataclass
class SyntheticConfig:
    num_topics: int = 50
    docs_per_topic: int = 100
    queries_per_topic: int = 4
    doc_length_range: tuple[int, int] = (40, 70)
    vocab_size: int = 2000
    zipf_exponent: float = 1.1
    trigger_fraction: float = 0.0
    topic_phrase_count: int = 3
    background_phrase_count: int = 400
    topic_phrase_share: float = 0.3

    def __post_init__(self):
        if self.num_topics < 1 or self.docs_per_topic < 1 or self.queries_per_topic < 1:
            raise ConfigInvalid("topic, document, and query counts must be >= 1")
        lo, hi = self.doc_length_range
        if not (1 <= lo <= hi):
            raise ConfigInvalid("doc_length_range must satisfy 1 <= lo <= hi")
        if self.vocab_size < self.num_topics:
            raise ConfigInvalid("vocab_size must be >= num_topics")
        if not 0.0 <= self.trigger_fraction <= 1.0:
            raise ConfigInvalid("trigger_fraction must lie in [0, 1]")
        if self.zipf_exponent <= 0:
            raise ConfigInvalid("zipf_exponent must be positive")
        if not 0.0 < self.topic_phrase_share <= 1.0:
            raise ConfigInvalid("topic_phrase_share must lie in (0, 1]")


TRIGGER_WORD = "ztrigger"


def _zipf_weights(n: int, a: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = ranks ** (-a)
    return w / w.sum()


def generate_synthetic(config: SyntheticConfig, seed: int) -> CorpusBundle:
    """Deterministic synthetic bundle; one rng drives every choice."""
    rng = np.random.default_rng(seed)
    V = config.vocab_size
    n_topics = config.num_topics

    words = [f"w{i:05d}" for i in range(V)] + [TRIGGER_WORD]
    vocab = Vocabulary(tokens=(MASK_TOKEN, UNK_TOKEN, *words), mask_id=0, unk_id=1)
    word_id = lambda i: 2 + i  # noqa: E731
    trigger_id = 2 + V

    # Reserve an exclusive token slice per topic; the rest is background.
    slice_size = max(1, min(9, V // n_topics))
    topic_tokens = [
        [word_id(t * slice_size + j) for j in range(slice_size)]
        for t in range(n_topics)
    ]
    bg_lo = n_topics * slice_size
    background = [word_id(i) for i in range(bg_lo, V)]

    # Topic phrases: disjoint chunks of the shuffled slice, so no token ever
    # neighbors a copy of itself inside or across phrases of one topic.
    topic_phrases: list[list[tuple[int, ...]]] = []
    for t in range(n_topics):
        pool = rng.permutation(topic_tokens[t])
        count = config.topic_phrase_count
        length = len(pool) // count
        if length >= 1:
            phrases = [tuple(int(x) for x in pool[i * length:(i + 1) * length])
                       for i in range(count)]
        else:
            phrases = [(int(pool[i % len(pool)]),) for i in range(count)]
        topic_phrases.append(phrases)

    # Background phrases: length 2..4, Zipf-weighted, no repeats within a phrase.
    bg_phrases: list[tuple[int, ...]] = []
    if background:
        tok_w = _zipf_weights(len(background), config.zipf_exponent)
        bg_arr = np.array(background)
        for _ in range(config.background_phrase_count):
            length = min(int(rng.integers(2, 5)), len(bg_arr))
            picks = rng.choice(len(bg_arr), size=length, p=tok_w, replace=False)
            bg_phrases.append(tuple(int(bg_arr[i]) for i in picks))
    phrase_w = _zipf_weights(len(bg_phrases), config.zipf_exponent) if bg_phrases else None

    lo, hi = config.doc_length_range
    documents: list[Document] = []
    for t in range(n_topics):
        for j in range(config.docs_per_topic):
            target = int(rng.integers(lo, hi + 1))
            ids: list[int] = []
            while len(ids) < target:
                for _ in range(8):  # avoid repeating a token across the boundary
                    use_topic = (not bg_phrases) or rng.random() < config.topic_phrase_share
                    if use_topic:
                        phrase = topic_phrases[t][int(rng.integers(len(topic_phrases[t])))]
                    else:
                        phrase = bg_phrases[int(rng.choice(len(bg_phrases), p=phrase_w))]
                    if not ids or ids[-1] != phrase[0]:
                        break
                ids.extend(phrase)
            ids = ids[:target]
            doc_id = f"d{t:03d}-{j:04d}"
            documents.append(Document(doc_id=doc_id, token_ids=tuple(ids),
                                      source_text=vocab.render(ids)))

    queries: list[QueryRecord] = []
    topic_doc_ids = [
        [f"d{t:03d}-{j:04d}" for j in range(config.docs_per_topic)]
        for t in range(n_topics)
    ]
    for t in range(n_topics):
        for j in range(config.queries_per_topic):
            n_parts = int(rng.integers(1, min(2, len(topic_phrases[t])) + 1))
            picks = rng.choice(len(topic_phrases[t]), size=n_parts, replace=False)
            ids = [tok for p in picks for tok in topic_phrases[t][p]]
            qrels = {d: 1 for d in topic_doc_ids[t]}
            queries.append(QueryRecord(query_id=f"q{t:03d}-{j:02d}",
                                       token_ids=tuple(ids), qrels=qrels))

    n_trig = round(config.trigger_fraction * len(queries))
    if n_trig:
        chosen = rng.choice(len(queries), size=n_trig, replace=False)
        for qi in sorted(int(i) for i in chosen):
            q = queries[qi]
            queries[qi] = QueryRecord(query_id=q.query_id,
                                      token_ids=(*q.token_ids, trigger_id),
                                      trigger=trigger_id, qrels=q.qrels)

    calib = tuple(q.query_id for i, q in enumerate(queries) if i % 2 == 0)
    evals = tuple(q.query_id for i, q in enumerate(queries) if i % 2 == 1)
    return CorpusBundle(vocabulary=vocab, documents=documents, queries=queries,
                        split_calibration=calib, split_eval=evals)


def _read_jsonl(path) -> list[dict]:
    records = []
    try:
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise MalformedLine(n, f"invalid json: {exc.msg}") from exc
                if not isinstance(obj, dict):
                    raise MalformedLine(n, "expected a json object")
                obj["__line__"] = n
                records.append(obj)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return records


def ingest_jsonl(path, vocab: Vocabulary) -> list[Document]:
    """Documents from a JSONL file with _id and text fields."""
    docs = []
    for rec in _read_jsonl(path):
        n = rec["__line__"]
        for fld in ("_id", "text"):
            if fld not in rec:
                raise MissingField(fld)
        ids = tokenize(rec["text"], vocab)
        if not ids:
            raise MalformedLine(n, f"document {rec['_id']} tokenizes to nothing")
        docs.append(Document(doc_id=str(rec["_id"]), token_ids=tuple(ids),
                             source_text=rec["text"]))
    if not docs:
        raise EmptyCorpus(f"no documents in {path}")
    return docs


def ingest_queries(path, vocab: Vocabulary, trigger_word: str | None = None) -> list[QueryRecord]:
    """Queries from JSONL; a terminal trigger word is recognized if given."""
    trig_id = vocab.id_of.get(trigger_word) if trigger_word else None
    out = []
    for rec in _read_jsonl(path):
        n = rec["__line__"]
        for fld in ("_id", "text"):
            if fld not in rec:
                raise MissingField(fld)
        ids = tokenize(rec["text"], vocab)
        if not ids:
            raise MalformedLine(n, f"query {rec['_id']} tokenizes to nothing")
        trigger = trig_id if (trig_id is not None and ids[-1] == trig_id) else None
        out.append(QueryRecord(query_id=str(rec["_id"]), token_ids=tuple(ids),
                               trigger=trigger))
    if not out:
        raise EmptyCorpus(f"no queries in {path}")
    return out


def ingest_qrels(path) -> dict[str, dict[str, int]]:
    """TREC qrels: query_id, iteration, doc_id, gain (whitespace-separated)."""
    qrels: dict[str, dict[str, int]] = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                parts = line.split()
                if len(parts) != 4:
                    raise MalformedLine(n, f"expected 4 columns, got {len(parts)}")
                qid, _, did, gain = parts
                try:
                    g = int(gain)
                except ValueError as exc:
                    raise MalformedLine(n, f"gain {gain!r} is not an integer") from exc
                if g < 0:
                    raise MalformedLine(n, "negative gain")
                qrels.setdefault(qid, {})[did] = g
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return qrels


def assemble_bundle(documents: list[Document], queries: list[QueryRecord],
                    qrels: dict[str, dict[str, int]], vocab: Vocabulary,
                    calibration_fraction: float = 0.5) -> CorpusBundle:
    """Attach qrels and split queries round-robin into calibration/eval."""
    if not documents:
        raise EmptyCorpus("no documents")
    if not queries:
        raise EmptyCorpus("no queries")
    known = {d.doc_id for d in documents}
    attached = []
    for q in queries:
        rel = {d: g for d, g in qrels.get(q.query_id, {}).items() if d in known}
        attached.append(QueryRecord(query_id=q.query_id, token_ids=q.token_ids,
                                    trigger=q.trigger, qrels=rel))
    n_cal = round(calibration_fraction * len(attached))
    # interleave so both splits see the full topical range
    calib_idx = set(list(range(0, len(attached), 2))[:n_cal])
    for i in range(1, len(attached), 2):
        if len(calib_idx) >= n_cal:
            break
        calib_idx.add(i)
    calib = tuple(attached[i].query_id for i in sorted(calib_idx))
    evals = tuple(attached[i].query_id for i in range(len(attached)) if i not in calib_idx)
    return CorpusBundle(vocabulary=vocab, documents=documents, queries=attached,
                        split_calibration=calib, split_eval=evals)


def save_bundle(bundle: CorpusBundle, dir_path) -> None:
    """Write a bundle as a corpus directory (vocab, jsonl, qrels, split)."""
    import os
    os.makedirs(dir_path, exist_ok=True)
    join = lambda name: os.path.join(dir_path, name)  # noqa: E731
    save_vocab(bundle.vocabulary, join("vocab.txt"))
    with open(join("corpus.jsonl"), "w", encoding="utf-8") as fh:
        for d in bundle.documents:
            row = {"_id": d.doc_id, "text": d.source_text}
            if d.label != "clean":
                row["label"] = d.label
                row["cheating_positions"] = sorted(d.cheating_positions)
                row["payload_positions"] = sorted(d.payload_positions)
                row["attack_mode"] = d.attack_mode
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    with open(join("queries.jsonl"), "w", encoding="utf-8") as fh:
        for q in bundle.queries:
            row = {"_id": q.query_id, "text": bundle.vocabulary.render(q.token_ids),
                   "trigger_word": (bundle.vocabulary.tokens[q.trigger]
                                    if q.trigger is not None else None)}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    with open(join("qrels.trec"), "w", encoding="utf-8") as fh:
        for q in bundle.queries:
            for did in sorted(q.qrels):
                fh.write(f"{q.query_id} 0 {did} {q.qrels[did]}\n")
    with open(join("split.json"), "w", encoding="utf-8") as fh:
        json.dump({"calibration": list(bundle.split_calibration),
                   "eval": list(bundle.split_eval)}, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_bundle(dir_path) -> CorpusBundle:
    import os
    join = lambda name: os.path.join(dir_path, name)  # noqa: E731
    vocab = load_vocab(join("vocab.txt"))
    documents = []
    for rec in _read_jsonl(join("corpus.jsonl")):
        n = rec["__line__"]
        for fld in ("_id", "text"):
            if fld not in rec:
                raise MissingField(fld)
        ids = tokenize(rec["text"], vocab)
        if not ids:
            raise MalformedLine(n, f"document {rec['_id']} tokenizes to nothing")
        documents.append(Document(
            doc_id=str(rec["_id"]), token_ids=tuple(ids), source_text=rec["text"],
            label=rec.get("label", "clean"),
            cheating_positions=frozenset(rec.get("cheating_positions", [])),
            payload_positions=frozenset(rec.get("payload_positions", [])),
            attack_mode=rec.get("attack_mode")))
    qrels = ingest_qrels(join("qrels.trec"))
    queries = []
    for rec in _read_jsonl(join("queries.jsonl")):
        n = rec["__line__"]
        for fld in ("_id", "text"):
            if fld not in rec:
                raise MissingField(fld)
        ids = tokenize(rec["text"], vocab)
        if not ids:
            raise MalformedLine(n, f"query {rec['_id']} tokenizes to nothing")
        trig_word = rec.get("trigger_word")
        trigger = vocab.id_of.get(trig_word) if trig_word else None
        queries.append(QueryRecord(query_id=str(rec["_id"]), token_ids=tuple(ids),
                                   trigger=trigger,
                                   qrels=qrels.get(str(rec["_id"]), {})))
    try:
        with open(join("split.json"), encoding="utf-8") as fh:
            split = json.load(fh)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return CorpusBundle(vocabulary=vocab, documents=documents, queries=queries,
                        split_calibration=tuple(split["calibration"]),
                        split_eval=tuple(split["eval"]))


VOCAB_HEADER = "ragward-vocab v1"


def save_vocab(vocab: Vocabulary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{VOCAB_HEADER} {vocab.size} {vocab.mask_id} {vocab.unk_id}\n")
        for tok in vocab.tokens:
            fh.write(tok + "\n")


def load_vocab(path) -> Vocabulary:
    try:
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            parts = header.split()
            if len(parts) != 5 or " ".join(parts[:2]) != VOCAB_HEADER:
                raise FormatVersionMismatch(f"bad vocab header: {header!r}")
            size, mask_id, unk_id = (int(p) for p in parts[2:])
            tokens = [line.rstrip("\n") for line in fh]
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if len(tokens) != size:
        raise IoError(f"vocab lists {len(tokens)} tokens, header says {size}")
    return Vocabulary(tokens=tuple(tokens), mask_id=mask_id, unk_id=unk_id)
