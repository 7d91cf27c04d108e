"""Corpus poisoning attacks against the dot-product retriever.

All three recipes share one primitive: greedy first-order token
substitution (HotFlip).  At each step the gradient of the retrieval
objective with respect to the current token embedding ranks all
replacement tokens by (e_new - e_cur) . grad; the top candidates are
re-scored exactly through the real encoder and a flip is accepted only
if it strictly improves the objective, so the objective trace never
decreases.

poisonedrag: incorrect-answer payload plus an optimized cheating
prefix region targeting one query.
phantom: cheating region optimized against the mean of triggered
queries, followed by an adversarial command.
advdecoding: fluent-looking cheating text grown greedily from the
masked-token model's top candidates, scored by the same retrieval
objective, then the command appended.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .corpus import Document, Vocabulary, tokenize
from .encoder import EncoderPair, encode, similarity
from .errors import (
    ConfigInvalid,
    DuplicateDocId,
    EmptyInput,
    IoError,
    MalformedLine,
    MissingField,
)

MODES = ("poisonedrag", "phantom", "advdecoding")


@dataclass
class AttackConfig:
    mode: str
    num_cheating_tokens: int = 12
    iterations: int = 20
    candidates_per_flip: int = 50
    docs_per_target: int = 5
    lengths: tuple[int, ...] = (50, 80, 110, 140, 170)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigInvalid(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.num_cheating_tokens < 1:
            raise ConfigInvalid("num_cheating_tokens must be >= 1")
        if self.iterations < 1:
            raise ConfigInvalid("iterations must be >= 1")
        if self.candidates_per_flip < 1:
            raise ConfigInvalid("candidates_per_flip must be >= 1")
        if self.docs_per_target < 1:
            raise ConfigInvalid("docs_per_target must be >= 1")
        self.lengths = tuple(int(x) for x in self.lengths)
        if any(x < 1 for x in self.lengths):
            raise ConfigInvalid("lengths must be positive")


@dataclass
class PoisonRecord:
    document: Document
    target: str
    objective_before: float
    objective_after: float


@dataclass
class HotflipResult:
    document: Document
    trace: list[float] = field(default_factory=list)


def _stable_int(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")


def _objective(params, q_mean: np.ndarray, ids) -> float:
    return similarity(q_mean, encode(params, ids))


def _mean_query_vec(pair: EncoderPair, queries) -> np.ndarray:
    vecs = [encode(pair.query, q.token_ids) for q in queries]
    return np.mean(np.stack(vecs), axis=0)


def hotflip_optimize(pair: EncoderPair, queries, doc: Document, mutable_positions,
                     iterations: int, candidates: int, seed: int,
                     exclude_ids=frozenset(), vocab: Vocabulary | None = None) -> HotflipResult:
    """Optimize the mutable positions of doc against the mean query objective."""
    if not queries:
        raise EmptyInput("need at least one objective query")
    mutable = sorted(set(int(p) for p in mutable_positions))
    T = len(doc.token_ids)
    if not mutable:
        raise ConfigInvalid("no mutable positions")
    if mutable[0] < 0 or mutable[-1] >= T:
        raise ConfigInvalid("mutable position outside document")

    params = pair.doc
    q_mean = _mean_query_vec(pair, queries)
    ids = np.array(doc.token_ids, dtype=np.int64)
    V = params.V
    blocked = np.zeros(V, dtype=bool)
    for e in exclude_ids:
        blocked[e] = True
    all_ids = np.arange(V)

    current = _objective(params, q_mean, ids)
    trace = [current]
    rng = np.random.default_rng(seed)
    order = rng.permutation(mutable)
    for it in range(iterations):
        pos = int(order[it % len(order)])
        grad = kernels.grad_at(params.E, params.w, params.scale, ids, q_mean, pos)
        fo = params.E @ grad
        fo[blocked] = -np.inf
        ranked = np.lexsort((all_ids, -fo))
        cand = ranked[np.isfinite(fo[ranked])][:candidates]
        scores = kernels.substitution_scores(params.E, params.w, params.scale,
                                             ids, pos, cand, q_mean)
        best = int(np.argmax(scores))
        if scores[best] > current:
            ids[pos] = cand[best]
            current = float(scores[best])
        trace.append(current)

    text = vocab.render(ids) if vocab is not None else " ".join(str(i) for i in ids)
    out = Document(doc_id=doc.doc_id, token_ids=tuple(int(i) for i in ids),
                   source_text=text, label=doc.label,
                   cheating_positions=doc.cheating_positions,
                   payload_positions=doc.payload_positions,
                   attack_mode=doc.attack_mode)
    return HotflipResult(document=out, trace=trace)


def _checked_payload_ids(text: str, vocab: Vocabulary, what: str) -> list[int]:
    ids = tokenize(text, vocab)
    if not ids:
        raise ConfigInvalid(f"{what} tokenizes to nothing")
    if vocab.unk_id in ids or vocab.mask_id in ids:
        raise ConfigInvalid(f"{what} contains out-of-vocabulary words")
    return ids


def auto_payload(vocab: Vocabulary, n_tokens: int, seed: int) -> str:
    """Deterministic stand-in payload built from real vocabulary words."""
    rng = np.random.default_rng(seed)
    allowed = [i for i in range(vocab.size) if i not in (vocab.mask_id, vocab.unk_id)]
    picks = rng.choice(len(allowed), size=n_tokens, replace=True)
    return " ".join(vocab.tokens[allowed[int(i)]] for i in picks)


def _random_cheating(rng, vocab: Vocabulary, n: int) -> list[int]:
    allowed = np.array([i for i in range(vocab.size)
                        if i not in (vocab.mask_id, vocab.unk_id)])
    return [int(allowed[i]) for i in rng.integers(0, len(allowed), size=n)]


def _sample_tag(queries) -> str:
    """Short stable tag for a query sample, keeps doc ids distinct per sample."""
    joined = " ".join(sorted(q.query_id for q in queries))
    return hashlib.sha256(joined.encode()).hexdigest()[:6]


def cohort_triggered_queries(queries, max_cohorts: int = 6) -> list[list]:
    """Group trigger-bearing queries into cohorts that share a relevant document.

    Trigger-scoped recipes optimize a mean-similarity objective, which only
    concentrates when the sampled queries are mutually similar. Grouping by
    shared relevance judgments gives such samples without touching the
    encoder. Returns the largest cohorts first (ties broken by the smallest
    member query id), at most max_cohorts of them.
    """
    if max_cohorts < 1:
        raise ConfigInvalid("max_cohorts must be >= 1")
    pool = [q for q in queries if q.trigger is not None]
    by_doc: dict[str, set[str]] = {}
    for q in pool:
        for d in q.qrels:
            by_doc.setdefault(d, set()).add(q.query_id)
    # union-find over queries linked by any shared qrel document
    parent = {q.query_id: q.query_id for q in pool}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for members in by_doc.values():
        ids = sorted(members)
        for other in ids[1:]:
            ra, rb = find(ids[0]), find(other)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    groups: dict[str, list] = {}
    for q in pool:
        groups.setdefault(find(q.query_id), []).append(q)
    ordered = sorted(groups.values(),
                     key=lambda g: (-len(g), min(q.query_id for q in g)))
    return [sorted(g, key=lambda q: q.query_id) for g in ordered[:max_cohorts]]


def craft_poisonedrag(target_query, payload_text: str, config: AttackConfig,
                      pair: EncoderPair, vocab: Vocabulary) -> list[PoisonRecord]:
    """Payload followed by a cheating region optimized for one query."""
    payload = _checked_payload_ids(payload_text, vocab, "payload")
    S = config.num_cheating_tokens
    exclude = frozenset((vocab.mask_id, vocab.unk_id))
    records = []
    for j in range(config.docs_per_target):
        rng = np.random.default_rng((config.seed, j, _stable_int(target_query.query_id)))
        cheat = _random_cheating(rng, vocab, S)
        ids0 = [*payload, *cheat]
        mutable = range(len(payload), len(payload) + S)
        doc0 = Document(doc_id=f"poison-prag-{target_query.query_id}-{j}",
                        token_ids=tuple(ids0), source_text=vocab.render(ids0),
                        label="poisoned",
                        cheating_positions=frozenset(mutable),
                        payload_positions=frozenset(range(len(payload))),
                        attack_mode="poisonedrag")
        res = hotflip_optimize(pair, [target_query], doc0, mutable,
                               config.iterations, config.candidates_per_flip,
                               seed=config.seed + 7919 * j + _stable_int(target_query.query_id),
                               exclude_ids=exclude, vocab=vocab)
        records.append(PoisonRecord(document=res.document,
                                    target=target_query.query_id,
                                    objective_before=res.trace[0],
                                    objective_after=res.trace[-1]))
    return records


def craft_phantom(trigger_id: int, command_text: str, config: AttackConfig,
                  pair: EncoderPair, vocab: Vocabulary, triggered_queries) -> list[PoisonRecord]:
    """Cheating prefix optimized against the mean triggered query, then command."""
    triggered = list(triggered_queries)
    if not triggered:
        raise ConfigInvalid("no triggered queries supplied")
    for q in triggered:
        if trigger_id not in q.token_ids:
            raise ConfigInvalid(f"query {q.query_id} does not carry the trigger")
    command = _checked_payload_ids(command_text, vocab, "command")
    S = config.num_cheating_tokens
    exclude = frozenset((vocab.mask_id, vocab.unk_id))
    records = []
    tag = _sample_tag(triggered)
    for j in range(config.docs_per_target):
        rng = np.random.default_rng((config.seed, j, trigger_id))
        cheat = _random_cheating(rng, vocab, S)
        ids0 = [*cheat, *command]
        mutable = range(S)
        doc0 = Document(doc_id=f"poison-phantom-{trigger_id}-{tag}-{j}",
                        token_ids=tuple(ids0), source_text=vocab.render(ids0),
                        label="poisoned",
                        cheating_positions=frozenset(mutable),
                        payload_positions=frozenset(range(S, S + len(command))),
                        attack_mode="phantom")
        res = hotflip_optimize(pair, triggered, doc0, mutable,
                               config.iterations, config.candidates_per_flip,
                               seed=config.seed + 104729 * j + trigger_id,
                               exclude_ids=exclude, vocab=vocab)
        records.append(PoisonRecord(document=res.document,
                                    target=f"trigger:{trigger_id}",
                                    objective_before=res.trace[0],
                                    objective_after=res.trace[-1]))
    return records


def craft_advdecoding(trigger_id: int, command_text: str, config: AttackConfig,
                      pair: EncoderPair, vocab: Vocabulary, mlm,
                      triggered_queries) -> list[PoisonRecord]:
    """Greedy generation: each appended token comes from the masked-token
    model's top candidates and maximizes the exact retrieval objective.

    One document per configured total length; docs_per_target is not used.
    """
    triggered = list(triggered_queries)
    if not triggered:
        raise ConfigInvalid("no triggered queries supplied")
    command = _checked_payload_ids(command_text, vocab, "command")
    params = pair.doc
    q_mean = _mean_query_vec(pair, triggered)
    specials = (vocab.mask_id, vocab.unk_id)
    tag = _sample_tag(triggered)
    records = []
    for L in config.lengths:
        gen_len = L - len(command)
        if gen_len < 1:
            raise ConfigInvalid(f"length {L} leaves no room for the command "
                                f"({len(command)} tokens)")
        ids: list[int] = []
        for _ in range(gen_len):
            probe = np.array([*ids, 0], dtype=np.int64)
            pos = len(ids)
            cands = [c for c in mlm.top_candidates(probe, pos,
                                                   config.candidates_per_flip + len(specials))
                     if c not in specials][:config.candidates_per_flip]
            scores = kernels.substitution_scores(params.E, params.w, params.scale,
                                                 probe, pos,
                                                 np.array(cands, dtype=np.int64), q_mean)
            ids.append(int(cands[int(np.argmax(scores))]))
        full = [*ids, *command]
        before = _objective(params, q_mean, np.array([*command], dtype=np.int64))
        after = _objective(params, q_mean, np.array(full, dtype=np.int64))
        doc = Document(doc_id=f"poison-adv-{trigger_id}-{tag}-{L}",
                       token_ids=tuple(full), source_text=vocab.render(full),
                       label="poisoned",
                       cheating_positions=frozenset(range(gen_len)),
                       payload_positions=frozenset(range(gen_len, L)),
                       attack_mode="advdecoding")
        records.append(PoisonRecord(document=doc, target=f"trigger:{trigger_id}",
                                    objective_before=before, objective_after=after))
    return records


def inject(documents, records) -> list[Document]:
    """New document list with poisons appended; existing ids must not collide."""
    existing = {d.doc_id for d in documents}
    out = list(documents)
    for rec in records:
        doc = rec.document
        if doc.doc_id in existing:
            raise DuplicateDocId(doc.doc_id)
        existing.add(doc.doc_id)
        out.append(doc)
    return out


def save_poisons(records, path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in records:
                doc = rec.document
                fh.write(json.dumps({
                    "doc_id": doc.doc_id,
                    "text": doc.source_text,
                    "cheating_positions": sorted(doc.cheating_positions),
                    "payload_positions": sorted(doc.payload_positions),
                    "attack_mode": doc.attack_mode,
                    "target": rec.target,
                    "objective_before": rec.objective_before,
                    "objective_after": rec.objective_after,
                }, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_poisons(path, vocab: Vocabulary) -> list[PoisonRecord]:
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
                for fld in ("doc_id", "text", "cheating_positions", "attack_mode", "target"):
                    if fld not in obj:
                        raise MissingField(fld)
                ids = tokenize(obj["text"], vocab)
                if not ids:
                    raise MalformedLine(n, "poison tokenizes to nothing")
                doc = Document(doc_id=obj["doc_id"], token_ids=tuple(ids),
                               source_text=obj["text"], label="poisoned",
                               cheating_positions=frozenset(obj["cheating_positions"]),
                               payload_positions=frozenset(obj.get("payload_positions", [])),
                               attack_mode=obj["attack_mode"])
                records.append(PoisonRecord(document=doc, target=obj["target"],
                                            objective_before=float(obj.get("objective_before", 0.0)),
                                            objective_after=float(obj.get("objective_after", 0.0))))
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return records
