"""Filtering defenses for the retrieval stage.

The gradient/masked-probability defense works per (query, document)
pair: token positions whose similarity-gradient norms rise strictly
above the document mean are ranked by norm and the top N become key
tokens; each key position is scored by the masked-token model; the
mean of the M lowest probabilities is the document's P-score.  A
document is delivered only if its P-score exceeds tau strictly, where
tau = lambda times the mean P-score over K calibration pairs of
genuinely relevant text.

Perplexity and embedding-norm filters are included as baselines; both
are query-independent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderPair, encode, fingerprint_pair, gradient_profile, GradientProfile
from .errors import (
    ConfigInvalid,
    EmptyCalibrationSet,
    FingerprintMismatch,
    IoError,
    FormatVersionMismatch,
)
from .index import RankedList
from .mlm import perplexity

RANDOM_PAIRS_PER_QUERY = 10


@dataclass
class GmtpConfig:
    n_key_tokens: int = 10
    m_lowest: int = 5
    lam: float = 0.1
    k_calibration: int = 200
    calibration_mode: str = "relevant"

    def __post_init__(self):
        if self.n_key_tokens < 1:
            raise ConfigInvalid("n_key_tokens must be >= 1")
        if self.m_lowest < 1:
            raise ConfigInvalid("m_lowest must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigInvalid("lambda must lie in [0, 1]")
        if self.k_calibration < 1:
            raise ConfigInvalid("k_calibration must be >= 1")
        if self.calibration_mode not in ("relevant", "random"):
            raise ConfigInvalid("calibration_mode must be 'relevant' or 'random'")


@dataclass
class PScoreReport:
    doc_id: str
    key_positions: tuple[int, ...]
    masked_probs: tuple[float, ...]
    p_score: float


@dataclass
class DefenseVerdict:
    doc_id: str
    query_id: str
    method: str
    score: float
    decision: str  # "keep" | "filter"


@dataclass
class Threshold:
    tau: float
    lam: float
    k_used: int
    calibration_mode: str
    mean_pscore: float
    short_calibration: bool
    encoder_fingerprint: str
    mlm_id: str
    n_key_tokens: int
    m_lowest: int

    def __post_init__(self):
        if abs(self.tau - self.lam * self.mean_pscore) > 1e-12 * max(1.0, abs(self.tau)):
            raise ConfigInvalid("tau must equal lambda * mean_pscore")


def key_tokens(profile: GradientProfile, n: int) -> list[int]:
    """Positions ranked by gradient norm among those strictly above the mean.

    Falls back to the single highest-norm position when nothing clears
    the mean (a constant profile).
    """
    if n < 1:
        raise ConfigInvalid("n must be >= 1")
    norms = profile.norms
    above = [i for i in range(len(norms)) if norms[i] > profile.mean]
    if not above:
        return [int(np.argmax(norms))]
    above.sort(key=lambda i: (-norms[i], i))
    return above[:n]


def p_score(doc_id: str, token_ids, key_positions, mlm, m: int) -> PScoreReport:
    """Mean of the m lowest masked-token probabilities at the key positions."""
    if m < 1:
        raise ConfigInvalid("m must be >= 1")
    probs = tuple(mlm.masked_prob(token_ids, p) for p in key_positions)
    lowest = sorted(probs)[:m]
    return PScoreReport(doc_id=doc_id, key_positions=tuple(int(p) for p in key_positions),
                        masked_probs=probs, p_score=float(np.mean(lowest)))


def score_document(q_vec: np.ndarray, doc, pair: EncoderPair, mlm,
                   config: GmtpConfig) -> PScoreReport:
    profile = gradient_profile(pair.doc, q_vec, doc.doc_id, doc.token_ids)
    kp = key_tokens(profile, config.n_key_tokens)
    return p_score(doc.doc_id, doc.token_ids, kp, mlm, config.m_lowest)


def calibration_pool(bundle, mode: str, seed: int):
    """Deterministic pool of (query, document) calibration pairs.

    relevant: every positive qrel pair of every calibration query.
    random: RANDOM_PAIRS_PER_QUERY uniform documents per query, drawn
    from per-query streams so the pool does not depend on K.
    """
    queries = bundle.queries_in("calibration")
    docs = bundle.doc_map()
    pool = []
    if mode == "relevant":
        for q in queries:
            for doc_id in sorted(q.qrels):
                if q.qrels[doc_id] > 0 and doc_id in docs:
                    pool.append((q, docs[doc_id]))
    elif mode == "random":
        all_docs = bundle.documents
        for qi, q in enumerate(queries):
            rng = np.random.default_rng((seed, qi))
            for j in rng.integers(0, len(all_docs), size=RANDOM_PAIRS_PER_QUERY):
                pool.append((q, all_docs[int(j)]))
    else:
        raise ConfigInvalid(f"unknown calibration mode {mode!r}")
    return pool


def calibrate_tau(pair: EncoderPair, mlm, bundle, config: GmtpConfig,
                  seed: int) -> Threshold:
    """tau = lambda * mean P-score over K sampled calibration pairs.

    Pairs are taken as a prefix of one seeded permutation, so doubling
    K extends the sample instead of replacing it.
    """
    pool = calibration_pool(bundle, config.calibration_mode, seed)
    if not pool:
        raise EmptyCalibrationSet("no calibration pairs available")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(pool))
    short = len(pool) < config.k_calibration
    chosen = perm if short else perm[:config.k_calibration]
    scores = []
    qvec_cache: dict[str, np.ndarray] = {}
    for i in chosen:
        q, doc = pool[int(i)]
        if q.query_id not in qvec_cache:
            qvec_cache[q.query_id] = encode(pair.query, q.token_ids)
        rep = score_document(qvec_cache[q.query_id], doc, pair, mlm, config)
        scores.append(rep.p_score)
    mean = float(np.mean(scores))
    return Threshold(tau=config.lam * mean, lam=config.lam, k_used=len(chosen),
                     calibration_mode=config.calibration_mode, mean_pscore=mean,
                     short_calibration=short,
                     encoder_fingerprint=fingerprint_pair(pair),
                     mlm_id=mlm.mlm_id, n_key_tokens=config.n_key_tokens,
                     m_lowest=config.m_lowest)


def _check_threshold(threshold: Threshold, pair: EncoderPair, mlm,
                     config: GmtpConfig) -> None:
    if threshold.encoder_fingerprint != fingerprint_pair(pair):
        raise FingerprintMismatch("threshold was calibrated with a different encoder")
    if threshold.mlm_id != mlm.mlm_id:
        raise FingerprintMismatch("threshold was calibrated with a different mlm")
    if (threshold.n_key_tokens, threshold.m_lowest) != (config.n_key_tokens, config.m_lowest):
        raise FingerprintMismatch("threshold was calibrated with different N/M settings")


def gmtp_filter(query, ranked: RankedList, doc_map, pair: EncoderPair, mlm,
                config: GmtpConfig, threshold: Threshold):
    """Verdicts and P-score reports for each entry of a ranked list.

    A document is kept only when its P-score strictly exceeds tau.
    """
    _check_threshold(threshold, pair, mlm, config)
    q_vec = encode(pair.query, query.token_ids)
    verdicts, reports = [], []
    for entry in ranked.entries:
        if entry.doc_id not in doc_map:
            raise ConfigInvalid(f"ranked doc {entry.doc_id} not in corpus")
        rep = score_document(q_vec, doc_map[entry.doc_id], pair, mlm, config)
        decision = "keep" if rep.p_score > threshold.tau else "filter"
        verdicts.append(DefenseVerdict(doc_id=entry.doc_id, query_id=query.query_id,
                                       method="gmtp", score=rep.p_score,
                                       decision=decision))
        reports.append(rep)
    return verdicts, reports


def ppl_filter(documents, causal_model, threshold: float):
    """Filter documents whose perplexity exceeds the threshold."""
    if threshold <= 1:
        raise ConfigInvalid("perplexity threshold must exceed 1")
    out = []
    for doc in documents:
        ppl = perplexity(causal_model, doc.token_ids)
        out.append(DefenseVerdict(doc_id=doc.doc_id, query_id="", method="ppl",
                                  score=float(ppl),
                                  decision="filter" if ppl > threshold else "keep"))
    return out


def l2_filter(documents, pair: EncoderPair, threshold: float):
    """Filter documents whose pooled-embedding l2 norm exceeds the threshold."""
    if threshold <= 0:
        raise ConfigInvalid("l2 threshold must be positive")
    out = []
    for doc in documents:
        norm = float(np.linalg.norm(encode(pair.doc, doc.token_ids)))
        out.append(DefenseVerdict(doc_id=doc.doc_id, query_id="", method="l2norm",
                                  score=norm,
                                  decision="filter" if norm > threshold else "keep"))
    return out


def percentile_threshold(values, percentile: float = 99.0) -> float:
    """Threshold at a clean-corpus percentile; filters at most the tail."""
    if not 0 < percentile < 100:
        raise ConfigInvalid("percentile must lie in (0, 100)")
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise EmptyCalibrationSet("no values to take a percentile of")
    return float(np.percentile(arr, percentile))


def save_threshold(threshold: Threshold, path) -> None:
    payload = {
        "tau": threshold.tau,
        "lambda": threshold.lam,
        "k_used": threshold.k_used,
        "calibration_mode": threshold.calibration_mode,
        "mean_pscore": threshold.mean_pscore,
        "short_calibration": threshold.short_calibration,
        "encoder_fingerprint": threshold.encoder_fingerprint,
        "mlm_id": threshold.mlm_id,
        "n_key_tokens": threshold.n_key_tokens,
        "m_lowest": threshold.m_lowest,
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_threshold(path) -> Threshold:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise FormatVersionMismatch(f"not a threshold file: {exc.msg}") from exc
    try:
        return Threshold(tau=obj["tau"], lam=obj["lambda"], k_used=obj["k_used"],
                         calibration_mode=obj["calibration_mode"],
                         mean_pscore=obj["mean_pscore"],
                         short_calibration=obj["short_calibration"],
                         encoder_fingerprint=obj["encoder_fingerprint"],
                         mlm_id=obj["mlm_id"],
                         n_key_tokens=obj["n_key_tokens"],
                         m_lowest=obj["m_lowest"])
    except KeyError as exc:
        raise FormatVersionMismatch(f"threshold file missing {exc}") from exc
