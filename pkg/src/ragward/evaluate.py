"""Retrieval-phase experiment harness and metrics.

run_experiment executes the whole protocol: inject poisons, build the
clean and poisoned indexes, retrieve naive top-k lists, calibrate each
defense, score and filter the lists, refill them back to k through the
same defense, and compute metrics against ground-truth labels.

Wall-clock timings are collected separately from metric values so the
metric reports stay byte-identical across runs.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attack import PoisonRecord, inject
from .corpus import CorpusBundle
from .defense import (
    DefenseVerdict,
    GmtpConfig,
    PScoreReport,
    Threshold,
    calibrate_tau,
    gmtp_filter,
    l2_filter,
    percentile_threshold,
    ppl_filter,
    score_document,
)
from .encoder import EncoderPair, encode
from .errors import (
    ConfigInvalid,
    EmptyClass,
    IoError,
    NoCleanDocuments,
    NoPoisonedDocuments,
)
from .index import RankedEntry, RankedList, build_index, refill, top_k
from .mlm import perplexity

HIST_EDGES = tuple(float(x) for x in np.logspace(-9, 0, 37))


def filtering_rate(naive_poison: int, defended_poison: int) -> float | None:
    """Fraction of naively retrieved poisons the defense removed.

    None when no poison was retrieved naively (undefined).  Negative
    when the defended list ends up with more poisons than the naive one
    (refill can surface poisons ranked below k).
    """
    if naive_poison < 0 or defended_poison < 0:
        raise ConfigInvalid("poison counts cannot be negative")
    if naive_poison == 0:
        return None
    return (naive_poison - defended_poison) / naive_poison


def ndcg_at_k(ranked_doc_ids, qrels: dict[str, int], k: int) -> float:
    """Standard nDCG with gain/log2(rank+1) discounting; 0 when no
    document has positive gain."""
    if k < 1:
        raise ConfigInvalid("k must be >= 1")
    gains = sorted((g for g in qrels.values() if g > 0), reverse=True)
    if not gains:
        return 0.0
    dcg = 0.0
    for i, doc_id in enumerate(list(ranked_doc_ids)[:k]):
        g = qrels.get(doc_id, 0)
        if g > 0:
            dcg += g / math.log2(i + 2)
    idcg = sum(g / math.log2(i + 2) for i, g in enumerate(gains[:k]))
    return dcg / idcg


def key_token_precision(reports, docs_by_id) -> float:
    """Micro precision of selected key tokens against cheating positions."""
    reports = list(reports)
    if not reports:
        raise NoPoisonedDocuments("no reports over poisoned documents")
    hit, tot = 0, 0
    for rep in reports:
        doc = docs_by_id[rep.doc_id]
        if doc.label != "poisoned":
            raise ConfigInvalid(f"{rep.doc_id} is not a poisoned document")
        hit += len(set(rep.key_positions) & doc.cheating_positions)
        tot += len(rep.key_positions)
    if tot == 0:
        raise NoPoisonedDocuments("reports selected no key tokens")
    return hit / tot


def false_positive_rate(verdicts, labels: dict[str, str]) -> float:
    """Fraction of clean documents that the defense filtered."""
    clean = [v for v in verdicts if labels.get(v.doc_id) == "clean"]
    if not clean:
        raise NoCleanDocuments("no verdicts over clean documents")
    return sum(1 for v in clean if v.decision == "filter") / len(clean)


@dataclass
class PScoreStats:
    n: int
    mean: float
    median: float
    q05: float
    q25: float
    q75: float
    q95: float
    hist_counts: tuple[int, ...]


def pscore_stats(reports, class_of: dict[str, str], classes=None):
    """Per-class P-score summaries with a fixed log-spaced histogram."""
    by_class: dict[str, list[float]] = {}
    for rep in reports:
        cls = class_of.get(rep.doc_id)
        if cls is not None:
            by_class.setdefault(cls, []).append(rep.p_score)
    wanted = classes if classes is not None else sorted(by_class)
    out = {}
    for cls in wanted:
        vals = by_class.get(cls, [])
        if not vals:
            raise EmptyClass(f"no P-scores for class {cls!r}")
        arr = np.asarray(vals, dtype=np.float64)
        counts, _ = np.histogram(np.clip(arr, HIST_EDGES[0], HIST_EDGES[-1]),
                                 bins=np.asarray(HIST_EDGES))
        out[cls] = PScoreStats(
            n=len(vals), mean=float(arr.mean()), median=float(np.median(arr)),
            q05=float(np.percentile(arr, 5)), q25=float(np.percentile(arr, 25)),
            q75=float(np.percentile(arr, 75)), q95=float(np.percentile(arr, 95)),
            hist_counts=tuple(int(c) for c in counts))
    return out


@dataclass
class DefensePlan:
    method: str                       # "gmtp" | "ppl" | "l2norm"
    gmtp: GmtpConfig | None = None
    threshold_value: float | None = None
    percentile: float = 99.0

    def __post_init__(self):
        if self.method not in ("gmtp", "ppl", "l2norm"):
            raise ConfigInvalid(f"unknown defense {self.method!r}")
        if self.method == "gmtp" and self.gmtp is None:
            self.gmtp = GmtpConfig()


@dataclass
class MetricsReport:
    method: str
    n_queries: int
    naive_poison_hits: int
    defended_poison_hits: int
    fr_micro: float | None
    fr_macro: float | None
    fr_undefined_queries: int
    ndcg_clean: float
    ndcg_naive: float
    ndcg_defended: float
    key_token_precision: float | None
    fpr: float | None
    underfilled_queries: int
    pscore: dict | None
    latency: dict = field(default_factory=dict)


@dataclass
class ExperimentResult:
    config: dict
    labels: dict[str, str]
    clean: dict[str, RankedList]
    naive: dict[str, RankedList]
    defended: dict[str, dict[str, RankedList]]
    verdicts: dict[str, list[DefenseVerdict]]
    reports: dict[str, list[PScoreReport]]
    thresholds: dict[str, object]
    metrics: dict[str, MetricsReport]
    timings: dict[str, float]


def _poison_hits(ranked: RankedList, labels) -> int:
    return sum(1 for e in ranked.entries if labels.get(e.doc_id) == "poisoned")


def _macro_fr(per_query: list[tuple[int, int]]) -> tuple[float | None, int]:
    rates = []
    undefined = 0
    for nv, df in per_query:
        fr = filtering_rate(nv, df)
        if fr is None:
            undefined += 1
        else:
            rates.append(fr)
    return (float(np.mean(rates)) if rates else None), undefined


def run_experiment(bundle: CorpusBundle, pair: EncoderPair,
                   poisons: list[PoisonRecord], plans: list[DefensePlan],
                   mlm=None, causal=None, k: int = 10, seed: int = 0,
                   threads: int = 1) -> ExperimentResult:
    if k < 1:
        raise ConfigInvalid("k must be >= 1")
    if threads < 1:
        raise ConfigInvalid("threads must be >= 1")
    if any(p.method == "gmtp" for p in plans) and mlm is None:
        raise ConfigInvalid("gmtp plan requires a masked-token model")
    if any(p.method == "ppl" for p in plans) and causal is None:
        raise ConfigInvalid("ppl plan requires a causal model")

    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    injected = inject(bundle.documents, poisons)
    doc_map = {d.doc_id: d for d in injected}
    labels = {d.doc_id: d.label for d in injected}
    clean_index = build_index(pair, bundle.documents)
    poison_index = build_index(pair, injected)
    timings["index"] = time.perf_counter() - t0

    eval_queries = bundle.queries_in("eval")
    t0 = time.perf_counter()
    qvecs = {q.query_id: encode(pair.query, q.token_ids) for q in eval_queries}
    clean_lists = {q.query_id: top_k(clean_index, qvecs[q.query_id], k, q.query_id)
                   for q in eval_queries}
    naive_lists = {q.query_id: top_k(poison_index, qvecs[q.query_id], k, q.query_id)
                   for q in eval_queries}
    timings["retrieve"] = time.perf_counter() - t0

    defended: dict[str, dict[str, RankedList]] = {}
    verdicts: dict[str, list[DefenseVerdict]] = {}
    reports: dict[str, list[PScoreReport]] = {}
    thresholds: dict[str, object] = {}
    metrics: dict[str, MetricsReport] = {}

    ndcg_clean = float(np.mean([ndcg_at_k(clean_lists[q.query_id].doc_ids(), q.qrels, k)
                                for q in eval_queries]))
    ndcg_naive = float(np.mean([ndcg_at_k(naive_lists[q.query_id].doc_ids(), q.qrels, k)
                                for q in eval_queries]))

    naive_per_query = [_poison_hits(naive_lists[q.query_id], labels) for q in eval_queries]
    metrics["naive"] = MetricsReport(
        method="naive", n_queries=len(eval_queries),
        naive_poison_hits=sum(naive_per_query), defended_poison_hits=sum(naive_per_query),
        fr_micro=None, fr_macro=None, fr_undefined_queries=0,
        ndcg_clean=ndcg_clean, ndcg_naive=ndcg_naive, ndcg_defended=ndcg_naive,
        key_token_precision=None, fpr=None,
        underfilled_queries=0, pscore=None)

    for plan in plans:
        method = plan.method
        t0 = time.perf_counter()
        if method == "gmtp":
            threshold = calibrate_tau(pair, mlm, bundle, plan.gmtp, seed)
        elif method == "ppl":
            if plan.threshold_value is not None:
                threshold = float(plan.threshold_value)
            else:
                vals = [perplexity(causal, d.token_ids) for d in bundle.documents]
                threshold = percentile_threshold(vals, plan.percentile)
        else:
            if plan.threshold_value is not None:
                threshold = float(plan.threshold_value)
            else:
                norms = np.linalg.norm(clean_index.embeddings, axis=1)
                threshold = percentile_threshold(norms, plan.percentile)
        thresholds[method] = threshold
        timings[f"calibrate:{method}"] = time.perf_counter() - t0

        # query-independent verdict cache for the baselines
        static_cache: dict[str, DefenseVerdict] = {}

        def static_verdict(doc_id: str) -> DefenseVerdict:
            if doc_id not in static_cache:
                doc = doc_map[doc_id]
                if method == "ppl":
                    v = ppl_filter([doc], causal, threshold)[0]
                else:
                    v = l2_filter([doc], pair, threshold)[0]
                static_cache[doc_id] = v
            return static_cache[doc_id]

        def defend_query(query):
            """Returns (query_id, ranked, verdicts, reports, seconds)."""
            t_start = time.perf_counter()
            naive = naive_lists[query.query_id]
            q_verdicts: list[DefenseVerdict] = []
            q_reports: list[PScoreReport] = []
            if method == "gmtp":
                vs, reps = gmtp_filter(query, naive, doc_map, pair, mlm,
                                       plan.gmtp, threshold)
                q_verdicts.extend(vs)
                q_reports.extend(reps)
                kept = [RankedEntry(e.doc_id, e.score)
                        for e, v in zip(naive.entries, vs) if v.decision == "keep"]
                excluded = {v.doc_id for v in vs if v.decision == "filter"}
                q_vec = qvecs[query.query_id]

                def admit(doc_id, score):
                    rep = score_document(q_vec, doc_map[doc_id], pair, mlm, plan.gmtp)
                    decision = "keep" if rep.p_score > threshold.tau else "filter"
                    q_verdicts.append(DefenseVerdict(doc_id=doc_id,
                                                     query_id=query.query_id,
                                                     method="gmtp",
                                                     score=rep.p_score,
                                                     decision=decision))
                    q_reports.append(rep)
                    return decision == "keep"
            else:
                kept, excluded = [], set()
                for e in naive.entries:
                    v = static_verdict(e.doc_id)
                    q_verdicts.append(DefenseVerdict(doc_id=e.doc_id,
                                                     query_id=query.query_id,
                                                     method=method, score=v.score,
                                                     decision=v.decision))
                    if v.decision == "keep":
                        kept.append(RankedEntry(e.doc_id, e.score))
                    else:
                        excluded.add(e.doc_id)

                def admit(doc_id, score):
                    v = static_verdict(doc_id)
                    q_verdicts.append(DefenseVerdict(doc_id=doc_id,
                                                     query_id=query.query_id,
                                                     method=method, score=v.score,
                                                     decision=v.decision))
                    return v.decision == "keep"

            ranked = refill(poison_index, qvecs[query.query_id], kept, k,
                            excluded, admit=admit, query_id=query.query_id)
            return query.query_id, ranked, q_verdicts, q_reports, time.perf_counter() - t_start

        t0 = time.perf_counter()
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool_ex:
                rows = list(pool_ex.map(defend_query, eval_queries))
        else:
            rows = [defend_query(q) for q in eval_queries]
        timings[f"defend:{method}"] = time.perf_counter() - t0

        defended[method] = {qid: ranked for qid, ranked, _, _, _ in rows}
        verdicts[method] = [v for _, _, vs, _, _ in rows for v in vs]
        reports[method] = [r for _, _, _, reps, _ in rows for r in reps]
        timings[f"defend:{method}:per_query_total"] = sum(sec for *_, sec in rows)

        metrics[method] = _method_metrics(
            method, eval_queries, labels, doc_map, k,
            clean_lists, naive_lists, defended[method],
            verdicts[method], reports[method], ndcg_clean, ndcg_naive)
        metrics[method].latency = {
            "calibrate_s": timings[f"calibrate:{method}"],
            "defend_s": timings[f"defend:{method}"],
        }

    config = {
        "k": k, "seed": seed, "threads": threads,
        "n_documents": len(bundle.documents), "n_poisons": len(poisons),
        "n_eval_queries": len(eval_queries),
        "attack_modes": sorted({p.document.attack_mode for p in poisons if p.document.attack_mode}),
        "defenses": [p.method for p in plans],
    }
    return ExperimentResult(config=config, labels=labels, clean=clean_lists,
                            naive=naive_lists, defended=defended,
                            verdicts=verdicts, reports=reports,
                            thresholds=thresholds, metrics=metrics,
                            timings=timings)


def _method_metrics(method, eval_queries, labels, doc_map, k, clean_lists,
                    naive_lists, defended_lists, verdicts, reports,
                    ndcg_clean, ndcg_naive) -> MetricsReport:
    per_query = []
    for q in eval_queries:
        nv = _poison_hits(naive_lists[q.query_id], labels)
        df = _poison_hits(defended_lists[q.query_id], labels)
        per_query.append((nv, df))
    naive_total = sum(nv for nv, _ in per_query)
    def_total = sum(df for _, df in per_query)
    fr_micro = filtering_rate(naive_total, def_total)
    fr_macro, undefined = _macro_fr(per_query)

    ndcg_def = float(np.mean([ndcg_at_k(defended_lists[q.query_id].doc_ids(), q.qrels, k)
                              for q in eval_queries]))

    naive_members = {(ql.query_id, e.doc_id)
                     for ql in naive_lists.values() for e in ql.entries}
    topk_verdicts = [v for v in verdicts if (v.query_id, v.doc_id) in naive_members]
    try:
        fpr = false_positive_rate(topk_verdicts, labels)
    except NoCleanDocuments:
        fpr = None

    precision = None
    pscore = None
    if method == "gmtp":
        seen = set()
        poisoned_reports = []
        for v, rep in zip(verdicts, reports):
            key = (v.query_id, rep.doc_id)
            if key in seen or (v.query_id, rep.doc_id) not in naive_members:
                continue
            seen.add(key)
            if labels.get(rep.doc_id) == "poisoned":
                poisoned_reports.append(rep)
        if poisoned_reports:
            precision = key_token_precision(poisoned_reports, doc_map)

        class_of = {}
        rel_cache = {q.query_id: {d for d, g in q.qrels.items() if g > 0}
                     for q in eval_queries}
        stats_reports = []
        for v, rep in zip(verdicts, reports):
            if (v.query_id, rep.doc_id) not in naive_members:
                continue
            if labels.get(rep.doc_id) == "poisoned":
                cls = "poisoned"
            elif rep.doc_id in rel_cache.get(v.query_id, set()):
                cls = "relevant"
            else:
                cls = "clean"
            # key stats by synthetic per-pair id so one doc can appear per query
            tagged = PScoreReport(doc_id=f"{v.query_id}::{rep.doc_id}",
                                  key_positions=rep.key_positions,
                                  masked_probs=rep.masked_probs,
                                  p_score=rep.p_score)
            class_of[tagged.doc_id] = cls
            stats_reports.append(tagged)
        if stats_reports:
            stats = pscore_stats(stats_reports, class_of)
            pscore = {cls: s.__dict__ for cls, s in stats.items()}

    underfilled = sum(1 for ql in defended_lists.values() if ql.underfilled)
    return MetricsReport(method=method, n_queries=len(eval_queries),
                         naive_poison_hits=naive_total,
                         defended_poison_hits=def_total,
                         fr_micro=fr_micro, fr_macro=fr_macro,
                         fr_undefined_queries=undefined,
                         ndcg_clean=ndcg_clean, ndcg_naive=ndcg_naive,
                         ndcg_defended=ndcg_def,
                         key_token_precision=precision, fpr=fpr,
                         underfilled_queries=underfilled, pscore=pscore)


_METRIC_COLUMNS = (
    "method", "n_queries", "naive_poison_hits", "defended_poison_hits",
    "fr_micro", "fr_macro", "fr_undefined_queries", "ndcg_clean",
    "ndcg_naive", "ndcg_defended", "key_token_precision", "fpr",
    "underfilled_queries",
)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_as_dict(report: MetricsReport) -> dict:
    d = {col: getattr(report, col) for col in _METRIC_COLUMNS}
    d["pscore"] = report.pscore
    return d


def emit_report(result: ExperimentResult, out_dir, fmt: str = "both",
                include_timings: bool = True) -> list[str]:
    """Write metric and audit files; returns the file names written.

    timings.json is the only non-deterministic artifact; everything
    else is byte-stable for a fixed config and seed.
    """
    import os
    if fmt not in ("json", "csv", "both"):
        raise ConfigInvalid("format must be json, csv, or both")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    methods = sorted(result.metrics)

    def path(name):
        written.append(name)
        return os.path.join(out_dir, name)

    try:
        if fmt in ("json", "both"):
            payload = {
                "config": result.config,
                "thresholds": {m: (t if isinstance(t, float) else t.__dict__)
                               for m, t in result.thresholds.items()},
                "metrics": {m: metrics_as_dict(result.metrics[m]) for m in methods},
            }
            with open(path("metrics.json"), "w", encoding="utf-8") as fh:
                json.dump(payload, fh, sort_keys=True, indent=2)
                fh.write("\n")
        if fmt in ("csv", "both"):
            with open(path("metrics.csv"), "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(_METRIC_COLUMNS)
                for m in methods:
                    writer.writerow([_cell(getattr(result.metrics[m], col))
                                     for col in _METRIC_COLUMNS])

        for method in sorted(result.verdicts):
            rep_list = result.reports.get(method, [])
            with open(path(f"verdicts_{method}.csv"), "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["doc_id", "query_id", "score", "decision",
                                 "key_positions", "masked_probs"])
                vlist = result.verdicts[method]
                for i, v in enumerate(vlist):
                    if method == "gmtp" and i < len(rep_list):
                        rep = rep_list[i]
                        kp = ";".join(str(p) for p in rep.key_positions)
                        mp = ";".join(repr(p) for p in rep.masked_probs)
                    else:
                        kp, mp = "", ""
                    writer.writerow([v.doc_id, v.query_id, _cell(v.score),
                                     v.decision, kp, mp])

        for method in methods:
            rep = result.metrics[method]
            if rep.pscore:
                with open(path(f"pscore_hist_{method}.csv"), "w", encoding="utf-8", newline="") as fh:
                    writer = csv.writer(fh, lineterminator="\n")
                    writer.writerow(["class", "bin_lo", "bin_hi", "count"])
                    for cls in sorted(rep.pscore):
                        counts = rep.pscore[cls]["hist_counts"]
                        for b, cnt in enumerate(counts):
                            writer.writerow([cls, repr(HIST_EDGES[b]),
                                             repr(HIST_EDGES[b + 1]), cnt])

        with open(path("rankings.csv"), "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["condition", "query_id", "rank", "doc_id", "score",
                             "label", "underfilled"])
            conditions = [("clean", result.clean), ("naive", result.naive)]
            conditions += [(f"defended:{m}", result.defended[m])
                           for m in sorted(result.defended)]
            for cond, lists in conditions:
                for qid in sorted(lists):
                    rl = lists[qid]
                    for rank, e in enumerate(rl.entries, start=1):
                        writer.writerow([cond, qid, rank, e.doc_id, _cell(e.score),
                                         result.labels.get(e.doc_id, ""),
                                         int(rl.underfilled)])

        if include_timings:
            with open(path("timings.json"), "w", encoding="utf-8") as fh:
                json.dump(result.timings, fh, sort_keys=True, indent=2)
                fh.write("\n")
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return written


def sweep(bundle: CorpusBundle, pair: EncoderPair, poisons, base: GmtpConfig,
          param: str, values, mlm, k: int = 10, seed: int = 0,
          threads: int = 1):
    """Re-run the gmtp defense across one hyperparameter axis.

    Returns (value, MetricsReport, filtered_doc_pairs) triples, where
    filtered_doc_pairs is the set of (query_id, doc_id) removed from
    naive top-k lists at that value.
    """
    if param not in ("N", "M", "lambda"):
        raise ConfigInvalid("sweep param must be N, M, or lambda")
    rows = []
    for value in values:
        if param == "N":
            cfg = GmtpConfig(n_key_tokens=int(value), m_lowest=base.m_lowest,
                             lam=base.lam, k_calibration=base.k_calibration,
                             calibration_mode=base.calibration_mode)
        elif param == "M":
            cfg = GmtpConfig(n_key_tokens=base.n_key_tokens, m_lowest=int(value),
                             lam=base.lam, k_calibration=base.k_calibration,
                             calibration_mode=base.calibration_mode)
        else:
            cfg = GmtpConfig(n_key_tokens=base.n_key_tokens, m_lowest=base.m_lowest,
                             lam=float(value), k_calibration=base.k_calibration,
                             calibration_mode=base.calibration_mode)
        result = run_experiment(bundle, pair, poisons,
                                [DefensePlan(method="gmtp", gmtp=cfg)],
                                mlm=mlm, k=k, seed=seed, threads=threads)
        filtered = {(v.query_id, v.doc_id)
                    for v in result.verdicts["gmtp"]
                    if v.decision == "filter"
                    and (v.query_id, v.doc_id) in {
                        (ql.query_id, e.doc_id)
                        for ql in result.naive.values() for e in ql.entries}}
        rows.append((value, result.metrics["gmtp"], filtered))
    return rows


def write_sweep_csv(rows, param: str, path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([param, "fr_micro", "fr_macro", "ndcg_defended",
                             "fpr", "key_token_precision", "n_filtered"])
            for value, rep, filtered in rows:
                writer.writerow([_cell(value), _cell(rep.fr_micro),
                                 _cell(rep.fr_macro), _cell(rep.ndcg_defended),
                                 _cell(rep.fpr), _cell(rep.key_token_precision),
                                 len(filtered)])
    except OSError as exc:
        raise IoError(str(exc)) from exc
