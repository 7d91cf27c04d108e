"""Metric units, experiment harness, and report emission tests."""

from __future__ import annotations

import csv
import json

import numpy as np
import pytest

import helpers
from ragward import attack, defense, evaluate, mlm
from ragward.defense import DefenseVerdict, PScoreReport
from ragward.errors import (
    ConfigInvalid,
    EmptyClass,
    NoCleanDocuments,
    NoPoisonedDocuments,
)
from ragward import corpus


def test_ndcg_hand_case():
    qrels = {"d1": 1, "d2": 0, "d3": 1}
    got = evaluate.ndcg_at_k(["d1", "d2", "d3"], qrels, 3)
    # DCG = 1 + 0.5, ideal = 1 + 1/log2(3)
    assert abs(got - 1.5 / (1.0 + 1.0 / np.log2(3.0))) < 1e-12
    assert abs(got - 0.9197) < 5e-4


def test_ndcg_boundaries():
    assert evaluate.ndcg_at_k(["a", "b"], {"a": 1, "b": 1}, 2) == 1.0
    assert evaluate.ndcg_at_k(["a"], {}, 5) == 0.0
    assert evaluate.ndcg_at_k(["a"], {"b": 0}, 5) == 0.0
    assert evaluate.ndcg_at_k(["x", "a"], {"a": 2}, 1) == 0.0
    with pytest.raises(ConfigInvalid):
        evaluate.ndcg_at_k(["a"], {"a": 1}, 0)


def test_ndcg_matches_reference_on_random_rankings():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 12))
        ids = [f"d{i}" for i in range(n)]
        qrels = {f"d{i}": int(rng.integers(0, 4)) for i in range(n)}
        ranked = list(rng.permutation(ids))
        k = int(rng.integers(1, n + 2))
        got = evaluate.ndcg_at_k(ranked, qrels, k)
        want = helpers.reference_ndcg(ranked, qrels, k)
        assert abs(got - want) < 1e-12


def test_filtering_rate_cases():
    assert evaluate.filtering_rate(10, 0) == 1.0
    assert evaluate.filtering_rate(10, 10) == 0.0
    assert evaluate.filtering_rate(10, 5) == 0.5
    assert evaluate.filtering_rate(0, 0) is None
    assert evaluate.filtering_rate(0, 3) is None
    assert evaluate.filtering_rate(2, 3) == -0.5
    with pytest.raises(ConfigInvalid):
        evaluate.filtering_rate(-1, 0)
    with pytest.raises(ConfigInvalid):
        evaluate.filtering_rate(1, -2)


def _poisoned_doc(doc_id, cheating, T=8):
    return corpus.Document(doc_id=doc_id, token_ids=tuple(range(2, 2 + T)),
                           source_text="", label="poisoned",
                           cheating_positions=frozenset(cheating),
                           attack_mode="poisonedrag")


def _report(doc_id, keys, p=0.01):
    return PScoreReport(doc_id=doc_id, key_positions=tuple(keys),
                        masked_probs=tuple(0.1 for _ in keys), p_score=p)


def test_key_token_precision_micro_average():
    docs = {
        "p1": _poisoned_doc("p1", {1, 2, 5}),
        "p2": _poisoned_doc("p2", {0}),
    }
    reports = [_report("p1", [0, 1, 2]), _report("p2", [0, 3])]
    # hits: 2 of 3 and 1 of 2 -> 3/5 micro
    assert evaluate.key_token_precision(reports, docs) == 3 / 5
    with pytest.raises(NoPoisonedDocuments):
        evaluate.key_token_precision([], docs)
    clean = corpus.Document(doc_id="c1", token_ids=(2, 3), source_text="")
    with pytest.raises(ConfigInvalid):
        evaluate.key_token_precision([_report("c1", [0])], {"c1": clean})


def test_false_positive_rate():
    labels = {"c1": "clean", "c2": "clean", "p1": "poisoned"}

    def v(doc_id, decision):
        return DefenseVerdict(doc_id=doc_id, query_id="q", method="gmtp",
                              score=0.0, decision=decision)

    verdicts = [v("c1", "filter"), v("c2", "keep"), v("p1", "filter")]
    assert evaluate.false_positive_rate(verdicts, labels) == 0.5
    assert evaluate.false_positive_rate([v("c1", "keep")], labels) == 0.0
    with pytest.raises(NoCleanDocuments):
        evaluate.false_positive_rate([v("p1", "filter")], labels)


def test_pscore_stats_summary_and_histogram():
    reports = [_report(f"d{i}", [0], p=p)
               for i, p in enumerate([0.1, 0.2, 0.3, 0.4])]
    class_of = {f"d{i}": "clean" for i in range(4)}
    stats = evaluate.pscore_stats(reports, class_of)
    s = stats["clean"]
    assert s.n == 4
    assert abs(s.mean - 0.25) < 1e-12
    assert abs(s.median - 0.25) < 1e-12
    assert sum(s.hist_counts) == 4
    assert len(s.hist_counts) == len(evaluate.HIST_EDGES) - 1

    single = evaluate.pscore_stats([_report("d0", [0], p=0.5)], {"d0": "x"})
    assert single["x"].mean == 0.5 and single["x"].q05 == 0.5

    with pytest.raises(EmptyClass):
        evaluate.pscore_stats(reports, class_of, classes=["missing"])


def test_defense_plan_validation():
    plan = evaluate.DefensePlan(method="gmtp")
    assert plan.gmtp is not None
    with pytest.raises(ConfigInvalid):
        evaluate.DefensePlan(method="firewall")


@pytest.fixture(scope="module")
def tiny_experiment(tiny_bundle, tiny_pair, tiny_mlm):
    v = tiny_bundle.vocabulary
    cfg = attack.AttackConfig(mode="poisonedrag", num_cheating_tokens=6,
                              iterations=6, candidates_per_flip=v.size,
                              docs_per_target=2, seed=3)
    poisons = []
    for q in tiny_bundle.queries_in("eval")[:4]:
        payload = attack.auto_payload(v, 4, seed=17 + attack._stable_int(q.query_id))
        poisons.extend(attack.craft_poisonedrag(q, payload, cfg, tiny_pair, v))
    causal = mlm.fit_causal(tiny_bundle.documents, v.size)
    plans = [
        evaluate.DefensePlan(method="gmtp",
                             gmtp=defense.GmtpConfig(k_calibration=20)),
        evaluate.DefensePlan(method="ppl"),
        evaluate.DefensePlan(method="l2norm"),
    ]
    result = evaluate.run_experiment(tiny_bundle, tiny_pair, poisons, plans,
                                     mlm=tiny_mlm, causal=causal, k=6, seed=7)
    return {"poisons": poisons, "plans": plans, "causal": causal,
            "result": result}


def test_run_experiment_structure(tiny_bundle, tiny_experiment):
    result = tiny_experiment["result"]
    eval_ids = [q.query_id for q in tiny_bundle.queries_in("eval")]
    assert set(result.metrics) == {"naive", "gmtp", "ppl", "l2norm"}
    assert set(result.clean) == set(eval_ids)
    assert set(result.naive) == set(eval_ids)
    for method in ("gmtp", "ppl", "l2norm"):
        assert set(result.defended[method]) == set(eval_ids)
        for ql in result.defended[method].values():
            assert ql.underfilled or len(ql.entries) == 6
            assert len({e.doc_id for e in ql.entries}) == len(ql.entries)
    # naive metrics mirror the unfiltered lists
    naive = result.metrics["naive"]
    want_hits = sum(
        sum(1 for e in result.naive[qid].entries
            if result.labels[e.doc_id] == "poisoned")
        for qid in eval_ids)
    assert naive.naive_poison_hits == want_hits
    assert naive.fr_micro is None
    assert result.metrics["gmtp"].naive_poison_hits == want_hits
    # poisons got injected under their own labels
    for rec in tiny_experiment["poisons"]:
        assert result.labels[rec.document.doc_id] == "poisoned"


def test_run_experiment_metric_consistency(tiny_experiment):
    result = tiny_experiment["result"]
    for method in ("gmtp", "ppl", "l2norm"):
        rep = result.metrics[method]
        got_def = sum(
            sum(1 for e in ql.entries if result.labels[e.doc_id] == "poisoned")
            for ql in result.defended[method].values())
        assert rep.defended_poison_hits == got_def
        want_fr = evaluate.filtering_rate(rep.naive_poison_hits, got_def)
        assert rep.fr_micro == want_fr
        # every verdict decision matches its score against the threshold
        if method == "gmtp":
            tau = result.thresholds["gmtp"].tau
            for v in result.verdicts["gmtp"]:
                assert v.decision == ("keep" if v.score > tau else "filter")


def test_run_experiment_empty_plans_only_naive(tiny_bundle, tiny_pair,
                                               tiny_experiment):
    result = evaluate.run_experiment(tiny_bundle, tiny_pair,
                                     tiny_experiment["poisons"], [], k=6, seed=7)
    assert list(result.metrics) == ["naive"]
    assert result.defended == {}


def test_run_experiment_validation(tiny_bundle, tiny_pair, tiny_experiment):
    poisons = tiny_experiment["poisons"]
    with pytest.raises(ConfigInvalid):
        evaluate.run_experiment(tiny_bundle, tiny_pair, poisons,
                                [evaluate.DefensePlan(method="gmtp")],
                                k=6, seed=0)
    with pytest.raises(ConfigInvalid):
        evaluate.run_experiment(tiny_bundle, tiny_pair, poisons,
                                [evaluate.DefensePlan(method="ppl")],
                                k=6, seed=0)
    with pytest.raises(ConfigInvalid):
        evaluate.run_experiment(tiny_bundle, tiny_pair, poisons, [], k=0)
    with pytest.raises(ConfigInvalid):
        evaluate.run_experiment(tiny_bundle, tiny_pair, poisons, [], k=5,
                                threads=0)


def _comparable(result):
    metrics = {m: evaluate.metrics_as_dict(result.metrics[m])
               for m in result.metrics}
    verdicts = {m: [(v.doc_id, v.query_id, v.score, v.decision) for v in vs]
                for m, vs in result.verdicts.items()}
    rankings = {m: {qid: ql.doc_ids() for qid, ql in lists.items()}
                for m, lists in result.defended.items()}
    return metrics, verdicts, rankings


def test_run_experiment_deterministic_and_thread_invariant(
        tiny_bundle, tiny_pair, tiny_mlm, tiny_experiment):
    kwargs = dict(mlm=tiny_mlm, causal=tiny_experiment["causal"], k=6, seed=7)
    base = _comparable(tiny_experiment["result"])
    again = evaluate.run_experiment(tiny_bundle, tiny_pair,
                                    tiny_experiment["poisons"],
                                    tiny_experiment["plans"], **kwargs)
    assert _comparable(again) == base
    threaded = evaluate.run_experiment(tiny_bundle, tiny_pair,
                                       tiny_experiment["poisons"],
                                       tiny_experiment["plans"],
                                       threads=3, **kwargs)
    assert _comparable(threaded) == base


def test_emit_report_files_and_consistency(tmp_path, tiny_experiment):
    result = tiny_experiment["result"]
    out = tmp_path / "report"
    written = evaluate.emit_report(result, out)
    assert "metrics.json" in written and "metrics.csv" in written
    assert "rankings.csv" in written and "timings.json" in written
    for name in written:
        assert (out / name).exists()

    payload = json.loads((out / "metrics.json").read_text())
    with open(out / "metrics.csv", newline="") as fh:
        rows = {row["method"]: row for row in csv.DictReader(fh)}
    for method, rep in result.metrics.items():
        as_dict = evaluate.metrics_as_dict(rep)
        jm = payload["metrics"][method]
        for col in evaluate._METRIC_COLUMNS:
            assert jm[col] == as_dict[col]
            want = as_dict[col]
            cell = rows[method][col]
            if want is None:
                assert cell == ""
            elif isinstance(want, float):
                assert float(cell) == want
            else:
                assert cell == str(want)

    with open(out / "rankings.csv", newline="") as fh:
        first = next(csv.reader(fh))
    assert first == ["condition", "query_id", "rank", "doc_id", "score",
                     "label", "underfilled"]


def test_emit_report_is_reproducible(tmp_path, tiny_experiment):
    result = tiny_experiment["result"]
    a, b = tmp_path / "a", tmp_path / "b"
    names_a = evaluate.emit_report(result, a)
    names_b = evaluate.emit_report(result, b)
    assert names_a == names_b
    for name in names_a:
        if name == "timings.json":
            continue
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_emit_report_format_options(tmp_path, tiny_experiment):
    result = tiny_experiment["result"]
    out = tmp_path / "json_only"
    written = evaluate.emit_report(result, out, fmt="json",
                                   include_timings=False)
    assert "metrics.csv" not in written
    assert "timings.json" not in written
    assert not (out / "timings.json").exists()
    with pytest.raises(ConfigInvalid):
        evaluate.emit_report(result, tmp_path / "x", fmt="yaml")


def test_sweep_shapes_and_csv(tmp_path, tiny_bundle, tiny_pair, tiny_mlm,
                              tiny_experiment):
    rows = evaluate.sweep(tiny_bundle, tiny_pair, tiny_experiment["poisons"],
                          defense.GmtpConfig(k_calibration=20), "lambda",
                          [0.05, 0.5], tiny_mlm, k=6, seed=7)
    assert [value for value, _, _ in rows] == [0.05, 0.5]
    for _, rep, filtered in rows:
        assert rep.method == "gmtp"
        assert isinstance(filtered, set)
    # a higher lambda never filters less
    assert rows[0][2] <= rows[1][2]

    path = tmp_path / "sweep.csv"
    evaluate.write_sweep_csv(rows, "lambda", path)
    with open(path, newline="") as fh:
        lines = list(csv.reader(fh))
    assert lines[0][0] == "lambda"
    assert len(lines) == 3

    with pytest.raises(ConfigInvalid):
        evaluate.sweep(tiny_bundle, tiny_pair, tiny_experiment["poisons"],
                       defense.GmtpConfig(), "tau", [0.1], tiny_mlm)
