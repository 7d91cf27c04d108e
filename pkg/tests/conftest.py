"""Shared fixtures.

The ``desk`` fixture family builds one mid-size synthetic corpus, trains
an encoder on it, crafts poisons with all three attack modes, and runs
the full defended retrieval experiment per mode.  It is session-scoped
because the acceptance tests all measure the same frozen setup.
"""

from __future__ import annotations

import time

import pytest

from ragward import attack, corpus, defense, encoder, evaluate, mlm

_CRITERION_LINES: dict[int, str] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record a one-line pass/fail verdict for an acceptance criterion."""

    def record(num: int, name: str, passed: bool, detail: str = ""):
        status = "PASS" if passed else "FAIL"
        suffix = f" ({detail})" if detail else ""
        _CRITERION_LINES[num] = f"criterion {num:02d} {name}: {status}{suffix}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERION_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERION_LINES):
        terminalreporter.write_line(_CRITERION_LINES[num])


@pytest.fixture(scope="session")
def tiny_bundle():
    cfg = corpus.SyntheticConfig(
        num_topics=4,
        docs_per_topic=12,
        queries_per_topic=3,
        vocab_size=60,
        doc_length_range=(20, 30),
        trigger_fraction=0.5,
        background_phrase_count=40,
    )
    return corpus.generate_synthetic(cfg, seed=3)


@pytest.fixture(scope="session")
def tiny_pair(tiny_bundle):
    return encoder.init_pair(tiny_bundle.vocabulary.size, 8, seed=2, shared=True)


@pytest.fixture(scope="session")
def tiny_mlm(tiny_bundle):
    return mlm.fit_mlm(tiny_bundle.documents, tiny_bundle.vocabulary.size)


def _training_pairs(bundle):
    dmap = bundle.doc_map()
    pairs = []
    for q in bundle.queries_in("calibration"):
        for did in sorted(q.qrels)[:5]:
            pairs.append((q.token_ids, dmap[did].token_ids))
    return pairs


@pytest.fixture(scope="session")
def desk():
    """Mid-size corpus, trained encoder, MLMs, and poisons for all modes."""
    t0 = time.perf_counter()
    cfg = corpus.SyntheticConfig(trigger_fraction=0.3)
    bundle = corpus.generate_synthetic(cfg, seed=11)
    vocab = bundle.vocabulary
    V = vocab.size

    pair = encoder.train_contrastive(
        encoder.init_pair(V, 32, seed=11, shared=True),
        _training_pairs(bundle),
        epochs=20,
        learning_rate=5.0,
        batch_size=32,
        seed=11,
    ).pair
    mdl = mlm.fit_mlm(bundle.documents, V)
    causal = mlm.fit_causal(bundle.documents, V, order=3)
    setup_seconds = time.perf_counter() - t0

    poisons = {}
    craft_seconds = {}

    t0 = time.perf_counter()
    prag_cfg = attack.AttackConfig(
        mode="poisonedrag",
        seed=5,
        num_cheating_tokens=30,
        iterations=30,
        candidates_per_flip=V,
    )
    records = []
    for q in bundle.queries_in("eval"):
        payload = attack.auto_payload(vocab, 8, 5 + attack._stable_int(q.query_id))
        records.extend(attack.craft_poisonedrag(q, payload, prag_cfg, pair, vocab))
    poisons["poisonedrag"] = records
    craft_seconds["poisonedrag"] = time.perf_counter() - t0

    cohorts = attack.cohort_triggered_queries(bundle.queries_in("calibration"), 6)
    command = attack.auto_payload(vocab, 8, 5 + 17)

    t0 = time.perf_counter()
    ph_cfg = attack.AttackConfig(
        mode="phantom",
        seed=5,
        num_cheating_tokens=30,
        iterations=30,
        candidates_per_flip=V,
    )
    records = []
    for cohort in cohorts:
        records.extend(
            attack.craft_phantom(cohort[0].trigger, command, ph_cfg, pair, vocab, cohort)
        )
    poisons["phantom"] = records
    craft_seconds["phantom"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    adv_cfg = attack.AttackConfig(mode="advdecoding", seed=5, candidates_per_flip=100)
    records = []
    for cohort in cohorts:
        records.extend(
            attack.craft_advdecoding(
                cohort[0].trigger, command, adv_cfg, pair, vocab, mdl, cohort
            )
        )
    poisons["advdecoding"] = records
    craft_seconds["advdecoding"] = time.perf_counter() - t0

    return {
        "bundle": bundle,
        "pair": pair,
        "mlm": mdl,
        "causal": causal,
        "poisons": poisons,
        "craft_seconds": craft_seconds,
        "setup_seconds": setup_seconds,
        "cohorts": cohorts,
    }


@pytest.fixture(scope="session")
def desk_results(desk):
    """Full defended experiment per attack mode on the desk corpus."""
    plans = [
        evaluate.DefensePlan(method="gmtp", gmtp=defense.GmtpConfig()),
        evaluate.DefensePlan(method="ppl"),
        evaluate.DefensePlan(method="l2norm"),
    ]
    out = {}
    for mode, records in desk["poisons"].items():
        t0 = time.perf_counter()
        result = evaluate.run_experiment(
            desk["bundle"],
            desk["pair"],
            records,
            plans,
            mlm=desk["mlm"],
            causal=desk["causal"],
            k=10,
            seed=11,
        )
        out[mode] = {"result": result, "seconds": time.perf_counter() - t0}
    return out
