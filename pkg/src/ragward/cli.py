"""Command-line interface.

Configuration comes from an optional TOML file plus flag overrides;
flags win over the file, the file wins over defaults.  Every command
requires a seed.  RAGWARD_OUT_DIR and RAGWARD_THREADS override the
output directory and thread count when the flags are absent.  Each
command writes a manifest.json recording the effective config hash,
library versions, kernel backend, and input/output fingerprints.

Exit codes: 0 success, 1 error (stderr line ``error[CODE]: message``),
2 finished but a headline metric was undefined.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

import numpy as np

from . import __version__, attack, corpus, defense, encoder, evaluate, index, mlm
from .errors import ConfigInvalid, RagwardError
from .kernels import BACKEND

_ATTACK_MODES = ("poisonedrag", "phantom", "advdecoding")

_ALLOWED_KEYS = {
    "run": {"seed", "k", "threads", "out_dir"},
    "synthetic": {"num_topics", "docs_per_topic", "queries_per_topic",
                  "doc_length_range", "vocab_size", "zipf_exponent",
                  "trigger_fraction", "topic_phrase_count",
                  "background_phrase_count", "topic_phrase_share"},
    "encoder": {"dim", "epochs", "learning_rate", "batch_size", "shared",
                "pairs_per_query"},
    "mlm": {"profile", "mu", "delta", "causal_order", "causal_delta"},
    "attack": {"modes", "num_cheating_tokens", "iterations",
               "candidates_per_flip", "docs_per_target", "lengths",
               "num_targets", "payload", "command", "cohorts"},
    "defense": {"methods", "n_key_tokens", "m_lowest", "lambda",
                "k_calibration", "calibration_mode", "ppl_threshold",
                "ppl_percentile", "l2_threshold", "l2_percentile"},
    "eval": {"mode"},
}


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid(f"config does not parse: {exc}") from exc
    for section, table in cfg.items():
        if section not in _ALLOWED_KEYS:
            raise ConfigInvalid(f"unknown config section [{section}]")
        if not isinstance(table, dict):
            raise ConfigInvalid(f"[{section}] must be a table")
        for key, val in table.items():
            if section == "attack" and key in _ATTACK_MODES:
                for sub in val:
                    if sub not in _ALLOWED_KEYS["attack"]:
                        raise ConfigInvalid(
                            f"unknown key {sub!r} in [attack.{key}]")
                continue
            if key not in _ALLOWED_KEYS[section]:
                raise ConfigInvalid(f"unknown key {key!r} in [{section}]")
    return cfg


def _pick(flag, cfg: dict, section: str, key: str, default=None, env=None):
    """Priority: flag, then environment, then config file, then default."""
    if flag is not None:
        return flag
    if env is not None:
        val = os.environ.get(env)
        if val is not None and val != "":
            return val
    sec = cfg.get(section, {})
    if key in sec:
        return sec[key]
    return default


def _require_seed(args, cfg) -> int:
    seed = _pick(args.seed, cfg, "run", "seed")
    if seed is None:
        raise ConfigInvalid("seed is required (flag --seed or [run].seed)")
    return int(seed)


def _out_dir(args, cfg, default="ragward-out") -> str:
    out = _pick(getattr(args, "out_dir", None), cfg, "run", "out_dir",
                default=default, env="RAGWARD_OUT_DIR")
    os.makedirs(out, exist_ok=True)
    return str(out)


def _threads(args, cfg) -> int:
    t = int(_pick(getattr(args, "threads", None), cfg, "run", "threads",
                  default=1, env="RAGWARD_THREADS"))
    if t < 1:
        raise ConfigInvalid("threads must be >= 1")
    return t


def _sha256_file(path) -> str:
    dig = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            dig.update(chunk)
    return dig.hexdigest()


def _write_manifest(out_dir, command: str, effective: dict, inputs=(),
                    outputs=(), fingerprints=None) -> None:
    payload = {
        "command": command,
        "config_sha256": hashlib.sha256(
            json.dumps(effective, sort_keys=True).encode()).hexdigest(),
        "effective_config": effective,
        "package_version": __version__,
        "python_version": platform.python_version(),
        "numpy_version": np.__version__,
        "kernel_backend": BACKEND,
        "inputs": {str(p): _sha256_file(p) for p in inputs if os.path.isfile(p)},
        "outputs": sorted(str(o) for o in outputs),
        "fingerprints": fingerprints or {},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _synthetic_config(args, cfg) -> corpus.SyntheticConfig:
    sec = cfg.get("synthetic", {})
    kw = dict(sec)
    if getattr(args, "num_topics", None) is not None:
        kw["num_topics"] = args.num_topics
    if getattr(args, "docs_per_topic", None) is not None:
        kw["docs_per_topic"] = args.docs_per_topic
    if getattr(args, "queries_per_topic", None) is not None:
        kw["queries_per_topic"] = args.queries_per_topic
    if getattr(args, "vocab_size", None) is not None:
        kw["vocab_size"] = args.vocab_size
    if getattr(args, "trigger_fraction", None) is not None:
        kw["trigger_fraction"] = args.trigger_fraction
    if getattr(args, "doc_length", None) is not None:
        lo, _, hi = args.doc_length.partition(",")
        kw["doc_length_range"] = (int(lo), int(hi))
    if "doc_length_range" in kw:
        kw["doc_length_range"] = tuple(kw["doc_length_range"])
    return corpus.SyntheticConfig(**kw)


# ---------------------------------------------------------------- commands


def cmd_corpus_gen(args) -> int:
    cfg = _load_config(args.config)
    seed = _require_seed(args, cfg)
    out = _out_dir(args, cfg, default="corpus-out")
    sc = _synthetic_config(args, cfg)
    bundle = corpus.generate_synthetic(sc, seed)
    corpus.save_bundle(bundle, out)
    effective = {"command": "corpus gen", "seed": seed, "synthetic": sc.__dict__.copy()}
    effective["synthetic"]["doc_length_range"] = list(sc.doc_length_range)
    _write_manifest(out, "corpus gen", effective,
                    outputs=["vocab.txt", "corpus.jsonl", "queries.jsonl",
                             "qrels.trec", "split.json"])
    print(f"wrote {len(bundle.documents)} documents, {len(bundle.queries)} queries to {out}")
    return 0


def cmd_corpus_ingest(args) -> int:
    cfg = _load_config(args.config)
    seed = _require_seed(args, cfg)
    out = _out_dir(args, cfg, default="corpus-out")
    with open(args.docs, encoding="utf-8") as fh:
        texts = [json.loads(line).get("text", "") for line in fh if line.strip()]
    vocab = corpus.build_vocab(texts, min_count=args.min_count)
    docs = corpus.ingest_jsonl(args.docs, vocab)
    queries = corpus.ingest_queries(args.queries, vocab, trigger_word=args.trigger_word)
    qrels = corpus.ingest_qrels(args.qrels)
    bundle = corpus.assemble_bundle(docs, queries, qrels, vocab)
    corpus.save_bundle(bundle, out)
    effective = {"command": "corpus ingest", "seed": seed,
                 "min_count": args.min_count, "trigger_word": args.trigger_word}
    _write_manifest(out, "corpus ingest", effective,
                    inputs=[args.docs, args.queries, args.qrels],
                    outputs=["vocab.txt", "corpus.jsonl", "queries.jsonl",
                             "qrels.trec", "split.json"])
    print(f"ingested {len(docs)} documents, {len(queries)} queries to {out}")
    return 0


def _training_pairs(bundle: corpus.CorpusBundle, pairs_per_query: int):
    docs = bundle.doc_map()
    out = []
    for q in bundle.queries_in("calibration"):
        rel = [d for d in sorted(q.qrels) if q.qrels[d] > 0 and d in docs]
        for did in rel[:pairs_per_query]:
            out.append((q, docs[did]))
    return out


def cmd_encoder_train(args) -> int:
    cfg = _load_config(args.config)
    seed = _require_seed(args, cfg)
    sec = cfg.get("encoder", {})
    dim = int(args.dim if args.dim is not None else sec.get("dim", 32))
    epochs = int(args.epochs if args.epochs is not None else sec.get("epochs", 20))
    lr = float(args.learning_rate if args.learning_rate is not None
               else sec.get("learning_rate", 5.0))
    batch = int(args.batch_size if args.batch_size is not None
                else sec.get("batch_size", 32))
    shared = bool(sec.get("shared", True)) if args.shared is None else args.shared
    ppq = int(sec.get("pairs_per_query", 5))
    bundle = corpus.load_bundle(args.corpus_dir)
    pairs = _training_pairs(bundle, ppq)
    pair0 = encoder.init_pair(bundle.vocabulary.size, dim, seed, shared=shared)
    result = encoder.train_contrastive(pair0, pairs, epochs=epochs,
                                       learning_rate=lr, batch_size=batch, seed=seed)
    encoder.save_params(result.pair, args.out)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    effective = {"command": "encoder train", "seed": seed, "dim": dim,
                 "epochs": epochs, "learning_rate": lr, "batch_size": batch,
                 "shared": shared, "pairs_per_query": ppq}
    _write_manifest(out_dir, "encoder train", effective,
                    inputs=[os.path.join(args.corpus_dir, "corpus.jsonl")],
                    outputs=[args.out],
                    fingerprints={"encoder": encoder.fingerprint_pair(result.pair)})
    losses = ", ".join(f"{x:.4f}" for x in result.epoch_losses)
    print(f"trained {epochs} epochs on {len(pairs)} pairs; losses: {losses}")
    return 0


def cmd_index_build(args) -> int:
    cfg = _load_config(args.config)
    _require_seed(args, cfg)
    bundle = corpus.load_bundle(args.corpus_dir)
    pair = encoder.load_params(args.params)
    docs = bundle.documents
    if args.poisons:
        records = attack.load_poisons(args.poisons, bundle.vocabulary)
        docs = attack.inject(docs, records)
    idx = index.build_index(pair, docs)
    index.save_index(idx, args.out)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    _write_manifest(out_dir, "index build",
                    {"command": "index build", "poisons": bool(args.poisons)},
                    inputs=[args.params] + ([args.poisons] if args.poisons else []),
                    outputs=[args.out],
                    fingerprints={"encoder": idx.params_fingerprint})
    print(f"indexed {idx.size} documents (dim {idx.dim})")
    return 0


def cmd_index_stats(args) -> int:
    idx = index.load_index(args.index)
    norms = np.linalg.norm(idx.embeddings, axis=1)
    print(f"documents: {idx.size}")
    print(f"dim: {idx.dim}")
    print(f"encoder_fingerprint: {idx.params_fingerprint}")
    print(f"l2norm: min {norms.min():.4f} mean {norms.mean():.4f} max {norms.max():.4f}")
    return 0


def cmd_mlm_fit(args) -> int:
    cfg = _load_config(args.config)
    _require_seed(args, cfg)
    sec = cfg.get("mlm", {})
    bundle = corpus.load_bundle(args.corpus_dir)
    V = bundle.vocabulary.size
    if args.kind == "causal":
        order = int(args.order if args.order is not None else sec.get("causal_order", 3))
        delta = float(sec.get("causal_delta", 0.1))
        model = mlm.fit_causal(bundle.documents, V, order=order, delta=delta)
    else:
        profile = args.profile or sec.get("profile", "default")
        if "mu" in sec or "delta" in sec:
            base = mlm.MlmConfig.from_profile(profile)
            mc = mlm.MlmConfig(mu=tuple(sec.get("mu", base.mu)),
                               delta=float(sec.get("delta", base.delta)))
        else:
            mc = mlm.MlmConfig.from_profile(profile)
        model = mlm.fit_mlm(bundle.documents, V, mc)
    model.save(args.out)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    _write_manifest(out_dir, "mlm fit", {"command": "mlm fit", "kind": args.kind},
                    inputs=[os.path.join(args.corpus_dir, "corpus.jsonl")],
                    outputs=[args.out], fingerprints={"mlm": model.mlm_id})
    print(f"fitted {args.kind} model over vocab {V}; id {model.mlm_id[:16]}")
    return 0


def cmd_mlm_score(args) -> int:
    model = mlm.load_mlm(args.model)
    bundle = corpus.load_bundle(args.corpus_dir)
    doc = bundle.doc_map().get(args.doc_id)
    if doc is None:
        raise ConfigInvalid(f"unknown doc_id {args.doc_id}")
    if isinstance(model, mlm.CausalNGramModel):
        print(f"perplexity: {mlm.perplexity(model, doc.token_ids)!r}")
        return 0
    positions = [args.position] if args.position is not None else range(len(doc.token_ids))
    for pos in positions:
        p = model.masked_prob(doc.token_ids, pos)
        tok = bundle.vocabulary.tokens[doc.token_ids[pos]]
        print(f"{pos}\t{tok}\t{p!r}")
    return 0


def _attack_config(args, cfg, mode: str, seed: int) -> attack.AttackConfig:
    base = cfg.get("attack", {})
    # per-mode subtable ([attack.phantom] etc.) overrides the shared values
    sec = {k: v for k, v in base.items() if not isinstance(v, dict)}
    sec.update(base.get(mode, {}))
    kw = {"mode": mode, "seed": seed}
    for key, flag in (("num_cheating_tokens", "cheating_tokens"),
                      ("iterations", "iterations"),
                      ("candidates_per_flip", "candidates"),
                      ("docs_per_target", "docs_per_target")):
        val = getattr(args, flag, None)
        if val is not None:
            kw[key] = int(val)
        elif key in sec:
            kw[key] = int(sec[key])
    if getattr(args, "lengths", None):
        kw["lengths"] = tuple(int(x) for x in args.lengths.split(","))
    elif "lengths" in sec:
        kw["lengths"] = tuple(int(x) for x in sec["lengths"])
    return attack.AttackConfig(**kw)


def _craft_for_mode(mode, bundle, pair, config, payload, command, mlm_model,
                    num_targets, cohorts=6):
    vocab = bundle.vocabulary
    records = []
    meta = {}
    if mode == "poisonedrag":
        targets = bundle.queries_in("eval")
        if num_targets is not None:
            targets = targets[:num_targets]
        for q in targets:
            text = payload or attack.auto_payload(vocab, 8, config.seed + attack._stable_int(q.query_id))
            records.extend(attack.craft_poisonedrag(q, text, config, pair, vocab))
        meta["n_targets"] = len(targets)
    else:
        triggered = [q for q in bundle.queries_in("calibration") if q.trigger is not None]
        if not triggered:
            raise ConfigInvalid("corpus has no triggered calibration queries "
                                "(generate with trigger_fraction > 0)")
        trigger_id = triggered[0].trigger
        text = command or attack.auto_payload(vocab, 8, config.seed + 17)
        samples = attack.cohort_triggered_queries(bundle.queries_in("calibration"),
                                                  cohorts)
        meta["n_triggered_queries"] = len(triggered)
        meta["n_cohorts"] = len(samples)
        for sample in samples:
            if mode == "phantom":
                records.extend(attack.craft_phantom(trigger_id, text, config,
                                                    pair, vocab, sample))
            else:
                if mlm_model is None:
                    raise ConfigInvalid("advdecoding needs --mlm")
                records.extend(attack.craft_advdecoding(trigger_id, text, config,
                                                        pair, vocab, mlm_model,
                                                        sample))
    return records, meta


def cmd_attack(args) -> int:
    cfg = _load_config(args.config)
    seed = _require_seed(args, cfg)
    mode = args.mode
    bundle = corpus.load_bundle(args.corpus_dir)
    pair = encoder.load_params(args.params)
    config = _attack_config(args, cfg, mode, seed)
    mlm_model = mlm.load_mlm(args.mlm) if args.mlm else None
    sec = cfg.get("attack", {})
    payload = args.payload or sec.get("payload")
    command = args.command or sec.get("command")
    num_targets = args.num_targets if args.num_targets is not None else sec.get("num_targets")
    cohorts = int(args.cohorts if args.cohorts is not None
                  else sec.get("cohorts", 6))
    records, meta = _craft_for_mode(mode, bundle, pair, config, payload,
                                    command, mlm_model, num_targets, cohorts)
    attack.save_poisons(records, args.out)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    effective = {"command": f"attack {mode}", "seed": seed, "mode": mode,
                 "num_cheating_tokens": config.num_cheating_tokens,
                 "iterations": config.iterations,
                 "candidates_per_flip": config.candidates_per_flip,
                 "docs_per_target": config.docs_per_target,
                 "lengths": list(config.lengths), **meta}
    _write_manifest(out_dir, f"attack {mode}", effective,
                    inputs=[args.params], outputs=[args.out])
    mean_gain = float(np.mean([r.objective_after - r.objective_before
                               for r in records])) if records else 0.0
    print(f"crafted {len(records)} poisons (mean objective gain {mean_gain:.4f})")
    return 0


def _gmtp_config(args, cfg) -> defense.GmtpConfig:
    sec = cfg.get("defense", {})
    kw = {}
    pairs = (("n_key_tokens", "n_key_tokens"), ("m_lowest", "m_lowest"),
             ("k_calibration", "k_calibration"),
             ("calibration_mode", "calibration_mode"))
    for key, flag in pairs:
        val = getattr(args, flag, None)
        if val is not None:
            kw[key] = val
        elif key in sec:
            kw[key] = sec[key]
    lam = getattr(args, "lam", None)
    if lam is not None:
        kw["lam"] = float(lam)
    elif "lambda" in sec:
        kw["lam"] = float(sec["lambda"])
    return defense.GmtpConfig(**kw)


def cmd_calibrate(args) -> int:
    cfg = _load_config(args.config)
    seed = _require_seed(args, cfg)
    bundle = corpus.load_bundle(args.corpus_dir)
    pair = encoder.load_params(args.params)
    model = mlm.load_mlm(args.mlm)
    gc = _gmtp_config(args, cfg)
    threshold = defense.calibrate_tau(pair, model, bundle, gc, seed)
    defense.save_threshold(threshold, args.out)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    effective = {"command": "calibrate", "seed": seed, "n": gc.n_key_tokens,
                 "m": gc.m_lowest, "lambda": gc.lam, "k": gc.k_calibration,
                 "mode": gc.calibration_mode}
    _write_manifest(out_dir, "calibrate", effective,
                    inputs=[args.params, args.mlm], outputs=[args.out],
                    fingerprints={"encoder": threshold.encoder_fingerprint,
                                  "mlm": threshold.mlm_id})
    flag = " (short calibration)" if threshold.short_calibration else ""
    print(f"tau = {threshold.tau!r} from {threshold.k_used} pairs{flag}")
    return 0


def cmd_defend(args) -> int:
    cfg = _load_config(args.config)
    seed = _require_seed(args, cfg)
    out = _out_dir(args, cfg, default="defend-out")
    threads = _threads(args, cfg)
    k = int(_pick(args.k, cfg, "run", "k", default=10))
    bundle = corpus.load_bundle(args.corpus_dir)
    pair = encoder.load_params(args.params)
    model = mlm.load_mlm(args.mlm)
    threshold = defense.load_threshold(args.threshold)
    poisons = attack.load_poisons(args.poisons, bundle.vocabulary)
    gc = defense.GmtpConfig(n_key_tokens=threshold.n_key_tokens,
                            m_lowest=threshold.m_lowest, lam=threshold.lam,
                            k_calibration=threshold.k_used or 1,
                            calibration_mode=threshold.calibration_mode)
    plan = evaluate.DefensePlan(method="gmtp", gmtp=gc)
    result = run_with_threshold(bundle, pair, poisons, plan, model, threshold,
                                k=k, seed=seed, threads=threads)
    files = evaluate.emit_report(result, out)
    _write_manifest(out, "defend", {"command": "defend", "seed": seed, "k": k},
                    inputs=[args.params, args.mlm, args.threshold, args.poisons],
                    outputs=files,
                    fingerprints={"encoder": threshold.encoder_fingerprint,
                                  "mlm": threshold.mlm_id})
    rep = result.metrics["gmtp"]
    print(f"fr_micro={_fmt(rep.fr_micro)} fpr={_fmt(rep.fpr)} "
          f"ndcg_defended={rep.ndcg_defended:.4f}")
    return 2 if rep.fr_micro is None else 0


def run_with_threshold(bundle, pair, poisons, plan, model, threshold, k, seed, threads):
    """run_experiment, but verify the pre-computed threshold matches first."""
    defense._check_threshold(threshold, pair, model, plan.gmtp)
    return evaluate.run_experiment(bundle, pair, poisons, [plan], mlm=model,
                                   k=k, seed=seed, threads=threads)


def _fmt(x) -> str:
    return "undefined" if x is None else f"{x:.4f}"


def _pipeline(args, cfg, seed, threads, modes, need_causal):
    """Shared eval pipeline: corpus, encoder, models, poisons per mode."""
    if args.corpus_dir:
        bundle = corpus.load_bundle(args.corpus_dir)
    else:
        sc = _synthetic_config(args, cfg)
        bundle = corpus.generate_synthetic(sc, seed)
    sec = cfg.get("encoder", {})
    if args.params:
        pair = encoder.load_params(args.params)
    else:
        dim = int(sec.get("dim", 32))
        pair0 = encoder.init_pair(bundle.vocabulary.size, dim, seed, shared=True)
        pairs = _training_pairs(bundle, int(sec.get("pairs_per_query", 5)))
        pair = encoder.train_contrastive(
            pair0, pairs, epochs=int(sec.get("epochs", 20)),
            learning_rate=float(sec.get("learning_rate", 5.0)),
            batch_size=int(sec.get("batch_size", 32)), seed=seed).pair
    msec = cfg.get("mlm", {})
    profile = msec.get("profile", "default")
    model = mlm.fit_mlm(bundle.documents, bundle.vocabulary.size,
                        mlm.MlmConfig.from_profile(profile))
    causal = None
    if need_causal:
        causal = mlm.fit_causal(bundle.documents, bundle.vocabulary.size,
                                order=int(msec.get("causal_order", 3)),
                                delta=float(msec.get("causal_delta", 0.1)))
    poisons_by_mode = {}
    asec = cfg.get("attack", {})
    for mode in modes:
        config = _attack_config(args, cfg, mode, seed)
        records, _ = _craft_for_mode(mode, bundle, pair, config,
                                     asec.get("payload"), asec.get("command"),
                                     model, asec.get("num_targets"),
                                     int(asec.get("cohorts", 6)))
        poisons_by_mode[mode] = records
    return bundle, pair, model, causal, poisons_by_mode


def _defense_plans(args, cfg) -> list:
    sec = cfg.get("defense", {})
    methods = sec.get("methods", ["gmtp"])
    if getattr(args, "defenses", None):
        methods = args.defenses.split(",")
    plans = []
    for m in methods:
        if m == "gmtp":
            plans.append(evaluate.DefensePlan(method="gmtp", gmtp=_gmtp_config(args, cfg)))
        elif m == "ppl":
            plans.append(evaluate.DefensePlan(
                method="ppl", threshold_value=sec.get("ppl_threshold"),
                percentile=float(sec.get("ppl_percentile", 99.0))))
        elif m == "l2norm":
            plans.append(evaluate.DefensePlan(
                method="l2norm", threshold_value=sec.get("l2_threshold"),
                percentile=float(sec.get("l2_percentile", 99.0))))
        else:
            raise ConfigInvalid(f"unknown defense method {m!r}")
    return plans


def cmd_eval_run(args) -> int:
    cfg = _load_config(args.config)
    seed = _require_seed(args, cfg)
    threads = _threads(args, cfg)
    out = _out_dir(args, cfg, default="eval-out")
    k = int(_pick(args.k, cfg, "run", "k", default=10))
    modes = (args.modes.split(",") if args.modes
             else cfg.get("attack", {}).get("modes", list(attack.MODES)))
    plans = _defense_plans(args, cfg)
    need_causal = any(p.method == "ppl" for p in plans)
    bundle, pair, model, causal, poisons_by_mode = _pipeline(
        args, cfg, seed, threads, modes, need_causal)
    flagged = False
    all_outputs = []
    for mode in modes:
        result = evaluate.run_experiment(bundle, pair, poisons_by_mode[mode],
                                         plans, mlm=model, causal=causal,
                                         k=k, seed=seed, threads=threads)
        mode_dir = os.path.join(out, mode)
        files = evaluate.emit_report(result, mode_dir)
        all_outputs.extend(os.path.join(mode, f) for f in files)
        for name, rep in result.metrics.items():
            if name != "naive" and rep.fr_micro is None:
                flagged = True
            print(f"[{mode}] {name}: fr_micro={_fmt(rep.fr_micro)} "
                  f"fpr={_fmt(rep.fpr)} ndcg_defended={rep.ndcg_defended:.4f}")
    effective = {"command": "eval run", "seed": seed, "k": k, "modes": modes,
                 "defenses": [p.method for p in plans]}
    _write_manifest(out, "eval run", effective, outputs=all_outputs,
                    fingerprints={"encoder": encoder.fingerprint_pair(pair),
                                  "mlm": model.mlm_id})
    return 2 if flagged else 0


def cmd_eval_sweep(args) -> int:
    cfg = _load_config(args.config)
    seed = _require_seed(args, cfg)
    threads = _threads(args, cfg)
    out = _out_dir(args, cfg, default="sweep-out")
    k = int(_pick(args.k, cfg, "run", "k", default=10))
    mode = args.mode or cfg.get("eval", {}).get("mode", "poisonedrag")
    values = [float(v) if args.param == "lambda" else int(v)
              for v in args.values.split(",")]
    bundle, pair, model, _, poisons_by_mode = _pipeline(
        args, cfg, seed, threads, [mode], need_causal=False)
    base = _gmtp_config(args, cfg)
    rows = evaluate.sweep(bundle, pair, poisons_by_mode[mode], base,
                          args.param, values, model, k=k, seed=seed,
                          threads=threads)
    sweep_path = os.path.join(out, "sweep.csv")
    evaluate.write_sweep_csv(rows, args.param, sweep_path)
    effective = {"command": "eval sweep", "seed": seed, "param": args.param,
                 "values": values, "mode": mode, "k": k}
    _write_manifest(out, "eval sweep", effective, outputs=["sweep.csv"])
    flagged = False
    for value, rep, _ in rows:
        if rep.fr_micro is None:
            flagged = True
        print(f"{args.param}={value}: fr_micro={_fmt(rep.fr_micro)} fpr={_fmt(rep.fpr)}")
    return 2 if flagged else 0


def cmd_report(args) -> int:
    src = os.path.join(args.results, "metrics.json")
    try:
        with open(src, encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise ConfigInvalid(f"cannot read {src}: {exc}") from exc
    out = args.out_dir or args.results
    os.makedirs(out, exist_ok=True)
    if args.format == "json":
        with open(os.path.join(out, "metrics.json"), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")
        print(f"wrote metrics.json to {out}")
        return 0
    import csv as _csv
    cols = list(evaluate._METRIC_COLUMNS)
    with open(os.path.join(out, "metrics.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = _csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for m in sorted(payload.get("metrics", {})):
            row = payload["metrics"][m]
            writer.writerow([evaluate._cell(row.get(c)) for c in cols])
    print(f"wrote metrics.csv to {out}")
    return 0


# ---------------------------------------------------------------- parser


def _add_common(p, out_dir=True):
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--seed", type=int)
    if out_dir:
        p.add_argument("--out-dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ragward",
                                     description="corpus-poisoning attack/defense lab")
    sub = parser.add_subparsers(dest="command", required=True)

    corpus_p = sub.add_parser("corpus")
    corpus_sub = corpus_p.add_subparsers(dest="subcommand", required=True)
    g = corpus_sub.add_parser("gen")
    _add_common(g)
    g.add_argument("--num-topics", type=int)
    g.add_argument("--docs-per-topic", type=int)
    g.add_argument("--queries-per-topic", type=int)
    g.add_argument("--vocab-size", type=int)
    g.add_argument("--doc-length", help="lo,hi")
    g.add_argument("--trigger-fraction", type=float)
    g.set_defaults(func=cmd_corpus_gen)
    ing = corpus_sub.add_parser("ingest")
    _add_common(ing)
    ing.add_argument("--docs", required=True)
    ing.add_argument("--queries", required=True)
    ing.add_argument("--qrels", required=True)
    ing.add_argument("--min-count", type=int, default=1)
    ing.add_argument("--trigger-word")
    ing.set_defaults(func=cmd_corpus_ingest)

    enc_p = sub.add_parser("encoder")
    enc_sub = enc_p.add_subparsers(dest="subcommand", required=True)
    tr = enc_sub.add_parser("train")
    _add_common(tr, out_dir=False)
    tr.add_argument("--corpus-dir", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--dim", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--learning-rate", type=float)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--shared", action=argparse.BooleanOptionalAction, default=None)
    tr.set_defaults(func=cmd_encoder_train)

    idx_p = sub.add_parser("index")
    idx_sub = idx_p.add_subparsers(dest="subcommand", required=True)
    ib = idx_sub.add_parser("build")
    _add_common(ib, out_dir=False)
    ib.add_argument("--corpus-dir", required=True)
    ib.add_argument("--params", required=True)
    ib.add_argument("--poisons")
    ib.add_argument("--out", required=True)
    ib.set_defaults(func=cmd_index_build)
    ist = idx_sub.add_parser("stats")
    ist.add_argument("--index", required=True)
    ist.set_defaults(func=cmd_index_stats)

    mlm_p = sub.add_parser("mlm")
    mlm_sub = mlm_p.add_subparsers(dest="subcommand", required=True)
    mf = mlm_sub.add_parser("fit")
    _add_common(mf, out_dir=False)
    mf.add_argument("--corpus-dir", required=True)
    mf.add_argument("--out", required=True)
    mf.add_argument("--kind", choices=("bidirectional", "causal"),
                    default="bidirectional")
    mf.add_argument("--profile", choices=tuple(mlm.PROFILES))
    mf.add_argument("--order", type=int)
    mf.set_defaults(func=cmd_mlm_fit)
    ms = mlm_sub.add_parser("score")
    ms.add_argument("--model", required=True)
    ms.add_argument("--corpus-dir", required=True)
    ms.add_argument("--doc-id", required=True)
    ms.add_argument("--position", type=int)
    ms.set_defaults(func=cmd_mlm_score)

    atk = sub.add_parser("attack")
    atk.add_argument("mode", choices=attack.MODES)
    _add_common(atk, out_dir=False)
    atk.add_argument("--corpus-dir", required=True)
    atk.add_argument("--params", required=True)
    atk.add_argument("--mlm", help="masked-token model (advdecoding)")
    atk.add_argument("--out", required=True)
    atk.add_argument("--payload")
    atk.add_argument("--command")
    atk.add_argument("--num-targets", type=int)
    atk.add_argument("--cohorts", type=int)
    atk.add_argument("--cheating-tokens", type=int)
    atk.add_argument("--iterations", type=int)
    atk.add_argument("--candidates", type=int)
    atk.add_argument("--docs-per-target", type=int)
    atk.add_argument("--lengths", help="comma-separated totals (advdecoding)")
    atk.set_defaults(func=cmd_attack)

    cal = sub.add_parser("calibrate")
    _add_common(cal, out_dir=False)
    cal.add_argument("--corpus-dir", required=True)
    cal.add_argument("--params", required=True)
    cal.add_argument("--mlm", required=True)
    cal.add_argument("--out", required=True)
    cal.add_argument("--n-key-tokens", type=int, dest="n_key_tokens")
    cal.add_argument("--m-lowest", type=int, dest="m_lowest")
    cal.add_argument("--lambda", type=float, dest="lam")
    cal.add_argument("--k-calibration", type=int, dest="k_calibration")
    cal.add_argument("--calibration-mode", choices=("relevant", "random"),
                     dest="calibration_mode")
    cal.set_defaults(func=cmd_calibrate)

    dfd = sub.add_parser("defend")
    _add_common(dfd)
    dfd.add_argument("--corpus-dir", required=True)
    dfd.add_argument("--params", required=True)
    dfd.add_argument("--mlm", required=True)
    dfd.add_argument("--threshold", required=True)
    dfd.add_argument("--poisons", required=True)
    dfd.add_argument("--k", type=int)
    dfd.add_argument("--threads", type=int)
    dfd.set_defaults(func=cmd_defend)

    ev = sub.add_parser("eval")
    ev_sub = ev.add_subparsers(dest="subcommand", required=True)
    er = ev_sub.add_parser("run")
    _add_common(er)
    er.add_argument("--corpus-dir")
    er.add_argument("--params")
    er.add_argument("--k", type=int)
    er.add_argument("--threads", type=int)
    er.add_argument("--modes", help="comma-separated attack modes")
    er.add_argument("--defenses", help="comma-separated defense methods")
    er.add_argument("--n-key-tokens", type=int, dest="n_key_tokens")
    er.add_argument("--m-lowest", type=int, dest="m_lowest")
    er.add_argument("--lambda", type=float, dest="lam")
    er.add_argument("--k-calibration", type=int, dest="k_calibration")
    er.add_argument("--calibration-mode", choices=("relevant", "random"),
                    dest="calibration_mode")
    er.set_defaults(func=cmd_eval_run)
    es = ev_sub.add_parser("sweep")
    _add_common(es)
    es.add_argument("--param", choices=("N", "M", "lambda"), required=True)
    es.add_argument("--values", required=True)
    es.add_argument("--corpus-dir")
    es.add_argument("--params")
    es.add_argument("--k", type=int)
    es.add_argument("--threads", type=int)
    es.add_argument("--mode")
    es.add_argument("--n-key-tokens", type=int, dest="n_key_tokens")
    es.add_argument("--m-lowest", type=int, dest="m_lowest")
    es.add_argument("--lambda", type=float, dest="lam")
    es.add_argument("--k-calibration", type=int, dest="k_calibration")
    es.add_argument("--calibration-mode", choices=("relevant", "random"),
                    dest="calibration_mode")
    es.set_defaults(func=cmd_eval_sweep)

    rep = sub.add_parser("report")
    rep.add_argument("--results", required=True)
    rep.add_argument("--format", choices=("json", "csv"), default="csv")
    rep.add_argument("--out-dir")
    rep.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except RagwardError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
