"""Command-line surface: gen-synth | finetune | distill | rerank |
evaluate | flops.

Flag precedence is command line > --config file > built-in defaults; the
resolved configuration is persisted next to every command's outputs.
Partially written outputs are removed when a command fails.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .checkpoint import load_checkpoint, save_checkpoint
from .dataio import (
    SyntheticSpec,
    Vocab,
    build_vocab,
    candidate_run_records,
    gen_synthetic_corpus,
    parse_collection,
    parse_qrels,
    parse_run,
    run_to_rankings,
    write_run,
)
from .encoder import EncoderConfig
from .flops import estimate_macs, format_macs
from .metrics import evaluate_run
from .pipeline import (
    DistillPlan,
    finetune,
    make_mrr10_evaluator,
    run_distillation,
)
from .rank import PassageSplitConfig, build_training_pairs, rerank_run


class CliError(RuntimeError):
    pass


def _set_threads(n: int | None):
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _merge_config(defaults: dict, config_path: str | None, args: dict) -> dict:
    resolved = dict(defaults)
    if config_path:
        with open(config_path, encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise CliError(f"unknown keys in config file: {sorted(unknown)}")
        resolved.update(file_cfg)
    for key, value in args.items():
        if key in defaults and value is not None:
            resolved[key] = value
    return resolved


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_log(path, log):
    with open(path, "w", encoding="utf-8") as fh:
        for record in log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _load_data_dir(data_dir):
    collection = parse_collection(
        os.path.join(data_dir, "queries.tsv"),
        os.path.join(data_dir, "docs.tsv"),
        os.path.join(data_dir, "qrels.txt"),
        os.path.join(data_dir, "candidates.run"),
    )
    vocab = Vocab.load(os.path.join(data_dir, "vocab.txt"))
    with open(os.path.join(data_dir, "splits.json"), encoding="utf-8") as fh:
        splits = json.load(fh)
    return collection, vocab, splits


def _split_cfg(cfg: dict) -> PassageSplitConfig:
    return PassageSplitConfig(
        window=cfg["window"],
        stride=cfg["stride"],
        max_query_tokens=cfg["max_query_tokens"],
        max_input_tokens=cfg["max_input_tokens"],
    )


# -- subcommands -------------------------------------------------------------


def cmd_gen_synth(args, outputs):
    defaults = {
        "queries": 2000,
        "vocab_size": 400,
        "docs_per_query": 5,
        "doc_length_min": 10,
        "doc_length_max": 20,
        "signal": 0.8,
        "plant_copies": 3,
        "train_fraction": 0.8,
        "seed": 0,
    }
    cfg = _merge_config(defaults, args.config, vars(args))
    spec = SyntheticSpec(
        num_queries=cfg["queries"],
        vocab_size=cfg["vocab_size"],
        docs_per_query=cfg["docs_per_query"],
        doc_length=(cfg["doc_length_min"], cfg["doc_length_max"]),
        signal_strength=cfg["signal"],
        plant_copies=cfg["plant_copies"],
        train_fraction=cfg["train_fraction"],
    )
    corpus = gen_synthetic_corpus(spec, seed=cfg["seed"])
    col = corpus.collection
    os.makedirs(args.out, exist_ok=True)

    def out(name):
        path = os.path.join(args.out, name)
        outputs.append(path)
        return path

    with open(out("queries.tsv"), "w", encoding="utf-8") as fh:
        for qid in sorted(col.queries):
            fh.write(f"{qid}\t{col.queries[qid]}\n")
    with open(out("docs.tsv"), "w", encoding="utf-8") as fh:
        for docid in sorted(col.docs):
            url, title, body = col.docs[docid]
            fh.write(f"{docid}\t{url}\t{title}\t{body}\n")
    with open(out("qrels.txt"), "w", encoding="utf-8") as fh:
        for (qid, docid), grade in sorted(col.qrels.items()):
            fh.write(f"{qid} 0 {docid} {grade}\n")
    write_run(candidate_run_records(col.candidates), "first-stage",
              out("candidates.run"))
    texts = list(col.queries.values()) + [
        f"{title} {body}" for _url, title, body in col.docs.values()
    ]
    build_vocab(texts).save(out("vocab.txt"))
    _write_json(out("splits.json"), {
        "train": corpus.train_qids,
        "val": corpus.val_qids,
        "test": corpus.test_qids,
    })
    _write_json(out("config.json"), cfg)
    print(f"wrote synthetic corpus ({cfg['queries']} queries) to {args.out}")


def cmd_finetune(args, outputs):
    defaults = {
        "layers": 4, "hidden": 64, "heads": 2, "intermediate": None,
        "max_position": 128, "dropout": 0.0,
        "window": 200, "stride": 100, "max_query_tokens": 32,
        "max_input_tokens": 256,
        "epochs": 2, "batch": 128, "lr": 1e-6, "weight_decay": 0.01,
        "negatives_per_query": 1, "passages_per_doc": 5,
        "seed": 0,
    }
    cfg = _merge_config(defaults, args.config, vars(args))
    collection, vocab, splits = _load_data_dir(args.data)
    split_cfg = _split_cfg(cfg)
    enc_cfg = EncoderConfig(
        num_layers=cfg["layers"], hidden_size=cfg["hidden"],
        num_heads=cfg["heads"], intermediate_size=cfg["intermediate"],
        vocab_size=len(vocab), max_position=cfg["max_position"],
        dropout_prob=cfg["dropout"],
    )
    report = build_training_pairs(
        None, collection.queries, collection.docs, collection.qrels,
        collection.candidates, vocab, split_cfg, qids=splits["train"],
        negatives_per_query=cfg["negatives_per_query"],
        passages_per_doc=cfg["passages_per_doc"], seed=cfg["seed"],
    )
    if report.skipped_queries:
        print(f"warning: {report.skipped_queries} queries without judged "
              "relevant documents were skipped", file=sys.stderr)
    ckpt, log = finetune(
        enc_cfg, report.pairs, epochs=cfg["epochs"], batch_size=cfg["batch"],
        lr=cfg["lr"], weight_decay=cfg["weight_decay"], seed=cfg["seed"],
    )
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "teacher.ckpt")
    outputs.append(ckpt_path)
    save_checkpoint(ckpt_path, ckpt)
    log_path = os.path.join(args.out, "train_log.jsonl")
    outputs.append(log_path)
    _write_log(log_path, log)
    cfg_path = os.path.join(args.out, "config.json")
    outputs.append(cfg_path)
    _write_json(cfg_path, cfg)
    print(f"fine-tuned teacher saved to {ckpt_path} "
          f"({len(log)} optimizer steps)")


def cmd_distill(args, outputs):
    defaults = {
        "mode": "simplified_one_step",
        "layers": 2, "hidden": 32, "heads": 2, "intermediate": None,
        "max_position": 128, "dropout": 0.0,
        "window": 200, "stride": 100, "max_query_tokens": 32,
        "max_input_tokens": 256,
        "epochs": 2, "batch_prediction": 128, "batch_intermediate": 64,
        "desk_scale": 1,
        "lr_prediction": 1e-6, "lr_intermediate": 5e-5,
        "weight_decay": 0.01, "temperature": 1.0,
        "init_first_k": None,
        "negatives_per_query": 1, "passages_per_doc": 5,
        "seed": 0,
    }
    cfg = _merge_config(defaults, args.config, vars(args))
    collection, vocab, splits = _load_data_dir(args.data)
    split_cfg = _split_cfg(cfg)
    teacher = load_checkpoint(args.teacher)
    student_cfg = EncoderConfig(
        num_layers=cfg["layers"], hidden_size=cfg["hidden"],
        num_heads=cfg["heads"], intermediate_size=cfg["intermediate"],
        vocab_size=len(vocab), max_position=cfg["max_position"],
        dropout_prob=cfg["dropout"],
    )
    report = build_training_pairs(
        teacher.to_encoder(trainable=False), collection.queries,
        collection.docs, collection.qrels, collection.candidates, vocab,
        split_cfg, qids=splits["train"],
        negatives_per_query=cfg["negatives_per_query"],
        passages_per_doc=cfg["passages_per_doc"], seed=cfg["seed"],
    )
    if report.skipped_queries:
        print(f"warning: {report.skipped_queries} queries skipped",
              file=sys.stderr)
    plan = DistillPlan(
        mode=cfg["mode"], epochs=cfg["epochs"],
        batch_size_prediction=cfg["batch_prediction"],
        batch_size_intermediate=cfg["batch_intermediate"],
        desk_scale=cfg["desk_scale"],
        lr_prediction=cfg["lr_prediction"],
        lr_intermediate=cfg["lr_intermediate"],
        weight_decay=cfg["weight_decay"], temperature=cfg["temperature"],
        init_from_first_k=cfg["init_first_k"], seed=cfg["seed"],
    )
    evaluator = make_mrr10_evaluator(collection, splits["val"], split_cfg,
                                     vocab)
    student, log, extras = run_distillation(
        plan, teacher, student_cfg, report.pairs, evaluator=evaluator,
    )
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "student.ckpt")
    outputs.append(ckpt_path)
    save_checkpoint(ckpt_path, student)
    log_path = os.path.join(args.out, "train_log.jsonl")
    outputs.append(log_path)
    _write_log(log_path, log)
    if "selected_hyper" in extras:
        hyper = extras["selected_hyper"]
        cfg["selected_temperature"] = hyper.temperature
        cfg["selected_alpha"] = hyper.alpha
    cfg_path = os.path.join(args.out, "config.json")
    outputs.append(cfg_path)
    _write_json(cfg_path, cfg)
    print(f"distilled student ({cfg['mode']}) saved to {ckpt_path} "
          f"({len(log)} optimizer steps)")


def cmd_rerank(args, outputs):
    defaults = {
        "split": "test", "depth": None, "tag": "distilrank",
        "window": 200, "stride": 100, "max_query_tokens": 32,
        "max_input_tokens": 256, "seed": 0,
    }
    cfg = _merge_config(defaults, args.config, vars(args))
    collection, vocab, splits = _load_data_dir(args.data)
    split_cfg = _split_cfg(cfg)
    model = load_checkpoint(args.model).to_encoder(trainable=False)
    if cfg["split"] == "all":
        qids = sorted(collection.candidates)
    else:
        qids = splits[cfg["split"]]
    records = rerank_run(model, collection.queries, collection.candidates,
                         collection.docs, cfg["depth"], split_cfg, vocab,
                         qids=qids)
    outputs.append(args.out)
    write_run(records, cfg["tag"], args.out)
    resolved = os.path.splitext(args.out)[0] + ".config.json"
    outputs.append(resolved)
    _write_json(resolved, cfg)
    print(f"wrote run for {len(qids)} queries to {args.out}")


def cmd_evaluate(args, outputs):
    defaults = {"mrr_cutoff": None, "seed": 0}
    cfg = _merge_config(defaults, args.config, vars(args))
    qrels = parse_qrels(args.qrels)
    rankings = run_to_rankings(parse_run(args.run))
    report = evaluate_run(rankings, qrels, mrr_cutoff=cfg["mrr_cutoff"])
    for baseline_path in args.baseline or []:
        base_rankings = run_to_rankings(parse_run(baseline_path))
        base_report = evaluate_run(base_rankings, qrels,
                                   mrr_cutoff=cfg["mrr_cutoff"])
        report.add_baseline(os.path.basename(baseline_path),
                            base_report.metrics)
    text = report.render()
    if args.out:
        outputs.append(args.out)
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text, end="")


def cmd_flops(args, outputs):
    defaults = {"intermediate": None, "seq": 256, "heads": None}
    cfg = _merge_config(defaults, args.config, vars(args))
    heads = cfg["heads"] or max(1, args.hidden // 64)
    config = EncoderConfig(
        num_layers=args.layers, hidden_size=args.hidden, num_heads=heads,
        intermediate_size=cfg["intermediate"],
    )
    macs = estimate_macs(config, cfg["seq"])
    if args.baseline:
        parts = [int(x) for x in args.baseline.split(",")]
        if len(parts) == 2:
            bl, bh = parts
            bi = None
        elif len(parts) == 3:
            bl, bh, bi = parts
        else:
            raise CliError("--baseline expects L,H or L,H,I")
        base_cfg = EncoderConfig(
            num_layers=bl, hidden_size=bh, num_heads=max(1, bh // 64),
            intermediate_size=bi,
        )
        ratio = estimate_macs(base_cfg, cfg["seq"]) / macs
    else:
        ratio = 1.0
    print(f"{format_macs(macs)} ({ratio:.2f}x)")


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distilrank",
        description="Desk-scale neural re-ranking and knowledge distillation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (flags override)")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--deterministic", action="store_true")

    p = sub.add_parser("gen-synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--queries", type=int)
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--docs-per-query", dest="docs_per_query", type=int)
    p.add_argument("--doc-length-min", dest="doc_length_min", type=int)
    p.add_argument("--doc-length-max", dest="doc_length_max", type=int)
    p.add_argument("--signal", type=float)
    p.add_argument("--plant-copies", dest="plant_copies", type=int)
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    common(p)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("finetune", help="fine-tune a teacher on hard labels")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    for flag in ("--layers", "--hidden", "--heads", "--intermediate",
                 "--max-position", "--epochs", "--batch",
                 "--negatives-per-query", "--passages-per-doc",
                 "--window", "--stride", "--max-query-tokens",
                 "--max-input-tokens"):
        p.add_argument(flag, dest=flag[2:].replace("-", "_"), type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--dropout", type=float)
    common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("distill", help="run a distillation plan")
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=(
        "standard_kd", "tinybert_two_stage", "simplified_one_step",
        "ablation_hard_only", "ablation_one_step_only"))
    for flag in ("--layers", "--hidden", "--heads", "--intermediate",
                 "--max-position", "--epochs", "--batch-prediction",
                 "--batch-intermediate", "--desk-scale", "--init-first-k",
                 "--negatives-per-query", "--passages-per-doc",
                 "--window", "--stride", "--max-query-tokens",
                 "--max-input-tokens"):
        p.add_argument(flag, dest=flag[2:].replace("-", "_"), type=int)
    for flag in ("--lr-prediction", "--lr-intermediate", "--weight-decay",
                 "--temperature", "--dropout"):
        p.add_argument(flag, dest=flag[2:].replace("-", "_"), type=float)
    common(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("rerank", help="re-rank candidates with a model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"))
    p.add_argument("--depth", type=int)
    p.add_argument("--tag")
    for flag in ("--window", "--stride", "--max-query-tokens",
                 "--max-input-tokens"):
        p.add_argument(flag, dest=flag[2:].replace("-", "_"), type=int)
    common(p)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("evaluate", help="score a run against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--baseline", action="append")
    p.add_argument("--out")
    p.add_argument("--mrr-cutoff", dest="mrr_cutoff", type=int)
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("flops", help="MAC estimate and speedup ratio")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--hidden", type=int, required=True)
    p.add_argument("--heads", type=int)
    p.add_argument("--intermediate", type=int)
    p.add_argument("--seq", type=int)
    p.add_argument("--baseline", help="reference config L,H or L,H,I")
    common(p)
    p.set_defaults(func=cmd_flops)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _set_threads(getattr(args, "threads", None))
    outputs = []
    try:
        args.func(args, outputs)
    except Exception as exc:  # noqa: BLE001 - single diagnostic line contract
        for path in outputs:
            if os.path.exists(path):
                os.remove(path)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
