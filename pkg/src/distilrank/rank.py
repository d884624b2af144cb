"""Passage splitting, MaxP document scoring, training-pair construction,
and re-ranking at a chosen depth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import RunRecord, Vocab, tokenize
from .encoder import Encoder
from .tensor import ContractError


@dataclass(frozen=True)
class PassageSplitConfig:
    window: int = 200
    stride: int = 100
    max_query_tokens: int = 32
    max_input_tokens: int = 256

    def __post_init__(self):
        if not 0 < self.stride <= self.window:
            raise ValueError(f"need 0 < stride <= window, got {self.stride}/{self.window}")
        # [CLS] q [SEP] p [SEP]: three special tokens on top of text
        if self.window + self.max_query_tokens + 3 > self.max_input_tokens:
            raise ValueError(
                f"window {self.window} + query cap {self.max_query_tokens} + 3 "
                f"special tokens exceeds input budget {self.max_input_tokens}"
            )


@dataclass
class Candidate:
    query_id: str
    doc_id: str
    original_rank: int
    doc_score: float = 0.0


@dataclass
class TrainingPair:
    query_id: str
    passage: list                  # passage token ids
    label: int
    input_ids: list                # [CLS] q [SEP] p [SEP]
    segment_ids: list
    teacher_logits: tuple | None = None


def split_passages(doc_tokens, cfg: PassageSplitConfig) -> list:
    """Overlapping windows at offsets 0, stride, 2*stride, ...

    Emission stops with the first window that reaches the end of the
    document, so a short document yields exactly one passage.
    """
    tokens = list(doc_tokens)
    if not tokens:
        return []
    passages = []
    offset = 0
    while True:
        passages.append(tokens[offset:offset + cfg.window])
        if offset + cfg.window >= len(tokens):
            break
        offset += cfg.stride
    return passages


def build_model_input(query_ids, passage_ids, cfg: PassageSplitConfig,
                      vocab: Vocab):
    """[CLS] query [SEP] passage [SEP] with 0/1 segment ids."""
    q = list(query_ids)[:cfg.max_query_tokens]
    p = list(passage_ids)[:cfg.window]
    input_ids = [vocab.cls_id] + q + [vocab.sep_id] + p + [vocab.sep_id]
    segment_ids = [0] * (len(q) + 2) + [1] * (len(p) + 1)
    if len(input_ids) > cfg.max_input_tokens:
        raise ContractError(
            f"input length {len(input_ids)} exceeds {cfg.max_input_tokens}"
        )
    return input_ids, segment_ids


def _batched_scores(model: Encoder, inputs: list, batch_size: int = 64
                    ) -> np.ndarray:
    """Relevance probabilities for (input_ids, segment_ids) pairs."""
    scores = np.empty(len(inputs))
    for start in range(0, len(inputs), batch_size):
        chunk = inputs[start:start + batch_size]
        width = max(len(ids) for ids, _ in chunk)
        tok = np.zeros((len(chunk), width), dtype=np.int64)
        seg = np.zeros((len(chunk), width), dtype=np.int64)
        mask = np.zeros((len(chunk), width))
        for i, (ids, segs) in enumerate(chunk):
            tok[i, :len(ids)] = ids
            seg[i, :len(segs)] = segs
            mask[i, :len(ids)] = 1.0
        trace = model.forward(tok, seg, mask)
        scores[start:start + len(chunk)] = trace.scores
    return scores


def doc_tokens_for(doc, vocab: Vocab) -> list:
    """Title joined to body with a [SEP] before splitting."""
    _url, title, body = doc
    return tokenize(title, vocab) + [vocab.sep_id] + tokenize(body, vocab)


def score_document(model: Encoder, query_tokens, doc_tokens,
                   cfg: PassageSplitConfig, vocab: Vocab):
    """MaxP: each passage scored independently, document takes the max."""
    passages = split_passages(doc_tokens, cfg)
    if not passages:
        return 0.0, []
    inputs = [build_model_input(query_tokens, p, cfg, vocab) for p in passages]
    scores = _batched_scores(model, inputs)
    return float(scores.max()), scores.tolist()


def _teacher_logits(model: Encoder, inputs: list, batch_size: int = 64):
    logits = np.empty((len(inputs), model.config.num_labels))
    for start in range(0, len(inputs), batch_size):
        chunk = inputs[start:start + batch_size]
        width = max(len(ids) for ids, _ in chunk)
        tok = np.zeros((len(chunk), width), dtype=np.int64)
        seg = np.zeros((len(chunk), width), dtype=np.int64)
        mask = np.zeros((len(chunk), width))
        for i, (ids, segs) in enumerate(chunk):
            tok[i, :len(ids)] = ids
            seg[i, :len(segs)] = segs
            mask[i, :len(ids)] = 1.0
        trace = model.forward(tok, seg, mask)
        logits[start:start + len(chunk)] = trace.logits.data
    return logits


def _select_passages(passages, scores, keep: int):
    """Indices of the `keep` best passages; ties go to the earlier offset."""
    order = sorted(range(len(passages)), key=lambda i: (-scores[i], i))
    return sorted(order[:keep])


@dataclass
class PairBuildReport:
    pairs: list
    skipped_queries: int = 0


def build_training_pairs(
    teacher: Encoder | None,
    queries: dict,
    docs: dict,
    qrels,
    candidates: dict,
    vocab: Vocab,
    cfg: PassageSplitConfig,
    qids: list | None = None,
    negatives_per_query: int = 1,
    passages_per_doc: int = 5,
    seed: int = 0,
) -> PairBuildReport:
    """Teacher-filtered positives and sampled negatives.

    For each query the relevant document's passages are scored by the
    teacher and the `passages_per_doc` best kept; sampled non-relevant
    candidates get the same filter. Teacher logits are cached on every
    pair. With no teacher (bootstrap fine-tuning), passages are kept in
    document order and no logits are cached.
    """
    rng = np.random.default_rng(seed)
    pairs = []
    skipped = 0
    for qid in sorted(qids if qids is not None else queries):
        query_tokens = tokenize(queries[qid], vocab)
        cand = candidates.get(qid, [])
        positives = [d for d in cand if qrels.grade(qid, d) > 0]
        if not positives:
            skipped += 1
            continue
        negatives_pool = sorted(d for d in cand if qrels.grade(qid, d) == 0)
        n_neg = min(negatives_per_query * len(positives), len(negatives_pool))
        chosen_neg = [
            negatives_pool[i]
            for i in sorted(rng.choice(len(negatives_pool), size=n_neg,
                                       replace=False))
        ] if n_neg else []
        for docid, label in [(d, 1) for d in positives] + \
                            [(d, 0) for d in chosen_neg]:
            doc_toks = doc_tokens_for(docs[docid], vocab)
            passages = split_passages(doc_toks, cfg)
            if not passages:
                continue
            inputs = [build_model_input(query_tokens, p, cfg, vocab)
                      for p in passages]
            if teacher is not None:
                logits = _teacher_logits(teacher, inputs)
                probs = np.exp(logits[:, 1]) / np.exp(logits).sum(axis=1)
                keep = _select_passages(passages, probs, passages_per_doc)
            else:
                logits = None
                keep = list(range(min(passages_per_doc, len(passages))))
            for i in keep:
                ids, segs = inputs[i]
                pairs.append(TrainingPair(
                    query_id=qid,
                    passage=passages[i],
                    label=label,
                    input_ids=ids,
                    segment_ids=segs,
                    teacher_logits=tuple(logits[i]) if logits is not None
                    else None,
                ))
    return PairBuildReport(pairs=pairs, skipped_queries=skipped)


def rerank_run(model: Encoder, queries: dict, candidates: dict, docs: dict,
               depth: int | None, cfg: PassageSplitConfig, vocab: Vocab,
               qids=None, batch_size: int = 256) -> list:
    """Batched multi-query re-ranking; semantics identical to rerank().

    `candidates` maps qid -> [docid in first-stage order]; depth=None
    re-scores every candidate. Scoring batches span queries for speed.
    """
    qids = sorted(qids if qids is not None else candidates)
    inputs = []
    slices = {}  # (qid, docid) -> (start, end) into inputs
    for qid in qids:
        query_tokens = tokenize(queries[qid], vocab)
        d = len(candidates[qid]) if depth is None else depth
        if not 1 <= d <= len(candidates[qid]):
            raise ContractError(
                f"depth {d} out of range for query {qid}"
            )
        for docid in candidates[qid][:d]:
            passages = split_passages(doc_tokens_for(docs[docid], vocab), cfg)
            start = len(inputs)
            inputs.extend(
                build_model_input(query_tokens, p, cfg, vocab)
                for p in passages
            )
            slices[(qid, docid)] = (start, len(inputs))
    scores = _batched_scores(model, inputs, batch_size=batch_size)

    records = []
    for qid in qids:
        cand = candidates[qid]
        d = len(cand) if depth is None else depth
        head = []
        for original_rank, docid in enumerate(cand[:d], start=1):
            start, end = slices[(qid, docid)]
            doc_score = float(scores[start:end].max()) if end > start else 0.0
            head.append((doc_score, original_rank, docid))
        head.sort(key=lambda t: (-t[0], t[1], t[2]))
        for rank, (doc_score, _orig, docid) in enumerate(head, start=1):
            records.append(RunRecord(qid, docid, rank, doc_score))
        floor = min((t[0] for t in head), default=1.0)
        for i, docid in enumerate(cand[d:], start=1):
            records.append(RunRecord(qid, docid, d + i, floor - 1e-6 * i))
    return records


def rerank(model: Encoder, query_tokens, candidates: list, docs: dict,
           depth: int, cfg: PassageSplitConfig, vocab: Vocab) -> list:
    """Re-score the top-`depth` candidates, keep the tail in first-stage order.

    Ties in model score break by original rank, then doc_id. Output ranks
    are dense 1..len(candidates); tail scores sit strictly below every
    re-scored document.
    """
    if not 1 <= depth <= len(candidates):
        raise ContractError(
            f"depth {depth} out of range [1, {len(candidates)}]"
        )
    ordered = sorted(candidates, key=lambda c: c.original_rank)
    head, tail = ordered[:depth], ordered[depth:]
    for c in head:
        doc_toks = doc_tokens_for(docs[c.doc_id], vocab)
        c.doc_score, _ = score_document(model, query_tokens, doc_toks, cfg,
                                        vocab)
    head = sorted(head, key=lambda c: (-c.doc_score, c.original_rank, c.doc_id))
    records = []
    qid = candidates[0].query_id
    for rank, c in enumerate(head, start=1):
        records.append(RunRecord(qid, c.doc_id, rank, c.doc_score))
    floor = min((c.doc_score for c in head), default=1.0)
    for i, c in enumerate(tail, start=1):
        records.append(
            RunRecord(qid, c.doc_id, depth + i, floor - 1e-6 * i)
        )
    return records
