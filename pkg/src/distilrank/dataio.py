"""Corpus files, tokenization, and the synthetic desk-scale corpus.

File formats (all UTF-8 plain text):
  queries:  qid<TAB>text
  docs:     docid<TAB>url<TAB>title<TAB>body
  qrels:    qid 0 docid grade        (space separated)
  run:      qid Q0 docid rank score tag
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .metrics import Qrels

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
CONTINUATION = "##"


class ParseError(ValueError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


# -- vocabulary and tokenization --------------------------------------------


class Vocab:
    def __init__(self, tokens: list):
        for required in (PAD, UNK, CLS, SEP):
            if required not in tokens:
                raise ValueError(f"vocab missing reserved token {required}")
        if tokens[0] != PAD:
            raise ValueError("[PAD] must have id 0")
        self.tokens = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        if len(self.token_to_id) != len(tokens):
            raise ValueError("duplicate token in vocab")

    def __len__(self):
        return len(self.tokens)

    @property
    def pad_id(self):
        return self.token_to_id[PAD]

    @property
    def unk_id(self):
        return self.token_to_id[UNK]

    @property
    def cls_id(self):
        return self.token_to_id[CLS]

    @property
    def sep_id(self):
        return self.token_to_id[SEP]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for t in self.tokens:
                fh.write(t + "\n")

    @staticmethod
    def load(path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return Vocab([line.rstrip("\n") for line in fh if line.strip()])


_WORD_RE = re.compile(r"\w+|[^\w\s]")


def _split_words(text: str) -> list:
    return _WORD_RE.findall(text.lower())


def build_vocab(texts, max_words: int = 5000) -> Vocab:
    """Frequency vocab with single-character subword fallback."""
    freq = {}
    chars = set()
    for text in texts:
        for word in _split_words(text):
            freq[word] = freq.get(word, 0) + 1
            chars.update(word)
    tokens = [PAD, UNK, CLS, SEP]
    # character pieces guarantee the greedy matcher always makes progress
    for ch in sorted(chars):
        tokens.append(ch)
        tokens.append(CONTINUATION + ch)
    seen = set(tokens)
    by_freq = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))
    for word, _ in by_freq[:max_words]:
        if word not in seen:
            tokens.append(word)
            seen.add(word)
    return Vocab(tokens)


def tokenize(text: str, vocab: Vocab) -> list:
    """Lowercase, word-split, then greedy longest-match subwords."""
    ids = []
    for word in _split_words(text):
        pieces = []
        start = 0
        failed = False
        while start < len(word):
            end = len(word)
            piece_id = None
            while end > start:
                piece = word[start:end]
                if start > 0:
                    piece = CONTINUATION + piece
                if piece in vocab.token_to_id:
                    piece_id = vocab.token_to_id[piece]
                    break
                end -= 1
            if piece_id is None:
                failed = True
                break
            pieces.append(piece_id)
            start = end
        ids.extend([vocab.unk_id] if failed else pieces)
    return ids


def detokenize(ids, vocab: Vocab) -> str:
    words = []
    for i in ids:
        tok = vocab.tokens[i]
        if tok.startswith(CONTINUATION) and words:
            words[-1] += tok[len(CONTINUATION):]
        else:
            words.append(tok)
    return " ".join(words)


# -- run records ------------------------------------------------------------


@dataclass(frozen=True)
class RunRecord:
    query_id: str
    doc_id: str
    rank: int
    score: float


class RunFormatError(ValueError):
    pass


def write_run(records, tag: str, path):
    """Emit `qid Q0 docid rank score tag`, qids ascending, ranks dense."""
    by_query = {}
    for rec in records:
        by_query.setdefault(rec.query_id, []).append(rec)
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(by_query):
            recs = sorted(by_query[qid], key=lambda r: r.rank)
            prev_score = None
            for i, rec in enumerate(recs, start=1):
                if rec.rank != i:
                    raise RunFormatError(
                        f"query {qid}: ranks not dense from 1 (saw {rec.rank} "
                        f"at position {i})"
                    )
                if prev_score is not None and rec.score > prev_score + 1e-12:
                    raise RunFormatError(
                        f"query {qid}: scores increase at rank {rec.rank}"
                    )
                prev_score = rec.score
                fh.write(
                    f"{qid} Q0 {rec.doc_id} {rec.rank} {rec.score:.6f} {tag}\n"
                )


def parse_run(path) -> list:
    """Run file -> RunRecord list; ranks must be dense from 1 per query."""
    records = []
    last_rank = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ParseError(path, line_no, f"expected 6 fields, got {len(parts)}")
            qid, q0, docid, rank_s, score_s, _tag = parts
            try:
                rank = int(rank_s)
                score = float(score_s)
            except ValueError:
                raise ParseError(path, line_no, "bad rank or score") from None
            expected = last_rank.get(qid, 0) + 1
            if rank != expected:
                raise ParseError(
                    path, line_no,
                    f"query {qid}: rank {rank} breaks dense order "
                    f"(expected {expected})",
                )
            last_rank[qid] = rank
            records.append(RunRecord(qid, docid, rank, score))
    return records


def run_to_rankings(records) -> dict:
    """RunRecords -> qid -> [docid by rank], for the metric functions."""
    out = {}
    for rec in sorted(records, key=lambda r: (r.query_id, r.rank)):
        out.setdefault(rec.query_id, []).append(rec.doc_id)
    return out


# -- collection parsing ------------------------------------------------------


@dataclass
class Collection:
    queries: dict                     # qid -> text
    docs: dict                        # docid -> (url, title, body)
    qrels: Qrels
    candidates: dict                  # qid -> [docid, ordered by rank]


def parse_queries(path) -> dict:
    queries = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise ParseError(path, line_no, f"expected 2 fields, got {len(parts)}")
            qid, text = parts
            if qid in queries:
                raise ParseError(path, line_no, f"duplicate qid {qid}")
            queries[qid] = text
    return queries


def parse_docs(path) -> dict:
    docs = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise ParseError(path, line_no, f"expected 4 fields, got {len(parts)}")
            docid, url, title, body = parts
            if docid in docs:
                raise ParseError(path, line_no, f"duplicate docid {docid}")
            docs[docid] = (url, title, body)
    return docs


def parse_qrels(path) -> Qrels:
    qrels = Qrels()
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ParseError(path, line_no, f"expected 4 fields, got {len(parts)}")
            qid, _, docid, grade_s = parts
            try:
                grade = int(grade_s)
            except ValueError:
                raise ParseError(path, line_no,
                                 f"non-integer grade {grade_s!r}") from None
            if grade < 0:
                raise ParseError(path, line_no, f"negative grade {grade}")
            if (qid, docid) in seen:
                raise ParseError(path, line_no,
                                 f"duplicate judgment ({qid}, {docid})")
            seen.add((qid, docid))
            qrels.add(qid, docid, grade)
    return qrels


def parse_candidates(path) -> dict:
    """Top-k run file -> qid -> [docid by rank]."""
    return run_to_rankings(parse_run(path))


def parse_collection(queries_path, docs_path, qrels_path, candidates_path
                     ) -> Collection:
    return Collection(
        queries=parse_queries(queries_path),
        docs=parse_docs(docs_path),
        qrels=parse_qrels(qrels_path),
        candidates=parse_candidates(candidates_path),
    )


# -- synthetic corpus --------------------------------------------------------

# dev queries split into validation:test at the 727:4466 ratio
VAL_FRACTION_OF_DEV = 727 / (727 + 4466)


@dataclass(frozen=True)
class SyntheticSpec:
    num_queries: int = 2000
    vocab_size: int = 400             # lexicon words, not subword vocab size
    docs_per_query: int = 5           # 1 relevant + rest non-relevant
    doc_length: tuple = (10, 20)
    signal_strength: float = 0.8      # P(query terms planted in relevant doc)
    query_terms: tuple = (2, 3)
    plant_copies: int = 3             # insertions per query term
    train_fraction: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.signal_strength <= 1.0:
            raise ValueError("signal_strength must lie in (0, 1]")
        if self.docs_per_query < 2:
            raise ValueError("need at least one negative per query")


@dataclass
class SyntheticCorpus:
    collection: Collection
    train_qids: list
    val_qids: list
    test_qids: list


def _lexicon(rng: np.random.Generator, size: int) -> list:
    letters = "abcdefghijklmnopqrstuvwxyz"
    words = []
    seen = set()
    while len(words) < size:
        n = int(rng.integers(3, 9))
        w = "".join(letters[i] for i in rng.integers(0, 26, n))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def gen_synthetic_corpus(spec: SyntheticSpec, seed: int) -> SyntheticCorpus:
    """Planted-signal ranking corpus; a pure function of (spec, seed).

    The relevant document embeds the query's terms with probability
    signal_strength; all other text is drawn from the background lexicon.
    Candidate order (the stand-in first-stage ranking) is a seeded
    shuffle, so re-ranking has room to help at every depth.
    """
    rng = np.random.default_rng(seed)
    lex = _lexicon(rng, spec.vocab_size)
    queries = {}
    docs = {}
    qrels = Qrels()
    candidates = {}
    lo, hi = spec.doc_length
    for qi in range(spec.num_queries):
        qid = f"q{qi:05d}"
        n_terms = int(rng.integers(spec.query_terms[0], spec.query_terms[1] + 1))
        term_ids = rng.choice(len(lex), size=n_terms, replace=False)
        terms = [lex[i] for i in term_ids]
        queries[qid] = " ".join(terms)

        doc_ids = []
        for di in range(spec.docs_per_query):
            docid = f"d{qi:05d}_{di}"
            length = int(rng.integers(lo, hi + 1))
            body_words = [lex[i] for i in rng.integers(0, len(lex), length)]
            relevant = di == 0
            if relevant and rng.random() < spec.signal_strength:
                for term in terms:
                    for _ in range(spec.plant_copies):
                        pos = int(rng.integers(0, len(body_words) + 1))
                        body_words.insert(pos, term)
            title_words = [lex[i] for i in rng.integers(0, len(lex), 2)]
            docs[docid] = (
                f"synth://{docid}",
                " ".join(title_words),
                " ".join(body_words),
            )
            doc_ids.append(docid)
        qrels.add(qid, doc_ids[0], 1)
        order = rng.permutation(spec.docs_per_query)
        candidates[qid] = [doc_ids[i] for i in order]

    qid_list = sorted(queries)
    perm = rng.permutation(len(qid_list))
    shuffled = [qid_list[i] for i in perm]
    n_train = int(round(spec.train_fraction * len(shuffled)))
    dev = shuffled[n_train:]
    n_val = max(1, int(round(VAL_FRACTION_OF_DEV * len(dev)))) if dev else 0
    return SyntheticCorpus(
        collection=Collection(queries, docs, qrels, candidates),
        train_qids=sorted(shuffled[:n_train]),
        val_qids=sorted(dev[:n_val]),
        test_qids=sorted(dev[n_val:]),
    )


def candidate_run_records(candidates: dict) -> list:
    """First-stage candidate lists as a run (descending synthetic scores)."""
    records = []
    for qid in sorted(candidates):
        for rank, docid in enumerate(candidates[qid], start=1):
            records.append(RunRecord(qid, docid, rank, 1.0 / rank))
    return records
