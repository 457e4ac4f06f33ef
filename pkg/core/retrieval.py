"""
BM25 (Okapi) поиск для режима с извлечением документов и recall@k
"""

import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from django.conf import settings

from .corpus import Document
from .exceptions import PreconditionError, RetrievalError

logger = logging.getLogger(__name__)

_NON_ALNUM = re.compile(r'[\W_]+')


def analyze(text: str) -> List[str]:
    """Нижний регистр, разбиение по не-буквенно-цифровым символам; без стемминга и стоп-слов"""
    return [token for token in _NON_ALNUM.split(text.lower()) if token]


@dataclass
class InvertedIndex:
    postings: Dict[str, List[Tuple[str, int]]]
    doc_lengths: Dict[str, int]
    avg_doc_length: float
    doc_count: int
    k1: float = 1.2
    b: float = 0.75
    _term_frequencies: Dict[str, Dict[str, int]] = field(default_factory=dict, repr=False)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log(1 + (self.doc_count - df + 0.5) / (df + 0.5))

    def term_frequency(self, term: str, doc_id: str) -> int:
        return self._term_frequencies.get(term, {}).get(doc_id, 0)


@dataclass(frozen=True)
class RetrievalResult:
    """Ранжированный список (doc_id, score) по убыванию score, при равенстве по doc_id"""
    ranked: Tuple[Tuple[str, float], ...]

    @property
    def doc_ids(self) -> List[str]:
        return [doc_id for doc_id, _ in self.ranked]

    def __len__(self) -> int:
        return len(self.ranked)


def build_index(documents: Sequence[Document], k1: Optional[float] = None, b: Optional[float] = None) -> InvertedIndex:
    if not documents:
        raise RetrievalError("Cannot build an index over an empty corpus")

    k1 = settings.ENGINE_RETRIEVAL_K1 if k1 is None else k1
    b = settings.ENGINE_RETRIEVAL_B if b is None else b
    if k1 <= 0 or not 0 <= b <= 1:
        raise PreconditionError(f"BM25 parameters out of range: k1={k1}, b={b}")

    postings: Dict[str, List[Tuple[str, int]]] = defaultdict(list)
    term_frequencies: Dict[str, Dict[str, int]] = defaultdict(dict)
    doc_lengths: Dict[str, int] = {}

    for doc in documents:
        # Заголовок индексируется вместе с текстом
        terms = analyze(f"{doc.title} {doc.body}")
        doc_lengths[doc.doc_id] = len(terms)
        for term, tf in Counter(terms).items():
            postings[term].append((doc.doc_id, tf))
            term_frequencies[term][doc.doc_id] = tf

    doc_count = len(doc_lengths)
    avg_doc_length = sum(doc_lengths.values()) / doc_count

    logger.info(f"BM25 index built: {doc_count} documents, {len(postings)} terms")
    return InvertedIndex(
        postings=dict(postings),
        doc_lengths=doc_lengths,
        avg_doc_length=avg_doc_length,
        doc_count=doc_count,
        k1=k1,
        b=b,
        _term_frequencies=dict(term_frequencies),
    )


def score(index: InvertedIndex, query_terms: Iterable[str], doc_id: str) -> float:
    if doc_id not in index.doc_lengths:
        raise RetrievalError(f"Unknown doc_id: {doc_id}")

    length_ratio = index.doc_lengths[doc_id] / index.avg_doc_length if index.avg_doc_length else 0.0
    norm = index.k1 * (1 - index.b + index.b * length_ratio)

    total = 0.0
    for term in query_terms:
        tf = index.term_frequency(term, doc_id)
        if tf == 0:
            continue
        total += index.idf(term) * tf * (index.k1 + 1) / (tf + norm)
    return total


def retrieve(index: InvertedIndex, query: str, k: int) -> RetrievalResult:
    if k < 1:
        raise PreconditionError(f"k must be at least 1, got {k}")

    query_terms = analyze(query)
    scored = [(doc_id, score(index, query_terms, doc_id)) for doc_id in index.doc_lengths]
    scored.sort(key=lambda item: (-item[1], item[0]))
    return RetrievalResult(ranked=tuple(scored[:k]))


def recall_at_k(result: RetrievalResult, gold_doc_ids: Iterable[str]) -> float:
    gold = set(gold_doc_ids)
    if not gold:
        raise PreconditionError("Gold document set must not be empty")
    return len(set(result.doc_ids) & gold) / len(gold)


def recall_sweep(index: InvertedIndex, queries: Sequence[Tuple[str, Sequence[str]]],
                 k_list: Sequence[int]) -> List[Dict[str, float]]:
    """Средний recall@k по запросам для каждого k; запросы без gold-документов пропускаются"""
    judged = [(question, gold) for question, gold in queries if gold]
    if not judged:
        raise PreconditionError("No queries with gold_doc_ids to measure recall on")

    rows = []
    widest = max(k_list)
    rankings = [(retrieve(index, question, widest), gold) for question, gold in judged]
    for k in sorted(k_list):
        recalls = [
            recall_at_k(RetrievalResult(ranked=result.ranked[:k]), gold)
            for result, gold in rankings
        ]
        rows.append({'k': k, 'recall': sum(recalls) / len(recalls), 'queries': len(recalls)})
    return rows


class RetrievalIndex:
    """Индекс над корпусом с доступом к документам по id"""

    def __init__(self, documents: Sequence[Document], k1: Optional[float] = None, b: Optional[float] = None):
        self.index = build_index(documents, k1=k1, b=b)
        self.documents = {doc.doc_id: doc for doc in documents}

    def score_all(self, query: str) -> Dict[str, float]:
        query_terms = analyze(query)
        return {doc_id: score(self.index, query_terms, doc_id) for doc_id in self.index.doc_lengths}

    def retrieve(self, query: str, k: int) -> RetrievalResult:
        return retrieve(self.index, query, k)

    def retrieve_text(self, query: str, k: int) -> List[Document]:
        """Документы top-k в порядке ранга"""
        return [self.documents[doc_id] for doc_id in self.retrieve(query, k).doc_ids]
