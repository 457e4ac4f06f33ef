"""
Корпус документов: загрузка, оценка токенов, упаковка в бюджет контекста
и формат вставки документов в промпт
"""

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Protocol, Sequence, Tuple

from .exceptions import CorpusFormatError, DuplicateDocumentError, PackingError, PreconditionError
from .validators import ValidationManager

logger = logging.getLogger(__name__)

HEADER_PATTERN = re.compile(r'^TITLE: (?P<title>[^|\n]*) \| ID: (?P<doc_id>[^\n]*)$')


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    body: str
    source: Optional[str] = None


@dataclass(frozen=True)
class PackedContext:
    """Документы, уложенные в бюджет токенов (префикс исходного порядка)"""
    documents: Tuple[Document, ...]
    estimated_tokens: int
    budget: int

    @property
    def doc_ids(self) -> List[str]:
        return [doc.doc_id for doc in self.documents]


class TokenCounter(Protocol):
    def count(self, text: str) -> int:
        ...


class HeuristicTokenCounter:
    """Оценка ceil(bytes / 4), не зависящая от токенизатора конкретного вендора"""

    def count(self, text: str) -> int:
        return math.ceil(len(text.encode('utf-8')) / 4)


class TiktokenCounter:
    """Точный подсчет через tiktoken (подключается по желанию)"""

    def __init__(self, encoding_name: str = 'cl100k_base'):
        import tiktoken

        self.encoding = tiktoken.get_encoding(encoding_name)

    def count(self, text: str) -> int:
        return len(self.encoding.encode(text))


_default_counter: TokenCounter = HeuristicTokenCounter()


def build_token_counter(encoding_name: Optional[str]) -> Optional[TokenCounter]:
    """Пустое имя кодировки означает оценку bytes/4"""
    if not encoding_name:
        return None
    return TiktokenCounter(encoding_name)


def estimate_tokens(text: str, counter: Optional[TokenCounter] = None) -> int:
    return (counter or _default_counter).count(text)


def ingest(path) -> List[Document]:
    """Загрузка JSONL-корпуса в порядке файла"""
    path = Path(path)
    try:
        lines = path.read_text(encoding='utf-8').splitlines()
    except OSError as e:
        raise CorpusFormatError(f"Cannot read corpus file {path}: {e}") from e

    validation = ValidationManager()
    documents = []
    seen = set()

    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusFormatError(f"{path}:{line_number}: invalid JSON: {e}") from e

        result = validation.validate_document(payload)
        if not result['is_valid']:
            raise CorpusFormatError(f"{path}:{line_number}: {result['errors'][0]}")

        doc_id = str(payload['doc_id'])
        if doc_id in seen:
            raise DuplicateDocumentError(doc_id)
        seen.add(doc_id)

        documents.append(Document(
            doc_id=doc_id,
            title=payload['title'],
            body=payload['body'],
            source=payload.get('source'),
        ))

    logger.info(f"Ingested {len(documents)} documents from {path}")
    return documents


def pack(documents: Sequence[Document], budget: int, counter: Optional[TokenCounter] = None) -> PackedContext:
    """
    Жадная упаковка префикса: документы берутся по порядку, пока сумма оценок
    не превысит бюджет; документ никогда не режется
    """
    if budget <= 0:
        raise PreconditionError(f"Budget must be positive, got {budget}")

    included = []
    total = 0
    for doc in documents:
        size = document_tokens(doc, counter)
        if total + size > budget:
            if not included:
                raise PackingError(
                    f"Document {doc.doc_id} alone needs ~{size} tokens, budget is {budget}"
                )
            break
        included.append(doc)
        total += size

    if len(included) < len(documents):
        logger.debug(f"Packed {len(included)} of {len(documents)} documents into {budget} tokens")

    return PackedContext(documents=tuple(included), estimated_tokens=total, budget=budget)


def document_tokens(doc: Document, counter: Optional[TokenCounter] = None) -> int:
    """Оценка документа в том виде, в каком он попадает в промпт"""
    return estimate_tokens(format_document(doc), counter)


def format_document(doc: Document) -> str:
    return f"TITLE: {doc.title} | ID: {doc.doc_id}\n{doc.body}"


def format_context(context: PackedContext) -> str:
    return '\n\n'.join(format_document(doc) for doc in context.documents)


def parse_document_header(text: str) -> Tuple[str, str]:
    """Обратная операция к format_document: (title, doc_id) из первой строки"""
    first_line = text.split('\n', 1)[0]
    match = HEADER_PATTERN.match(first_line)
    if not match:
        raise CorpusFormatError(f"Not a formatted document header: {first_line!r}")
    return match.group('title'), match.group('doc_id')


# --- манифест набора данных ---

@dataclass(frozen=True)
class QueryItem:
    query_id: str
    question: str
    gold_answers: Tuple[str, ...]
    doc_allowlist: Optional[Tuple[str, ...]] = None
    gold_doc_ids: Optional[Tuple[str, ...]] = None
    solution: Optional[Tuple[str, ...]] = None


@dataclass
class DatasetManifest:
    path: Path
    queries: List[QueryItem]
    corpus_path: Path
    metric: str
    retrieval_corpus_path: Optional[Path] = None
    _documents: Optional[List[Document]] = field(default=None, repr=False)
    _retrieval_documents: Optional[List[Document]] = field(default=None, repr=False)

    @property
    def query_ids(self) -> List[str]:
        return [query.query_id for query in self.queries]

    def documents(self) -> List[Document]:
        if self._documents is None:
            self._documents = ingest(self.corpus_path)
        return self._documents

    def retrieval_documents(self) -> List[Document]:
        """Корпус для поиска; по умолчанию совпадает с основным корпусом"""
        if self.retrieval_corpus_path is None:
            return self.documents()
        if self._retrieval_documents is None:
            self._retrieval_documents = ingest(self.retrieval_corpus_path)
        return self._retrieval_documents

    def documents_for(self, query: QueryItem) -> List[Document]:
        """Документы запроса: весь корпус или allowlist в порядке корпуса"""
        documents = self.documents()
        if query.doc_allowlist is None:
            return documents
        allowed = set(query.doc_allowlist)
        return [doc for doc in documents if doc.doc_id in allowed]


def _optional_ids(values: Optional[Iterable[Any]]) -> Optional[Tuple[str, ...]]:
    if values is None:
        return None
    return tuple(str(value) for value in values)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding='utf-8'))
    except OSError as e:
        raise CorpusFormatError(f"Cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise CorpusFormatError(f"Manifest {path} is not valid JSON: {e}") from e

    validation = ValidationManager()
    result = validation.validate_payload(payload, 'manifest')
    if not result['is_valid']:
        raise CorpusFormatError(f"Manifest {path}: {result['errors'][0]}")

    queries = [
        QueryItem(
            query_id=str(item['query_id']),
            question=item['question'],
            gold_answers=tuple(item['gold_answers']),
            doc_allowlist=_optional_ids(item.get('doc_allowlist')),
            gold_doc_ids=_optional_ids(item.get('gold_doc_ids')),
            solution=tuple(item['solution']) if item.get('solution') else None,
        )
        for item in payload['queries']
    ]

    # Пути корпусов задаются относительно файла манифеста
    retrieval_path = payload.get('retrieval_corpus_path')
    return DatasetManifest(
        path=path,
        queries=queries,
        corpus_path=(path.parent / payload['corpus_path']),
        metric=payload['metric'],
        retrieval_corpus_path=(path.parent / retrieval_path) if retrieval_path else None,
    )
