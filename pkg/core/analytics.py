"""
Аналитика использования шаблонов
Гистограмма частот, попарный lift совместного использования, подмножества по перцентилю
оценки и конфигурация переноса шаблонов между моделями
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from .corpus import DatasetManifest
from .exceptions import AnalyticsError, BackendNotConfiguredError, ConfigError, PreconditionError, StoreError
from .llm_gateway import BackendConfig
from .store import ScoreRecord, TemplateStore, load as load_store, store_digest, template_sort_key
from .usage import UsageRecord

logger = logging.getLogger(__name__)

PERCENTILES = (25, 50, 75, 100)
DIRECTIONS = ('bottom', 'top')


def usage_histogram(usage_log: Iterable[UsageRecord]) -> Dict[str, int]:
    """Число запросов, в которых встречается каждый id"""
    counts: Dict[str, int] = {}
    for record in usage_log:
        for template_id in record.used_template_ids:
            counts[template_id] = counts.get(template_id, 0) + 1
    return {template_id: counts[template_id] for template_id in sorted(counts, key=template_sort_key)}


def usage_frame(usage_log: Sequence[UsageRecord]) -> pd.DataFrame:
    """Булева матрица запрос x шаблон (только использованные шаблоны)"""
    template_ids = sorted({tid for record in usage_log for tid in record.used_template_ids}, key=template_sort_key)
    rows = [[tid in record.used_template_ids for tid in template_ids] for record in usage_log]
    return pd.DataFrame(
        rows,
        index=[record.query_id for record in usage_log],
        columns=template_ids,
        dtype=bool,
    )


@dataclass
class LiftMatrix:
    template_ids: List[str]
    lift: pd.DataFrame
    support: pd.DataFrame
    query_count: int

    def lift_of(self, a: str, b: str) -> Optional[float]:
        """None, если у одного из шаблонов нулевая частота"""
        if a not in self.lift.index or b not in self.lift.index:
            return None
        return float(self.lift.at[a, b])

    def support_of(self, a: str, b: str) -> int:
        if a not in self.support.index or b not in self.support.index:
            return 0
        return int(self.support.at[a, b])

    def pairs(self) -> pd.DataFrame:
        """Длинная таблица (tid_a, tid_b, lift, support) для пар tid_a < tid_b"""
        rows = []
        for i, a in enumerate(self.template_ids):
            for b in self.template_ids[i + 1:]:
                rows.append({
                    'tid_a': a,
                    'tid_b': b,
                    'lift': float(self.lift.at[a, b]),
                    'support': int(self.support.at[a, b]),
                })
        return pd.DataFrame(rows, columns=['tid_a', 'tid_b', 'lift', 'support'])

    def to_dict(self) -> Dict[str, Any]:
        return {
            'template_ids': list(self.template_ids),
            'query_count': self.query_count,
            'lift': self.lift.to_numpy().tolist(),
            'support': self.support.to_numpy().tolist(),
        }


def cooccurrence_lift(usage_log: Sequence[UsageRecord]) -> LiftMatrix:
    """lift(a, b) = P(a, b) / (P(a) * P(b)), вероятности как доли запросов"""
    query_count = len(usage_log)
    if query_count < 1:
        raise PreconditionError("Lift needs at least one query in the usage log")

    frame = usage_frame(usage_log)
    indicators = frame.to_numpy(dtype=np.int64)
    support = indicators.T @ indicators

    marginal = support.diagonal() / query_count
    lift = (support / query_count) / np.outer(marginal, marginal)

    template_ids = list(frame.columns)
    return LiftMatrix(
        template_ids=template_ids,
        lift=pd.DataFrame(lift, index=template_ids, columns=template_ids),
        support=pd.DataFrame(support, index=template_ids, columns=template_ids),
        query_count=query_count,
    )


def _sort_for_subset(store: TemplateStore, score_table: Sequence[ScoreRecord]) -> List[str]:
    """Неиспользованные шаблоны первыми, затем по средней оценке; при равенстве порядок store"""
    means = {record.template_id: record.score_mean for record in score_table if record.usage_count > 0}
    order = {template_id: index for index, template_id in enumerate(store.template_ids)}
    return sorted(
        store.template_ids,
        key=lambda tid: (tid in means, means.get(tid, 0.0), order[tid]),
    )


def subset_by_score(store: TemplateStore, score_table: Sequence[ScoreRecord], percentile: int,
                    direction: str = 'bottom') -> TemplateStore:
    if len(store) == 0:
        raise StoreError("Cannot take a subset of an empty store")
    if percentile not in PERCENTILES:
        raise PreconditionError(f"percentile must be one of {PERCENTILES}, got {percentile}")
    if direction not in DIRECTIONS:
        raise PreconditionError(f"direction must be one of {DIRECTIONS}, got {direction}")

    if percentile == 100:
        return store.copy()

    ranked = _sort_for_subset(store, score_table)
    count = math.ceil(len(store) * percentile / 100)
    chosen = set(ranked[:count] if direction == 'bottom' else ranked[len(ranked) - count:])

    subset = store.copy()
    subset.templates = [template for template in store.templates if template.template_id in chosen]
    subset.provenance = {tid: origin for tid, origin in store.provenance.items() if tid in chosen}
    subset.metadata['subset'] = {
        'percentile': percentile,
        'direction': direction,
        'source_templates': len(store),
    }
    logger.info(f"{direction} {percentile}% subset: {len(subset)} of {len(store)} templates")
    return subset


def snapshot_hash(store: TemplateStore) -> str:
    return store_digest(store)


@dataclass(frozen=True)
class TransferConfig:
    """Оценка шаблонов одной модели на другой модели-ответчике"""
    snapshot_path: Path
    store: TemplateStore
    template_source: str
    answerer: str
    snapshot_hash: str

    @property
    def is_transfer(self) -> bool:
        return self.template_source != self.answerer

    def metadata(self) -> Dict[str, Any]:
        return {
            'template_source': self.template_source,
            'answerer': self.answerer,
            'is_transfer': self.is_transfer,
            'snapshot_hash': self.snapshot_hash,
            'snapshot_path': str(self.snapshot_path),
        }


def transfer_run_config(source_snapshot, target_backend: str,
                        backends: Dict[str, BackendConfig]) -> TransferConfig:
    path = Path(source_snapshot)
    if not path.exists():
        raise ConfigError(f"Snapshot not found: {path}", key='snapshot')
    if target_backend not in backends:
        raise BackendNotConfiguredError(target_backend)

    store = load_store(path)
    template_source = store.metadata.get('template_source', 'unknown')
    config = TransferConfig(
        snapshot_path=path,
        store=store,
        template_source=template_source,
        answerer=target_backend,
        snapshot_hash=snapshot_hash(store),
    )
    if config.is_transfer:
        logger.info(f"Transfer run: templates from {template_source} answered by {target_backend}")
    return config


# --- экспорт ---

def _prepare(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def export_histogram_csv(histogram: Dict[str, int], path) -> Path:
    path = _prepare(path)
    frame = pd.DataFrame(list(histogram.items()), columns=['tid', 'count'])
    frame.to_csv(path, index=False, lineterminator='\n')
    return path


def export_lift_csv(matrix: LiftMatrix, path) -> Path:
    path = _prepare(path)
    matrix.pairs().to_csv(path, index=False, lineterminator='\n')
    return path


def export_lift_json(matrix: LiftMatrix, path) -> Path:
    path = _prepare(path)
    path.write_text(json.dumps(matrix.to_dict(), indent=2) + '\n', encoding='utf-8')
    return path


def export_texts(store: TemplateStore, manifest: Optional[DatasetManifest], path) -> Path:
    """JSONL с текстами запросов и шаблонов для внешних инструментов эмбеддингов"""
    path = _prepare(path)
    rows = []
    if manifest is not None:
        rows.extend({'kind': 'query', 'id': query.query_id, 'text': query.question} for query in manifest.queries)
    rows.extend(
        {'kind': 'template', 'id': template.template_id, 'text': f"{template.template_name}. {template.description}"}
        for template in store.templates
    )
    path.write_text(''.join(json.dumps(row, ensure_ascii=False) + '\n' for row in rows), encoding='utf-8')
    return path


def load_score_table(report_file) -> List[ScoreRecord]:
    """Таблица оценок из report.iter<k>.json"""
    path = Path(report_file)
    try:
        payload = json.loads(path.read_text(encoding='utf-8'))
    except (OSError, json.JSONDecodeError) as e:
        raise AnalyticsError(f"Cannot read report {path}: {e}") from e
    return [ScoreRecord.from_dict(record) for record in payload.get('score_table', [])]
