"""Metrics, transfer-rate and attention analyses over prediction records.

Per-language scores are support-weighted across the two classes to
absorb class imbalance; overall scores are unweighted means across
languages (support-weighted pooling exists behind a flag, never as the
default). Zero-denominator precision/recall are defined as 0. Attention
entropy uses natural log and averages row entropies; both choices are
recorded in the report metadata.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .corpus import Dataset, PairingTable
from .embeddings import EmbeddingStore
from .entity_typing import DEFAULT_EL_THRESHOLD, SchemeVariant, popular_token_count, type_names
from .errors import ConfigError, DataError
from .model import ModelConfig, ModelParams, forward, instance_inputs
from .training import Checkpoint


@dataclass(frozen=True)
class PredictionRecord:
    id: str
    lang: str
    pred: int
    prob: float  # probability of class 1
    gold: int

    def __post_init__(self) -> None:
        if self.pred not in (0, 1):
            raise DataError(f"record {self.id!r}: pred {self.pred!r} outside {{0,1}}")
        if self.gold not in (0, 1):
            raise DataError(f"record {self.id!r}: gold {self.gold!r} outside {{0,1}}")
        if not 0.0 <= self.prob <= 1.0:
            raise DataError(f"record {self.id!r}: prob {self.prob} outside [0,1]")


@dataclass(frozen=True)
class LanguageReport:
    lang: str
    support: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int

    def to_dict(self) -> dict:
        return {
            "lang": self.lang,
            "support": self.support,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "confusion": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
        }


@dataclass(frozen=True)
class EvalReport:
    languages: tuple[LanguageReport, ...]
    accuracy: float
    precision: float
    recall: float
    f1: float
    aggregation: str = "unweighted_language_mean"

    def to_dict(self) -> dict:
        return {
            "overall": {
                "accuracy": self.accuracy,
                "precision": self.precision,
                "recall": self.recall,
                "f1": self.f1,
            },
            "aggregation": self.aggregation,
            "zero_denominator_rule": "0",
            "languages": [rep.to_dict() for rep in self.languages],
        }


def weighted_metrics(records: Sequence[PredictionRecord]) -> LanguageReport:
    """Support-weighted precision/recall/F1 and accuracy for one language."""
    if not records:
        raise DataError("weighted_metrics requires at least one record")
    langs = {r.lang for r in records}
    if len(langs) > 1:
        raise DataError(f"records span multiple languages: {sorted(langs)}")
    tp = sum(1 for r in records if r.pred == 1 and r.gold == 1)
    fp = sum(1 for r in records if r.pred == 1 and r.gold == 0)
    tn = sum(1 for r in records if r.pred == 0 and r.gold == 0)
    fn = sum(1 for r in records if r.pred == 0 and r.gold == 1)
    support = len(records)

    def _prf(tp_c: int, fp_c: int, fn_c: int) -> tuple[float, float, float]:
        precision = tp_c / (tp_c + fp_c) if tp_c + fp_c else 0.0
        recall = tp_c / (tp_c + fn_c) if tp_c + fn_c else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return precision, recall, f1

    # class 1 is the positive class; class 0 mirrors the confusion counts
    p1, r1, f1_1 = _prf(tp, fp, fn)
    p0, r0, f1_0 = _prf(tn, fn, fp)
    support_1 = tp + fn
    support_0 = tn + fp
    w1, w0 = support_1 / support, support_0 / support
    return LanguageReport(
        lang=next(iter(langs)),
        support=support,
        accuracy=(tp + tn) / support,
        precision=w1 * p1 + w0 * p0,
        recall=w1 * r1 + w0 * r0,
        f1=w1 * f1_1 + w0 * f1_0,
        tp=tp, fp=fp, tn=tn, fn=fn,
    )


def aggregate(reports: Sequence[LanguageReport], support_weighted: bool = False) -> EvalReport:
    """Combine language reports; by default an unweighted mean over languages."""
    if not reports:
        raise DataError("aggregate requires at least one language report")
    if support_weighted:
        total = sum(rep.support for rep in reports)
        weights = [rep.support / total for rep in reports]
        mode = "support_weighted"
    else:
        weights = [1.0 / len(reports)] * len(reports)
        mode = "unweighted_language_mean"
    return EvalReport(
        languages=tuple(reports),
        accuracy=sum(w * rep.accuracy for w, rep in zip(weights, reports)),
        precision=sum(w * rep.precision for w, rep in zip(weights, reports)),
        recall=sum(w * rep.recall for w, rep in zip(weights, reports)),
        f1=sum(w * rep.f1 for w, rep in zip(weights, reports)),
        aggregation=mode,
    )


def evaluate_predictions(
    records: Sequence[PredictionRecord], support_weighted: bool = False
) -> EvalReport:
    """Group records by language and aggregate the per-language reports."""
    by_lang: dict[str, list[PredictionRecord]] = {}
    for record in records:
        by_lang.setdefault(record.lang, []).append(record)
    reports = [weighted_metrics(group) for _lang, group in sorted(by_lang.items())]
    return aggregate(reports, support_weighted=support_weighted)


@dataclass
class SplitCounts:
    """Agreement counts for one correct/wrong split of the pairing."""

    correct_total: int = 0
    correct_agree: int = 0
    wrong_total: int = 0
    wrong_agree: int = 0

    @property
    def correct_rate(self) -> Optional[float]:
        return self.correct_agree / self.correct_total if self.correct_total else None

    @property
    def wrong_rate(self) -> Optional[float]:
        return self.wrong_agree / self.wrong_total if self.wrong_total else None

    def to_dict(self) -> dict:
        return {
            "correct": {
                "pairs": self.correct_total,
                "agreements": self.correct_agree,
                "rate": self.correct_rate,
            },
            "wrong": {
                "pairs": self.wrong_total,
                "agreements": self.wrong_agree,
                "rate": self.wrong_rate,
            },
        }


@dataclass
class TransferReport:
    pooled: SplitCounts
    per_language: dict[str, SplitCounts]

    def to_dict(self) -> dict:
        return {
            "pooled": self.pooled.to_dict(),
            "per_language": {
                lang: counts.to_dict() for lang, counts in sorted(self.per_language.items())
            },
        }


def transfer_rates(
    orig_preds: Iterable[PredictionRecord],
    synth_preds: Iterable[PredictionRecord],
    pairs: PairingTable,
) -> TransferReport:
    """Prediction-consistency rates between originals and their translations.

    Pairs are split by whether the original was predicted correctly; each
    split's rate is the fraction of its translations predicted identically
    to the original, per target language and pooled.
    """
    orig_map = {r.id: r for r in orig_preds}
    synth_map = {r.id: r for r in synth_preds}
    pooled = SplitCounts()
    per_language: dict[str, SplitCounts] = {}
    for orig_id, trans_id, lang in pairs.pairs:
        if orig_id not in orig_map:
            raise DataError(f"pair references unknown original prediction {orig_id!r}")
        if trans_id not in synth_map:
            raise DataError(f"pair references unknown translated prediction {trans_id!r}")
        orig = orig_map[orig_id]
        agree = synth_map[trans_id].pred == orig.pred
        buckets = (pooled, per_language.setdefault(lang, SplitCounts()))
        for bucket in buckets:
            if orig.pred == orig.gold:
                bucket.correct_total += 1
                bucket.correct_agree += int(agree)
            else:
                bucket.wrong_total += 1
                bucket.wrong_agree += int(agree)
    return TransferReport(pooled=pooled, per_language=per_language)


@dataclass
class EntropyReport:
    mean_entropy: float
    per_instance: dict[str, float]
    metadata: dict = field(default_factory=lambda: {
        "log_base": "e",
        "row_aggregation": "mean_of_row_entropies",
    })

    def to_dict(self) -> dict:
        return {
            "mean_entropy": self.mean_entropy,
            "metadata": self.metadata,
            "per_instance": self.per_instance,
        }


def attention_matrix_entropy(A: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of the rows of one attention matrix."""
    clipped = np.where(A > 0, A, 1.0)  # 0 * log 0 := 0
    row_entropies = -(A * np.log(clipped)).sum(axis=1)
    return float(row_entropies.mean())


def attention_entropy(
    params: ModelParams,
    config: ModelConfig,
    dataset: Dataset,
    store: EmbeddingStore,
) -> EntropyReport:
    """Mean attention entropy over a dataset; undefined for no-attention models."""
    if not config.use_attention:
        raise ConfigError("attention entropy is undefined for a model without attention")
    per_instance: dict[str, float] = {}
    for inst in dataset.instances:
        we, et = instance_inputs(config, inst, store)
        trace = forward(params, config, we, et)
        assert trace.A is not None
        per_instance[inst.id] = attention_matrix_entropy(trace.A)
    if not per_instance:
        raise DataError("attention entropy requires a non-empty dataset")
    return EntropyReport(
        mean_entropy=float(np.mean(list(per_instance.values()))),
        per_instance=per_instance,
    )


CORRELATION_FEATURES = (
    ("token_count", "core"),
    ("dis_count", "core"),
    ("media_count", "core"),
    ("per_count", "extension"),
    ("popular_count", "extension"),
)
CONFUSION_INDICATORS = ("TP", "TN", "FP", "FN")


@dataclass
class CorrelationReport:
    """Pearson r between confusion-outcome indicators and instance features."""

    matrix: dict[str, dict[str, Optional[float]]]
    feature_kinds: dict[str, str]

    def to_dict(self) -> dict:
        return {"feature_kinds": self.feature_kinds, "pearson_r": self.matrix}

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["indicator", "feature", "feature_kind", "pearson_r"])
            for indicator in CONFUSION_INDICATORS:
                for feature, kind in CORRELATION_FEATURES:
                    r = self.matrix[indicator][feature]
                    writer.writerow([indicator, feature, kind, "" if r is None else repr(r)])


def _pearson(x: np.ndarray, y: np.ndarray) -> Optional[float]:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float((xc * xc).sum()) * float((yc * yc).sum()))
    if denom == 0.0:
        return None
    return float((xc * yc).sum() / denom)


def confusion_feature_correlation(
    dataset: Dataset,
    records: Sequence[PredictionRecord],
    el_threshold: float = DEFAULT_EL_THRESHOLD,
) -> CorrelationReport:
    """Correlate confusion outcomes with surface features of the instances.

    Features: token count, disease-tag count, media-tag count, plus the
    person-tag and popular-entity counts as labeled extensions.
    Zero-variance columns yield an absent coefficient.
    """
    if len(records) < 2:
        raise DataError("correlation analysis requires at least 2 records")
    instances = dataset.by_id()
    rows_feat = []
    rows_ind = []
    for record in records:
        inst = instances.get(record.id)
        if inst is None:
            raise DataError(f"prediction {record.id!r} has no matching instance")
        rows_feat.append([
            len(inst.tokens),
            sum(1 for t in inst.ner_tags if t == "DIS"),
            sum(1 for t in inst.ner_tags if t == "MEDIA"),
            sum(1 for t in inst.ner_tags if t == "PER"),
            popular_token_count(inst, el_threshold),
        ])
        rows_ind.append([
            int(record.pred == 1 and record.gold == 1),
            int(record.pred == 0 and record.gold == 0),
            int(record.pred == 1 and record.gold == 0),
            int(record.pred == 0 and record.gold == 1),
        ])
    features = np.asarray(rows_feat, dtype=np.float64)
    indicators = np.asarray(rows_ind, dtype=np.float64)
    matrix: dict[str, dict[str, Optional[float]]] = {}
    for i, indicator in enumerate(CONFUSION_INDICATORS):
        matrix[indicator] = {}
        for j, (feature, _kind) in enumerate(CORRELATION_FEATURES):
            matrix[indicator][feature] = _pearson(indicators[:, i], features[:, j])
    return CorrelationReport(matrix=matrix, feature_kinds=dict(CORRELATION_FEATURES))


def export_entity_embeddings(ckpt: Checkpoint, path: str | Path) -> None:
    """Write the learned entity-type embedding table as CSV for external tools.

    One row per entity type in index order: the 16 NER categories or the
    31 popularity-split categories, named like ``PER_popular`` / ``OTHER``.
    """
    config = ckpt.model_config
    if config.scheme.variant is SchemeVariant.NONE:
        raise ConfigError("checkpoint has no entity channel to export")
    if ckpt.params.EE is None:
        raise ConfigError("checkpoint uses one-hot entities and has no embedding table")
    names = type_names(config.scheme)
    table = ckpt.params.EE
    if table.shape[0] != len(names):
        raise DataError(
            f"embedding table has {table.shape[0]} rows, expected {len(names)}"
        )
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["type_name"] + [f"dim_{j}" for j in range(table.shape[1])])
        for name, row in zip(names, table):
            writer.writerow([name] + [repr(float(v)) for v in row])


def write_predictions(records: Iterable[PredictionRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(
                {"id": r.id, "lang": r.lang, "pred": r.pred, "prob": r.prob, "gold": r.gold},
                ensure_ascii=False, separators=(",", ":"),
            ))
            fh.write("\n")


def load_predictions(path: str | Path) -> list[PredictionRecord]:
    path = Path(path)
    records: list[PredictionRecord] = []
    try:
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    records.append(PredictionRecord(
                        id=obj["id"], lang=obj["lang"], pred=obj["pred"],
                        prob=obj["prob"], gold=obj["gold"],
                    ))
                except (json.JSONDecodeError, KeyError, TypeError):
                    raise DataError(f"{path} line {lineno}: malformed prediction record") from None
    except OSError as exc:
        raise DataError(f"cannot read predictions {path}: {exc}") from None
    return records
