"""Zero-shot QA evaluation: answer parsing, confusion-matrix metrics, and the
correct/wrong partition that drives the curriculum loop.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Any, Mapping

from .client import ModelLike, complete_many
from .data import Dataset, Label, render_qa
from .errors import ClientError, EmptyConfusionError, EndpointUnavailableError

logger = logging.getLogger(__name__)

_FIRST_ALPHA = re.compile(r"[A-Za-z]+")


@dataclass(frozen=True)
class ParsedAnswer:
    """Normalized model answer: yes, no, or unparseable with the raw text kept."""

    kind: str  # "yes" | "no" | "unparseable"
    raw: str = ""

    @property
    def label(self) -> Label | None:
        if self.kind == "yes":
            return Label.METAPHOR
        if self.kind == "no":
            return Label.LITERAL
        return None


def parse_answer(raw: str) -> ParsedAnswer:
    """Map raw model output to yes/no by its first alphabetic token.

    Total function: anything without a leading yes/no token becomes
    Unparseable, never an exception.
    """
    match = _FIRST_ALPHA.search(raw)
    if match:
        token = match.group(0).lower()
        if token == "yes":
            return ParsedAnswer("yes")
        if token == "no":
            return ParsedAnswer("no")
    return ParsedAnswer("unparseable", raw=raw)


@dataclass(frozen=True)
class PredictionRecord:
    """One instance's gold label versus what the model answered."""

    instance_id: str
    raw_text: str
    parsed: ParsedAnswer
    predicted_label: Label | None
    correct: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "raw_text": self.raw_text,
            "parsed": self.parsed.kind,
            "predicted_label": None if self.predicted_label is None else self.predicted_label.value,
            "correct": self.correct,
        }


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with metaphor as the positive class; unparseable answers are
    tracked separately and always count as incorrect."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    unparseable: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn + self.unparseable

    def to_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
                "unparseable": self.unparseable}


def compute_metrics(confusion: ConfusionMatrix) -> tuple[float, float, float, float]:
    """Accuracy, precision, recall, F1 with the 0-denominator convention."""
    total = confusion.total
    if total == 0:
        raise EmptyConfusionError("confusion matrix has zero total count")
    accuracy = (confusion.tp + confusion.tn) / total
    precision = confusion.tp / (confusion.tp + confusion.fp) if confusion.tp + confusion.fp else 0.0
    recall = confusion.tp / (confusion.tp + confusion.fn) if confusion.tp + confusion.fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)) if precision + recall else 0.0
    return accuracy, precision, recall, f1


@dataclass(frozen=True)
class EvalReport:
    """Per-instance predictions plus aggregate metrics for one evaluation."""

    records: tuple[PredictionRecord, ...]
    confusion: ConfusionMatrix
    accuracy: float
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_records(cls, records: tuple[PredictionRecord, ...]) -> "EvalReport":
        tp = fp = fn = tn = unparseable = 0
        for rec in records:
            if rec.predicted_label is None:
                unparseable += 1
            elif rec.predicted_label is Label.METAPHOR:
                tp += rec.correct
                fp += not rec.correct
            else:
                tn += rec.correct
                fn += not rec.correct
        confusion = ConfusionMatrix(tp=tp, fp=fp, fn=fn, tn=tn, unparseable=unparseable)
        accuracy, precision, recall, f1 = compute_metrics(confusion)
        return cls(records=records, confusion=confusion, accuracy=accuracy,
                   precision=precision, recall=recall, f1=f1)

    def summary_dict(self) -> dict[str, Any]:
        return {
            "confusion": self.confusion.to_dict(),
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "n_records": len(self.records),
        }


@dataclass(frozen=True)
class Split:
    """Partition of an evaluated dataset by prediction correctness."""

    correct: Dataset
    wrong: Dataset


def evaluate_split(model: ModelLike, dataset: Dataset) -> tuple[EvalReport, Split]:
    """Prompt the model on every instance and partition by correctness.

    Unparseable answers and per-item request failures both land in the wrong
    split; the call fails outright only when zero requests succeed.
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be non-empty")
    prompts = [render_qa(inst).instruction for inst in dataset]
    results = complete_many(model, prompts)
    if all(isinstance(r, ClientError) for r in results):
        raise EndpointUnavailableError(
            f"all {len(results)} requests failed; first error: {results[0]}")

    records: list[PredictionRecord] = []
    correct_instances = []
    wrong_instances = []
    n_failures = 0
    for inst, result in zip(dataset, results):
        if isinstance(result, ClientError):
            n_failures += 1
            raw_text = f"<request-failed: {result}>"
            parsed = ParsedAnswer("unparseable", raw=raw_text)
        else:
            raw_text = result.text
            parsed = parse_answer(raw_text)
        predicted = parsed.label
        correct = predicted is not None and predicted is inst.label
        records.append(PredictionRecord(
            instance_id=inst.id, raw_text=raw_text, parsed=parsed,
            predicted_label=predicted, correct=correct))
        (correct_instances if correct else wrong_instances).append(inst)
    if n_failures:
        logger.warning("evaluation of %s: %d request(s) failed and were counted as wrong",
                       dataset.name, n_failures)

    report = EvalReport.from_records(tuple(records))
    split = Split(
        correct=Dataset(name=f"{dataset.name}.correct", instances=tuple(correct_instances)),
        wrong=Dataset(name=f"{dataset.name}.wrong", instances=tuple(wrong_instances)),
    )
    return report, split


def correctness_map(report: EvalReport) -> Mapping[str, bool]:
    """Per-id correctness vector in the shape compute_stats expects."""
    return {rec.instance_id: rec.correct for rec in report.records}
