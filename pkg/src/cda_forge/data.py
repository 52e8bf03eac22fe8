"""Canonical data model: instances, datasets, QA rendering, sampling, dedup, stats.

Everything here is pure and operates on immutable values, so it is safe to
call from concurrent contexts.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import random
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from pathlib import Path
from typing import Any, Iterator, Mapping

from .errors import (
    CorrectnessCoverageMismatchError,
    InsufficientClassCountError,
    MalformedRowError,
    UnknownLabelValueError,
)

logger = logging.getLogger(__name__)


class Label(str, Enum):
    """Binary class of a target-word usage. Metaphor is the positive class."""

    METAPHOR = "metaphor"
    LITERAL = "literal"

    @property
    def answer(self) -> str:
        """The QA output token for this label."""
        return "Yes" if self is Label.METAPHOR else "No"


class AugMethod(str, Enum):
    """One of the six generation strategies: direct / replace-target /
    replace-context, each in a metaphorical and a literal polarity."""

    DIRECT_MET = "direct_met"
    REPLACE_TARGET_MET = "replace_target_met"
    REPLACE_CONTEXT_MET = "replace_context_met"
    DIRECT_LIT = "direct_lit"
    REPLACE_TARGET_LIT = "replace_target_lit"
    REPLACE_CONTEXT_LIT = "replace_context_lit"

    @property
    def polarity(self) -> Label:
        return Label.METAPHOR if self.value.endswith("_met") else Label.LITERAL

    @property
    def family(self) -> str:
        """Strategy family: 'direct', 'target' or 'context'."""
        if self.value.startswith("direct"):
            return "direct"
        if self.value.startswith("replace_target"):
            return "target"
        return "context"


ALL_METHODS: tuple[AugMethod, ...] = tuple(AugMethod)


def methods_without_family(family: str) -> frozenset[AugMethod]:
    """All methods except the named family pair (ablation helper)."""
    return frozenset(m for m in AugMethod if m.family != family)


# --- provenance ---

@dataclass(frozen=True)
class Original:
    """Instance ingested from a source file."""

    dataset_name: str
    source_index: int

    kind = "original"


@dataclass(frozen=True)
class Augmented:
    """Instance generated by the teacher from a parent instance."""

    method: AugMethod
    parent_id: str
    iteration: int

    kind = "augmented"


Provenance = Original | Augmented


def provenance_to_dict(prov: Provenance) -> dict[str, Any]:
    if isinstance(prov, Original):
        return {"kind": "original", "dataset_name": prov.dataset_name,
                "source_index": prov.source_index}
    return {"kind": "augmented", "method": prov.method.value,
            "parent_id": prov.parent_id, "iteration": prov.iteration}


def provenance_from_dict(d: Mapping[str, Any]) -> Provenance:
    kind = d.get("kind")
    if kind == "original":
        return Original(str(d["dataset_name"]), int(d["source_index"]))
    if kind == "augmented":
        return Augmented(AugMethod(d["method"]), str(d["parent_id"]), int(d["iteration"]))
    raise ValueError(f"unknown provenance kind: {kind!r}")


# --- normalization and matching ---

_NON_WORD_SPACE = re.compile(r"[^\w\s]")
_WS_RUN = re.compile(r"\s+")
_EDGE_PUNCT = re.compile(r"^\W+|\W+$")


def normalized_sentence_key(sentence: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace runs."""
    s = _NON_WORD_SPACE.sub("", sentence.lower())
    return _WS_RUN.sub(" ", s).strip()


def dedup_key(sentence: str, target_word: str) -> tuple[str, str]:
    """Key under which two instances count as duplicates."""
    return (normalized_sentence_key(sentence), target_word.lower())


def stem_match(token: str, word: str) -> bool:
    """Whether a sentence token counts as an occurrence of `word`.

    Exact match, or the token extends the word by a suffix when the word has
    at least three characters (so 'digested' matches 'digest' but 'ran' does
    not match 'run').
    """
    token = token.lower()
    word = word.lower()
    return token == word or (len(word) >= 3 and token.startswith(word))


def find_matching_token(sentence: str, word: str) -> str | None:
    """First surface token of `sentence` that stem-matches `word`.

    Returns the token with edge punctuation stripped but case preserved,
    or None when no token matches.
    """
    word = _EDGE_PUNCT.sub("", word)
    if not word:
        return None
    for raw in sentence.split():
        token = _EDGE_PUNCT.sub("", raw)
        if token and stem_match(token, word):
            return token
    return None


# --- instances and datasets ---

def instance_id(sentence: str, target_word: str, label: Label,
                provenance_kind: str) -> str:
    """Deterministic id: content hash over the normalized fields."""
    payload = "\x1f".join([
        normalized_sentence_key(sentence),
        target_word.lower(),
        label.value,
        provenance_kind,
    ])
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Instance:
    """One labeled (sentence, target word) example with full provenance."""

    id: str
    sentence: str
    target_word: str
    label: Label
    provenance: Provenance
    extra: Mapping[str, Any] = field(default_factory=dict, compare=False)

    @classmethod
    def create(cls, sentence: str, target_word: str, label: Label,
               provenance: Provenance,
               extra: Mapping[str, Any] | None = None) -> "Instance":
        """Build an instance with its id derived from the content."""
        return cls(
            id=instance_id(sentence, target_word, label, provenance.kind),
            sentence=sentence,
            target_word=target_word,
            label=label,
            provenance=provenance,
            extra=dict(extra or {}),
        )

    @property
    def key(self) -> tuple[str, str]:
        return dedup_key(self.sentence, self.target_word)

    def to_dict(self) -> dict[str, Any]:
        d = {
            "id": self.id,
            "sentence": self.sentence,
            "target_word": self.target_word,
            "label": self.label.value,
            "provenance": provenance_to_dict(self.provenance),
        }
        for k, v in self.extra.items():
            d.setdefault(k, v)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Instance":
        extra = {k: v for k, v in d.items()
                 if k not in ("id", "sentence", "target_word", "label", "provenance")}
        return cls(
            id=str(d["id"]),
            sentence=str(d["sentence"]),
            target_word=str(d["target_word"]),
            label=Label(d["label"]),
            provenance=provenance_from_dict(d["provenance"]),
            extra=extra,
        )


def validate_instance(inst: Instance) -> None:
    """Raise ValueError when an instance violates its invariants."""
    if not inst.sentence.strip():
        raise ValueError("sentence is empty")
    if not inst.target_word.strip():
        raise ValueError("target_word is empty")
    if find_matching_token(inst.sentence, inst.target_word) is None:
        raise ValueError(
            f"target_word {inst.target_word!r} matches no token of the sentence")
    if isinstance(inst.provenance, Augmented) and inst.provenance.iteration < 1:
        raise ValueError("augmented iteration must be >= 1")


@dataclass(frozen=True)
class Dataset:
    """Ordered, id-unique collection of instances."""

    name: str
    instances: tuple[Instance, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "instances", tuple(self.instances))
        seen: set[str] = set()
        for inst in self.instances:
            if inst.id in seen:
                raise ValueError(f"duplicate instance id {inst.id} in dataset {self.name!r}")
            seen.add(inst.id)

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self) -> Iterator[Instance]:
        return iter(self.instances)

    def ids(self) -> set[str]:
        return {inst.id for inst in self.instances}

    def by_id(self, inst_id: str) -> Instance:
        for inst in self.instances:
            if inst.id == inst_id:
                return inst
        raise KeyError(inst_id)

    def label_count(self, label: Label) -> int:
        return sum(1 for inst in self.instances if inst.label is label)

    def keys(self) -> set[tuple[str, str]]:
        return {inst.key for inst in self.instances}

    def save_jsonl(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w", encoding="utf-8") as f:
            for inst in self.instances:
                f.write(json.dumps(inst.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")

    @classmethod
    def load_jsonl(cls, path: str | Path, name: str | None = None) -> "Dataset":
        path = Path(path)
        instances = []
        with path.open("r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    instances.append(Instance.from_dict(json.loads(line)))
        return cls(name=name or path.stem, instances=tuple(instances))


# --- QA rendering ---

QA_INSTRUCTION_TEMPLATE = (
    "Is the word '{target_word}' in the sentence '{sentence}' used metaphorically? "
    "Please answer with 'Yes' or 'No' only."
)


@dataclass(frozen=True)
class QaRecord:
    """Instruction-tuning record; `input` is always the empty string."""

    instruction: str
    input: str
    output: str


def render_qa(instance: Instance) -> QaRecord:
    """Render an instance into its question-answer form.

    The target word and sentence are substituted verbatim, with no escaping.
    """
    return QaRecord(
        instruction=QA_INSTRUCTION_TEMPLATE.format(
            target_word=instance.target_word, sentence=instance.sentence),
        input="",
        output=instance.label.answer,
    )


# --- ingestion ---

DEFAULT_LABEL_VALUES: dict[str, Label] = {
    "1": Label.METAPHOR, "0": Label.LITERAL,
    "metaphor": Label.METAPHOR, "literal": Label.LITERAL,
    "yes": Label.METAPHOR, "no": Label.LITERAL,
}


@dataclass(frozen=True)
class ColumnMap:
    """Column names and label encoding for columnar sources."""

    sentence: str
    target_word: str
    label: str
    label_values: Mapping[str, Label] = field(
        default_factory=lambda: dict(DEFAULT_LABEL_VALUES))
    delimiter: str = ","


def _decode_label(raw: object, values: Mapping[str, Label], row: int) -> Label:
    key = str(raw).strip().lower()
    if key not in values:
        raise UnknownLabelValueError(row, str(raw))
    return values[key]


def ingest_dataset(path: str | Path, format: str = "canonical-jsonl",
                   mapping: ColumnMap | None = None,
                   name: str | None = None) -> Dataset:
    """Read a source file into a Dataset with Original provenance.

    Rows failing the instance invariants raise MalformedRowError with the
    offending row index; rows whose dedup key repeats an earlier row are
    collapsed and counted in a warning.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    dataset_name = name or path.stem

    if format == "columnar-csv":
        if mapping is None:
            raise ValueError("columnar-csv ingestion requires a column mapping")
        rows = _iter_csv_rows(path, mapping, dataset_name)
    elif format == "canonical-jsonl":
        rows = _iter_jsonl_rows(path, mapping, dataset_name)
    else:
        raise ValueError(f"unknown ingest format: {format!r}")

    instances: list[Instance] = []
    seen_keys: set[tuple[str, str]] = set()
    duplicates = 0
    for inst in rows:
        if inst.key in seen_keys:
            duplicates += 1
            continue
        seen_keys.add(inst.key)
        instances.append(inst)
    if duplicates:
        logger.warning("ingest %s: collapsed %d duplicate row(s)", path, duplicates)
    return Dataset(name=dataset_name, instances=tuple(instances))


def _iter_csv_rows(path: Path, mapping: ColumnMap, dataset_name: str) -> Iterator[Instance]:
    with path.open("r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f, delimiter=mapping.delimiter)
        if reader.fieldnames is None:
            raise MalformedRowError(0, "missing header row")
        for row_index, row in enumerate(reader):
            for col in (mapping.sentence, mapping.target_word, mapping.label):
                if row.get(col) is None:
                    raise MalformedRowError(row_index, f"missing column {col!r}")
            label = _decode_label(row[mapping.label], mapping.label_values, row_index)
            inst = Instance.create(
                sentence=row[mapping.sentence],
                target_word=row[mapping.target_word],
                label=label,
                provenance=Original(dataset_name, row_index),
            )
            _validate_row(inst, row_index)
            yield inst


def _iter_jsonl_rows(path: Path, mapping: ColumnMap | None,
                     dataset_name: str) -> Iterator[Instance]:
    label_values = mapping.label_values if mapping else DEFAULT_LABEL_VALUES
    with path.open("r", encoding="utf-8") as f:
        for row_index, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedRowError(row_index, f"invalid JSON: {e}") from e
            for fld in ("sentence", "target_word", "label"):
                if fld not in record:
                    raise MalformedRowError(row_index, f"missing field {fld!r}")
            label = _decode_label(record.pop("label"), label_values, row_index)
            sentence = str(record.pop("sentence"))
            target_word = str(record.pop("target_word"))
            if "provenance" in record:
                provenance = provenance_from_dict(record.pop("provenance"))
            else:
                provenance = Original(dataset_name, row_index)
            stored_id = record.pop("id", None)
            inst = Instance(
                id=str(stored_id) if stored_id is not None
                else instance_id(sentence, target_word, label, provenance.kind),
                sentence=sentence,
                target_word=target_word,
                label=label,
                provenance=provenance,
                extra=record,
            )
            _validate_row(inst, row_index)
            yield inst


def _validate_row(inst: Instance, row_index: int) -> None:
    try:
        validate_instance(inst)
    except ValueError as e:
        raise MalformedRowError(row_index, str(e)) from e


# --- sampling ---

def sample_balanced(dataset: Dataset, n_per_class: int, seed: int,
                    shuffle_seed: int | None = None,
                    name: str | None = None) -> Dataset:
    """Draw n_per_class instances of each label without replacement.

    Selection and output order are both deterministic functions of the seeds;
    the same (dataset, n, seed) always yields an identical result.
    """
    metaphors = [i for i in dataset if i.label is Label.METAPHOR]
    literals = [i for i in dataset if i.label is Label.LITERAL]
    for label, pool in ((Label.METAPHOR, metaphors), (Label.LITERAL, literals)):
        if len(pool) < n_per_class:
            raise InsufficientClassCountError(label.value, len(pool), n_per_class)
    rng = random.Random(seed)
    chosen = rng.sample(metaphors, n_per_class) + rng.sample(literals, n_per_class)
    random.Random(seed if shuffle_seed is None else shuffle_seed).shuffle(chosen)
    return Dataset(name=name or dataset.name, instances=tuple(chosen))


# --- merging ---

def merge_dedup(base: Dataset, additions: Dataset, name: str | None = None) -> Dataset:
    """Append additions whose dedup key is new; base instances are never dropped."""
    seen = base.keys()
    merged = list(base.instances)
    for inst in additions:
        if inst.key in seen:
            continue
        seen.add(inst.key)
        merged.append(inst)
    return Dataset(name=name or base.name, instances=tuple(merged))


# --- statistics ---

def pct_half_up(numerator: int, denominator: int) -> float:
    """Percentage rounded half-up to two decimals; 0.0 on a zero denominator."""
    if denominator == 0:
        return 0.0
    value = Decimal(numerator * 100) / Decimal(denominator)
    return float(value.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class DatasetStats:
    """Size and class-share statistics, optionally joined with correctness."""

    n_instances: int
    pct_metaphor: float
    pct_correct: float | None = None
    pct_correct_metaphor: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_instances": self.n_instances,
            "pct_metaphor": self.pct_metaphor,
            "pct_correct": self.pct_correct,
            "pct_correct_metaphor": self.pct_correct_metaphor,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DatasetStats":
        return cls(
            n_instances=int(d["n_instances"]),
            pct_metaphor=float(d["pct_metaphor"]),
            pct_correct=None if d.get("pct_correct") is None else float(d["pct_correct"]),
            pct_correct_metaphor=(None if d.get("pct_correct_metaphor") is None
                                  else float(d["pct_correct_metaphor"])),
        )


def compute_stats(dataset: Dataset,
                  correctness: Mapping[str, bool] | None = None) -> DatasetStats:
    """Count instances and metaphor share; with a correctness map, also the
    share predicted correctly and the metaphor share within the correct subset.
    """
    n = len(dataset)
    n_metaphor = dataset.label_count(Label.METAPHOR)
    if correctness is None:
        return DatasetStats(n_instances=n, pct_metaphor=pct_half_up(n_metaphor, n))
    if set(correctness.keys()) != dataset.ids():
        raise CorrectnessCoverageMismatchError(
            "correctness map does not cover the dataset ids exactly")
    n_correct = sum(1 for inst in dataset if correctness[inst.id])
    n_correct_metaphor = sum(
        1 for inst in dataset
        if correctness[inst.id] and inst.label is Label.METAPHOR)
    return DatasetStats(
        n_instances=n,
        pct_metaphor=pct_half_up(n_metaphor, n),
        pct_correct=pct_half_up(n_correct, n),
        pct_correct_metaphor=pct_half_up(n_correct_metaphor, n_correct),
    )
