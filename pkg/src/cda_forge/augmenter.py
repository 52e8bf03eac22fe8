"""Teacher-driven data generation: the six frozen prompt templates, output
parsing and validation, and per-round assembly of the augmentation set.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

from .client import ModelLike, complete_many
from .data import (
    AugMethod,
    Augmented,
    Dataset,
    Instance,
    find_matching_token,
)
from .errors import ClientError, EndpointUnavailableError, PolarityMismatchError

logger = logging.getLogger(__name__)

# The generation templates are frozen verbatim; do not reflow or edit them.
DIRECT_MET_TEMPLATE = (
    "You are a creative writing assistant skilled in crafting subtle and intricate "
    "metaphors. Your task is to create a sentence that incorporates the metaphorical "
    "interpretation of the verb '{target_word}' in an unexpected and unique way. The "
    "output must contain the word '{target_word}' as a verb. Please provide only the "
    "sentence.\n\nYour sentence:"
)

REPLACE_TARGET_MET_TEMPLATE = (
    "You are a creative writing assistant skilled in crafting subtle and intricate "
    "metaphors. Your task is to replace the target word in the following sentence with "
    "a new metaphorical expression, ensuring that the new word also carries a "
    "metaphorical meaning.\n"
    "The following are several examples:\n"
    "\n"
    "Original sentence: He grasped the concept quickly.\n"
    "Target word: grasp\n"
    "New sentence: He digested the concept swiftly.\n"
    "New word: digest\n"
    "\n"
    "Original sentence: He soared to new heights in his career.\n"
    "Target word: soar\n"
    "New sentence: He climbed to new summits in his career.\n"
    "New word: climb\n"
    "\n"
    "Original sentence: {sentence}\n"
    "Target word: {target_word}"
)

REPLACE_CONTEXT_MET_TEMPLATE = (
    "You are a creative writing assistant skilled in transforming contexts while "
    "preserving metaphorical meanings. Your task is to take the given sentence "
    "containing the metaphorical use of the word '{target_word}' and rework it into a "
    "new sentence that maintains the metaphorical essence while changing the "
    "surrounding context. The output must contain the word '{target_word}'. Please "
    "provide only the new sentence.\n\nGiven sentence: '{sentence}'\n\nYour sentence:"
)

DIRECT_LIT_TEMPLATE = (
    "You are a straightforward writing assistant skilled in creating clear and literal "
    "statements. Your task is to formulate a sentence that uses the verb "
    "'{target_word}' in its direct and obvious meaning. The output must contain the "
    "word '{target_word}' as a verb. Please provide only the sentence.\n\n"
    "Your sentence:"
)

REPLACE_TARGET_LIT_TEMPLATE = (
    "You are a straightforward writing assistant skilled in creating clear and literal "
    "statements. Your task is to replace the target word in the following sentence "
    "with a new literal expression, ensuring that the new word is used in its direct "
    "and obvious meaning.\n"
    "The following are several examples:\n"
    "\n"
    "Original sentence: He quickly understood the concept.\n"
    "Target word: understand\n"
    "New sentence: He quickly comprehended the concept.\n"
    "New word: comprehend\n"
    "\n"
    "Original sentence: She ran fast to catch the bus.\n"
    "Target word: run\n"
    "New sentence: She sprinted to catch the bus.\n"
    "New word: sprint\n"
    "\n"
    "Original sentence: {sentence}\n"
    "Target word: {target_word}"
)

REPLACE_CONTEXT_LIT_TEMPLATE = (
    "You are a creative writing assistant skilled in transforming contexts while "
    "preserving the literal meanings of words. Your task is to take the given sentence "
    "containing the literal use of the word '{target_word}' and rework it into a new "
    "sentence that maintains the literal essence while changing the surrounding "
    "context. The output must contain the word '{target_word}'. Please provide only "
    "the new sentence.\n\nGiven sentence: '{sentence}'\n\nYour sentence:"
)


@dataclass(frozen=True)
class AugPromptTemplate:
    method: AugMethod
    template_text: str


TEMPLATES: dict[AugMethod, str] = {
    AugMethod.DIRECT_MET: DIRECT_MET_TEMPLATE,
    AugMethod.REPLACE_TARGET_MET: REPLACE_TARGET_MET_TEMPLATE,
    AugMethod.REPLACE_CONTEXT_MET: REPLACE_CONTEXT_MET_TEMPLATE,
    AugMethod.DIRECT_LIT: DIRECT_LIT_TEMPLATE,
    AugMethod.REPLACE_TARGET_LIT: REPLACE_TARGET_LIT_TEMPLATE,
    AugMethod.REPLACE_CONTEXT_LIT: REPLACE_CONTEXT_LIT_TEMPLATE,
}


def render_aug_prompt(method: AugMethod, seed: Instance) -> str:
    """Substitute the seed's fields into the method's frozen template."""
    if method.polarity is not seed.label:
        raise PolarityMismatchError(
            f"method {method.value} cannot be applied to a {seed.label.value} seed")
    template = TEMPLATES[method]
    if method.family == "direct":
        return template.format(target_word=seed.target_word)
    return template.format(target_word=seed.target_word, sentence=seed.sentence)


class RejectReason(str, Enum):
    MISSING_TARGET_WORD = "missing_target_word"
    UNCHANGED_TARGET = "unchanged_target"
    PARSE_FAILURE = "parse_failure"
    DUPLICATE = "duplicate"
    EMPTY_OUTPUT = "empty_output"


@dataclass(frozen=True)
class GenerationOutcome:
    """Parsed result of one teacher generation: a new instance or a typed
    rejection carrying the raw text for diagnostics."""

    instance: Instance | None
    reason: RejectReason | None
    raw: str

    @property
    def accepted(self) -> bool:
        return self.instance is not None

    @classmethod
    def accept(cls, instance: Instance, raw: str) -> "GenerationOutcome":
        return cls(instance=instance, reason=None, raw=raw)

    @classmethod
    def reject(cls, reason: RejectReason, raw: str) -> "GenerationOutcome":
        return cls(instance=None, reason=reason, raw=raw)


_QUOTE_PAIRS = {('"', '"'), ("'", "'"), ("“", "”"), ("‘", "’")}


def _strip_quotes(text: str) -> str:
    text = text.strip()
    while len(text) >= 2 and (text[0], text[-1]) in _QUOTE_PAIRS:
        text = text[1:-1].strip()
    return text


def _after_colon(line: str, prefix: str) -> str | None:
    """Content after `prefix` when the line starts with it (case-insensitive)."""
    if line.strip().lower().startswith(prefix):
        return line.strip()[len(prefix):].strip()
    return None


def _parse_single_sentence(raw: str, seed: Instance, method: AugMethod,
                           iteration: int) -> GenerationOutcome:
    if not raw.strip():
        return GenerationOutcome.reject(RejectReason.EMPTY_OUTPUT, raw)
    lines = []
    for line in raw.splitlines():
        stripped = _after_colon(line, "your sentence:")
        if stripped is None:
            stripped = line.strip()
        if stripped:
            lines.append(stripped)
    if not lines:
        return GenerationOutcome.reject(RejectReason.EMPTY_OUTPUT, raw)
    if len(lines) != 1:
        return GenerationOutcome.reject(RejectReason.PARSE_FAILURE, raw)
    sentence = _strip_quotes(lines[0])
    if not sentence:
        return GenerationOutcome.reject(RejectReason.EMPTY_OUTPUT, raw)
    token = find_matching_token(sentence, seed.target_word)
    if token is None:
        return GenerationOutcome.reject(RejectReason.MISSING_TARGET_WORD, raw)
    instance = Instance.create(
        sentence=sentence, target_word=token, label=seed.label,
        provenance=Augmented(method, seed.id, iteration))
    return GenerationOutcome.accept(instance, raw)


def _parse_replacement(raw: str, seed: Instance, method: AugMethod,
                       iteration: int) -> GenerationOutcome:
    if not raw.strip():
        return GenerationOutcome.reject(RejectReason.EMPTY_OUTPUT, raw)
    lines = raw.splitlines()
    # Skip any echoed prompt: the seed block ends with the last "Target word:" line.
    start = 0
    for i, line in enumerate(lines):
        if line.strip().lower().startswith("target word:"):
            start = i + 1
    new_sentence = None
    new_word = None
    for i in range(start, len(lines)):
        if new_sentence is None:
            new_sentence = _after_colon(lines[i], "new sentence:")
            continue
        new_word = _after_colon(lines[i], "new word:")
        if new_word is not None:
            break
    if new_sentence is None or new_word is None:
        return GenerationOutcome.reject(RejectReason.PARSE_FAILURE, raw)
    sentence = _strip_quotes(new_sentence)
    word = _strip_quotes(new_word).strip(".,;:!?")
    if not sentence or not word:
        return GenerationOutcome.reject(RejectReason.EMPTY_OUTPUT, raw)
    if word.lower() == seed.target_word.lower():
        return GenerationOutcome.reject(RejectReason.UNCHANGED_TARGET, raw)
    token = find_matching_token(sentence, word)
    if token is None:
        return GenerationOutcome.reject(RejectReason.MISSING_TARGET_WORD, raw)
    instance = Instance.create(
        sentence=sentence, target_word=token, label=seed.label,
        provenance=Augmented(method, seed.id, iteration))
    return GenerationOutcome.accept(instance, raw)


def parse_generation(method: AugMethod, raw: str, seed: Instance,
                     iteration: int) -> GenerationOutcome:
    """Validate a teacher output and turn it into a new instance.

    Total over arbitrary text: every malformed output lands in a typed
    rejection, never an exception.
    """
    if method.family == "target":
        return _parse_replacement(raw, seed, method, iteration)
    return _parse_single_sentence(raw, seed, method, iteration)


# --- round assembly ---

@dataclass(frozen=True)
class AugRecord:
    """One log line: what happened to a (seed, method) generation slot."""

    seed_id: str
    method: AugMethod
    attempts: int
    outcome: str  # "accepted" | "rejected" | "error"
    reason: str | None
    raw_excerpt: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed_id": self.seed_id,
            "method": self.method.value,
            "attempts": self.attempts,
            "outcome": self.outcome,
            "reason": self.reason,
            "raw_excerpt": self.raw_excerpt,
        }


@dataclass
class AugmentationLog:
    records: list[AugRecord]

    def reason_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for rec in self.records:
            key = rec.outcome if rec.reason is None else rec.reason
            counts[key] = counts.get(key, 0) + 1
        return counts

    def seed_ids(self) -> set[str]:
        return {rec.seed_id for rec in self.records}

    def save_jsonl(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as f:
            for rec in self.records:
                f.write(json.dumps(rec.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")

    @classmethod
    def load_jsonl(cls, path: str | Path) -> "AugmentationLog":
        records = []
        with Path(path).open("r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                d = json.loads(line)
                records.append(AugRecord(
                    seed_id=d["seed_id"], method=AugMethod(d["method"]),
                    attempts=d["attempts"], outcome=d["outcome"],
                    reason=d.get("reason"), raw_excerpt=d.get("raw_excerpt", "")))
        return cls(records=records)


@dataclass
class _Slot:
    seed_index: int
    method_index: int
    seed: Instance
    method: AugMethod
    prompt: str
    attempts: int = 0
    outcome: GenerationOutcome | None = None
    error: str | None = None


def augment_round(teacher: ModelLike, seeds: Dataset,
                  methods: Iterable[AugMethod], iteration: int,
                  history_keys: set[tuple[str, str]] | None = None,
                  retries_per_generation: int = 2) -> tuple[Dataset, AugmentationLog]:
    """Run one generation per (seed, matching method), validate, and dedup.

    Failed generations are retried with the same prompt up to
    retries_per_generation, then dropped. Accepted instances are deduped
    against history_keys and within the round in (seed, method) order.
    """
    method_list = sorted(set(methods), key=lambda m: list(AugMethod).index(m))
    if not method_list:
        raise ValueError("methods must be non-empty")
    history = set(history_keys or ())

    slots: list[_Slot] = []
    for seed_index, seed in enumerate(seeds):
        for method_index, method in enumerate(method_list):
            if method.polarity is not seed.label:
                continue
            slots.append(_Slot(
                seed_index=seed_index, method_index=method_index,
                seed=seed, method=method,
                prompt=render_aug_prompt(method, seed)))

    pending = list(slots)
    any_success = False
    first_error: ClientError | None = None
    for _wave in range(retries_per_generation + 1):
        if not pending:
            break
        results = complete_many(teacher, [slot.prompt for slot in pending])
        for r in results:
            if isinstance(r, ClientError):
                first_error = first_error or r
            else:
                any_success = True
        next_pending: list[_Slot] = []
        for slot, result in zip(pending, results):
            slot.attempts += 1
            if isinstance(result, ClientError):
                slot.error = str(result)
                slot.outcome = None
                next_pending.append(slot)
                continue
            slot.error = None
            slot.outcome = parse_generation(slot.method, result.text, slot.seed, iteration)
            if not slot.outcome.accepted:
                next_pending.append(slot)
        pending = next_pending
    if slots and not any_success:
        raise EndpointUnavailableError(
            f"every generation request failed; first error: {first_error}")

    accepted: list[Instance] = []
    accepted_keys: set[tuple[str, str]] = set()
    records: list[AugRecord] = []
    for slot in sorted(slots, key=lambda s: (s.seed_index, s.method_index)):
        if slot.error is not None:
            records.append(AugRecord(slot.seed.id, slot.method, slot.attempts,
                                     "error", "transport_error", slot.error[:200]))
            continue
        outcome = slot.outcome
        assert outcome is not None
        if not outcome.accepted:
            records.append(AugRecord(slot.seed.id, slot.method, slot.attempts,
                                     "rejected", outcome.reason.value,
                                     outcome.raw[:200]))
            continue
        instance = outcome.instance
        key = instance.key
        if key in history or key in accepted_keys:
            records.append(AugRecord(slot.seed.id, slot.method, slot.attempts,
                                     "rejected", RejectReason.DUPLICATE.value,
                                     outcome.raw[:200]))
            continue
        accepted_keys.add(key)
        accepted.append(instance)
        records.append(AugRecord(slot.seed.id, slot.method, slot.attempts,
                                 "accepted", None, outcome.raw[:200]))

    log = AugmentationLog(records=records)
    counts = log.reason_counts()
    logger.info("augmentation round %d: %d accepted of %d slots (%s)",
                iteration, len(accepted), len(slots), counts)
    return Dataset(name=f"aug.iter{iteration}", instances=tuple(accepted)), log
