"""Synthetic data and scripted mock backends shared across the test suite.

Synthetic sentences carry their gold label and a difficulty level as plain
tokens ("label met", "level 3"), so mock students and teachers can decide
behavior from the prompt text alone. The scripted teacher is a pure function
of the prompt, which keeps interrupted and uninterrupted runs byte-identical.
"""

from __future__ import annotations

import hashlib
import re
from typing import Callable

from cda_forge.client import Completion, _batch
from cda_forge.data import Dataset, Instance, Label, Original
from cda_forge.trainer import parse_qa_prompt

_LEVEL_RE = re.compile(r"level (\d+)")


def make_instance(i: int, label: Label, level: int, name: str = "synth") -> Instance:
    marker = "met" if label is Label.METAPHOR else "lit"
    sentence = f"Case {i} label {marker} level {level} they frob{i} the idea."
    return Instance.create(
        sentence=sentence, target_word=f"frob{i}", label=label,
        provenance=Original(name, i))


def make_synth_dataset(n: int, name: str = "synth",
                       levels: tuple[int, ...] = (1, 2, 3, 4, 5)) -> Dataset:
    """Balanced dataset of n instances with levels cycling within each class."""
    instances = []
    for i in range(n):
        label = Label.METAPHOR if i % 2 == 0 else Label.LITERAL
        level = levels[(i // 2) % len(levels)]
        instances.append(make_instance(i, label, level, name))
    return Dataset(name=name, instances=tuple(instances))


def sentence_level(sentence: str) -> int:
    match = _LEVEL_RE.search(sentence)
    return int(match.group(1)) if match else 0


def sentence_gold(sentence: str) -> Label:
    return Label.METAPHOR if "label met" in sentence else Label.LITERAL


def sentence_case_index(sentence: str) -> int:
    match = re.search(r"Case (\d+)", sentence)
    return int(match.group(1)) if match else -1


def level_rule(k: int) -> Callable[[str, str], bool]:
    """Correctness rule: the student answers correctly up to difficulty k."""
    return lambda sentence, target: sentence_level(sentence) <= k


def _flip(label: Label) -> Label:
    return Label.LITERAL if label is Label.METAPHOR else Label.METAPHOR


class ScriptedTeacher:
    """Mock teacher answering both QA prompts and all six generation prompts.

    Every response is a deterministic function of the prompt text only:
    repeated prompts (retries, resumed runs) always get the same answer.
    """

    def __init__(self,
                 filter_wrong: Callable[[str, str], bool] | None = None,
                 reject_mod: tuple[int, int] | None = None,
                 aug_level: str = "easy"):
        # filter_wrong: where the teacher itself mispredicts during QA
        # reject_mod (num, den): emit empty output when hash % den < num
        # aug_level: "easy" (always 1) | "hash" (1..5) | "inherit" (seed's level)
        self.filter_wrong = filter_wrong
        self.reject_mod = reject_mod
        self.aug_level = aug_level
        self.calls = 0

    def complete(self, prompt: str) -> Completion:
        self.calls += 1
        return Completion(text=self._respond(prompt))

    def complete_many(self, prompts):
        if not prompts:
            raise ValueError("prompts must be non-empty")
        return _batch(self.complete, prompts, 1)

    def _respond(self, prompt: str) -> str:
        qa = parse_qa_prompt(prompt)
        if qa is not None:
            target, sentence = qa
            gold = sentence_gold(sentence)
            if self.filter_wrong is not None and self.filter_wrong(sentence, target):
                gold = _flip(gold)
            return gold.answer
        return self._respond_generation(prompt)

    def _respond_generation(self, prompt: str) -> str:
        digest = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
        h = int(digest[:12], 16)
        nonce = digest[:8]
        if self.reject_mod is not None:
            num, den = self.reject_mod
            if h % den < num:
                return ""
        if "Your task is to replace the target word" in prompt:
            polarity = "met" if "metaphorical expression" in prompt else "lit"
            lines = prompt.splitlines()
            seed_sentence = [l for l in lines if l.startswith("Original sentence: ")][-1]
            seed_sentence = seed_sentence[len("Original sentence: "):]
            seed_target = [l for l in lines if l.startswith("Target word: ")][-1]
            seed_target = seed_target[len("Target word: "):]
            level = self._level(h, seed_sentence)
            new_word = seed_target + "o"
            sentence = f"They {new_word} the {nonce} notion label {polarity} level {level}."
            return f"New sentence: {sentence}\nNew word: {new_word}"
        if "rework it into a new sentence" in prompt:
            polarity = "met" if "preserving metaphorical meanings" in prompt else "lit"
            target = re.search(r"use of the word '(.*?)'", prompt).group(1)
            seed_sentence = re.search(
                r"Given sentence: '(.*)'\n\nYour sentence:", prompt, re.DOTALL).group(1)
            level = self._level(h, seed_sentence)
            return (f"Within the {nonce} division label {polarity} level {level}, "
                    f"they {target} the outline.")
        polarity = "met" if "crafting subtle and intricate metaphors" in prompt else "lit"
        target = re.search(r"verb '(.*?)'", prompt).group(1)
        level = self._level(h, None)
        return (f"Your sentence: The {nonce} unit label {polarity} level {level} "
                f"will {target} the plan.")

    def _level(self, h: int, seed_sentence: str | None) -> int:
        if self.aug_level == "easy":
            return 1
        if self.aug_level == "inherit" and seed_sentence is not None:
            return sentence_level(seed_sentence)
        return 1 + (h % 5)
