"""Contract between the pipeline and any fine-tuning backend.

Training happens behind a hook (substituted command line or HTTP job); all
the gateway ever learns about the result comes back through a small manifest
file, so the pipeline itself carries zero ML dependencies. A deterministic
mock trainer with scheduled student behavior backs the tests.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import shlex
import subprocess
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import requests

from .client import Completion, EndpointConfig, HttpChatClient, ModelLike, _batch
from .data import Dataset, Label, render_qa
from .errors import (
    HookFailedError,
    ManifestMalformedError,
    ManifestMissingError,
)
from .fsio import atomic_write_json

logger = logging.getLogger(__name__)

_DEFAULT_PASSTHROUGH: dict[str, Any] = {
    "adapter_rank": 8,
    "adapter_alpha": 16,
    "learning_rate": 2e-4,
}

_COMMAND_PLACEHOLDERS = ("{train_file}", "{base}", "{out_dir}")
MANIFEST_NAME = "manifest.json"
_MANIFEST_KEYS = ("checkpoint_id", "base_url", "model_id")


@dataclass(frozen=True)
class TrainerConfig:
    """How to invoke the fine-tuning backend.

    The passthrough map travels to the hook as TRAINER_OPT_* environment
    variables (command hooks) or request fields (HTTP hooks); the gateway
    never interprets it.
    """

    hook: str
    hook_kind: str = "command"  # "command" | "http"
    epochs: int = 3
    passthrough: Mapping[str, Any] = field(
        default_factory=lambda: dict(_DEFAULT_PASSTHROUGH))
    work_dir: str = "trainer_work"
    manifest_timeout_s: float = 30.0
    poll_interval_s: float = 0.5

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.hook_kind not in ("command", "http"):
            raise ValueError(f"hook_kind must be command or http, got {self.hook_kind!r}")
        if self.hook_kind == "command":
            missing = [p for p in _COMMAND_PLACEHOLDERS if p not in self.hook]
            if missing:
                raise ValueError(f"command hook is missing placeholders: {missing}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "hook": self.hook,
            "hook_kind": self.hook_kind,
            "epochs": self.epochs,
            "passthrough": dict(self.passthrough),
            "work_dir": self.work_dir,
            "manifest_timeout_s": self.manifest_timeout_s,
            "poll_interval_s": self.poll_interval_s,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainerConfig":
        return cls(**{k: d[k] for k in d if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class CheckpointRef:
    """Opaque handle to a fine-tuned student and where it is served."""

    id: str
    location: str
    parent: str | None
    serving: EndpointConfig

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "location": self.location,
            "parent": self.parent,
            "serving": self.serving.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CheckpointRef":
        return cls(
            id=str(d["id"]),
            location=str(d["location"]),
            parent=d.get("parent"),
            serving=EndpointConfig.from_dict(d["serving"]),
        )


def base_checkpoint(serving: EndpointConfig, checkpoint_id: str = "base") -> CheckpointRef:
    """The root of every lineage: the untrained student endpoint."""
    return CheckpointRef(id=checkpoint_id, location="", parent=None, serving=serving)


def export_training_file(dataset: Dataset, path: str | Path) -> int:
    """Write the dataset as line-delimited instruction-tuning records.

    Returns the number of records written; instance order is preserved.
    """
    if len(dataset) == 0:
        raise ValueError("cannot export an empty dataset")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    count = 0
    with tmp.open("w", encoding="utf-8") as f:
        for inst in dataset:
            qa = render_qa(inst)
            record = {"instruction": qa.instruction, "input": qa.input, "output": qa.output}
            f.write(json.dumps(record, ensure_ascii=False) + "\n")
            count += 1
    os.replace(tmp, path)
    return count


def _hook_env(config: TrainerConfig) -> dict[str, str]:
    env = dict(os.environ)
    env["TRAINER_EPOCHS"] = str(config.epochs)
    for key, value in config.passthrough.items():
        env[f"TRAINER_OPT_{key.upper()}"] = str(value)
    return env


def _read_manifest(out_dir: Path, timeout_s: float, poll_interval_s: float) -> dict[str, Any]:
    manifest_path = out_dir / MANIFEST_NAME
    deadline = time.monotonic() + timeout_s
    while not manifest_path.exists():
        if time.monotonic() >= deadline:
            raise ManifestMissingError(f"no manifest at {manifest_path} after {timeout_s}s")
        time.sleep(poll_interval_s)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestMalformedError(f"{manifest_path}: {e}") from e
    missing = [k for k in _MANIFEST_KEYS if k not in manifest]
    if missing:
        raise ManifestMalformedError(f"{manifest_path}: missing keys {missing}")
    return manifest


def _next_out_dir(work_dir: Path) -> Path:
    work_dir.mkdir(parents=True, exist_ok=True)
    index = 1
    while (work_dir / f"ckpt_{index:04d}").exists():
        index += 1
    return work_dir / f"ckpt_{index:04d}"


def _checkpoint_from_manifest(manifest: Mapping[str, Any], base: CheckpointRef,
                              out_dir: Path) -> CheckpointRef:
    serving = replace(base.serving, base_url=str(manifest["base_url"]),
                      model_id=str(manifest["model_id"]))
    return CheckpointRef(
        id=str(manifest["checkpoint_id"]),
        location=str(out_dir),
        parent=base.id,
        serving=serving,
    )


def train(config: TrainerConfig, base: CheckpointRef, train_file: str | Path,
          out_dir: str | Path | None = None) -> CheckpointRef:
    """Invoke the configured hook and wait for its completion manifest.

    Blocks until the hook has written {out_dir}/manifest.json; the returned
    checkpoint's parent is `base`.
    """
    train_file = Path(train_file)
    if not train_file.exists() or train_file.stat().st_size == 0:
        raise ValueError(f"train file missing or empty: {train_file}")
    out_dir = Path(out_dir) if out_dir is not None else _next_out_dir(Path(config.work_dir))
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.hook_kind == "command":
        _run_command_hook(config, base, train_file, out_dir)
    else:
        _run_http_hook(config, base, train_file, out_dir)
    manifest = _read_manifest(out_dir, config.manifest_timeout_s, config.poll_interval_s)
    return _checkpoint_from_manifest(manifest, base, out_dir)


def _run_command_hook(config: TrainerConfig, base: CheckpointRef,
                      train_file: Path, out_dir: Path) -> None:
    argv = [token.format(train_file=str(train_file), base=base.location or base.id,
                         out_dir=str(out_dir))
            for token in shlex.split(config.hook)]
    logger.info("running trainer hook: %s", argv)
    proc = subprocess.run(argv, env=_hook_env(config), capture_output=True, text=True)
    if proc.returncode != 0:
        tail = (proc.stderr or proc.stdout or "")[-2000:]
        raise HookFailedError(proc.returncode, tail)


def _run_http_hook(config: TrainerConfig, base: CheckpointRef,
                   train_file: Path, out_dir: Path) -> None:
    body = {
        "train_file": str(train_file),
        "base": base.location or base.id,
        "out_dir": str(out_dir),
        "epochs": config.epochs,
        "options": dict(config.passthrough),
    }
    response = requests.post(config.hook, json=body, timeout=config.manifest_timeout_s)
    if response.status_code != 200:
        raise HookFailedError(response.status_code, response.text[:2000])
    job = response.json()
    job_id = job.get("job_id")
    if job_id is None:
        if job.get("status") == "completed":
            return
        raise HookFailedError(response.status_code, f"no job_id in response: {job}")
    status_url = config.hook.rstrip("/") + "/" + str(job_id)
    deadline = time.monotonic() + config.manifest_timeout_s
    while True:
        status = requests.get(status_url, timeout=config.manifest_timeout_s).json()
        state = status.get("status")
        if state == "completed":
            return
        if state == "failed":
            raise HookFailedError("failed", str(status)[:2000])
        if time.monotonic() >= deadline:
            raise HookFailedError("timeout", f"job {job_id} did not finish")
        time.sleep(config.poll_interval_s)


# --- mock trainer ---

_QA_PROMPT_RE = re.compile(
    r"^Is the word '(?P<target>.*?)' in the sentence '(?P<sentence>.*)' used "
    r"metaphorically\? Please answer with 'Yes' or 'No' only\.$",
    re.DOTALL,
)


def parse_qa_prompt(prompt: str) -> tuple[str, str] | None:
    """Recover (target_word, sentence) from a rendered QA prompt, if it is one."""
    match = _QA_PROMPT_RE.match(prompt)
    if match is None:
        return None
    return match.group("target"), match.group("sentence")


CorrectnessRule = Callable[[str, str], bool]  # (sentence, target_word) -> answers correctly?
GoldFn = Callable[[str, str], Label]  # (sentence, target_word) -> gold label


class ScheduledStudent:
    """Mock student that answers the gold label exactly where its rule says so."""

    def __init__(self, rule: CorrectnessRule, gold: GoldFn):
        self._rule = rule
        self._gold = gold

    def _answer(self, prompt: str) -> str:
        parsed = parse_qa_prompt(prompt)
        if parsed is None:
            return "cannot tell"
        target, sentence = parsed
        gold = self._gold(sentence, target)
        answered = gold if self._rule(sentence, target) else (
            Label.LITERAL if gold is Label.METAPHOR else Label.METAPHOR)
        return answered.answer

    def complete(self, prompt: str) -> Completion:
        return Completion(text=self._answer(prompt))

    def complete_many(self, prompts: Sequence[str]):
        if not prompts:
            raise ValueError("prompts must be non-empty")
        return _batch(self.complete, prompts, 1)


@dataclass(frozen=True)
class MockTrainRecord:
    base_id: str
    train_file_sha256: str
    round_index: int


class MockTrainer:
    """Deterministic trainer satisfying the hook contract in-process.

    schedule[k] is the correctness rule of the student after k training
    rounds; schedule[0] describes the untrained base student. An exhausted
    schedule repeats its last entry. Every train call writes a manifest file
    into out_dir, exactly as an external hook would.
    """

    def __init__(self, schedule: Sequence[CorrectnessRule], gold: GoldFn):
        if not schedule:
            raise ValueError("schedule must be non-empty")
        self.schedule = list(schedule)
        self.gold = gold
        self.invocations: list[MockTrainRecord] = []

    def _rule_for(self, rounds_completed: int) -> CorrectnessRule:
        return self.schedule[min(rounds_completed, len(self.schedule) - 1)]

    def _infer_round(self, base: CheckpointRef, train_file: Path,
                     out_dir: Path | None) -> int:
        # Prefer persistent signals (the run layout or the base's own round) so a
        # resumed run assigns the same ids an uninterrupted one would.
        for candidate in (str(out_dir or ""), str(train_file)):
            match = re.search(r"iter_(\d+)", candidate)
            if match:
                return int(match.group(1))
        match = re.fullmatch(r"mock-ckpt-(\d+)", base.id)
        if match:
            return int(match.group(1)) + 1
        return len(self.invocations) + 1

    def train(self, config: TrainerConfig, base: CheckpointRef,
              train_file: str | Path, out_dir: str | Path | None = None) -> CheckpointRef:
        train_file = Path(train_file)
        if not train_file.exists() or train_file.stat().st_size == 0:
            raise ValueError(f"train file missing or empty: {train_file}")
        round_index = self._infer_round(base, train_file,
                                        Path(out_dir) if out_dir is not None else None)
        out_dir = Path(out_dir) if out_dir is not None else _next_out_dir(Path(config.work_dir))
        checkpoint_id = f"mock-ckpt-{round_index:04d}"
        manifest = {
            "checkpoint_id": checkpoint_id,
            "base_url": f"mock://{checkpoint_id}",
            "model_id": "mock-student",
        }
        atomic_write_json(out_dir / MANIFEST_NAME, manifest)
        digest = hashlib.sha256(train_file.read_bytes()).hexdigest()
        self.invocations.append(MockTrainRecord(base.id, digest, round_index))
        return _checkpoint_from_manifest(manifest, base, out_dir)

    def model_factory(self, checkpoint: CheckpointRef) -> ScheduledStudent:
        """Resolve a checkpoint (incl. the base) to its scheduled mock student."""
        match = re.fullmatch(r"mock-ckpt-(\d+)", checkpoint.id)
        rounds_completed = int(match.group(1)) if match else 0
        return ScheduledStudent(self._rule_for(rounds_completed), self.gold)


def mock_trainer(schedule: Sequence[CorrectnessRule], gold: GoldFn) -> MockTrainer:
    """Build the deterministic mock trainer used throughout the tests."""
    return MockTrainer(schedule, gold)


def default_model_factory(checkpoint: CheckpointRef) -> ModelLike:
    """Resolve a checkpoint to a live client for its serving endpoint."""
    return HttpChatClient(checkpoint.serving)
