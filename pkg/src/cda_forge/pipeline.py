"""Iterative fine-tune/augment controller.

A run executes a fixed stage sequence (teacher filter, balanced sample, then
evaluate / train / augment / merge per iteration) against a run directory.
Every stage persists its outputs atomically before the next starts, so an
interrupted run resumes at the first incomplete stage and reproduces exactly
what an uninterrupted run would have written.
"""

from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from . import trainer as trainer_mod
from .augmenter import AugmentationLog, augment_round
from .client import EndpointConfig, HttpChatClient, ModelLike
from .data import (
    ALL_METHODS,
    AugMethod,
    Dataset,
    DatasetStats,
    compute_stats,
    merge_dedup,
    pct_half_up,
    sample_balanced,
)
from .errors import IncompleteRunError, StageFailedError
from .evaluator import EvalReport, Split, correctness_map, evaluate_split
from .fsio import atomic_write_json, atomic_write_text, read_json
from .trainer import CheckpointRef, TrainerConfig, base_checkpoint, export_training_file

logger = logging.getLogger(__name__)

TRAIN_ON_CHOICES = ("correct", "all")
AUGMENT_SEED_CHOICES = ("wrong", "all")
NEXT_DATA_CHOICES = ("merged", "augmented_only")
FINETUNE_MODE_CHOICES = ("continuous", "from_scratch")


@dataclass(frozen=True)
class RunConfig:
    """Every switch of the loop; the defaults are the recommended main setup,
    and each ablation is reached by flipping exactly one field."""

    teacher: EndpointConfig
    student_base: EndpointConfig
    trainer: TrainerConfig
    iterations: int = 3
    train_on: str = "correct"
    augment_seed: str = "wrong"
    next_data: str = "merged"
    finetune_mode: str = "continuous"
    methods: frozenset[AugMethod] = frozenset(ALL_METHODS)
    sampling_seed: int = 13
    shuffling_seed: int = 13
    train_per_class: int = 3000
    test_per_class: int = 150
    retries_per_generation: int = 2
    stop_when_no_wrong: bool = False

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        _check_choice("train_on", self.train_on, TRAIN_ON_CHOICES)
        _check_choice("augment_seed", self.augment_seed, AUGMENT_SEED_CHOICES)
        _check_choice("next_data", self.next_data, NEXT_DATA_CHOICES)
        _check_choice("finetune_mode", self.finetune_mode, FINETUNE_MODE_CHOICES)
        if not self.methods:
            raise ValueError("methods must be non-empty")
        object.__setattr__(self, "methods", frozenset(self.methods))

    def to_dict(self) -> dict[str, Any]:
        return {
            "run": {
                "iterations": self.iterations,
                "train_on": self.train_on,
                "augment_seed": self.augment_seed,
                "next_data": self.next_data,
                "finetune_mode": self.finetune_mode,
                "methods": sorted(m.value for m in self.methods),
                "retries_per_generation": self.retries_per_generation,
                "stop_when_no_wrong": self.stop_when_no_wrong,
            },
            "sample": {
                "train_per_class": self.train_per_class,
                "test_per_class": self.test_per_class,
            },
            "seeds": {"sampling": self.sampling_seed, "shuffling": self.shuffling_seed},
            "teacher": self.teacher.to_dict(),
            "student": self.student_base.to_dict(),
            "trainer": self.trainer.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        run = dict(d.get("run", {}))
        sample = dict(d.get("sample", {}))
        seeds = dict(d.get("seeds", {}))
        teacher = dict(d["teacher"])
        teacher.setdefault("role", "teacher")
        student = dict(d["student"])
        student.setdefault("role", "student")
        kwargs: dict[str, Any] = {
            "teacher": EndpointConfig.from_dict(teacher),
            "student_base": EndpointConfig.from_dict(student),
            "trainer": TrainerConfig.from_dict(d["trainer"]),
        }
        if "methods" in run:
            run["methods"] = frozenset(AugMethod(m) for m in run["methods"])
        for key in ("iterations", "train_on", "augment_seed", "next_data",
                    "finetune_mode", "methods", "retries_per_generation",
                    "stop_when_no_wrong"):
            if key in run:
                kwargs[key] = run[key]
        if "train_per_class" in sample:
            kwargs["train_per_class"] = sample["train_per_class"]
        if "test_per_class" in sample:
            kwargs["test_per_class"] = sample["test_per_class"]
        if "sampling" in seeds:
            kwargs["sampling_seed"] = seeds["sampling"]
        if "shuffling" in seeds:
            kwargs["shuffling_seed"] = seeds["shuffling"]
        return cls(**kwargs)


def _check_choice(name: str, value: str, choices: Sequence[str]) -> None:
    if value not in choices:
        raise ValueError(f"{name} must be one of {choices}, got {value!r}")


@dataclass(frozen=True)
class IterationRecord:
    """Everything one iteration consumed and produced, as persisted."""

    index: int
    dataset_path: str
    dataset_size: int
    n_correct: int
    n_wrong: int
    train_path: str
    train_size: int
    train_pct_metaphor: float
    checkpoint_id: str
    augmented_path: str
    aug_size: int
    stats: DatasetStats
    next_dataset_path: str
    student_requests: int
    teacher_requests: int
    wall_clock_s: float

    def to_dict(self) -> dict[str, Any]:
        d = {
            "index": self.index,
            "dataset_path": self.dataset_path,
            "dataset_size": self.dataset_size,
            "n_correct": self.n_correct,
            "n_wrong": self.n_wrong,
            "train_path": self.train_path,
            "train_size": self.train_size,
            "train_pct_metaphor": self.train_pct_metaphor,
            "checkpoint_id": self.checkpoint_id,
            "augmented_path": self.augmented_path,
            "aug_size": self.aug_size,
            "stats": self.stats.to_dict(),
            "next_dataset_path": self.next_dataset_path,
            "student_requests": self.student_requests,
            "teacher_requests": self.teacher_requests,
            "wall_clock_s": self.wall_clock_s,
        }
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "IterationRecord":
        kwargs = dict(d)
        kwargs["stats"] = DatasetStats.from_dict(d["stats"])
        return cls(**kwargs)


@dataclass(frozen=True)
class RunState:
    """Final view of a run: config snapshot, iteration records, outcome."""

    config: RunConfig
    records: tuple[IterationRecord, ...]
    final_checkpoint: CheckpointRef | None
    status: str  # "in_progress" | "completed" | "failed"
    failed_stage: str | None = None


class RunPaths:
    """All file locations inside a run directory."""

    def __init__(self, run_dir: str | Path):
        self.run_dir = Path(run_dir)

    @property
    def run_json(self) -> Path:
        return self.run_dir / "run.json"

    @property
    def state_json(self) -> Path:
        return self.run_dir / "state.json"

    @property
    def checkpoints_json(self) -> Path:
        return self.run_dir / "checkpoints.json"

    @property
    def initial_raw(self) -> Path:
        return self.run_dir / "initial" / "raw.jsonl"

    @property
    def initial_filtered(self) -> Path:
        return self.run_dir / "initial" / "filtered.jsonl"

    @property
    def initial_stats(self) -> Path:
        return self.run_dir / "initial" / "stats.json"

    def iter_dir(self, n: int) -> Path:
        return self.run_dir / f"iter_{n}"

    def dataset(self, n: int) -> Path:
        return self.iter_dir(n) / "dataset.jsonl"

    def report(self, n: int) -> Path:
        return self.iter_dir(n) / "report.jsonl"

    def correct(self, n: int) -> Path:
        return self.iter_dir(n) / "correct.jsonl"

    def wrong(self, n: int) -> Path:
        return self.iter_dir(n) / "wrong.jsonl"

    def stats(self, n: int) -> Path:
        return self.iter_dir(n) / "stats.json"

    def train(self, n: int) -> Path:
        return self.iter_dir(n) / "train.jsonl"

    def checkpoint_dir(self, n: int) -> Path:
        return self.iter_dir(n) / "checkpoint"

    def augmented(self, n: int) -> Path:
        return self.iter_dir(n) / "augmented.jsonl"

    def aug_log(self, n: int) -> Path:
        return self.iter_dir(n) / "aug_log.jsonl"


def stage_list(iterations: int) -> list[str]:
    """The fixed stage sequence of a run with the given iteration count."""
    stages = ["filter", "sample"]
    for n in range(1, iterations + 1):
        stages += [f"evaluate_{n}", f"train_{n}", f"augment_{n}", f"next_{n}"]
    stages.append("finalize")
    return stages


def _blank_state() -> dict[str, Any]:
    return {
        "status": "in_progress",
        "failed_stage": None,
        "completed_stages": [],
        "iterations": [],
        "final_checkpoint": None,
        "stage_durations": {},
    }


# --- teacher filtering ---

def _filter_with_stats(teacher: ModelLike, raw: Dataset
                       ) -> tuple[Dataset, DatasetStats, DatasetStats]:
    report, split = evaluate_split(teacher, raw)
    filtered = Dataset(name=f"{raw.name}.filtered", instances=split.correct.instances)
    stats_before = compute_stats(raw, correctness_map(report))
    stats_after = compute_stats(filtered)
    return filtered, stats_before, stats_after


def teacher_filter(teacher: ModelLike, raw: Dataset) -> Dataset:
    """Keep only the instances the teacher predicts correctly.

    Incorrectly predicted instances are discarded before any sampling, so the
    retained pool is what balanced sampling later draws from.
    """
    filtered, before, after = _filter_with_stats(teacher, raw)
    logger.info(
        "teacher filter: kept %d of %d (%%M before=%.2f, correct=%.2f%%; "
        "%%M after=%.2f)",
        len(filtered), len(raw), before.pct_metaphor, before.pct_correct or 0.0,
        after.pct_metaphor)
    return filtered


# --- run execution ---

TrainFn = Callable[..., CheckpointRef]
ModelFactory = Callable[[CheckpointRef], ModelLike]


@dataclass
class _Context:
    config: RunConfig
    paths: RunPaths
    train_fn: TrainFn
    teacher: ModelLike
    model_factory: ModelFactory
    raw: Dataset
    filtered: Dataset | None = None
    d_prev: Dataset | None = None
    split: Split | None = None
    report: EvalReport | None = None
    aug: Dataset | None = None
    aug_log: AugmentationLog | None = None
    checkpoints: list[CheckpointRef] = field(default_factory=list)
    history_keys: set[tuple[str, str]] = field(default_factory=set)
    early_stop: bool = False

    @property
    def current_student(self) -> CheckpointRef:
        return self.checkpoints[-1]


def _save_report(report: EvalReport, path: Path) -> None:
    lines = []
    for rec in report.records:
        lines.append(json.dumps({"type": "prediction", **rec.to_dict()},
                                ensure_ascii=False, sort_keys=True))
    lines.append(json.dumps({"type": "summary", **report.summary_dict()},
                            ensure_ascii=False, sort_keys=True))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _train_file_stats(path: Path) -> tuple[int, float]:
    """Record count and metaphor share of an exported training file."""
    total = 0
    yes = 0
    with path.open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            total += 1
            if json.loads(line).get("output") == "Yes":
                yes += 1
    return total, pct_half_up(yes, total)


def _checkpoint_dict(paths: RunPaths, checkpoint: CheckpointRef) -> dict[str, Any]:
    """Persist checkpoint locations inside the run directory as relative paths,
    keeping the persisted state identical across relocated or re-created runs."""
    d = checkpoint.to_dict()
    if checkpoint.location:
        try:
            d["location"] = str(
                Path(checkpoint.location).resolve().relative_to(paths.run_dir.resolve()))
        except ValueError:
            pass
    return d


def _checkpoint_from_stored(paths: RunPaths, d: Mapping[str, Any]) -> CheckpointRef:
    if d.get("location") and not Path(d["location"]).is_absolute():
        d = {**d, "location": str(paths.run_dir.resolve() / d["location"])}
    return CheckpointRef.from_dict(d)


def _save_checkpoints(paths: RunPaths, checkpoints: Sequence[CheckpointRef]) -> None:
    atomic_write_json(paths.checkpoints_json,
                      [_checkpoint_dict(paths, c) for c in checkpoints])


def _load_checkpoints(paths: RunPaths) -> list[CheckpointRef]:
    return [_checkpoint_from_stored(paths, d) for d in read_json(paths.checkpoints_json)]


class _Run:
    def __init__(self, config: RunConfig, paths: RunPaths, ctx: _Context,
                 state: dict[str, Any], clock: Callable[[], float],
                 stage_callback: Callable[[str], None] | None):
        self.config = config
        self.paths = paths
        self.ctx = ctx
        self.state = state
        self.clock = clock
        self.stage_callback = stage_callback

    def execute(self) -> RunState:
        for stage in stage_list(self.config.iterations):
            if self.state["status"] == "completed":
                break
            if stage in self.state["completed_stages"]:
                self._load_completed(stage)
                continue
            started = self.clock()
            try:
                self._execute_stage(stage)
            except Exception as e:
                self.state["status"] = "failed"
                self.state["failed_stage"] = stage
                self._save_state()
                raise StageFailedError(stage, e) from e
            self.state["failed_stage"] = None
            self.state["stage_durations"][stage] = round(self.clock() - started, 6)
            self.state["completed_stages"].append(stage)
            self._save_state()
            if self.stage_callback is not None:
                self.stage_callback(stage)
            if self.ctx.early_stop and not stage.startswith("finalize"):
                self._execute_stage("finalize")
                self.state["completed_stages"].append("finalize")
                self._save_state()
                break
        return self.run_state()

    def run_state(self) -> RunState:
        final = self.state.get("final_checkpoint")
        return RunState(
            config=self.config,
            records=tuple(IterationRecord.from_dict(d) for d in self.state["iterations"]),
            final_checkpoint=(None if final is None
                              else _checkpoint_from_stored(self.paths, final)),
            status=self.state["status"],
            failed_stage=self.state.get("failed_stage"),
        )

    def _save_state(self) -> None:
        atomic_write_json(self.paths.state_json, self.state)

    # stage execution

    def _execute_stage(self, stage: str) -> None:
        logger.info("stage %s", stage)
        ctx, paths, config = self.ctx, self.paths, self.config
        if stage == "filter":
            filtered, before, after = _filter_with_stats(ctx.teacher, ctx.raw)
            filtered_path_tmp = paths.initial_filtered
            filtered_path_tmp.parent.mkdir(parents=True, exist_ok=True)
            filtered.save_jsonl(filtered_path_tmp)
            atomic_write_json(paths.initial_stats, {
                "raw": before.to_dict(),
                "filtered": after.to_dict(),
                "teacher_requests": len(ctx.raw),
            })
            ctx.filtered = filtered
        elif stage == "sample":
            assert ctx.filtered is not None
            d0 = sample_balanced(
                ctx.filtered, config.train_per_class,
                seed=config.sampling_seed, shuffle_seed=config.shuffling_seed,
                name="D0")
            paths.iter_dir(1).mkdir(parents=True, exist_ok=True)
            d0.save_jsonl(paths.dataset(1))
            ctx.d_prev = d0
            ctx.history_keys = d0.keys()
            ctx.checkpoints = [base_checkpoint(config.student_base)]
            _save_checkpoints(paths, ctx.checkpoints)
        elif stage == "finalize":
            self.state["status"] = "completed"
            self.state["final_checkpoint"] = _checkpoint_dict(paths, ctx.current_student)
        else:
            name, n_str = stage.rsplit("_", 1)
            n = int(n_str)
            if name == "evaluate":
                self._stage_evaluate(n)
            elif name == "train":
                self._stage_train(n)
            elif name == "augment":
                self._stage_augment(n)
            elif name == "next":
                self._stage_next(n)
            else:
                raise ValueError(f"unknown stage {stage!r}")

    def _stage_evaluate(self, n: int) -> None:
        ctx, paths = self.ctx, self.paths
        assert ctx.d_prev is not None
        student = ctx.model_factory(ctx.current_student)
        report, split = evaluate_split(student, ctx.d_prev)
        stats = compute_stats(ctx.d_prev, correctness_map(report))
        paths.iter_dir(n).mkdir(parents=True, exist_ok=True)
        _save_report(report, paths.report(n))
        split.correct.save_jsonl(paths.correct(n))
        split.wrong.save_jsonl(paths.wrong(n))
        atomic_write_json(paths.stats(n), stats.to_dict())
        ctx.report = report
        ctx.split = split

    def _stage_train(self, n: int) -> None:
        ctx, paths, config = self.ctx, self.paths, self.config
        assert ctx.split is not None and ctx.d_prev is not None
        train_set = ctx.split.correct if config.train_on == "correct" else ctx.d_prev
        export_training_file(train_set, paths.train(n))
        base = (ctx.current_student if config.finetune_mode == "continuous"
                else ctx.checkpoints[0])
        checkpoint = ctx.train_fn(config.trainer, base, paths.train(n),
                                  out_dir=paths.checkpoint_dir(n))
        ctx.checkpoints.append(checkpoint)
        _save_checkpoints(paths, ctx.checkpoints)

    def _stage_augment(self, n: int) -> None:
        ctx, paths, config = self.ctx, self.paths, self.config
        assert ctx.split is not None and ctx.d_prev is not None
        seeds = ctx.split.wrong if config.augment_seed == "wrong" else ctx.d_prev
        if len(seeds) == 0:
            aug = Dataset(name=f"aug.iter{n}", instances=())
            log = AugmentationLog(records=[])
        else:
            aug, log = augment_round(
                ctx.teacher, seeds, config.methods, n,
                history_keys=ctx.history_keys,
                retries_per_generation=config.retries_per_generation)
        aug.save_jsonl(paths.augmented(n))
        log.save_jsonl(paths.aug_log(n))
        ctx.aug = aug
        ctx.aug_log = log
        ctx.history_keys |= aug.keys()

    def _stage_next(self, n: int) -> None:
        ctx, paths, config = self.ctx, self.paths, self.config
        assert ctx.d_prev is not None and ctx.aug is not None
        assert ctx.split is not None and ctx.aug_log is not None
        if config.next_data == "merged":
            d_next = merge_dedup(ctx.d_prev, ctx.aug, name=f"D{n}")
        else:
            d_next = Dataset(name=f"D{n}", instances=ctx.aug.instances)
        paths.iter_dir(n + 1).mkdir(parents=True, exist_ok=True)
        d_next.save_jsonl(paths.dataset(n + 1))

        train_size, train_pct_m = _train_file_stats(paths.train(n))
        durations = self.state["stage_durations"]
        wall = sum(durations.get(f"{s}_{n}", 0.0)
                   for s in ("evaluate", "train", "augment"))
        record = IterationRecord(
            index=n,
            dataset_path=str(paths.dataset(n).relative_to(paths.run_dir)),
            dataset_size=len(ctx.d_prev),
            n_correct=len(ctx.split.correct),
            n_wrong=len(ctx.split.wrong),
            train_path=str(paths.train(n).relative_to(paths.run_dir)),
            train_size=train_size,
            train_pct_metaphor=train_pct_m,
            checkpoint_id=ctx.current_student.id,
            augmented_path=str(paths.augmented(n).relative_to(paths.run_dir)),
            aug_size=len(ctx.aug),
            stats=DatasetStats.from_dict(read_json(paths.stats(n))),
            next_dataset_path=str(paths.dataset(n + 1).relative_to(paths.run_dir)),
            student_requests=len(ctx.d_prev),
            teacher_requests=sum(rec.attempts for rec in ctx.aug_log.records),
            wall_clock_s=round(wall, 6),
        )
        self.state["iterations"].append(record.to_dict())
        ctx.d_prev = d_next
        if config.stop_when_no_wrong and record.n_wrong == 0 and n < config.iterations:
            logger.info("wrong split empty at iteration %d; stopping early", n)
            ctx.early_stop = True

    # resume loading

    def _load_completed(self, stage: str) -> None:
        ctx, paths = self.ctx, self.paths
        if stage == "filter":
            ctx.filtered = Dataset.load_jsonl(paths.initial_filtered,
                                              name=f"{ctx.raw.name}.filtered")
        elif stage == "sample":
            ctx.d_prev = Dataset.load_jsonl(paths.dataset(1), name="D0")
            ctx.history_keys = ctx.d_prev.keys()
            ctx.checkpoints = _load_checkpoints(paths)
        elif stage == "finalize":
            pass
        else:
            name, n_str = stage.rsplit("_", 1)
            n = int(n_str)
            if name == "evaluate":
                assert ctx.d_prev is not None
                ctx.split = Split(
                    correct=Dataset.load_jsonl(paths.correct(n),
                                               name=f"{ctx.d_prev.name}.correct"),
                    wrong=Dataset.load_jsonl(paths.wrong(n),
                                             name=f"{ctx.d_prev.name}.wrong"),
                )
            elif name == "train":
                ctx.checkpoints = _load_checkpoints(paths)
            elif name == "augment":
                ctx.aug = Dataset.load_jsonl(paths.augmented(n), name=f"aug.iter{n}")
                ctx.aug_log = AugmentationLog.load_jsonl(paths.aug_log(n))
                ctx.history_keys |= ctx.aug.keys()
            elif name == "next":
                ctx.d_prev = Dataset.load_jsonl(paths.dataset(n + 1), name=f"D{n}")
                ctx.history_keys |= ctx.d_prev.keys()


def run_cda(config: RunConfig, initial: Dataset, run_dir: str | Path, *,
            trainer: Any = None,
            teacher: ModelLike | None = None,
            model_factory: ModelFactory | None = None,
            clock: Callable[[], float] = time.monotonic,
            stage_callback: Callable[[str], None] | None = None) -> RunState:
    """Execute (or resume) a full run in run_dir and return its final state.

    The injectable backends default to the real ones: an HTTP client for the
    teacher, the hook-based trainer gateway, and HTTP clients for student
    checkpoints.
    """
    paths = RunPaths(run_dir)
    paths.run_dir.mkdir(parents=True, exist_ok=True)
    if paths.run_json.exists():
        stored = read_json(paths.run_json)
        config = RunConfig.from_dict(stored["config"])
        initial = Dataset.load_jsonl(paths.initial_raw, name=stored.get("initial_name", "initial"))
        state = read_json(paths.state_json)
        if state["status"] == "failed":
            state["status"] = "in_progress"
    else:
        atomic_write_json(paths.run_json, {
            "config": config.to_dict(),
            "seeds": {"sampling": config.sampling_seed, "shuffling": config.shuffling_seed},
            "initial_name": initial.name,
        })
        paths.initial_raw.parent.mkdir(parents=True, exist_ok=True)
        initial.save_jsonl(paths.initial_raw)
        state = _blank_state()
        atomic_write_json(paths.state_json, state)

    ctx = _Context(
        config=config,
        paths=paths,
        train_fn=trainer.train if trainer is not None else trainer_mod.train,
        teacher=teacher if teacher is not None else HttpChatClient(config.teacher),
        model_factory=model_factory or trainer_mod.default_model_factory,
        raw=initial,
    )
    run = _Run(config, paths, ctx, state, clock, stage_callback)
    return run.execute()


def resume_run(run_dir: str | Path, *,
               trainer: Any = None,
               teacher: ModelLike | None = None,
               model_factory: ModelFactory | None = None,
               clock: Callable[[], float] = time.monotonic,
               stage_callback: Callable[[str], None] | None = None) -> RunState:
    """Continue an interrupted run from its first incomplete stage."""
    paths = RunPaths(run_dir)
    if not paths.run_json.exists():
        raise FileNotFoundError(f"{paths.run_json} does not exist; nothing to resume")
    stored = read_json(paths.run_json)
    config = RunConfig.from_dict(stored["config"])
    return run_cda(config, Dataset(name="unused"), run_dir,
                   trainer=trainer, teacher=teacher, model_factory=model_factory,
                   clock=clock, stage_callback=stage_callback)


def load_run_state(run_dir: str | Path) -> RunState:
    """Read the persisted state of a run directory without executing anything."""
    paths = RunPaths(run_dir)
    config = RunConfig.from_dict(read_json(paths.run_json)["config"])
    state = read_json(paths.state_json)
    final = state.get("final_checkpoint")
    return RunState(
        config=config,
        records=tuple(IterationRecord.from_dict(d) for d in state["iterations"]),
        final_checkpoint=None if final is None else _checkpoint_from_stored(paths, final),
        status=state["status"],
        failed_stage=state.get("failed_stage"),
    )


# --- reporting ---

def report_run(run_dir: str | Path, test_sets: Sequence[Dataset], trials: int, *,
               model_factory: ModelFactory | None = None,
               write: bool = True) -> dict[str, Any]:
    """Evaluate the final student on balanced samples of each test set over
    several trials and emit the per-iteration statistics alongside.

    All trials reuse the single final checkpoint; only the per-trial test
    sample (seeded with master seed + trial index) varies.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    state = load_run_state(run_dir)
    if state.status != "completed" or state.final_checkpoint is None:
        raise IncompleteRunError(f"run in {run_dir} has status {state.status!r}")
    config = state.config
    factory = model_factory or trainer_mod.default_model_factory
    student = factory(state.final_checkpoint)

    test_results = []
    for test_set in test_sets:
        per_trial = []
        for trial in range(1, trials + 1):
            seed = config.sampling_seed + trial
            sampled = sample_balanced(test_set, config.test_per_class, seed=seed)
            report, _split = evaluate_split(student, sampled)
            per_trial.append({"trial": trial, "seed": seed,
                              "accuracy": report.accuracy, "f1": report.f1})
        accuracies = [t["accuracy"] for t in per_trial]
        f1s = [t["f1"] for t in per_trial]
        test_results.append({
            "dataset": test_set.name,
            "n_per_class": config.test_per_class,
            "trials": trials,
            "per_trial": per_trial,
            "accuracy_mean": statistics.mean(accuracies),
            "accuracy_stddev": statistics.stdev(accuracies) if trials > 1 else 0.0,
            "f1_mean": statistics.mean(f1s),
            "f1_stddev": statistics.stdev(f1s) if trials > 1 else 0.0,
        })

    iteration_rows = [{
        "index": rec.index,
        "n_instances": rec.stats.n_instances,
        "pct_metaphor": rec.stats.pct_metaphor,
        "pct_correct": rec.stats.pct_correct,
        "pct_correct_metaphor": rec.stats.pct_correct_metaphor,
        "train_size": rec.train_size,
        "train_pct_metaphor": rec.train_pct_metaphor,
        "aug_size": rec.aug_size,
    } for rec in state.records]

    document = {
        "run_dir": str(run_dir),
        "note": ("all trials reuse the single final checkpoint; only the "
                 "per-trial test sample varies"),
        "final_checkpoint": state.final_checkpoint.id,
        "iterations": iteration_rows,
        "train_metaphor_share_by_iteration": [r["train_pct_metaphor"] for r in iteration_rows],
        "test_results": test_results,
    }
    if write:
        paths = RunPaths(run_dir)
        atomic_write_json(paths.run_dir / "report.json", document)
        atomic_write_text(paths.run_dir / "report.txt", render_report_text(document))
    return document


def render_report_text(document: Mapping[str, Any]) -> str:
    """Human-readable rendering of a report document."""
    lines = [f"run: {document['run_dir']}", document["note"], ""]
    lines.append("per-iteration dataset statistics:")
    header = f"{'iter':>4}  {'#instance':>9}  {'%M':>6}  {'%correct':>8}  {'%correct.M':>10}"
    lines.append(header)
    for row in document["iterations"]:
        lines.append(
            f"{row['index']:>4}  {row['n_instances']:>9}  {row['pct_metaphor']:>6.2f}  "
            f"{row['pct_correct']:>8.2f}  {row['pct_correct_metaphor']:>10.2f}")
    lines.append("")
    drift = ", ".join(f"{v:.2f}" for v in document["train_metaphor_share_by_iteration"])
    lines.append(f"train-set metaphor share by iteration: {drift}")
    lines.append("")
    for result in document["test_results"]:
        lines.append(
            f"{result['dataset']}: acc {result['accuracy_mean']:.4f} "
            f"± {result['accuracy_stddev']:.4f}, f1 {result['f1_mean']:.4f} "
            f"± {result['f1_stddev']:.4f} over {result['trials']} trial(s)")
    return "\n".join(lines) + "\n"
