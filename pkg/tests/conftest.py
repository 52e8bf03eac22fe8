from __future__ import annotations

import pytest

from cda_forge.client import EndpointConfig
from cda_forge.pipeline import RunConfig
from cda_forge.trainer import TrainerConfig, mock_trainer

from helpers import ScriptedTeacher, level_rule, sentence_gold


@pytest.fixture
def mock_endpoints() -> tuple[EndpointConfig, EndpointConfig]:
    teacher = EndpointConfig(base_url="mock://teacher", model_id="mock-teacher",
                             role="teacher")
    student = EndpointConfig(base_url="mock://student", model_id="mock-student",
                             role="student")
    return teacher, student


def make_run_config(tmp_path, train_per_class: int, **overrides) -> RunConfig:
    teacher = EndpointConfig(base_url="mock://teacher", model_id="mock-teacher",
                             role="teacher")
    student = EndpointConfig(base_url="mock://student", model_id="mock-student",
                             role="student")
    trainer = TrainerConfig(hook="true {train_file} {base} {out_dir}",
                            work_dir=str(tmp_path / "trainer_work"))
    return RunConfig(teacher=teacher, student_base=student, trainer=trainer,
                     train_per_class=train_per_class, **overrides)


def make_mock_stack(student_levels=(2, 3, 4, 5), aug_level: str = "easy",
                    filter_wrong=None, reject_mod=None):
    """Scripted teacher plus a mock trainer whose students improve by level."""
    teacher = ScriptedTeacher(filter_wrong=filter_wrong, reject_mod=reject_mod,
                              aug_level=aug_level)
    trainer = mock_trainer([level_rule(k) for k in student_levels],
                           gold=lambda sentence, target: sentence_gold(sentence))
    return teacher, trainer
