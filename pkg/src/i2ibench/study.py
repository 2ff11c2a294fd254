"""Reader-study definition: JSON study configs and response records.

The server-side config knows which volumes are real and which questions
are sanity checks; :func:`client_view` strips both before anything goes
over the wire. Responses append to a CSV whose columns are fixed:
participant_id, question_id, part, answer, is_sanity, timestamp.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

from .stats import REAL_LABEL, Response, ValidationError
from .volume import ConfigurationError

RESPONSE_COLUMNS = ["participant_id", "question_id", "part", "answer", "is_sanity", "timestamp"]
_VOLUMES_PER_PART = {1: 1, 2: 2, 3: 3}
VALID_PART1_ANSWERS = ("real", "synthetic")
VALID_PART2_ANSWERS = ("a", "b", "none")


@dataclass
class VolumeItem:
    volume_id: str
    label: str  # "real" or the generating model's name
    path: str = ""
    patient: str = ""


@dataclass
class Question:
    question_id: str
    part: int
    volumes: list[VolumeItem]
    task: str = ""
    modality: str = ""
    is_sanity: bool = False


@dataclass
class StudyConfig:
    title: str
    questions: list[Question]
    demographics: list[dict] = field(default_factory=list)

    def volume_ids(self) -> set[str]:
        return {v.volume_id for q in self.questions for v in q.volumes}

    def volume_paths(self) -> dict[str, str]:
        return {v.volume_id: v.path for q in self.questions for v in q.volumes if v.path}


def load_study(path) -> StudyConfig:
    with open(path) as f:
        doc = json.load(f)
    questions = []
    for qd in doc.get("questions", []):
        volumes = [VolumeItem(**vd) for vd in qd.get("volumes", [])]
        questions.append(
            Question(
                question_id=str(qd["question_id"]),
                part=int(qd["part"]),
                volumes=volumes,
                task=qd.get("task", ""),
                modality=qd.get("modality", ""),
                is_sanity=bool(qd.get("is_sanity", False)),
            )
        )
    cfg = StudyConfig(title=doc.get("title", "Visual Turing test"),
                      questions=questions,
                      demographics=doc.get("demographics", []))
    validate_study(cfg)
    return cfg


def validate_study(cfg: StudyConfig) -> None:
    """Structural checks; raises ConfigurationError with the offending field."""
    seen: set[str] = set()
    for q in cfg.questions:
        where = f"question {q.question_id!r}"
        if q.question_id in seen:
            raise ConfigurationError(f"{where}: duplicate question_id")
        seen.add(q.question_id)
        if q.part not in _VOLUMES_PER_PART:
            raise ConfigurationError(f"{where}: part must be 1, 2 or 3, got {q.part}")
        expected = _VOLUMES_PER_PART[q.part]
        if len(q.volumes) != expected:
            raise ConfigurationError(
                f"{where}: part {q.part} needs exactly {expected} volumes, got {len(q.volumes)}"
            )
        if q.part in (2, 3):
            patients = {v.patient for v in q.volumes}
            if len(patients) != 1:
                raise ConfigurationError(
                    f"{where}: all volumes in a comparison must come from the same patient, "
                    f"got {sorted(patients)}"
                )
        if q.part == 2 and q.is_sanity:
            labels = {v.label for v in q.volumes}
            if len(labels) != 1:
                raise ConfigurationError(f"{where}: a part-2 sanity pair must repeat one volume label")
        if q.part == 3 and q.is_sanity:
            labels = [v.label for v in q.volumes]
            if len(set(labels)) != 2 or REAL_LABEL not in labels:
                raise ConfigurationError(
                    f"{where}: a part-3 sanity triplet is one real image plus two outputs "
                    f"of the same model, got {labels}"
                )


def client_view(cfg: StudyConfig) -> dict:
    """The JSON the browser sees: no sanity flags, no real/synthetic labels."""
    return {
        "title": cfg.title,
        "demographics": cfg.demographics,
        "questions": [
            {
                "question_id": q.question_id,
                "part": q.part,
                "volume_ids": [v.volume_id for v in q.volumes],
                "modality": q.modality,
            }
            for q in cfg.questions
        ],
    }


def validate_answer(part: int, answer: str) -> None:
    from .stats import parse_rank_answer

    if part == 1 and answer not in VALID_PART1_ANSWERS:
        raise ValidationError(f"part-1 answer must be one of {VALID_PART1_ANSWERS}, got {answer!r}")
    if part == 2 and answer not in VALID_PART2_ANSWERS:
        raise ValidationError(f"part-2 answer must be one of {VALID_PART2_ANSWERS}, got {answer!r}")
    if part == 3:
        parse_rank_answer(answer)


def append_response(path, response: Response) -> None:
    """Append one answer row, creating the file with a header if needed."""
    new = not os.path.exists(path)
    with open(path, "a", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        if new:
            w.writerow(RESPONSE_COLUMNS)
        w.writerow(
            [
                response.participant_id,
                response.question_id,
                response.part,
                response.answer,
                int(response.is_sanity),
                response.timestamp,
            ]
        )


def read_responses_csv(path) -> list[Response]:
    out: list[Response] = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            out.append(
                Response(
                    participant_id=row["participant_id"],
                    question_id=row["question_id"],
                    part=int(row["part"]),
                    answer=row["answer"],
                    is_sanity=row.get("is_sanity", "0") in ("1", "True", "true"),
                    timestamp=row.get("timestamp", ""),
                )
            )
    return out
