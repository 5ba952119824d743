"""Synthetic-image verification with fixed yes/no question templates.

Every edited image is interrogated by a VQA backend: four questions for
background edits, two for color/texture.  Acceptance is conjunctive — one
wrong answer rejects the image.  Rejected jobs are regenerated with a fresh
attempt seed up to a retry budget, then kept as rejected records so the
training stage can exclude them.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from typing import Callable, Protocol, Sequence

import numpy as np

from .core import AttributeCategory, Feasibility, FilterStatus, GenerationJob, ImageRecord

CHOICES = ("yes", "no")


class VqaBackend(Protocol):
    def ask(self, image: np.ndarray, question_text: str, choices: Sequence[str]) -> str: ...


@dataclass(frozen=True)
class FilterQuestion:
    text: str
    expected: str
    choices: tuple[str, ...] = CHOICES

    def __post_init__(self):
        if self.expected not in self.choices:
            raise ValueError(f"expected answer {self.expected!r} not among choices")


@dataclass(frozen=True)
class QuestionResult:
    text: str
    expected: str
    answered: str | None  # None: reply was not interpretable as a choice


@dataclass(frozen=True)
class FilterVerdict:
    image_id: str
    results: tuple[QuestionResult, ...]

    @property
    def accepted(self) -> bool:
        return all(r.answered == r.expected for r in self.results)

    @property
    def indeterminate(self) -> bool:
        return any(r.answered is None for r in self.results)

    @property
    def failed_questions(self) -> list[QuestionResult]:
        return [r for r in self.results if r.answered != r.expected]

    def status(self) -> FilterStatus:
        if self.accepted:
            return FilterStatus.ACCEPTED
        if self.indeterminate:
            return FilterStatus.INDETERMINATE
        return FilterStatus.REJECTED


def _load_question_templates() -> dict[str, list[tuple[str, str]]]:
    text = resources.files("monoedit").joinpath("data/filter_questions.txt").read_text(encoding="utf-8")
    sections: dict[str, list[tuple[str, str]]] = {}
    current: list[tuple[str, str]] | None = None
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            current = sections.setdefault(stripped[1:-1], [])
            continue
        question, _, expected = line.partition("\t")
        if current is None or not expected:
            raise ValueError(f"malformed question template line: {line!r}")
        current.append((question.strip(), expected.strip()))
    return sections


_TEMPLATES = _load_question_templates()


def build_questions(
    category: AttributeCategory,
    class_name: str,
    attribute_keyword: str,
    feasibility: Feasibility,
) -> list[FilterQuestion]:
    """Instantiate the category's question templates for one image."""
    section = "BACKGROUND_QUESTIONS" if category is AttributeCategory.BACKGROUND else "FOREGROUND_QUESTIONS"
    feasible_answer = "yes" if feasibility is Feasibility.FEASIBLE else "no"
    questions = []
    for template, expected in _TEMPLATES[section]:
        text = (
            template.replace("[CLS]", class_name)
            .replace("[BACKGROUND]", attribute_keyword)
            .replace("[COLOR/TEXTURE]", attribute_keyword)
        )
        questions.append(
            FilterQuestion(text, feasible_answer if expected == "[FEASIBLE]" else expected)
        )
    return questions


def normalize_answer(reply: str) -> str | None:
    """Map a free-form reply onto "yes"/"no"; None when neither fits."""
    cleaned = reply.strip().lower().strip(".,!?:;\"' ")
    for choice in CHOICES:
        if cleaned.startswith(choice):
            return choice
    return None


def filter_image(
    image: np.ndarray,
    questions: Sequence[FilterQuestion],
    vqa: VqaBackend,
    image_id: str = "",
) -> FilterVerdict:
    """Ask every question once; accept only when all answers match."""
    if not questions:
        raise ValueError("no questions to ask")
    results = []
    for question in questions:
        try:
            raw = vqa.ask(image, question.text, question.choices)
            answered = normalize_answer(raw)
        except Exception:
            answered = None
        results.append(QuestionResult(question.text, question.expected, answered))
    return FilterVerdict(image_id, tuple(results))


GenerateFn = Callable[[GenerationJob], tuple[np.ndarray, ImageRecord]]
FilterFn = Callable[[np.ndarray, GenerationJob], FilterVerdict]
StatusFn = Callable[[str, FilterStatus], ImageRecord]


def filter_and_retry(
    job: GenerationJob,
    max_attempts: int,
    generate: GenerateFn,
    run_filter: FilterFn,
    set_status: StatusFn,
) -> tuple[ImageRecord, FilterVerdict]:
    """Generate, verify, and regenerate on rejection up to max_attempts.

    Each retry advances the job's attempt (fresh derived seed).  The final
    record carries the last attempt number and the last verdict's status:
    accepted, rejected, or indeterminate when the checker never produced a
    usable answer set.
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    current = job
    for _ in range(max_attempts):
        image, record = generate(current)
        verdict = run_filter(image, current)
        if verdict.accepted:
            break
        if current.attempt - job.attempt + 1 >= max_attempts:
            break
        current = current.next_attempt()
    final = set_status(record.image_id, verdict.status())
    return final, verdict
