"""Attribute prompt generation, filtering, bookkeeping, and rendering.

An LLM proposes attribute phrases per (class, category, feasibility) group
from an in-context template, then reviews its own list; a human decisions
file settles final acceptance.  Records never leave the bank once created:
each stage only advances their status, so per-group accounting (raw ->
self-filtered -> manually accepted) falls out of the stored records.
"""

from __future__ import annotations

import ast
import re
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from .core import (
    AttributeCategory,
    ClassEntry,
    Feasibility,
    PipelineError,
    PromptRecord,
    PromptStatus,
)

PLACEHOLDERS = ("[Attribute]", "[CLASS]", "[NUMBER]")

_CATEGORY_NOUN = {
    AttributeCategory.BACKGROUND: "background scenes",
    AttributeCategory.COLOR: "colors",
    AttributeCategory.TEXTURE: "surface textures",
}
_CATEGORY_CODE = {
    AttributeCategory.BACKGROUND: "bg",
    AttributeCategory.COLOR: "co",
    AttributeCategory.TEXTURE: "tx",
}


class LlmError(PipelineError):
    """The language-model backend failed or replied unusably."""


class MalformedReplyError(LlmError):
    """Reply held no parseable list of attribute strings after a retry."""


class MissingDecisionError(PipelineError):
    """A record's keyword has no entry in the manual decisions file."""


class LlmBackend(Protocol):
    def send(self, conversation: list[dict[str, str]]) -> str: ...


@dataclass(frozen=True)
class IclTemplate:
    """In-context instruction block handed to the LLM, one section per field."""

    task_text: str
    criteria: tuple[str, ...]
    positive_example: str
    negative_example_with_reasons: str
    question_text: str

    def __post_init__(self):
        for placeholder in PLACEHOLDERS:
            if self.question_text.count(placeholder) != 1:
                raise ValueError(f"question_text must contain {placeholder} exactly once")

    def render_question(self, class_name: str, category: AttributeCategory,
                        feasibility: Feasibility, n: int) -> str:
        attribute = f"{feasibility.value} {_CATEGORY_NOUN[category]}"
        text = self.question_text.replace("[Attribute]", attribute)
        text = text.replace("[CLASS]", class_name)
        return text.replace("[NUMBER]", str(n))

    def conversation(self, class_name: str, category: AttributeCategory,
                     feasibility: Feasibility, n: int) -> list[dict[str, str]]:
        rules = "\n".join(f"- {rule}" for rule in self.criteria)
        body = (
            f"{self.task_text}\n\nCriteria:\n{rules}\n\n"
            f"Good example:\n{self.positive_example}\n\n"
            f"Rejected example:\n{self.negative_example_with_reasons}\n\n"
            f"{self.render_question(class_name, category, feasibility, n)}"
        )
        return [{"role": "user", "content": body}]


_SECTION_RE = re.compile(r"^\[(TASK|CRITERIA|POSITIVE_EXAMPLE|NEGATIVE_EXAMPLE|QUESTION)\]\s*$")


def parse_template(text: str) -> IclTemplate:
    sections: dict[str, list[str]] = {}
    current: list[str] | None = None
    for line in text.splitlines():
        match = _SECTION_RE.match(line.strip())
        if match:
            current = sections.setdefault(match.group(1), [])
            continue
        if current is not None:
            current.append(line)
    missing = {"TASK", "CRITERIA", "POSITIVE_EXAMPLE", "NEGATIVE_EXAMPLE", "QUESTION"} - sections.keys()
    if missing:
        raise ValueError(f"template lacks sections: {sorted(missing)}")
    criteria = tuple(
        line.strip().lstrip("- ").strip()
        for line in sections["CRITERIA"]
        if line.strip().startswith("-")
    )
    return IclTemplate(
        task_text="\n".join(sections["TASK"]).strip(),
        criteria=criteria,
        positive_example="\n".join(sections["POSITIVE_EXAMPLE"]).strip(),
        negative_example_with_reasons="\n".join(sections["NEGATIVE_EXAMPLE"]).strip(),
        question_text="\n".join(sections["QUESTION"]).strip(),
    )


def load_template(path: str | Path | None = None) -> IclTemplate:
    if path is not None:
        return parse_template(Path(path).read_text(encoding="utf-8"))
    text = resources.files("monoedit").joinpath("data/icl_template.txt").read_text(encoding="utf-8")
    return parse_template(text)


def _extract_list(reply: str) -> list[str]:
    """First bracketed Python-list literal of strings in the reply.

    LLMs wrap lists in prose; scan candidate closing brackets until one
    parses.  Raises ValueError when nothing parses as a list of strings.
    """
    start = reply.find("[")
    if start < 0:
        raise ValueError("no list literal in reply")
    for end in (i for i, ch in enumerate(reply) if ch == "]"):
        if end < start:
            continue
        try:
            value = ast.literal_eval(reply[start:end + 1])
        except (ValueError, SyntaxError):
            continue
        if isinstance(value, list) and all(isinstance(item, str) for item in value):
            return value
        raise ValueError("bracketed literal is not a list of strings")
    raise ValueError("no parseable list literal in reply")


def _split_entry(entry: str) -> tuple[str, str]:
    keyword, _, description = entry.partition(":")
    return keyword.strip(), description.strip()


def _parse_reply(reply: str) -> list[tuple[str, str]] | None:
    """None for an EMPTY reply, else (keyword, description) pairs."""
    if reply.strip() == "EMPTY":
        return None
    return [_split_entry(entry) for entry in _extract_list(reply)]


def _send_and_parse(llm: LlmBackend, conversation: list[dict[str, str]]) -> list[tuple[str, str]] | None:
    try:
        return _parse_reply(llm.send(conversation))
    except (ValueError, LlmError):
        pass
    try:
        return _parse_reply(llm.send(conversation))
    except ValueError as exc:
        raise MalformedReplyError(str(exc)) from exc


def prompt_id_for(class_id: int, category: AttributeCategory, feasibility: Feasibility, index: int) -> str:
    feas_code = "f" if feasibility is Feasibility.FEASIBLE else "i"
    return f"c{class_id:03d}-{_CATEGORY_CODE[category]}-{feas_code}-{index:03d}"


def generate_attributes(
    entry: ClassEntry,
    category: AttributeCategory,
    feasibility: Feasibility,
    n: int,
    llm: LlmBackend,
    template: IclTemplate | None = None,
) -> list[PromptRecord]:
    """Ask the LLM for up to n attribute phrases, returned as raw records.

    Keyword duplicates (case-insensitive) and entries that cannot form a
    valid record are dropped, so fewer than n records may come back.  An
    EMPTY reply yields an empty list.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    template = template or load_template()
    parsed = _send_and_parse(llm, template.conversation(entry.name, category, feasibility, n))
    if parsed is None:
        return []

    records: list[PromptRecord] = []
    seen: set[str] = set()
    for keyword, description in parsed:
        key = keyword.lower()
        if not keyword or key in seen:
            continue
        try:
            record = PromptRecord(
                prompt_id=prompt_id_for(entry.class_id, category, feasibility, len(records)),
                class_id=entry.class_id,
                category=category,
                feasibility=feasibility,
                keyword=keyword,
                description=description,
                status=PromptStatus.RAW,
            )
        except ValueError:
            continue
        seen.add(key)
        records.append(record)
        if len(records) == n:
            break
    return records


def self_filter(records: Sequence[PromptRecord], llm: LlmBackend) -> list[PromptRecord]:
    """LLM reviews its own list; survivors advance to self_filtered status.

    The reply is matched to inputs by keyword (case-insensitive); keywords
    the model invents are ignored, so survivors are always a subset.
    """
    if not records:
        return []
    if any(r.status is not PromptStatus.RAW for r in records):
        raise ValueError("self_filter expects raw records")
    groups = {(r.class_id, r.category, r.feasibility) for r in records}
    if len(groups) != 1:
        raise ValueError("self_filter expects one (class, category, feasibility) group")

    listing = [f"{r.keyword}: {r.description}" if r.description else r.keyword for r in records]
    conversation = [
        {"role": "user", "content": "Here is your attribute list:\n" + repr(listing)},
        {
            "role": "user",
            "content": (
                "Review the list against the original criteria. Remove entries "
                "that fail any criterion and reply with the surviving entries in "
                "the same Python-list format. Reply EMPTY if none survive."
            ),
        },
    ]
    parsed = _send_and_parse(llm, conversation)
    if parsed is None:
        return []
    surviving = {keyword.lower() for keyword, _ in parsed}
    return [
        replace(record, status=PromptStatus.SELF_FILTERED)
        for record in records
        if record.keyword.lower() in surviving
    ]


def apply_manual_filter(
    records: Sequence[PromptRecord], decisions: dict[str, bool]
) -> list[PromptRecord]:
    """Settle each self-filtered record from the decisions map (keyword -> accept)."""
    lowered = {k.lower(): v for k, v in decisions.items()}
    out: list[PromptRecord] = []
    for record in records:
        if record.status is not PromptStatus.SELF_FILTERED:
            raise ValueError(f"{record.prompt_id} has not passed self-filtering")
        verdict = lowered.get(record.keyword.lower())
        if verdict is None:
            raise MissingDecisionError(f"no decision for keyword {record.keyword!r}")
        status = PromptStatus.MANUAL_ACCEPTED if verdict else PromptStatus.MANUAL_REJECTED
        out.append(replace(record, status=status))
    return out


def load_decisions(path: str | Path) -> dict[str, bool]:
    """Decisions file: one `keyword<TAB>accept|reject` per line, # comments."""
    decisions: dict[str, bool] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        keyword, _, verdict = line.rpartition("\t")
        verdict = verdict.strip().lower()
        if not keyword or verdict not in ("accept", "reject"):
            raise ValueError(f"decisions file line {lineno}: expected 'keyword<TAB>accept|reject'")
        decisions[keyword.strip()] = verdict == "accept"
    return decisions


@dataclass(frozen=True)
class GroupStats:
    raw_count: int
    self_filtered_count: int
    manual_count: int

    def __post_init__(self):
        if not self.raw_count >= self.self_filtered_count >= self.manual_count >= 0:
            raise ValueError(f"counts must be non-increasing, got {self}")


def acceptance_rate(stats: GroupStats) -> float:
    """Share of raw proposals that survived to manual acceptance."""
    if stats.raw_count == 0:
        raise ZeroDivisionError("no raw prompts in group")
    return stats.manual_count / stats.raw_count


class PromptBank:
    """All prompt records of a dataset with per-group accounting."""

    def __init__(self, records: Iterable[PromptRecord]):
        self.records = list(records)

    def group(self, class_id: int, category: AttributeCategory,
              feasibility: Feasibility) -> list[PromptRecord]:
        return [
            r for r in self.records
            if r.class_id == class_id and r.category is category and r.feasibility is feasibility
        ]

    def stats(self, class_id: int, category: AttributeCategory,
              feasibility: Feasibility) -> GroupStats:
        group = self.group(class_id, category, feasibility)
        past_self = (
            PromptStatus.SELF_FILTERED,
            PromptStatus.MANUAL_ACCEPTED,
            PromptStatus.MANUAL_REJECTED,
        )
        return GroupStats(
            raw_count=len(group),
            self_filtered_count=sum(r.status in past_self for r in group),
            manual_count=sum(r.status is PromptStatus.MANUAL_ACCEPTED for r in group),
        )


def render_prompt(record: PromptRecord, entry: ClassEntry) -> str:
    """Deterministic diffusion prompt for one accepted attribute record.

    Backgrounds read "a photo of a <class> in the <keyword>"; colors and
    textures read "a photo of a <keyword> <class>".  A description, when
    present, follows as a comma clause.
    """
    if not record.accepted:
        raise ValueError(f"{record.prompt_id} is not manually accepted")
    if record.category is AttributeCategory.BACKGROUND:
        base = f"a photo of a {entry.name} in the {record.keyword}"
    else:
        base = f"a photo of a {record.keyword} {entry.name}"
    if record.description:
        return f"{base}, {record.description}"
    return base
