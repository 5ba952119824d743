"""Domain types shared by every pipeline stage, plus real-image/prompt pairing.

All record types are immutable values; pipeline stages derive new records
with :func:`dataclasses.replace` instead of mutating.  Job seeds are a
stable hash of (real_image_id, prompt_id, attempt) so reruns regenerate
bit-identical outputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

BACKEND_SEED_RANGE = 2**31  # seeds handed to backends stay in [0, 2**31)


class PipelineError(Exception):
    """Base class for errors raised by pipeline stages."""


class InsufficientPromptsError(PipelineError):
    """A class lacks enough accepted prompts of one feasibility for pairing."""

    def __init__(self, class_id: int, feasibility: "Feasibility", have: int, need: int):
        self.class_id = class_id
        self.feasibility = feasibility
        self.have = have
        self.need = need
        super().__init__(
            f"class {class_id} has {have} accepted {feasibility.value} prompts, "
            f"needs {need}; regenerate the prompt bank"
        )


class AttributeCategory(str, Enum):
    BACKGROUND = "background"
    COLOR = "color"
    TEXTURE = "texture"


class Feasibility(str, Enum):
    FEASIBLE = "feasible"
    INFEASIBLE = "infeasible"


class PromptStatus(str, Enum):
    RAW = "raw"
    SELF_FILTERED = "self_filtered"
    MANUAL_ACCEPTED = "manual_accepted"
    MANUAL_REJECTED = "manual_rejected"


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


class ImageKind(str, Enum):
    REAL = "real"
    SYNTHETIC = "synthetic"


class FilterStatus(str, Enum):
    UNFILTERED = "unfiltered"
    ACCEPTED = "accepted"
    REJECTED = "rejected"
    INDETERMINATE = "indeterminate"  # checker gave no usable answer; excluded from training, kept for audit


@dataclass(frozen=True)
class ClassEntry:
    class_id: int
    name: str
    dataset_id: str

    def __post_init__(self):
        if not self.name:
            raise ValueError("class name must be non-empty")


@dataclass(frozen=True)
class PromptRecord:
    """One attribute phrase (feasible or infeasible) for one class.

    ``keyword`` is the short attribute phrase; ``description`` a one-sentence
    visual elaboration.  Color prompts may omit the description, background
    and texture prompts must carry one.  Keywords must not contain commas or
    newlines so rendered prompts stay unambiguous.
    """

    prompt_id: str
    class_id: int
    category: AttributeCategory
    feasibility: Feasibility
    keyword: str
    description: str = ""
    status: PromptStatus = PromptStatus.RAW

    def __post_init__(self):
        if not self.keyword.strip():
            raise ValueError("prompt keyword must be non-empty")
        if "," in self.keyword or "\n" in self.keyword:
            raise ValueError(f"prompt keyword may not contain commas/newlines: {self.keyword!r}")
        if "\n" in self.description:
            raise ValueError("prompt description may not contain newlines")
        if self.category is not AttributeCategory.COLOR and not self.description.strip():
            raise ValueError(f"{self.category.value} prompts require a description")

    @property
    def accepted(self) -> bool:
        return self.status is PromptStatus.MANUAL_ACCEPTED


@dataclass(frozen=True)
class ImageRecord:
    """A real training image or one synthetic edit derived from it."""

    image_id: str
    class_id: int
    path: str
    split: Split
    kind: ImageKind
    parent_real_id: str | None = None
    prompt_id: str | None = None
    filter_status: FilterStatus = FilterStatus.UNFILTERED
    seed: int = 0
    attempt: int = 1

    def __post_init__(self):
        if self.attempt < 1:
            raise ValueError("attempt starts at 1")
        if self.kind is ImageKind.SYNTHETIC:
            if not self.parent_real_id or not self.prompt_id:
                raise ValueError(f"synthetic record {self.image_id} needs parent_real_id and prompt_id")
        else:
            if self.parent_real_id is not None or self.prompt_id is not None:
                raise ValueError(f"real record {self.image_id} may not carry parent/prompt ids")
            if self.filter_status is not FilterStatus.UNFILTERED:
                raise ValueError(f"real record {self.image_id} cannot carry a filter verdict")


@dataclass(frozen=True)
class GenerationJob:
    """Unit of work: one real image edited under one prompt.

    The seed is a pure function of (real_image_id, prompt_id, attempt), so a
    rerun of the same pairing produces the same job list bit for bit.
    """

    job_id: str
    real_image_id: str
    prompt_id: str
    category: AttributeCategory
    feasibility: Feasibility
    attempt: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.attempt < 1:
            raise ValueError("attempt starts at 1")

    def next_attempt(self) -> "GenerationJob":
        attempt = self.attempt + 1
        return replace(
            self,
            attempt=attempt,
            job_id=job_id_for(self.real_image_id, self.prompt_id, attempt),
            seed=derive_seed(self.real_image_id, self.prompt_id, attempt),
        )


@dataclass
class Manifest:
    """Dataset state: classes, prompt bank, and image records.

    Referential integrity (class ids, prompt ids, parent real ids) is
    enforced by :func:`monoedit.manifest.validate_manifest` on every load.
    """

    dataset_id: str
    classes: list[ClassEntry] = field(default_factory=list)
    prompts: list[PromptRecord] = field(default_factory=list)
    images: list[ImageRecord] = field(default_factory=list)
    pipeline_config_hash: str = ""
    created_at: str = ""

    def class_by_id(self, class_id: int) -> ClassEntry:
        for entry in self.classes:
            if entry.class_id == class_id:
                return entry
        raise KeyError(f"unknown class_id {class_id}")

    def prompt_by_id(self, prompt_id: str) -> PromptRecord:
        for record in self.prompts:
            if record.prompt_id == prompt_id:
                return record
        raise KeyError(f"unknown prompt_id {prompt_id}")

    def image_by_id(self, image_id: str) -> ImageRecord:
        for record in self.images:
            if record.image_id == image_id:
                return record
        raise KeyError(f"unknown image_id {image_id}")

    def real_images(self, split: Split | None = None) -> list[ImageRecord]:
        records = [r for r in self.images if r.kind is ImageKind.REAL]
        if split is not None:
            records = [r for r in records if r.split is split]
        return records

    def synthetic_images(self, filter_status: FilterStatus | None = None) -> list[ImageRecord]:
        records = [r for r in self.images if r.kind is ImageKind.SYNTHETIC]
        if filter_status is not None:
            records = [r for r in records if r.filter_status is filter_status]
        return records

    def synthetic_for(self, parent_real_id: str, prompt_id: str) -> ImageRecord | None:
        """Latest synthetic record for one (real, prompt) pairing, if any."""
        for record in self.images:
            if (
                record.kind is ImageKind.SYNTHETIC
                and record.parent_real_id == parent_real_id
                and record.prompt_id == prompt_id
            ):
                return record
        return None

    def accepted_prompts(
        self, class_id: int, category: AttributeCategory, feasibility: Feasibility
    ) -> list[PromptRecord]:
        """Accepted prompts for one group, in stable prompt_id order."""
        group = [
            p
            for p in self.prompts
            if p.class_id == class_id
            and p.category is category
            and p.feasibility is feasibility
            and p.accepted
        ]
        return sorted(group, key=lambda p: p.prompt_id)


def derive_seed(real_image_id: str, prompt_id: str, attempt: int) -> int:
    """Stable 64-bit hash of the job identity, truncated to the backend seed range."""
    digest = hashlib.blake2b(
        f"{real_image_id}|{prompt_id}|{attempt}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big") % BACKEND_SEED_RANGE


def stable_hash(text: str, bits: int = 64) -> int:
    """Deterministic non-cryptographic-use hash, stable across processes."""
    digest = hashlib.blake2b(text.encode(), digest_size=(bits + 7) // 8).digest()
    return int.from_bytes(digest, "big") % (2**bits)


def job_id_for(real_image_id: str, prompt_id: str, attempt: int) -> str:
    return f"{real_image_id}__{prompt_id}__a{attempt}"


def pair_real_with_prompts(
    real_images: Sequence[ImageRecord],
    prompt_bank: Iterable[PromptRecord],
    k: int,
) -> list[GenerationJob]:
    """Pair every real image with k accepted prompts per feasibility.

    The bank must hold prompts of a single attribute category (a pipeline run
    targets one attribute at a time).  Each real image takes the first k
    accepted prompts of its class per feasibility, in stable prompt_id order,
    so n real images yield exactly k*n feasible and k*n infeasible jobs.
    Raises
    :class:`InsufficientPromptsError` when a class cannot supply k accepted
    prompts of either feasibility.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return []

    accepted = [p for p in prompt_bank if p.accepted]
    categories = {p.category for p in accepted}
    if len(categories) > 1:
        raise ValueError(f"prompt bank spans multiple categories: {sorted(c.value for c in categories)}")

    by_group: dict[tuple[int, Feasibility], list[PromptRecord]] = {}
    for prompt in accepted:
        by_group.setdefault((prompt.class_id, prompt.feasibility), []).append(prompt)
    for group in by_group.values():
        group.sort(key=lambda p: p.prompt_id)

    jobs: list[GenerationJob] = []
    for real in real_images:
        if real.kind is not ImageKind.REAL:
            raise ValueError(f"{real.image_id} is not a real image record")
        for feasibility in (Feasibility.FEASIBLE, Feasibility.INFEASIBLE):
            group = by_group.get((real.class_id, feasibility), [])
            if len(group) < k:
                raise InsufficientPromptsError(real.class_id, feasibility, len(group), k)
            for slot in range(k):
                prompt = group[slot]
                jobs.append(
                    GenerationJob(
                        job_id=job_id_for(real.image_id, prompt.prompt_id, 1),
                        real_image_id=real.image_id,
                        prompt_id=prompt.prompt_id,
                        category=prompt.category,
                        feasibility=feasibility,
                        attempt=1,
                        seed=derive_seed(real.image_id, prompt.prompt_id, 1),
                    )
                )
    return jobs
