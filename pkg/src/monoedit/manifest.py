"""Manifest persistence: a line-oriented, append-friendly dataset ledger.

Layout: a version line, one tagged JSON object per line.  The first object
carries dataset metadata; every later line is a class, prompt, or image
record.  Appending a record with an existing id supersedes the earlier line
(last one wins on load), so long-running stages stream updates to the end of
the file without rewriting it.  ``save_manifest`` rewrites the file in
canonical order, which makes a save/load/save cycle byte-stable.
"""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, replace
from pathlib import Path
from typing import IO, Any

from .core import (
    AttributeCategory,
    ClassEntry,
    Feasibility,
    FilterStatus,
    ImageKind,
    ImageRecord,
    Manifest,
    PipelineError,
    PromptRecord,
    PromptStatus,
    Split,
    stable_hash,
)

FORMAT_LINE = "#monoedit-manifest v1"

_RECORD_TYPES = {"class": ClassEntry, "prompt": PromptRecord, "image": ImageRecord}
_ENUM_FIELDS = {
    "prompt": {"category": AttributeCategory, "feasibility": Feasibility, "status": PromptStatus},
    "image": {"split": Split, "kind": ImageKind, "filter_status": FilterStatus},
}


class ManifestError(PipelineError):
    """Malformed manifest file, unknown record tag, or broken reference."""


class ManifestVersionError(ManifestError):
    """Manifest written by an incompatible format version."""


def _record_line(tag: str, record: ClassEntry | PromptRecord | ImageRecord) -> str:
    payload: dict[str, Any] = {"t": tag}
    for key, value in asdict(record).items():
        if value is None:
            continue
        payload[key] = value.value if hasattr(value, "value") else value
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def _parse_record(payload: dict[str, Any], lineno: int) -> tuple[str, Any]:
    tag = payload.pop("t", None)
    record_type = _RECORD_TYPES.get(tag or "")
    if record_type is None:
        raise ManifestError(f"line {lineno}: unknown record tag {tag!r}")
    try:
        for key, enum_type in _ENUM_FIELDS.get(tag, {}).items():
            if key in payload:
                payload[key] = enum_type(payload[key])
        return tag, record_type(**payload)
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"line {lineno}: bad {tag} record: {exc}") from exc


def validate_manifest(manifest: Manifest) -> None:
    """Check id uniqueness and referential integrity, raising on violations."""
    class_ids = {c.class_id for c in manifest.classes}
    if len(class_ids) != len(manifest.classes):
        raise ManifestError("duplicate class_id in manifest")

    prompt_ids = set()
    for prompt in manifest.prompts:
        if prompt.prompt_id in prompt_ids:
            raise ManifestError(f"duplicate prompt_id {prompt.prompt_id}")
        prompt_ids.add(prompt.prompt_id)
        if prompt.class_id not in class_ids:
            raise ManifestError(f"prompt {prompt.prompt_id} references unknown class {prompt.class_id}")

    by_image_id: dict[str, ImageRecord] = {}
    for image in manifest.images:
        if image.image_id in by_image_id:
            raise ManifestError(f"duplicate image_id {image.image_id}")
        by_image_id[image.image_id] = image
        if image.class_id not in class_ids:
            raise ManifestError(f"image {image.image_id} references unknown class {image.class_id}")

    prompts_by_id = {p.prompt_id: p for p in manifest.prompts}
    for image in manifest.images:
        if image.kind is not ImageKind.SYNTHETIC:
            continue
        parent = by_image_id.get(image.parent_real_id or "")
        if parent is None:
            raise ManifestError(f"image {image.image_id} references unknown real {image.parent_real_id}")
        if parent.kind is not ImageKind.REAL:
            raise ManifestError(f"image {image.image_id} parent {parent.image_id} is not a real image")
        prompt = prompts_by_id.get(image.prompt_id or "")
        if prompt is None:
            raise ManifestError(f"image {image.image_id} references unknown prompt {image.prompt_id}")
        if image.class_id != parent.class_id:
            raise ManifestError(
                f"image {image.image_id} class {image.class_id} differs from parent's {parent.class_id}"
            )
        if prompt.class_id != image.class_id:
            raise ManifestError(
                f"image {image.image_id} uses prompt {prompt.prompt_id} of class {prompt.class_id}"
            )


def load_manifest(path: str | Path, validate: bool = True) -> Manifest:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        if first != FORMAT_LINE:
            raise ManifestVersionError(f"{path}: expected {FORMAT_LINE!r}, found {first!r}")

        header: dict[str, Any] | None = None
        classes: dict[int, ClassEntry] = {}
        prompts: dict[str, PromptRecord] = {}
        images: dict[str, ImageRecord] = {}
        for lineno, raw in enumerate(fh, start=2):
            line = raw.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
            if not isinstance(payload, dict):
                raise ManifestError(f"{path}:{lineno}: expected a JSON object")
            if payload.get("t") == "header":
                if header is not None:
                    raise ManifestError(f"{path}:{lineno}: duplicate header")
                header = payload
                continue
            if header is None:
                raise ManifestError(f"{path}:{lineno}: record before header")
            tag, record = _parse_record(payload, lineno)
            if tag == "class":
                classes[record.class_id] = record
            elif tag == "prompt":
                prompts[record.prompt_id] = record
            else:
                images[record.image_id] = record

    if header is None:
        raise ManifestError(f"{path}: missing header record")
    if "dataset_id" not in header:
        raise ManifestError(f"{path}: header lacks dataset_id")

    manifest = Manifest(
        dataset_id=header["dataset_id"],
        classes=sorted(classes.values(), key=lambda c: c.class_id),
        prompts=sorted(prompts.values(), key=lambda p: p.prompt_id),
        images=sorted(images.values(), key=lambda i: i.image_id),
        pipeline_config_hash=header.get("pipeline_config_hash", ""),
        created_at=header.get("created_at", ""),
    )
    if validate:
        validate_manifest(manifest)
    return manifest


def _write_header(fh: IO[str], manifest: Manifest) -> None:
    fh.write(FORMAT_LINE + "\n")
    header = {
        "t": "header",
        "dataset_id": manifest.dataset_id,
        "pipeline_config_hash": manifest.pipeline_config_hash,
        "created_at": manifest.created_at,
    }
    fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")


def manifest_digest(manifest: Manifest) -> str:
    """Content hash over the canonical record lines (timestamp excluded).

    Two manifests with identical classes, prompts, and images share a digest
    even when written at different times; used to stamp training checkpoints
    with the data they were built from.
    """
    lines = [f"dataset_id={manifest.dataset_id}"]
    for entry in sorted(manifest.classes, key=lambda c: c.class_id):
        lines.append(_record_line("class", entry))
    for prompt in sorted(manifest.prompts, key=lambda p: p.prompt_id):
        lines.append(_record_line("prompt", prompt))
    for image in sorted(manifest.images, key=lambda i: i.image_id):
        lines.append(_record_line("image", image))
    return f"{stable_hash(chr(10).join(lines)):016x}"


def save_manifest(manifest: Manifest, path: str | Path, validate: bool = True) -> None:
    """Write the manifest in canonical order (atomic via temp file + rename)."""
    if validate:
        validate_manifest(manifest)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        _write_header(fh, manifest)
        for entry in sorted(manifest.classes, key=lambda c: c.class_id):
            fh.write(_record_line("class", entry) + "\n")
        for prompt in sorted(manifest.prompts, key=lambda p: p.prompt_id):
            fh.write(_record_line("prompt", prompt) + "\n")
        for image in sorted(manifest.images, key=lambda i: i.image_id):
            fh.write(_record_line("image", image) + "\n")
    tmp.replace(path)


class ManifestStore:
    """Single-writer append channel over one manifest file.

    Opens (or creates) the file, keeps the in-memory view current, and
    appends superseding lines instead of rewriting.  ``compact`` rewrites
    the file canonically once a stage finishes.
    """

    def __init__(self, path: str | Path, manifest: Manifest | None = None):
        self.path = Path(path)
        self._lock = threading.Lock()
        if manifest is not None:
            self.manifest = manifest
            save_manifest(manifest, self.path)
        elif self.path.exists():
            self.manifest = load_manifest(self.path)
        else:
            raise FileNotFoundError(f"no manifest at {self.path} and none supplied")

    def _append(self, tag: str, record: ClassEntry | PromptRecord | ImageRecord) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(_record_line(tag, record) + "\n")

    def add_class(self, entry: ClassEntry) -> None:
        with self._lock:
            self.manifest.classes = [c for c in self.manifest.classes if c.class_id != entry.class_id]
            self.manifest.classes.append(entry)
            self._append("class", entry)

    def upsert_prompt(self, prompt: PromptRecord) -> None:
        with self._lock:
            self.manifest.prompts = [p for p in self.manifest.prompts if p.prompt_id != prompt.prompt_id]
            self.manifest.prompts.append(prompt)
            self._append("prompt", prompt)

    def upsert_image(self, image: ImageRecord) -> None:
        with self._lock:
            self.manifest.images = [i for i in self.manifest.images if i.image_id != image.image_id]
            self.manifest.images.append(image)
            self._append("image", image)

    def set_filter_status(self, image_id: str, status: FilterStatus) -> ImageRecord:
        with self._lock:
            current = self.manifest.image_by_id(image_id)
            updated = replace(current, filter_status=status)
            self.manifest.images = [i for i in self.manifest.images if i.image_id != image_id]
            self.manifest.images.append(updated)
            self._append("image", updated)
            return updated

    def compact(self) -> None:
        with self._lock:
            save_manifest(self.manifest, self.path)
