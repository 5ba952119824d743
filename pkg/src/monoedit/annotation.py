"""Human-study annotation service: sampling, ratings, aggregates, HTTP.

Annotators rate sampled synthetic images on two axes: whether the claimed
feasibility holds on the rendered image, and how natural the edit looks on
a 1-5 scale.  The service keeps one rating per (annotator, item) - later
submissions overwrite - and persists every accepted submission to an
append-only log so a restarted server resumes with nothing lost.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from urllib.parse import parse_qs, urlsplit

import numpy as np

from .core import (
    AttributeCategory,
    Feasibility,
    FilterStatus,
    ImageKind,
    Manifest,
    PipelineError,
    Split,
    stable_hash,
)
from .metrics import round_half_up
from .prompts import render_prompt

NATURALNESS_SCALE = (1, 2, 3, 4, 5)


class AnnotationError(PipelineError):
    pass


class InvalidRatingError(AnnotationError):
    """Submission breaks a field invariant; maps to a 422 response."""


class UnknownItemError(AnnotationError):
    """Submission names an item outside the session; maps to a 404 response."""


@dataclass(frozen=True)
class AnnotationItem:
    """One synthetic image put in front of the annotators."""

    image_id: str
    prompt_text: str
    category: AttributeCategory
    claimed_feasibility: Feasibility

    def to_payload(self) -> dict:
        return {
            "image_id": self.image_id,
            "prompt_text": self.prompt_text,
            "category": self.category.value,
            "claimed_feasibility": self.claimed_feasibility.value,
        }

    @classmethod
    def from_payload(cls, payload: Mapping) -> "AnnotationItem":
        return cls(
            image_id=payload["image_id"],
            prompt_text=payload["prompt_text"],
            category=AttributeCategory(payload["category"]),
            claimed_feasibility=Feasibility(payload["claimed_feasibility"]),
        )


@dataclass(frozen=True)
class Rating:
    """One annotator's judgment of one item."""

    annotator_id: str
    image_id: str
    feasibility_correct: bool
    naturalness: int
    timestamp: str = ""

    def __post_init__(self):
        if not self.annotator_id:
            raise InvalidRatingError("annotator_id must be non-empty")
        if not self.image_id:
            raise InvalidRatingError("image_id must be non-empty")
        if not isinstance(self.feasibility_correct, bool):
            raise InvalidRatingError("feasibility_correct must be a boolean")
        if not isinstance(self.naturalness, int) or isinstance(self.naturalness, bool):
            raise InvalidRatingError("naturalness must be an integer")
        if self.naturalness not in NATURALNESS_SCALE:
            raise InvalidRatingError(
                f"naturalness must be one of {list(NATURALNESS_SCALE)}, got {self.naturalness}"
            )

    def to_payload(self) -> dict:
        return {
            "annotator_id": self.annotator_id,
            "image_id": self.image_id,
            "feasibility_correct": self.feasibility_correct,
            "naturalness": self.naturalness,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_payload(cls, payload: Mapping) -> "Rating":
        try:
            return cls(
                annotator_id=payload["annotator_id"],
                image_id=payload["image_id"],
                feasibility_correct=payload["feasibility_correct"],
                naturalness=payload["naturalness"],
                timestamp=payload.get("timestamp", ""),
            )
        except KeyError as exc:
            raise InvalidRatingError(f"missing field {exc.args[0]!r}") from exc


# --------------------------------------------------------------------------
# sampling


def build_annotation_items(
    manifest: Manifest, per_cell: int, seed: int = 0
) -> list[AnnotationItem]:
    """Stratified sample of accepted synthetics per (category, feasibility).

    Each cell contributes ``per_cell`` images (all of them when the cell is
    smaller), chosen by a seeded permutation of the sorted cell pool, so the
    sample is stable for a fixed manifest and seed.
    """
    if per_cell < 1:
        raise ValueError("per_cell must be >= 1")
    cells: dict[tuple[AttributeCategory, Feasibility], list] = {}
    for record in manifest.images:
        if record.kind is not ImageKind.SYNTHETIC:
            continue
        if record.filter_status is not FilterStatus.ACCEPTED:
            continue
        prompt = manifest.prompt_by_id(record.prompt_id)
        cells.setdefault((prompt.category, prompt.feasibility), []).append(record)

    items: list[AnnotationItem] = []
    for (category, feasibility), pool in sorted(
        cells.items(), key=lambda kv: (kv[0][0].value, kv[0][1].value)
    ):
        pool = sorted(pool, key=lambda r: r.image_id)
        rng = np.random.default_rng(
            stable_hash(f"annotation-sample|{seed}|{category.value}|{feasibility.value}")
        )
        order = rng.permutation(len(pool))
        chosen = sorted(pool[i].image_id for i in order[: min(per_cell, len(pool))])
        for image_id in chosen:
            record = manifest.image_by_id(image_id)
            prompt = manifest.prompt_by_id(record.prompt_id)
            entry = manifest.class_by_id(record.class_id)
            items.append(
                AnnotationItem(
                    image_id=image_id,
                    prompt_text=render_prompt(prompt, entry),
                    category=category,
                    claimed_feasibility=feasibility,
                )
            )
    return items


def save_items(items: Sequence[AnnotationItem], path: str | Path) -> None:
    lines = [json.dumps(item.to_payload(), sort_keys=True) for item in items]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_items(path: str | Path) -> list[AnnotationItem]:
    items = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            items.append(AnnotationItem.from_payload(json.loads(line)))
    return items


# --------------------------------------------------------------------------
# session state


class AnnotationSession:
    """Items plus the ratings collected so far; single-writer over the log.

    ``ratings_path`` is an append-only JSONL log.  On construction any
    existing log is replayed (later lines overwrite earlier ones for the
    same (annotator, item) pair), which is what makes a killed server safe
    to restart.
    """

    def __init__(
        self,
        items: Sequence[AnnotationItem],
        ratings_path: str | Path | None = None,
        image_paths: Mapping[str, Path] | None = None,
    ):
        self.items = list(items)
        self._by_id = {item.image_id: item for item in self.items}
        if len(self._by_id) != len(self.items):
            raise ValueError("duplicate item ids in annotation sample")
        self._image_paths = dict(image_paths or {})
        self._ratings: dict[tuple[str, str], Rating] = {}
        self._lock = threading.Lock()
        self._path = Path(ratings_path) if ratings_path is not None else None
        if self._path is not None and self._path.exists():
            for line in self._path.read_text().splitlines():
                if line.strip():
                    rating = Rating.from_payload(json.loads(line))
                    self._ratings[(rating.annotator_id, rating.image_id)] = rating

    @property
    def total(self) -> int:
        return len(self.items)

    def item(self, image_id: str) -> AnnotationItem:
        try:
            return self._by_id[image_id]
        except KeyError:
            raise UnknownItemError(f"unknown item {image_id!r}") from None

    def order_for(self, annotator_id: str) -> list[AnnotationItem]:
        """The annotator's stable presentation order: a seeded shuffle."""
        rng = np.random.default_rng(stable_hash(f"annotation-order|{annotator_id}"))
        return [self.items[i] for i in rng.permutation(len(self.items))]

    def next_item(self, annotator_id: str) -> AnnotationItem | None:
        """First unrated item in the annotator's order, or None when done."""
        if not annotator_id:
            raise InvalidRatingError("annotator_id must be non-empty")
        with self._lock:
            rated = {iid for (aid, iid) in self._ratings if aid == annotator_id}
        for item in self.order_for(annotator_id):
            if item.image_id not in rated:
                return item
        return None

    def rated_count(self, annotator_id: str) -> int:
        with self._lock:
            return sum(1 for (aid, _) in self._ratings if aid == annotator_id)

    def submit(self, rating: Rating) -> Rating:
        """Validate, persist, and store one rating; later ones overwrite."""
        self.item(rating.image_id)
        if not rating.timestamp:
            rating = Rating(
                annotator_id=rating.annotator_id,
                image_id=rating.image_id,
                feasibility_correct=rating.feasibility_correct,
                naturalness=rating.naturalness,
                timestamp=datetime.now(timezone.utc).isoformat(),
            )
        with self._lock:
            self._ratings[(rating.annotator_id, rating.image_id)] = rating
            if self._path is not None:
                self._path.parent.mkdir(parents=True, exist_ok=True)
                with self._path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rating.to_payload(), sort_keys=True) + "\n")
        return rating

    def ratings(self) -> list[Rating]:
        """Latest rating per (annotator, item), in stable order."""
        with self._lock:
            return [self._ratings[key] for key in sorted(self._ratings)]

    def image_bytes(self, image_id: str) -> bytes:
        self.item(image_id)
        path = self._image_paths.get(image_id)
        if path is None or not Path(path).exists():
            raise UnknownItemError(f"no image file registered for {image_id!r}")
        return Path(path).read_bytes()


# --------------------------------------------------------------------------
# export and aggregates

EXPORT_COLUMNS = (
    "annotator_id",
    "image_id",
    "category",
    "claimed_feasibility",
    "feasibility_correct",
    "naturalness",
    "timestamp",
)


def export_text(ratings: Sequence[Rating], items: Sequence[AnnotationItem]) -> str:
    """Tab-separated export: one row per latest (annotator, item) rating."""
    by_id = {item.image_id: item for item in items}
    lines = ["\t".join(EXPORT_COLUMNS)]
    for rating in sorted(ratings, key=lambda r: (r.annotator_id, r.image_id)):
        item = by_id.get(rating.image_id)
        lines.append(
            "\t".join(
                (
                    rating.annotator_id,
                    rating.image_id,
                    item.category.value if item else "",
                    item.claimed_feasibility.value if item else "",
                    "true" if rating.feasibility_correct else "false",
                    str(rating.naturalness),
                    rating.timestamp,
                )
            )
        )
    return "\n".join(lines) + "\n"


def parse_export(text: str) -> list[Rating]:
    """Inverse of :func:`export_text` for the rating fields."""
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines or lines[0] != "\t".join(EXPORT_COLUMNS):
        raise AnnotationError("export text lacks the expected header")
    ratings = []
    for line in lines[1:]:
        parts = line.split("\t")
        if len(parts) != len(EXPORT_COLUMNS):
            raise AnnotationError(f"export row has {len(parts)} columns")
        ratings.append(
            Rating(
                annotator_id=parts[0],
                image_id=parts[1],
                feasibility_correct=parts[4] == "true",
                naturalness=int(parts[5]),
                timestamp=parts[6],
            )
        )
    return ratings


@dataclass(frozen=True)
class AggregateCell:
    """Study summary for one (category, feasibility) cell."""

    category: str
    feasibility: str
    correctness_pct: float
    mean_naturalness: float
    n: int


def aggregate_ratings(
    ratings: Sequence[Rating], items: Sequence[AnnotationItem]
) -> list[AggregateCell]:
    """Correctness % and mean naturalness per cell, plus an averaged row.

    Correctness is the share of ratings marking the claimed feasibility as
    holding; naturalness is the arithmetic mean rounded to 2 decimals.  The
    averaged row is the mean over the categories present for a feasibility.
    """
    if not ratings:
        raise ValueError("aggregate_ratings needs at least one rating")
    by_id = {item.image_id: item for item in items}
    cells: dict[tuple[str, str], list[Rating]] = {}
    for rating in ratings:
        item = by_id.get(rating.image_id)
        if item is None:
            continue
        key = (item.category.value, item.claimed_feasibility.value)
        cells.setdefault(key, []).append(rating)
    if not cells:
        raise ValueError("no rating matches a known item")

    out: list[AggregateCell] = []
    averaged: dict[str, list[tuple[float, float]]] = {}
    for (category, feasibility), group in sorted(cells.items()):
        correct = 100.0 * sum(r.feasibility_correct for r in group) / len(group)
        natural = sum(r.naturalness for r in group) / len(group)
        cell = AggregateCell(
            category=category,
            feasibility=feasibility,
            correctness_pct=round_half_up(correct, 1),
            mean_naturalness=round_half_up(natural, 2),
            n=len(group),
        )
        out.append(cell)
        averaged.setdefault(feasibility, []).append((correct, natural))
    for feasibility, pairs in sorted(averaged.items()):
        correct = sum(p[0] for p in pairs) / len(pairs)
        natural = sum(p[1] for p in pairs) / len(pairs)
        out.append(
            AggregateCell(
                category="averaged",
                feasibility=feasibility,
                correctness_pct=round_half_up(correct, 1),
                mean_naturalness=round_half_up(natural, 2),
                n=sum(len(cells[(c, feasibility)]) for c, f in cells if f == feasibility),
            )
        )
    return out


def aggregate_table(cells: Iterable[AggregateCell]) -> str:
    header = ("category", "feasibility", "correctness_pct", "mean_naturalness", "n")
    lines = ["\t".join(header)]
    for cell in cells:
        lines.append(
            f"{cell.category}\t{cell.feasibility}\t{cell.correctness_pct:.1f}"
            f"\t{cell.mean_naturalness:.2f}\t{cell.n}"
        )
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# HTTP surface


class AnnotationHandler(BaseHTTPRequestHandler):
    """Routes: GET /items/next, POST /ratings, GET /export, GET /images/<id>."""

    server_version = "monoedit-annotation/1"

    @property
    def session(self) -> AnnotationSession:
        return self.server.session  # type: ignore[attr-defined]

    def log_message(self, format: str, *args) -> None:  # noqa: A002 - stdlib name
        if getattr(self.server, "verbose", False):
            super().log_message(format, *args)

    def _send(self, status: int, body: bytes, content_type: str) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _send_json(self, status: int, payload: dict) -> None:
        self._send(status, json.dumps(payload).encode(), "application/json")

    def do_OPTIONS(self) -> None:  # CORS preflight for the browser UI
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_GET(self) -> None:
        url = urlsplit(self.path)
        if url.path == "/items/next":
            query = parse_qs(url.query)
            annotator = (query.get("annotator") or [""])[0]
            if not annotator:
                self._send_json(400, {"error": "annotator query parameter required"})
                return
            item = self.session.next_item(annotator)
            payload = {
                "rated": self.session.rated_count(annotator),
                "total": self.session.total,
            }
            if item is None:
                payload["done"] = True
            else:
                payload["done"] = False
                payload["item"] = item.to_payload()
            self._send_json(200, payload)
        elif url.path == "/export":
            body = export_text(self.session.ratings(), self.session.items)
            self._send(200, body.encode(), "text/tab-separated-values; charset=utf-8")
        elif url.path.startswith("/images/"):
            image_id = url.path[len("/images/") :]
            try:
                body = self.session.image_bytes(image_id)
            except UnknownItemError as exc:
                self._send_json(404, {"error": str(exc)})
                return
            self._send(200, body, "image/png")
        elif url.path == "/health":
            self._send_json(200, {"ok": True, "items": self.session.total})
        else:
            self._send_json(404, {"error": f"no route for {url.path}"})

    def do_POST(self) -> None:
        url = urlsplit(self.path)
        if url.path != "/ratings":
            self._send_json(404, {"error": f"no route for {url.path}"})
            return
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        try:
            payload = json.loads(raw.decode() or "null")
        except (json.JSONDecodeError, UnicodeDecodeError):
            self._send_json(400, {"error": "body is not valid JSON"})
            return
        if not isinstance(payload, dict):
            self._send_json(400, {"error": "body must be a JSON object"})
            return
        try:
            rating = Rating.from_payload(payload)
            stored = self.session.submit(rating)
        except UnknownItemError as exc:
            self._send_json(404, {"error": str(exc)})
            return
        except InvalidRatingError as exc:
            self._send_json(422, {"error": str(exc)})
            return
        self._send_json(
            201,
            {
                "stored": stored.to_payload(),
                "rated": self.session.rated_count(stored.annotator_id),
                "total": self.session.total,
            },
        )


def build_server(
    session: AnnotationSession, host: str = "127.0.0.1", port: int = 0
) -> ThreadingHTTPServer:
    """HTTP server bound to the session; port 0 picks a free port."""
    server = ThreadingHTTPServer((host, port), AnnotationHandler)
    server.session = session  # type: ignore[attr-defined]
    return server
