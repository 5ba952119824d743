"""Deterministic stand-ins for every heavy model the pipeline calls.

Each mock honors the corresponding backend contract (same signature, same
determinism guarantees) while computing cheap procedural output, so the full
pipeline runs and is testable on a laptop with no model weights.  Real
integrations implement the same protocols and drop in via config.
"""

from __future__ import annotations

import re
from typing import Callable, Sequence

import numpy as np

from .core import stable_hash
from .guidance import Bbox
from .prompts import LlmError

# ---------------------------------------------------------------------------
# language model


class CannedLlm:
    """Replays scripted replies in order; raises when the script runs out."""

    def __init__(self, replies: Sequence[str]):
        self._replies = list(replies)
        self._cursor = 0
        self.conversations: list[list[dict[str, str]]] = []

    def send(self, conversation: list[dict[str, str]]) -> str:
        self.conversations.append(conversation)
        if self._cursor >= len(self._replies):
            raise LlmError("canned reply script exhausted")
        reply = self._replies[self._cursor]
        self._cursor += 1
        return reply


_PLACES = (
    "forest clearing", "city sidewalk", "ocean floor", "lava field", "cloud bank",
    "desert dune", "snowy ridge", "subway platform", "coral reef", "wheat field",
    "glacier cave", "rooftop garden", "moon crater", "riverbank", "parking lot",
    "autumn orchard", "neon arcade", "abandoned factory", "bamboo grove", "salt flat",
)
_PLACE_DETAILS = (
    "soft morning light", "harsh noon shadows", "drifting fog", "light rain",
    "golden-hour glow", "overcast sky", "long evening shadows", "hazy distance",
)
_TEXTURES = (
    "brushed steel", "rough bark", "woven wicker", "cracked leather", "frosted glass",
    "knitted wool", "polished marble", "corroded copper", "bubble wrap", "mossy stone",
    "carbon fiber", "sequined fabric", "weathered concrete", "hammered brass",
    "quilted denim", "crackled ceramic", "braided rope", "etched obsidian",
)
_FEASIBLE_COLORS = (
    "black", "white", "brown", "gray", "beige", "tan", "silver", "navy", "maroon", "olive",
)
_INFEASIBLE_COLORS = (
    "neon pink", "purple", "magenta", "turquoise", "chartreuse",
    "crimson", "neon green", "gold", "orchid", "salmon",
)


class ProceduralLlm:
    """Derives attribute lists from fixed word banks, keyed by the question.

    Generation requests are answered with up to n entries rotated through the
    bank by a stable hash of (class, category, feasibility); review requests
    echo the submitted list, so the whole prompt stage runs offline yet
    produces distinct, reproducible banks per group.
    """

    def send(self, conversation: list[dict[str, str]]) -> str:
        text = "\n".join(m["content"] for m in conversation)
        if "Review the list" in text:
            start = text.find("[")
            end = text.rfind("]")
            if start < 0 or end < start:
                raise LlmError("review request carries no list")
            return text[start:end + 1]
        return self._generate(text)

    def _generate(self, text: str) -> str:
        count = re.search(r"List (\d+) ", text)
        cls = re.search(r'class "([^"]+)"', text)
        if not count or not cls:
            raise LlmError("request does not follow the template")
        n = int(count.group(1))
        feasible = "infeasible" not in text
        if "background scenes" in text:
            category = "background"
        elif "surface textures" in text:
            category = "texture"
        elif "colors" in text:
            category = "color"
        else:
            raise LlmError("request names no known attribute kind")

        offset = stable_hash(f"{cls.group(1)}|{category}|{feasible}") % 1000
        entries: list[str] = []
        if category == "color":
            colors = _FEASIBLE_COLORS if feasible else _INFEASIBLE_COLORS
            for i in range(min(n, len(colors))):
                entries.append(colors[(offset + i) % len(colors)])
        elif category == "background":
            for i in range(min(n, len(_PLACES))):
                place = _PLACES[(offset + i) % len(_PLACES)]
                detail = _PLACE_DETAILS[(offset + i) % len(_PLACE_DETAILS)]
                entries.append(f"{place}: {place} under {detail}")
        else:
            for i in range(min(n, len(_TEXTURES))):
                material = _TEXTURES[(offset + i) % len(_TEXTURES)]
                entries.append(f"{material}: a {material} pattern covering the whole body")
        return repr(entries)


# ---------------------------------------------------------------------------
# image generation


def procedural_raster(key: str, height: int, width: int) -> np.ndarray:
    """Smooth deterministic RGB pattern derived from a string key."""
    rng = np.random.default_rng(stable_hash(key, bits=63))
    c0 = rng.integers(0, 256, 3).astype(np.float64)
    c1 = rng.integers(0, 256, 3).astype(np.float64)
    freq = rng.uniform(1.0, 4.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    ys = np.linspace(0.0, 1.0, height)[:, None]
    xs = np.linspace(0.0, 1.0, width)[None, :]
    weight = 0.5 * (ys + 0.5 * (1 + np.sin(2 * np.pi * freq * xs + phase)))
    weight = (weight / weight.max())[:, :, None]
    raster = c0[None, None, :] * (1 - weight) + c1[None, None, :] * weight
    return np.clip(np.round(raster), 0, 255).astype(np.uint8)


class ProceduralDiffusion:
    """Text-to-image mock: a procedural pattern keyed by (prompt, seed, steps)."""

    def __init__(self, height: int = 64, width: int = 64):
        self.height = height
        self.width = width
        self.calls = 0

    def text_to_image(self, prompt: str, seed: int, steps: int) -> np.ndarray:
        self.calls += 1
        return procedural_raster(f"t2i|{prompt}|{seed}|{steps}", self.height, self.width)


class MockInpaint:
    """Repaints only the masked region, leaving mask=0 pixels untouched.

    Masked pixels blend the init image with a procedural pattern at the
    requested strength, so strength 0 echoes the init and strength 1 fully
    repaints, mirroring how much a real inpainter departs from its init.
    """

    def __init__(self):
        self.calls: list[dict] = []

    def inpaint(self, init_image: np.ndarray, mask: np.ndarray, prompt: str,
                strength: float, guidance: float, steps: int, seed: int) -> np.ndarray:
        self.calls.append({"prompt": prompt, "strength": strength, "guidance": guidance,
                           "steps": steps, "seed": seed})
        height, width = init_image.shape[:2]
        pattern = procedural_raster(f"inpaint|{prompt}|{seed}|{guidance}|{steps}", height, width)
        blended = (1.0 - strength) * init_image.astype(np.float64) + strength * pattern
        blended = np.clip(np.floor(blended + 0.5), 0, 255).astype(np.uint8)
        region = (np.asarray(mask) > 0)[:, :, None]
        return np.where(region, blended, init_image).astype(np.uint8)


class MockStructureControl:
    """Averages the image conditions, blends toward a keyed pattern, inks edges.

    condition_strength weighs the condition average against the pattern, and
    canny edge pixels are darkened so structure guidance is visible in the
    output; deterministic given (prompt, seed).
    """

    def __init__(self):
        self.calls: list[dict] = []

    def generate(self, prompt: str, canny: np.ndarray, image_conditions: Sequence[np.ndarray],
                 condition_strength: float, guidance: float, steps: int, seed: int) -> np.ndarray:
        if not image_conditions:
            raise ValueError("structure control needs at least one image condition")
        self.calls.append({"prompt": prompt, "n_conditions": len(image_conditions),
                           "condition_strength": condition_strength, "guidance": guidance,
                           "steps": steps, "seed": seed})
        stack = np.stack([np.asarray(c, dtype=np.float64) for c in image_conditions])
        conditions = stack.mean(axis=0)
        height, width = conditions.shape[:2]
        pattern = procedural_raster(f"control|{prompt}|{seed}|{guidance}|{steps}", height, width)
        out = condition_strength * conditions + (1.0 - condition_strength) * pattern
        edges = (np.asarray(canny) > 0)[:, :, None]
        out = np.where(edges, out * 0.5, out)
        return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# mask chain


class CenterBoxDetector:
    """Always proposes a centered box covering (1 - 2*margin) of each side."""

    def __init__(self, margin: float = 0.2, confidence: float = 0.9):
        if not 0.0 <= margin < 0.5:
            raise ValueError("margin must be in [0, 0.5)")
        self.margin = margin
        self.confidence = confidence

    def detect(self, image: np.ndarray, class_name: str) -> Bbox | None:
        height, width = image.shape[:2]
        x0 = int(width * self.margin)
        y0 = int(height * self.margin)
        return Bbox(x0, y0, max(x0 + 1, width - x0), max(y0 + 1, height - y0), self.confidence)


class NullDetector:
    def detect(self, image: np.ndarray, class_name: str) -> Bbox | None:
        return None


class BoxSoftSegmenter:
    """Soft mask: `inside` within the box, `outside` elsewhere."""

    def __init__(self, inside: float = 0.9, outside: float = 0.05):
        self.inside = inside
        self.outside = outside

    def segment(self, image: np.ndarray, bbox: Bbox) -> np.ndarray:
        soft = np.full(image.shape[:2], self.outside, dtype=np.float64)
        soft[bbox.y0:bbox.y1, bbox.x0:bbox.x1] = self.inside
        return soft


class ConstantMatting:
    def __init__(self, value: float = 0.8):
        self.value = value

    def matte(self, image: np.ndarray) -> np.ndarray:
        return np.full(image.shape[:2], self.value, dtype=np.float64)


# ---------------------------------------------------------------------------
# visual question answering


class ScriptedVqa:
    """Answers from a fixed list (in ask order) or a question -> answer callable."""

    def __init__(self, script: Sequence[str] | Callable[[str], str]):
        self._fn = script if callable(script) else None
        self._answers = None if callable(script) else list(script)
        self._cursor = 0
        self.questions: list[str] = []

    def ask(self, image: np.ndarray, question_text: str, choices: Sequence[str]) -> str:
        self.questions.append(question_text)
        if self._fn is not None:
            answer = self._fn(question_text)
        else:
            if self._cursor >= len(self._answers):
                raise RuntimeError("scripted answers exhausted")
            answer = self._answers[self._cursor]
            self._cursor += 1
        return answer


# ---------------------------------------------------------------------------
# feature extraction and perceptual distance


class ToyEmbedder:
    """Linear feature extractor: per-channel mean pooling on a coarse grid.

    Channel structure survives (disjoint-channel images embed orthogonally),
    which is all the metric tests need from an extractor.
    """

    def __init__(self, grid: int = 2):
        self.grid = grid
        self.extractor_id = f"toy-meanpool-{grid}x{grid}"

    def embed(self, images: Sequence[np.ndarray]) -> np.ndarray:
        rows = []
        for image in images:
            arr = np.asarray(image, dtype=np.float64)
            if arr.ndim != 3 or arr.shape[2] != 3:
                raise ValueError(f"expected HxWx3 images, got shape {arr.shape}")
            h, w = arr.shape[:2]
            ys = np.linspace(0, h, self.grid + 1, dtype=int)
            xs = np.linspace(0, w, self.grid + 1, dtype=int)
            cells = [
                arr[ys[i] : ys[i + 1], xs[j] : xs[j + 1]].mean(axis=(0, 1))
                for i in range(self.grid)
                for j in range(self.grid)
            ]
            rows.append(np.concatenate(cells))
        return np.stack(rows)


class ToyPerceptual:
    """Root-mean-square pixel distance on [0, 1]-scaled images."""

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        if a.shape != b.shape:
            raise ValueError(f"image shape mismatch: {a.shape} vs {b.shape}")
        diff = (a.astype(np.float64) - b.astype(np.float64)) / 255.0
        return float(np.sqrt(np.mean(diff**2)))
