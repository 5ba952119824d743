"""Raw and composited priors that seed each edit.

Background and texture priors come from a text-to-image backend; color
priors are flat rasters looked up in a named color bank.  Compositing then
anchors the prior to the specific real image: background priors receive the
original object pasted inside a dilated mask, foreground priors are alpha
blended over the object region only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image

from .core import AttributeCategory, ClassEntry, PipelineError, PromptRecord
from .guidance import Mask, dilate_mask
from .prompts import render_prompt


class UnknownColorError(PipelineError):
    """A color keyword has no RGB entry in the bank."""


class PriorGenerationError(PipelineError):
    """The image backend failed twice while producing a raw prior."""


class PriorSource(str, Enum):
    DIFFUSION = "diffusion"
    COLOR_BANK = "color_bank"


class DiffusionBackend(Protocol):
    def text_to_image(self, prompt: str, seed: int, steps: int) -> np.ndarray: ...


class ColorBank:
    """Case-insensitive keyword -> RGB lookup."""

    def __init__(self, entries: dict[str, tuple[int, int, int]]):
        self._entries = {k.lower(): tuple(int(c) for c in v) for k, v in entries.items()}
        for name, rgb in self._entries.items():
            if len(rgb) != 3 or any(not 0 <= c <= 255 for c in rgb):
                raise ValueError(f"bad RGB for {name!r}: {rgb}")

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, keyword: str) -> bool:
        return keyword.lower() in self._entries

    def names(self) -> list[str]:
        return sorted(self._entries)

    def lookup(self, keyword: str) -> tuple[int, int, int]:
        rgb = self._entries.get(keyword.lower())
        if rgb is None:
            raise UnknownColorError(f"color keyword {keyword!r} not in bank")
        return rgb  # type: ignore[return-value]

    @classmethod
    def from_file(cls, path: str | Path) -> "ColorBank":
        entries: dict[str, tuple[int, int, int]] = {}
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 'keyword,R,G,B'")
            entries[parts[0]] = (int(parts[1]), int(parts[2]), int(parts[3]))
        return cls(entries)

    @classmethod
    def default(cls) -> "ColorBank":
        from importlib import resources

        with resources.as_file(resources.files("monoedit").joinpath("data/color_bank.txt")) as path:
            return cls.from_file(path)


@dataclass(frozen=True, eq=False)
class RawPrior:
    image: np.ndarray
    source: PriorSource
    prompt_id: str


@dataclass(frozen=True, eq=False)
class RealPrior:
    image: np.ndarray
    category: AttributeCategory
    parent_real_id: str
    prompt_id: str
    composite_params: dict = field(default_factory=dict)


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resample an RGB raster with bilinear filtering."""
    if image.shape[:2] == (height, width):
        return image
    resized = Image.fromarray(image).resize((width, height), Image.BILINEAR)
    return np.asarray(resized)


def make_raw_prior(
    prompt: PromptRecord,
    entry: ClassEntry,
    backend: DiffusionBackend | None,
    bank: ColorBank | None,
    seed: int,
    height: int,
    width: int,
    steps: int = 20,
) -> RawPrior:
    """Produce the category's raw prior at the requested resolution.

    Color prompts bypass the image backend entirely: the keyword resolves to
    a flat bank-RGB raster.  Background/texture prompts render the diffusion
    prompt and call the backend, retrying once on failure.
    """
    if not prompt.accepted:
        raise ValueError(f"{prompt.prompt_id} is not manually accepted")

    if prompt.category is AttributeCategory.COLOR:
        if bank is None:
            raise ValueError("color priors need a ColorBank")
        rgb = bank.lookup(prompt.keyword)
        raster = np.empty((height, width, 3), dtype=np.uint8)
        raster[:, :] = rgb
        return RawPrior(raster, PriorSource.COLOR_BANK, prompt.prompt_id)

    if backend is None:
        raise ValueError(f"{prompt.category.value} priors need a diffusion backend")
    text = render_prompt(prompt, entry)
    try:
        raster = backend.text_to_image(text, seed, steps)
    except Exception:
        try:
            raster = backend.text_to_image(text, seed, steps)
        except Exception as exc:
            raise PriorGenerationError(f"backend failed twice for {prompt.prompt_id}") from exc
    raster = resize_bilinear(np.asarray(raster, dtype=np.uint8), height, width)
    return RawPrior(raster, PriorSource.DIFFUSION, prompt.prompt_id)


def _check_compose_inputs(real_image: np.ndarray, mask: Mask, raw_prior: RawPrior) -> np.ndarray:
    if real_image.shape[:2] != mask.shape:
        raise ValueError(f"mask {mask.shape} does not match image {real_image.shape[:2]}")
    prior = raw_prior.image
    if prior.shape[:2] != real_image.shape[:2]:
        prior = resize_bilinear(prior, *real_image.shape[:2])
    return prior


def compose_background_real_prior(
    real_image: np.ndarray,
    mask: Mask,
    raw_prior: RawPrior,
    dilation_px: int,
    parent_real_id: str = "",
) -> RealPrior:
    """Paste the real object (dilated mask region) onto the raw background."""
    prior = _check_compose_inputs(real_image, mask, raw_prior)
    region = dilate_mask(mask, dilation_px).data[:, :, None]
    out = np.where(region == 1, real_image, prior).astype(np.uint8)
    return RealPrior(
        out,
        AttributeCategory.BACKGROUND,
        parent_real_id,
        raw_prior.prompt_id,
        {"dilation_px": dilation_px},
    )


def compose_foreground_real_prior(
    real_image: np.ndarray,
    mask: Mask,
    raw_prior: RawPrior,
    alpha: float,
    category: AttributeCategory = AttributeCategory.COLOR,
    parent_real_id: str = "",
) -> RealPrior:
    """Alpha-blend the raw prior over the object region; background untouched.

    Blending happens in float and rounds half-up to 8 bits, outside-mask
    pixels are copied from the real image bit for bit.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0,1]")
    prior = _check_compose_inputs(real_image, mask, raw_prior)
    blended = alpha * prior.astype(np.float64) + (1.0 - alpha) * real_image.astype(np.float64)
    blended = np.clip(np.floor(blended + 0.5), 0, 255).astype(np.uint8)
    region = mask.data[:, :, None]
    out = np.where(region == 1, blended, real_image).astype(np.uint8)
    return RealPrior(out, category, parent_real_id, raw_prior.prompt_id, {"alpha": alpha})
