"""Edit strategies and per-job orchestration.

Background edits inpaint the inverse-mask region in one pass, starting from
the composited prior.  Color/texture edits run two stages: an inpainting
pass over the object region, then structure-controlled generation
conditioned on the canny map and the prior images.  Either way the final
output is pasted: the protected region (object for background edits,
background for object edits) is copied bit for bit from the original real
image at its original resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image

from .config import EditConfig, EditConfigSet
from .core import (
    AttributeCategory,
    GenerationJob,
    ImageKind,
    ImageRecord,
    PipelineError,
)
from .guidance import (
    CannyMap,
    DetectorBackend,
    Mask,
    MattingBackend,
    SegmenterBackend,
    canny_from_foreground,
    foreground_mask,
    invert_mask,
)
from .manifest import ManifestStore
from .priors import (
    ColorBank,
    DiffusionBackend,
    RawPrior,
    RealPrior,
    compose_background_real_prior,
    compose_foreground_real_prior,
    make_raw_prior,
)
from .prompts import render_prompt


class EditBackendError(PipelineError):
    """An image backend failed twice (original seed, then seed+1)."""


class InpaintBackend(Protocol):
    def inpaint(self, init_image: np.ndarray, mask: np.ndarray, prompt: str,
                strength: float, guidance: float, steps: int, seed: int) -> np.ndarray: ...


class StructureControlBackend(Protocol):
    def generate(self, prompt: str, canny: np.ndarray, image_conditions: list[np.ndarray],
                 condition_strength: float, guidance: float, steps: int, seed: int) -> np.ndarray: ...


@dataclass(frozen=True)
class WorkingGeometry:
    """How an original raster was resized/padded into working space."""

    orig_height: int
    orig_width: int
    scaled_height: int
    scaled_width: int
    pad_bottom: int
    pad_right: int


def to_working(image: np.ndarray, long_side: int, pad_multiple: int) -> tuple[np.ndarray, WorkingGeometry]:
    """Resize so the long side matches, reflect-pad to the backend multiple."""
    orig_h, orig_w = image.shape[:2]
    scale = long_side / max(orig_h, orig_w)
    scaled_h = max(1, round(orig_h * scale))
    scaled_w = max(1, round(orig_w * scale))
    resized = np.asarray(Image.fromarray(image).resize((scaled_w, scaled_h), Image.BILINEAR))
    pad_b = (-scaled_h) % pad_multiple
    pad_r = (-scaled_w) % pad_multiple
    if pad_b or pad_r:
        resized = np.pad(resized, ((0, pad_b), (0, pad_r), (0, 0)), mode="reflect")
    return resized, WorkingGeometry(orig_h, orig_w, scaled_h, scaled_w, pad_b, pad_r)


def from_working(raster: np.ndarray, geometry: WorkingGeometry) -> np.ndarray:
    """Undo padding and return to the original resolution."""
    cropped = raster[: geometry.scaled_height, : geometry.scaled_width]
    return np.asarray(
        Image.fromarray(cropped).resize((geometry.orig_width, geometry.orig_height), Image.BILINEAR)
    )


def mask_to_original(mask: Mask, geometry: WorkingGeometry) -> Mask:
    cropped = mask.data[: geometry.scaled_height, : geometry.scaled_width]
    resized = Image.fromarray(cropped * 255, mode="L").resize(
        (geometry.orig_width, geometry.orig_height), Image.NEAREST
    )
    return Mask((np.asarray(resized) >= 128).astype(np.uint8))


def _call_with_retry(fn, seed: int):
    try:
        return fn(seed)
    except Exception:
        try:
            return fn(seed + 1)
        except Exception as exc:
            raise EditBackendError(f"backend failed twice (seeds {seed}, {seed + 1})") from exc


def edit_background(
    real: np.ndarray,
    mask: Mask,
    real_prior: RealPrior,
    prompt_text: str,
    cfg: EditConfig,
    backend: InpaintBackend,
    seed: int,
) -> np.ndarray:
    """Single-stage inpaint of the background region, prior as init image."""
    editable = invert_mask(mask)
    return _call_with_retry(
        lambda s: backend.inpaint(
            real_prior.image, editable.data, prompt_text,
            cfg.inpaint_strength, cfg.inpaint_guidance_scale, cfg.inpaint_steps, s,
        ),
        seed,
    )


def edit_foreground(
    real: np.ndarray,
    mask: Mask,
    canny: CannyMap,
    raw_prior: RawPrior,
    real_prior: RealPrior,
    prompt_text: str,
    cfg: EditConfig,
    inpaint_backend: InpaintBackend,
    control_backend: StructureControlBackend,
    seed: int,
) -> np.ndarray:
    """Inpaint the object region, then regenerate it under structure control."""
    if cfg.ip_adapter_strength is None or cfg.control_guidance_scale is None or cfg.control_steps is None:
        raise ValueError("foreground edits need control settings in the config")
    stage1 = _call_with_retry(
        lambda s: inpaint_backend.inpaint(
            real_prior.image, mask.data, prompt_text,
            cfg.inpaint_strength, cfg.inpaint_guidance_scale, cfg.inpaint_steps, s,
        ),
        seed,
    )
    by_name = {"stage1": stage1, "raw_prior": raw_prior.image, "real_prior": real_prior.image}
    conditions = [by_name[name] for name in cfg.control_conditions]
    return _call_with_retry(
        lambda s: control_backend.generate(
            prompt_text, canny.data, conditions,
            cfg.ip_adapter_strength, cfg.control_guidance_scale, cfg.control_steps, s,
        ),
        seed,
    )


def paste_invariant_regions(
    generated: np.ndarray, real: np.ndarray, mask: Mask, category: AttributeCategory
) -> np.ndarray:
    """Copy the protected region from the real image onto the generated one.

    Background edits protect the object (mask interior); color/texture edits
    protect everything outside the mask.
    """
    if generated.shape != real.shape:
        raise ValueError(f"generated {generated.shape} vs real {real.shape}")
    if real.shape[:2] != mask.shape:
        raise ValueError(f"mask {mask.shape} does not match images {real.shape[:2]}")
    if category is AttributeCategory.BACKGROUND:
        protected = mask.data
    else:
        protected = invert_mask(mask).data
    region = protected[:, :, None]
    return np.where(region == 1, real, generated).astype(np.uint8)


@dataclass
class BackendSuite:
    """Every pluggable model the generation pipeline touches."""

    detector: DetectorBackend
    segmenter: SegmenterBackend
    matting: MattingBackend
    diffusion: DiffusionBackend | None = None
    inpaint: InpaintBackend | None = None
    control: StructureControlBackend | None = None
    color_bank: ColorBank | None = None


@dataclass
class PipelineContext:
    """Shared state for a generation run: storage, config, backends, layout.

    All manifest image paths are relative to ``root``; synthetic outputs land
    in ``root/synthetic``.
    """

    store: ManifestStore
    config_set: EditConfigSet
    backends: BackendSuite
    root: Path

    @property
    def synthetic_dir(self) -> Path:
        return self.root / "synthetic"

    def load_image(self, record: ImageRecord) -> np.ndarray:
        return np.asarray(Image.open(self.root / record.path).convert("RGB"))


def synthetic_image_id(real_image_id: str, prompt_id: str) -> str:
    """Stable record id for one (real, prompt) pairing; attempts share it."""
    return f"{real_image_id}__{prompt_id}"


def run_generation_job(job: GenerationJob, ctx: PipelineContext, persist: bool = True) -> tuple[np.ndarray, ImageRecord]:
    """Execute maps -> priors -> edit -> paste for one job.

    Returns the final raster (original resolution) and its unfiltered
    manifest record; with ``persist`` the image file is written and the
    record appended, superseding any earlier attempt for the same pairing.
    """
    manifest = ctx.store.manifest
    real_record = manifest.image_by_id(job.real_image_id)
    if real_record.kind is not ImageKind.REAL:
        raise ValueError(f"{job.real_image_id} is not a real image")
    prompt = manifest.prompt_by_id(job.prompt_id)
    if not prompt.accepted:
        raise ValueError(f"prompt {job.prompt_id} is not manually accepted")
    entry = manifest.class_by_id(real_record.class_id)
    cfg = ctx.config_set.resolve(manifest.dataset_id, job.category, job.feasibility)
    suite = ctx.backends
    if suite.inpaint is None:
        raise ValueError("generation needs an inpaint backend")

    original = ctx.load_image(real_record)
    working, geometry = to_working(original, cfg.working_long_side, cfg.pad_multiple)
    mask = foreground_mask(working, entry.name, suite.detector, suite.segmenter, suite.matting)
    prompt_text = render_prompt(prompt, entry)
    height, width = working.shape[:2]
    raw = make_raw_prior(
        prompt, entry, suite.diffusion, suite.color_bank, job.seed,
        height, width, steps=cfg.prior_steps or 20,
    )

    if job.category is AttributeCategory.BACKGROUND:
        prior = compose_background_real_prior(
            working, mask, raw, int(cfg.dilation_px_or_alpha), job.real_image_id
        )
        generated_w = edit_background(working, mask, prior, prompt_text, cfg, suite.inpaint, job.seed)
    else:
        if suite.control is None:
            raise ValueError("color/texture edits need a structure-control backend")
        prior = compose_foreground_real_prior(
            working, mask, raw, float(cfg.dilation_px_or_alpha), job.category, job.real_image_id
        )
        canny = canny_from_foreground(working, mask, cfg.canny_low, cfg.canny_high)
        generated_w = edit_foreground(
            working, mask, canny, raw, prior, prompt_text, cfg, suite.inpaint, suite.control, job.seed
        )

    generated = from_working(generated_w, geometry)
    final = paste_invariant_regions(generated, original, mask_to_original(mask, geometry), job.category)

    rel_path = Path("synthetic") / f"{job.job_id}.png"
    record = ImageRecord(
        image_id=synthetic_image_id(job.real_image_id, job.prompt_id),
        class_id=real_record.class_id,
        path=str(rel_path),
        split=real_record.split,
        kind=ImageKind.SYNTHETIC,
        parent_real_id=job.real_image_id,
        prompt_id=job.prompt_id,
        seed=job.seed,
        attempt=job.attempt,
    )
    if persist:
        ctx.synthetic_dir.mkdir(parents=True, exist_ok=True)
        Image.fromarray(final).save(ctx.root / rel_path)
        ctx.store.upsert_image(record)
    return final, record
