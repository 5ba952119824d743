"""Layered edit configuration with fail-fast resolution.

A config file holds a ``defaults`` block and per-dataset blocks; each dataset
block holds per-category blocks which may hold per-feasibility sub-blocks.
Resolution merges defaults <- dataset scalars <- category scalars <-
feasibility block and validates the result, so a missing or inconsistent
triple fails at startup rather than mid-run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .core import AttributeCategory, Feasibility, PipelineError, stable_hash

_CATEGORY_KEYS = {c.value for c in AttributeCategory}
_FEASIBILITY_KEYS = {f.value for f in Feasibility}


class ConfigError(PipelineError):
    """Missing triple, unknown key, or out-of-range value in the edit config."""


@dataclass(frozen=True)
class EditConfig:
    """Resolved generation settings for one (dataset, category, feasibility)."""

    inpaint_guidance_scale: float
    inpaint_strength: float
    inpaint_steps: int
    dilation_px_or_alpha: float
    control_guidance_scale: float | None = None
    ip_adapter_strength: float | None = None
    prior_steps: int | None = None
    control_steps: int | None = None
    working_long_side: int = 1024
    pad_multiple: int = 8
    canny_low: int = 100
    canny_high: int = 200
    control_conditions: tuple[str, ...] = ("stage1", "raw_prior", "real_prior")

    def __post_init__(self):
        if self.inpaint_guidance_scale <= 0:
            raise ConfigError("inpaint_guidance_scale must be > 0")
        if not 0 < self.inpaint_strength <= 1:
            raise ConfigError("inpaint_strength must be in (0,1]")
        if self.inpaint_steps < 1:
            raise ConfigError("inpaint_steps must be >= 1")
        if self.control_guidance_scale is not None and self.control_guidance_scale <= 0:
            raise ConfigError("control_guidance_scale must be > 0")
        if self.ip_adapter_strength is not None and not 0 < self.ip_adapter_strength <= 1:
            raise ConfigError("ip_adapter_strength must be in (0,1]")
        for name in ("prior_steps", "control_steps"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.working_long_side < 16 or self.pad_multiple < 1:
            raise ConfigError("bad working resolution settings")
        unknown = set(self.control_conditions) - {"stage1", "raw_prior", "real_prior"}
        if unknown:
            raise ConfigError(f"unknown control conditions: {sorted(unknown)}")


def _require_for_category(cfg: EditConfig, category: AttributeCategory,
                          dataset: str, feasibility: Feasibility) -> None:
    where = f"{dataset}/{category.value}/{feasibility.value}"
    if category is AttributeCategory.BACKGROUND:
        if cfg.prior_steps is None:
            raise ConfigError(f"{where}: background edits need prior_steps")
        if cfg.dilation_px_or_alpha < 0 or cfg.dilation_px_or_alpha != int(cfg.dilation_px_or_alpha):
            raise ConfigError(f"{where}: background dilation must be a non-negative integer")
        return
    if cfg.control_guidance_scale is None or cfg.control_steps is None or cfg.ip_adapter_strength is None:
        raise ConfigError(f"{where}: {category.value} edits need control settings")
    if not 0 <= cfg.dilation_px_or_alpha <= 1:
        raise ConfigError(f"{where}: {category.value} alpha must be in [0,1]")
    if category is AttributeCategory.TEXTURE and cfg.prior_steps is None:
        raise ConfigError(f"{where}: texture edits need prior_steps")


class EditConfigSet:
    """All resolved triples of one config file; lookup is fail-fast."""

    def __init__(self, raw: dict):
        if not isinstance(raw, dict) or "datasets" not in raw:
            raise ConfigError("config needs a 'datasets' block")
        self._raw = raw
        self._resolved: dict[tuple[str, AttributeCategory, Feasibility], EditConfig] = {}
        defaults = raw.get("defaults", {})
        field_names = {f.name for f in fields(EditConfig)}
        for dataset, block in raw["datasets"].items():
            if not isinstance(block, dict):
                raise ConfigError(f"dataset {dataset!r} block must be a mapping")
            dataset_scalars = {k: v for k, v in block.items() if k not in _CATEGORY_KEYS}
            for category in AttributeCategory:
                cat_block = block.get(category.value)
                if cat_block is None:
                    continue
                cat_scalars = {k: v for k, v in cat_block.items() if k not in _FEASIBILITY_KEYS}
                for feasibility in Feasibility:
                    merged = {**defaults, **dataset_scalars, **cat_scalars,
                              **cat_block.get(feasibility.value, {})}
                    unknown = set(merged) - field_names
                    if unknown:
                        raise ConfigError(
                            f"{dataset}/{category.value}: unknown keys {sorted(unknown)}"
                        )
                    if "control_conditions" in merged:
                        merged["control_conditions"] = tuple(merged["control_conditions"])
                    cfg = EditConfig(**merged)
                    _require_for_category(cfg, category, dataset, feasibility)
                    self._resolved[(dataset, category, feasibility)] = cfg

    def resolve(self, dataset: str, category: AttributeCategory,
                feasibility: Feasibility) -> EditConfig:
        cfg = self._resolved.get((dataset, category, feasibility))
        if cfg is None:
            raise ConfigError(f"no config for {dataset}/{category.value}/{feasibility.value}")
        return cfg

    def datasets(self) -> list[str]:
        return sorted({d for d, _, _ in self._resolved})

    def config_hash(self) -> str:
        canonical = json.dumps(self._raw, sort_keys=True, default=str)
        return f"{stable_hash(canonical):016x}"


def load_edit_config(path: str | Path | None = None) -> EditConfigSet:
    """Parse a config file; with no path, the packaged defaults."""
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
    else:
        from importlib import resources

        text = resources.files("monoedit").joinpath("data/default_edit_config.yaml").read_text(
            encoding="utf-8"
        )
    raw = yaml.safe_load(text)
    return EditConfigSet(raw)
