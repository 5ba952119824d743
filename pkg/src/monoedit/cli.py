"""Command-line pipeline driver plus the annotation-service entry points.

Stage commands run in a fixed order - prompts, maps, priors, generate,
filter, then train / eval / scale / annotate - and every command is
idempotent over work that already finished, so a killed run can simply be
rerun.  Each command checks that the manifest state its predecessor
produces is present and reports a stage-order error otherwise; config
problems surface before any work starts.

Exit codes: 0 full success, 1 runtime failure, 2 configuration error,
3 stage-order violation.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import yaml
from PIL import Image

from .annotation import (
    AnnotationSession,
    aggregate_ratings,
    aggregate_table,
    build_annotation_items,
    build_server,
    export_text,
    load_items,
    save_items,
)
from .backends import (
    BoxSoftSegmenter,
    CenterBoxDetector,
    ConstantMatting,
    MockInpaint,
    MockStructureControl,
    NullDetector,
    ProceduralDiffusion,
    ProceduralLlm,
    ScriptedVqa,
    ToyEmbedder,
    ToyPerceptual,
)
from .config import ConfigError, EditConfigSet, load_edit_config
from .core import (
    AttributeCategory,
    ClassEntry,
    Feasibility,
    FilterStatus,
    GenerationJob,
    ImageKind,
    ImageRecord,
    Manifest,
    PipelineError,
    PromptStatus,
    Split,
    derive_seed,
    job_id_for,
    pair_real_with_prompts,
    stable_hash,
)
from .editing import BackendSuite, PipelineContext, run_generation_job, to_working
from .filtering import FilterQuestion, build_questions, filter_and_retry, filter_image
from .guidance import canny_from_foreground, foreground_mask, save_mask
from .manifest import ManifestStore
from .metrics import (
    FeatureCloud,
    PredictionSet,
    delta1,
    delta2,
    fid,
    inclusion_coefficient,
    jaccard,
    lpips_score,
    pairwise_cosine_score,
    predictions_from_logits,
    render_table,
    report_lines,
    round_half_up,
    save_prediction_set,
    top1_accuracy,
)
from .priors import ColorBank, make_raw_prior
from .prompts import (
    PromptBank,
    acceptance_rate,
    apply_manual_filter,
    generate_attributes,
    load_decisions,
    load_template,
    self_filter,
)
from .scaling import scaling_run, write_curve
from .training import (
    DataRegime,
    FeasibilityRegime,
    ToyDualEncoder,
    TrainConfig,
    classifier_prompt,
    classify,
    default_image_loader,
    evaluate_accuracy,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_STAGE_ORDER = 3

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
DECISIONS_FILENAME = "prompt_decisions.tsv"


class StageOrderError(PipelineError):
    """A command ran before the stage whose output it consumes."""


# --------------------------------------------------------------------------
# configuration

BACKEND_CHOICES: dict[str, tuple[str, ...]] = {
    "llm": ("procedural",),
    "diffusion": ("procedural",),
    "inpaint": ("mock",),
    "control": ("mock",),
    "detector": ("center-box", "null"),
    "segmenter": ("box-soft",),
    "matting": ("constant",),
    "vqa": ("oracle", "noisy-oracle"),
    "encoder": ("toy",),
    "embedder": ("toy",),
    "perceptual": ("toy",),
}

DEFAULT_BACKENDS: tuple[tuple[str, str], ...] = tuple(
    (role, names[0]) for role, names in BACKEND_CHOICES.items()
)

_CONFIG_KEYS = {
    "dataset_id",
    "root",
    "manifest",
    "category",
    "seed",
    "stage_parallelism",
    "prompts_per_group",
    "pairs_per_real",
    "max_filter_attempts",
    "test_fraction",
    "annotation_per_cell",
    "scale_ratios",
    "backends",
    "edit_config",
    "train",
}


def _default_train_config() -> TrainConfig:
    # demo-scale budget: big enough to move the adapters, small enough for CI
    return TrainConfig(
        total_iterations=60,
        learning_rate=5e-3,
        batch_size=8,
        eval_batch_size=8,
        augmentations=(),
        validation_fraction=0.25,
        validation_interval=10,
    )


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one pipeline run needs: identity, paths, knobs, backends."""

    dataset_id: str
    root: Path
    manifest_path: Path
    category: AttributeCategory = AttributeCategory.COLOR
    seed: int = 0
    stage_parallelism: int = 1
    prompts_per_group: int = 4
    pairs_per_real: int = 1
    max_filter_attempts: int = 2
    test_fraction: float = 0.0
    annotation_per_cell: int = 4
    scale_ratios: tuple[int, ...] = (1, 2)
    backends: tuple[tuple[str, str], ...] = DEFAULT_BACKENDS
    edit_config_path: Path | None = None
    train: TrainConfig = field(default_factory=_default_train_config)

    def __post_init__(self):
        if not self.dataset_id:
            raise ConfigError("dataset_id must be non-empty")
        if self.stage_parallelism < 1:
            raise ConfigError("stage_parallelism must be >= 1")
        if self.prompts_per_group < 1:
            raise ConfigError("prompts_per_group must be >= 1")
        if self.pairs_per_real < 1:
            raise ConfigError("pairs_per_real must be >= 1")
        if self.max_filter_attempts < 1:
            raise ConfigError("max_filter_attempts must be >= 1")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("test_fraction must be in [0, 1)")
        if self.annotation_per_cell < 1:
            raise ConfigError("annotation_per_cell must be >= 1")
        if not self.scale_ratios or any(
            not isinstance(r, int) or r < 1 for r in self.scale_ratios
        ):
            raise ConfigError("scale_ratios must be a non-empty list of positive integers")
        roles = dict(self.backends)
        for role, names in BACKEND_CHOICES.items():
            if role not in roles:
                raise ConfigError(f"backends section lacks role {role!r}")
            if roles[role] not in names:
                raise ConfigError(
                    f"unknown backend {roles[role]!r} for role {role!r}; choices: {list(names)}"
                )
        unknown = set(roles) - set(BACKEND_CHOICES)
        if unknown:
            raise ConfigError(f"unknown backend roles: {sorted(unknown)}")

    def backend(self, role: str) -> str:
        return dict(self.backends)[role]

    def config_hash(self) -> str:
        payload = {
            "dataset_id": self.dataset_id,
            "category": self.category.value,
            "seed": self.seed,
            "prompts_per_group": self.prompts_per_group,
            "pairs_per_real": self.pairs_per_real,
            "max_filter_attempts": self.max_filter_attempts,
            "test_fraction": self.test_fraction,
            "annotation_per_cell": self.annotation_per_cell,
            "scale_ratios": list(self.scale_ratios),
            "backends": dict(self.backends),
            "edit_config": str(self.edit_config_path) if self.edit_config_path else "",
            "train": {
                k: (list(v) if isinstance(v, tuple) else v)
                for k, v in vars(self.train).items()
            },
        }
        return f"{stable_hash(json.dumps(payload, sort_keys=True)):016x}"


def load_pipeline_config(
    path: str | Path, overrides: Mapping[str, object] | None = None
) -> PipelineConfig:
    """Parse the YAML run configuration, applying CLI flag overrides."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no configuration file at {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    overrides = dict(overrides or {})

    base_dir = path.parent
    root = Path(raw.get("root", "."))
    if not root.is_absolute():
        root = (base_dir / root).resolve()

    dataset_id = overrides.get("dataset_id") or raw.get("dataset_id")
    if not dataset_id:
        raise ConfigError(f"{path}: dataset_id is required")

    manifest_value = overrides.get("manifest_path") or raw.get("manifest", "manifest.jsonl")
    manifest_path = Path(manifest_value)
    if not manifest_path.is_absolute():
        manifest_path = root / manifest_path

    category_value = overrides.get("category") or raw.get("category", "color")
    try:
        category = AttributeCategory(category_value)
    except ValueError as exc:
        raise ConfigError(f"unknown category {category_value!r}") from exc

    seed = overrides.get("seed")
    if seed is None:
        seed = raw.get("seed", 0)

    backends = dict(DEFAULT_BACKENDS)
    raw_backends = raw.get("backends", {})
    if not isinstance(raw_backends, dict):
        raise ConfigError("backends must be a mapping of role -> name")
    backends.update({str(k): str(v) for k, v in raw_backends.items()})

    train_raw = raw.get("train", {})
    if not isinstance(train_raw, dict):
        raise ConfigError("train must be a mapping")
    train_defaults = vars(_default_train_config()).copy()
    unknown_train = set(train_raw) - set(train_defaults)
    if unknown_train:
        raise ConfigError(f"unknown train keys {sorted(unknown_train)}")
    train_defaults.update(train_raw)
    if isinstance(train_defaults.get("augmentations"), list):
        train_defaults["augmentations"] = tuple(train_defaults["augmentations"])
    if "seed" in overrides and overrides["seed"] is not None:
        train_defaults["seed"] = overrides["seed"]
    try:
        train_config = TrainConfig(**train_defaults)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train settings: {exc}") from exc

    edit_config = raw.get("edit_config")
    edit_config_path = None
    if edit_config:
        edit_config_path = Path(edit_config)
        if not edit_config_path.is_absolute():
            edit_config_path = (base_dir / edit_config_path).resolve()
        if not edit_config_path.exists():
            raise ConfigError(f"edit_config file not found: {edit_config_path}")

    scale_ratios = raw.get("scale_ratios", [1, 2])
    if not isinstance(scale_ratios, (list, tuple)) or any(
        isinstance(r, bool) or not isinstance(r, int) for r in scale_ratios
    ):
        raise ConfigError("scale_ratios must be a list of integers")

    parallelism = overrides.get("stage_parallelism")
    if parallelism is None:
        parallelism = raw.get("stage_parallelism", 1)

    try:
        return PipelineConfig(
            dataset_id=str(dataset_id),
            root=root,
            manifest_path=manifest_path,
            category=category,
            seed=int(seed),
            stage_parallelism=int(parallelism),
            prompts_per_group=int(raw.get("prompts_per_group", 4)),
            pairs_per_real=int(raw.get("pairs_per_real", 1)),
            max_filter_attempts=int(raw.get("max_filter_attempts", 2)),
            test_fraction=float(raw.get("test_fraction", 0.0)),
            annotation_per_cell=int(raw.get("annotation_per_cell", 4)),
            scale_ratios=tuple(int(r) for r in scale_ratios),
            backends=tuple(sorted(backends.items())),
            edit_config_path=edit_config_path,
            train=train_config,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration value: {exc}") from exc


@dataclass
class ResolvedBackends:
    llm: object
    suite: BackendSuite
    vqa_mode: str
    embedder: ToyEmbedder
    perceptual: ToyPerceptual
    encoder_factory: Callable[[], ToyDualEncoder]


def resolve_backends(cfg: PipelineConfig) -> ResolvedBackends:
    """Instantiate every selected backend; unknown names died in validation."""
    detector = CenterBoxDetector() if cfg.backend("detector") == "center-box" else NullDetector()
    suite = BackendSuite(
        detector=detector,
        segmenter=BoxSoftSegmenter(),
        matting=ConstantMatting(),
        diffusion=ProceduralDiffusion(),
        inpaint=MockInpaint(),
        control=MockStructureControl(),
        color_bank=ColorBank.default(),
    )
    return ResolvedBackends(
        llm=ProceduralLlm(),
        suite=suite,
        vqa_mode=cfg.backend("vqa"),
        embedder=ToyEmbedder(),
        perceptual=ToyPerceptual(),
        encoder_factory=lambda: ToyDualEncoder(base_seed=cfg.seed),
    )


def _vqa_for(
    mode: str, questions: Sequence[FilterQuestion], record_id: str, attempt: int
) -> ScriptedVqa:
    """Checker for one image: answers match expectations, optionally perturbed.

    The noisy variant flips a deterministic ~1/8 of (image, attempt,
    question) answers, which exercises the reject and retry paths while
    keeping reruns bit-identical.
    """
    expected_by_text = {q.text: q.expected for q in questions}
    if mode == "oracle":
        return ScriptedVqa(lambda text: expected_by_text[text])

    def answer(text: str) -> str:
        expected = expected_by_text[text]
        if stable_hash(f"vqa-flip|{record_id}|{attempt}|{text}") % 8 == 0:
            return "no" if expected == "yes" else "yes"
        return expected

    return ScriptedVqa(answer)


# --------------------------------------------------------------------------
# manifest bootstrap and stage-state helpers


def _bootstrap_manifest(cfg: PipelineConfig) -> Manifest:
    """Initial manifest from the real-image tree: root/real/<class>/<image>."""
    real_dir = cfg.root / "real"
    if not real_dir.is_dir():
        raise ConfigError(
            f"no real image tree at {real_dir}; expected real/<class_name>/<image>.png"
        )
    class_dirs = sorted(d for d in real_dir.iterdir() if d.is_dir())
    if not class_dirs:
        raise ConfigError(f"{real_dir} holds no class directories")

    classes: list[ClassEntry] = []
    images: list[ImageRecord] = []
    for class_id, class_dir in enumerate(class_dirs):
        files = sorted(
            f for f in class_dir.iterdir() if f.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not files:
            raise ConfigError(f"class directory {class_dir} holds no images")
        classes.append(
            ClassEntry(class_id=class_id, name=class_dir.name, dataset_id=cfg.dataset_id)
        )
        n_test = int(cfg.test_fraction * len(files))
        rng = np.random.default_rng(stable_hash(f"split|{cfg.seed}|{class_dir.name}"))
        order = rng.permutation(len(files))
        test_indices = set(order[:n_test].tolist())
        for index, file in enumerate(files):
            images.append(
                ImageRecord(
                    image_id=f"{class_dir.name}_{file.stem}",
                    class_id=class_id,
                    path=str(file.relative_to(cfg.root)),
                    split=Split.TEST if index in test_indices else Split.TRAIN,
                    kind=ImageKind.REAL,
                )
            )
    if len({record.image_id for record in images}) != len(images):
        raise ConfigError("duplicate image ids in the real tree")
    return Manifest(
        dataset_id=cfg.dataset_id,
        classes=classes,
        images=images,
        pipeline_config_hash=cfg.config_hash(),
    )


def _open_store(cfg: PipelineConfig, bootstrap: bool = False) -> ManifestStore:
    if cfg.manifest_path.exists():
        store = ManifestStore(cfg.manifest_path)
        if store.manifest.dataset_id != cfg.dataset_id:
            raise ConfigError(
                f"manifest belongs to dataset {store.manifest.dataset_id!r},"
                f" configuration names {cfg.dataset_id!r}"
            )
    elif bootstrap:
        cfg.manifest_path.parent.mkdir(parents=True, exist_ok=True)
        store = ManifestStore(cfg.manifest_path, _bootstrap_manifest(cfg))
    else:
        raise StageOrderError(
            f"no manifest at {cfg.manifest_path}; run 'prompts' first"
        )
    current_hash = cfg.config_hash()
    if store.manifest.pipeline_config_hash != current_hash:
        if store.manifest.pipeline_config_hash:
            print(
                "note: pipeline configuration changed since the last run;"
                " recording the new hash"
            )
        store.manifest.pipeline_config_hash = current_hash
        store.compact()
    return store


def _train_reals(manifest: Manifest) -> list[ImageRecord]:
    return sorted(manifest.real_images(Split.TRAIN), key=lambda r: r.image_id)


def _category_prompts(manifest: Manifest, category: AttributeCategory):
    return [p for p in manifest.prompts if p.category is category]


def _jobs(cfg: PipelineConfig, manifest: Manifest) -> list[GenerationJob]:
    prompts = _category_prompts(manifest, cfg.category)
    return pair_real_with_prompts(_train_reals(manifest), prompts, cfg.pairs_per_real)


def _require_prompts(cfg: PipelineConfig, manifest: Manifest) -> None:
    settled = [
        p
        for p in _category_prompts(manifest, cfg.category)
        if p.status is PromptStatus.MANUAL_ACCEPTED
    ]
    if not settled:
        raise StageOrderError(
            f"no accepted {cfg.category.value} prompts in the manifest; run 'prompts' first"
        )


def _mask_path(cfg: PipelineConfig, image_id: str) -> Path:
    return cfg.root / "maps" / f"{image_id}.mask.png"


def _canny_path(cfg: PipelineConfig, image_id: str) -> Path:
    return cfg.root / "maps" / f"{image_id}.canny.png"


def _prior_path(cfg: PipelineConfig, job_id: str) -> Path:
    return cfg.root / "priors" / f"{job_id}.png"


def _require_maps(cfg: PipelineConfig, manifest: Manifest) -> None:
    missing = [
        r.image_id for r in _train_reals(manifest) if not _mask_path(cfg, r.image_id).exists()
    ]
    if missing:
        raise StageOrderError(
            f"guidance maps missing for {len(missing)} images (e.g. {missing[0]}); run 'maps' first"
        )


def _require_priors(cfg: PipelineConfig, manifest: Manifest) -> None:
    jobs = _jobs(cfg, manifest)
    missing = [job.job_id for job in jobs if not _prior_path(cfg, job.job_id).exists()]
    if missing:
        raise StageOrderError(
            f"priors missing for {len(missing)} jobs (e.g. {missing[0]}); run 'priors' first"
        )


def _require_generated(cfg: PipelineConfig, manifest: Manifest) -> None:
    for job in _jobs(cfg, manifest):
        record = manifest.synthetic_for(job.real_image_id, job.prompt_id)
        if record is None or not (cfg.root / record.path).exists():
            raise StageOrderError(
                f"no synthetic image for job {job.job_id}; run 'generate' first"
            )


def _require_filtered(manifest: Manifest) -> None:
    synthetics = manifest.synthetic_images()
    if not synthetics:
        raise StageOrderError("no synthetic images in the manifest; run 'generate' and 'filter' first")
    unfiltered = [r.image_id for r in synthetics if r.filter_status is FilterStatus.UNFILTERED]
    if unfiltered:
        raise StageOrderError(
            f"{len(unfiltered)} synthetic images still unfiltered (e.g. {unfiltered[0]});"
            " run 'filter' first"
        )


def _edit_config_set(cfg: PipelineConfig) -> EditConfigSet:
    return load_edit_config(cfg.edit_config_path)


def _context(cfg: PipelineConfig, store: ManifestStore, suite: BackendSuite) -> PipelineContext:
    return PipelineContext(
        store=store, config_set=_edit_config_set(cfg), backends=suite, root=cfg.root
    )


# --------------------------------------------------------------------------
# stage commands


def cmd_prompts(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    backends = resolve_backends(cfg)
    store = _open_store(cfg, bootstrap=True)
    manifest = store.manifest
    template = load_template()
    decisions_path = cfg.root / DECISIONS_FILENAME
    decisions = load_decisions(decisions_path) if decisions_path.exists() else None

    rows = []
    for entry in sorted(manifest.classes, key=lambda c: c.class_id):
        for feasibility in (Feasibility.FEASIBLE, Feasibility.INFEASIBLE):
            existing = [
                p
                for p in manifest.prompts
                if p.class_id == entry.class_id
                and p.category is cfg.category
                and p.feasibility is feasibility
            ]
            if any(
                p.status in (PromptStatus.MANUAL_ACCEPTED, PromptStatus.MANUAL_REJECTED)
                for p in existing
            ):
                rows.append((entry.name, feasibility.value, "already settled"))
                continue
            raw = generate_attributes(
                entry, cfg.category, feasibility, cfg.prompts_per_group,
                backends.llm, template,
            )
            for record in raw:
                store.upsert_prompt(record)
            survivors = self_filter(raw, backends.llm)
            for record in survivors:
                store.upsert_prompt(record)
            group_decisions = decisions or {r.keyword: True for r in survivors}
            settled = apply_manual_filter(survivors, group_decisions)
            for record in settled:
                store.upsert_prompt(record)
            accepted = sum(1 for r in settled if r.status is PromptStatus.MANUAL_ACCEPTED)
            rows.append(
                (entry.name, feasibility.value,
                 f"raw {len(raw)} / self {len(survivors)} / accepted {accepted}")
            )
    store.compact()
    print(render_table(["class", "feasibility", "prompts"], rows))
    return EXIT_OK


def cmd_maps(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    backends = resolve_backends(cfg)
    store = _open_store(cfg)
    _require_prompts(cfg, store.manifest)
    edit_cfg = _edit_config_set(cfg).resolve(
        cfg.dataset_id, cfg.category, Feasibility.FEASIBLE
    )
    loader = default_image_loader(cfg.root)
    done = skipped = 0
    for record in _train_reals(store.manifest):
        mask_path = _mask_path(cfg, record.image_id)
        canny_path = _canny_path(cfg, record.image_id)
        if mask_path.exists() and canny_path.exists():
            skipped += 1
            continue
        entry = store.manifest.class_by_id(record.class_id)
        working, _ = to_working(loader(record), edit_cfg.working_long_side, edit_cfg.pad_multiple)
        mask = foreground_mask(
            working, entry.name, backends.suite.detector,
            backends.suite.segmenter, backends.suite.matting,
        )
        canny = canny_from_foreground(working, mask, edit_cfg.canny_low, edit_cfg.canny_high)
        mask_path.parent.mkdir(parents=True, exist_ok=True)
        save_mask(mask, mask_path)
        save_mask(canny, canny_path)
        done += 1
    print(f"maps: {done} computed, {skipped} already present")
    return EXIT_OK


def cmd_priors(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    backends = resolve_backends(cfg)
    store = _open_store(cfg)
    manifest = store.manifest
    _require_prompts(cfg, manifest)
    _require_maps(cfg, manifest)
    config_set = _edit_config_set(cfg)
    loader = default_image_loader(cfg.root)
    done = skipped = 0
    for job in _jobs(cfg, manifest):
        out = _prior_path(cfg, job.job_id)
        if out.exists():
            skipped += 1
            continue
        prompt = manifest.prompt_by_id(job.prompt_id)
        real = manifest.image_by_id(job.real_image_id)
        entry = manifest.class_by_id(real.class_id)
        edit_cfg = config_set.resolve(cfg.dataset_id, job.category, job.feasibility)
        working, _ = to_working(loader(real), edit_cfg.working_long_side, edit_cfg.pad_multiple)
        height, width = working.shape[:2]
        raw_prior = make_raw_prior(
            prompt, entry, backends.suite.diffusion, backends.suite.color_bank,
            job.seed, height, width, steps=edit_cfg.prior_steps or 20,
        )
        out.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(raw_prior.image).save(out)
        done += 1
    print(f"priors: {done} computed, {skipped} already present")
    return EXIT_OK


def cmd_generate(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    backends = resolve_backends(cfg)
    store = _open_store(cfg)
    manifest = store.manifest
    _require_prompts(cfg, manifest)
    _require_maps(cfg, manifest)
    _require_priors(cfg, manifest)
    ctx = _context(cfg, store, backends.suite)

    jobs = _jobs(cfg, manifest)
    pending = []
    skipped = 0
    for job in jobs:
        record = manifest.synthetic_for(job.real_image_id, job.prompt_id)
        if record is not None and (cfg.root / record.path).exists():
            skipped += 1
        else:
            pending.append(job)

    if cfg.stage_parallelism > 1 and pending:
        with ThreadPoolExecutor(max_workers=cfg.stage_parallelism) as pool:
            results = list(
                pool.map(lambda job: run_generation_job(job, ctx, persist=False), pending)
            )
        ctx.synthetic_dir.mkdir(parents=True, exist_ok=True)
        for (image, record) in results:
            Image.fromarray(image).save(cfg.root / record.path)
            store.upsert_image(record)
    else:
        for job in pending:
            run_generation_job(job, ctx, persist=True)
    store.compact()
    print(f"generate: {len(pending)} created, {skipped} already present ({len(jobs)} jobs)")
    return EXIT_OK


def cmd_filter(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    backends = resolve_backends(cfg)
    store = _open_store(cfg)
    manifest = store.manifest
    _require_prompts(cfg, manifest)
    _require_generated(cfg, manifest)
    ctx = _context(cfg, store, backends.suite)

    counts = {status: 0 for status in FilterStatus}
    pending = sorted(
        (r for r in manifest.synthetic_images() if r.filter_status is FilterStatus.UNFILTERED),
        key=lambda r: r.image_id,
    )
    skipped = len(manifest.synthetic_images()) - len(pending)
    for record in pending:
        prompt = manifest.prompt_by_id(record.prompt_id)
        entry = manifest.class_by_id(record.class_id)
        questions = build_questions(
            prompt.category, entry.name, prompt.keyword, prompt.feasibility
        )
        job = GenerationJob(
            job_id=job_id_for(record.parent_real_id, record.prompt_id, record.attempt),
            real_image_id=record.parent_real_id,
            prompt_id=record.prompt_id,
            category=prompt.category,
            feasibility=prompt.feasibility,
            attempt=record.attempt,
            seed=derive_seed(record.parent_real_id, record.prompt_id, record.attempt),
        )
        def run_filter(image, current_job, *, _questions=questions, _record=record):
            vqa = _vqa_for(
                backends.vqa_mode, _questions, _record.image_id, current_job.attempt
            )
            return filter_image(image, _questions, vqa, _record.image_id)

        final, _verdict = filter_and_retry(
            job,
            cfg.max_filter_attempts,
            generate=lambda j: run_generation_job(j, ctx),
            run_filter=run_filter,
            set_status=store.set_filter_status,
        )
        counts[final.filter_status] += 1
    store.compact()
    print(
        "filter: "
        f"{counts[FilterStatus.ACCEPTED]} accepted, "
        f"{counts[FilterStatus.REJECTED]} rejected, "
        f"{counts[FilterStatus.INDETERMINATE]} indeterminate, "
        f"{skipped} already settled"
    )
    return EXIT_OK


def _regime_from(args: argparse.Namespace) -> DataRegime:
    return DataRegime(getattr(args, "regime", None) or "mixed")


def _feasibility_from(args: argparse.Namespace) -> FeasibilityRegime:
    return FeasibilityRegime(getattr(args, "feasibility", None) or "mix")


def _checkpoint_path(cfg: PipelineConfig, regime: DataRegime, feas: FeasibilityRegime) -> Path:
    return cfg.root / "checkpoints" / f"{regime.value}-{feas.value}.npz"


def cmd_train(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    backends = resolve_backends(cfg)
    store = _open_store(cfg)
    _require_filtered(store.manifest)
    regime = _regime_from(args)
    feas = _feasibility_from(args)
    out = _checkpoint_path(cfg, regime, feas)
    if out.exists():
        print(f"train: checkpoint {out.name} already present, skipping")
        return EXIT_OK
    checkpoint = train(
        store.manifest,
        backends.encoder_factory(),
        cfg.train,
        regime,
        feas,
        image_loader=default_image_loader(cfg.root),
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(checkpoint, out)
    best = checkpoint.best_val_accuracy
    best_text = "n/a" if math.isnan(best) else f"{best:.1f}% at step {checkpoint.best_val_step}"
    print(f"train: saved {out.name} (best validation accuracy {best_text})")
    return EXIT_OK


def _test_eval_set(cfg: PipelineConfig, manifest: Manifest):
    loader = default_image_loader(cfg.root)
    records = sorted(manifest.real_images(Split.TEST), key=lambda r: r.image_id)
    if not records:
        raise PipelineError(
            "no test-split real images; bootstrap with test_fraction > 0 to evaluate"
        )
    classes = sorted(manifest.classes, key=lambda c: c.class_id)
    index_of = {entry.class_id: i for i, entry in enumerate(classes)}
    images = [loader(r) for r in records]
    labels = [index_of[r.class_id] for r in records]
    prompts = [classifier_prompt(entry.name) for entry in classes]
    ids = [r.image_id for r in records]
    return images, labels, prompts, ids


def _predictions(
    encoder: ToyDualEncoder, images, prompts, batch_size: int
) -> list[int]:
    preds: list[int] = []
    with torch.no_grad():
        text_emb = encoder.encode_text(prompts)
        for start in range(0, len(images), batch_size):
            chunk = images[start : start + batch_size]
            logits = classify(encoder.encode_image(chunk), text_emb, encoder.temperature)
            preds.extend(predictions_from_logits(logits.numpy()).tolist())
    return preds


def cmd_eval(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    backends = resolve_backends(cfg)
    store = _open_store(cfg)
    manifest = store.manifest
    ckpt_dir = cfg.root / "checkpoints"
    ckpt_files = sorted(ckpt_dir.glob("*.npz")) if ckpt_dir.is_dir() else []
    if not ckpt_files:
        raise StageOrderError(f"no checkpoints under {ckpt_dir}; run 'train' first")

    images, labels, prompts, sample_ids = _test_eval_set(cfg, manifest)
    reports_dir = cfg.root / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)

    metrics: dict[str, float] = {}
    prediction_sets: dict[str, PredictionSet] = {}
    for path in ckpt_files:
        name = path.stem
        checkpoint = load_checkpoint(path)
        encoder = backends.encoder_factory()
        if checkpoint.base_weight_hash and checkpoint.base_weight_hash != encoder.base_weight_hash():
            raise PipelineError(
                f"checkpoint {path.name} was trained against a different frozen base"
                " (seed mismatch?)"
            )
        encoder.load_adapters(checkpoint.adapters)
        preds = _predictions(encoder, images, prompts, cfg.train.eval_batch_size)
        accuracy = top1_accuracy(preds, labels)
        metrics[f"accuracy/{name}"] = accuracy
        pred_set = PredictionSet.from_predictions(name, sample_ids, preds, labels)
        prediction_sets[name] = pred_set
        save_prediction_set(pred_set, reports_dir / f"predset-{name}.json")

    for a, b in combinations(sorted(prediction_sets), 2):
        set_a, set_b = prediction_sets[a], prediction_sets[b]
        if set_a.ids:
            metrics[f"inclusion/{a}->{b}"] = inclusion_coefficient(set_a, set_b)
        if set_b.ids:
            metrics[f"inclusion/{b}->{a}"] = inclusion_coefficient(set_b, set_a)
        if set_a.ids | set_b.ids:
            metrics[f"jaccard/{a}|{b}"] = jaccard(set_a, set_b)

    for regime in DataRegime:
        triple = {
            feas: f"{regime.value}-{feas.value}"
            for feas in (FeasibilityRegime.FEASIBLE, FeasibilityRegime.INFEASIBLE, FeasibilityRegime.MIX)
        }
        if all(f"accuracy/{name}" in metrics for name in triple.values()):
            f_acc = metrics[f"accuracy/{triple[FeasibilityRegime.FEASIBLE]}"]
            if_acc = metrics[f"accuracy/{triple[FeasibilityRegime.INFEASIBLE]}"]
            mix_acc = metrics[f"accuracy/{triple[FeasibilityRegime.MIX]}"]
            metrics[f"gap1/{regime.value}"] = round_half_up(delta1(f_acc, if_acc))
            metrics[f"gap2/{regime.value}"] = round_half_up(delta2(mix_acc, f_acc, if_acc))

    accepted = sorted(
        manifest.synthetic_images(FilterStatus.ACCEPTED), key=lambda r: r.image_id
    )
    if len(accepted) >= 2:
        loader = default_image_loader(cfg.root)
        syn_images = [loader(r) for r in accepted]
        parent_images = [loader(manifest.image_by_id(r.parent_real_id)) for r in accepted]
        metrics["pairwise_cosine"] = pairwise_cosine_score(
            backends.embedder, syn_images, parent_images
        )
        metrics["perceptual_distance"] = lpips_score(
            backends.perceptual, syn_images, parent_images
        )
        metrics["feature_distance"] = fid(
            FeatureCloud(backends.embedder.embed(syn_images)),
            FeatureCloud(backends.embedder.embed(parent_images)),
        )

    report = report_lines(metrics)
    (reports_dir / "eval.tsv").write_text("\n".join(report) + "\n")
    print(render_table(["metric", "value"], [line.split("\t") for line in report]))
    return EXIT_OK


def cmd_scale(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    backends = resolve_backends(cfg)
    store = _open_store(cfg)
    manifest = store.manifest
    _require_filtered(manifest)
    feas = _feasibility_from(args)
    loader = default_image_loader(cfg.root)
    reals = [r for r in manifest.images if r.kind is ImageKind.REAL]
    has_test = bool(manifest.real_images(Split.TEST))

    def train_fn(selected_ids: tuple[str, ...], ratio: int) -> float:
        subset = Manifest(
            dataset_id=manifest.dataset_id,
            classes=manifest.classes,
            prompts=manifest.prompts,
            images=reals + [manifest.image_by_id(i) for i in selected_ids],
        )
        checkpoint = train(
            subset, backends.encoder_factory(), cfg.train,
            DataRegime.MIXED, feas, image_loader=loader,
        )
        if has_test:
            images, labels, prompts, _ = _test_eval_set(cfg, manifest)
            encoder = backends.encoder_factory()
            encoder.load_adapters(checkpoint.adapters)
            return evaluate_accuracy(encoder, images, labels, prompts, cfg.train.eval_batch_size)
        if math.isnan(checkpoint.best_val_accuracy):
            raise PipelineError(
                "scaling needs a test split or train.validation_fraction > 0"
            )
        return checkpoint.best_val_accuracy

    reports_dir = cfg.root / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    curve = scaling_run(
        manifest,
        cfg.scale_ratios,
        train_fn,
        feasibility_regime=feas,
        seed=cfg.seed,
        plot_path=reports_dir / f"scaling-{feas.value}.png",
        label=f"{cfg.dataset_id}-{feas.value}",
    )
    write_curve(curve, reports_dir / f"scaling-{feas.value}.tsv")
    rows = [(p.ratio, p.n_synthetic, f"{p.accuracy:.2f}") for p in curve.points]
    print(render_table(["ratio", "n_synthetic", "accuracy"], rows))
    return EXIT_OK


def _annotation_dir(cfg: PipelineConfig) -> Path:
    return cfg.root / "annotation"


def build_annotation_session(cfg: PipelineConfig) -> AnnotationSession:
    """Sample items from the manifest and bind them to the ratings log."""
    store = _open_store(cfg)
    manifest = store.manifest
    _require_filtered(manifest)
    items = build_annotation_items(manifest, cfg.annotation_per_cell, cfg.seed)
    if not items:
        raise PipelineError("no accepted synthetic images to annotate")
    ann_dir = _annotation_dir(cfg)
    ann_dir.mkdir(parents=True, exist_ok=True)
    save_items(items, ann_dir / "items.jsonl")
    image_paths = {
        item.image_id: cfg.root / manifest.image_by_id(item.image_id).path
        for item in items
    }
    return AnnotationSession(
        items, ratings_path=ann_dir / "ratings.jsonl", image_paths=image_paths
    )


def cmd_annotate_serve(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    session = build_annotation_session(cfg)
    server = build_server(session, args.host, args.port)
    host, port = server.server_address[:2]
    print(f"annotation service on http://{host}:{port} ({session.total} items)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        print("stopping")
    finally:
        server.server_close()
    return EXIT_OK


def cmd_annotate_export(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    ann_dir = _annotation_dir(cfg)
    items_path = ann_dir / "items.jsonl"
    ratings_path = ann_dir / "ratings.jsonl"
    if not items_path.exists():
        raise StageOrderError(f"no annotation sample at {items_path}; run 'annotate-serve' first")
    if not ratings_path.exists():
        raise StageOrderError(
            "no ratings recorded yet; collect ratings through 'annotate-serve' first"
        )
    items = load_items(items_path)
    session = AnnotationSession(items, ratings_path=ratings_path)
    ratings = session.ratings()
    export_path = ann_dir / "export.tsv"
    export_path.write_text(export_text(ratings, items))
    print(f"export: {len(ratings)} ratings -> {export_path}")
    if ratings:
        cells = aggregate_ratings(ratings, items)
        (ann_dir / "aggregates.tsv").write_text(aggregate_table(cells))
        rows = [
            (c.category, c.feasibility, f"{c.correctness_pct:.1f}", f"{c.mean_naturalness:.2f}", c.n)
            for c in cells
        ]
        print(render_table(["category", "feasibility", "correct%", "naturalness", "n"], rows))
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing and dispatch

COMMANDS: dict[str, Callable[[PipelineConfig, argparse.Namespace], int]] = {
    "prompts": cmd_prompts,
    "maps": cmd_maps,
    "priors": cmd_priors,
    "generate": cmd_generate,
    "filter": cmd_filter,
    "train": cmd_train,
    "eval": cmd_eval,
    "scale": cmd_scale,
    "annotate-serve": cmd_annotate_serve,
    "annotate-export": cmd_annotate_export,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="monoedit",
        description="attribute-editing synthetic data pipeline",
    )
    parser.add_argument("--config", default="pipeline.yaml", help="run configuration YAML")
    parser.add_argument("--manifest", help="override the manifest path")
    parser.add_argument("--stage-parallelism", type=int, help="worker bound for generation")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--dataset", help="override the dataset id")
    parser.add_argument(
        "--category", choices=[c.value for c in AttributeCategory],
        help="attribute category the run edits",
    )
    parser.add_argument(
        "--feasibility", choices=[f.value for f in FeasibilityRegime],
        help="synthetic pool for train/eval/scale",
    )
    parser.add_argument(
        "--regime", choices=[r.value for r in DataRegime],
        help="training data regime",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("prompts", "maps", "priors", "generate", "filter", "train", "eval", "scale"):
        sub.add_parser(name)
    serve = sub.add_parser("annotate-serve")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8765)
    sub.add_parser("annotate-export")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        "manifest_path": args.manifest,
        "stage_parallelism": args.stage_parallelism,
        "seed": args.seed,
        "dataset_id": args.dataset,
        "category": args.category,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    try:
        cfg = load_pipeline_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageOrderError as exc:
        print(f"stage-order error: {exc}", file=sys.stderr)
        return EXIT_STAGE_ORDER
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
