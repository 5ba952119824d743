"""Classifier adaptation on mixed real and synthetic pools.

A frozen dual-encoder scores images against per-class text prompts of the
form "a photo of {class name}"; only low-rank adapters on the two
projection layers train.  The loss on a step is

    lambda_mix * CE(real batch) + (1 - lambda_mix) * CE(synthetic batch)

with one batch drawn from each pool.  Real and synthetic samplers use
separate RNG streams, so the degenerate settings lambda_mix in {0, 1}
reproduce the single-pool runs step for step.  The iteration budget is
fixed by config, never by pool size.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .core import (
    Feasibility,
    FilterStatus,
    ImageKind,
    ImageRecord,
    Manifest,
    PipelineError,
    Split,
    stable_hash,
)
from .lora import LoraLinear, LowRankAdapter
from .manifest import manifest_digest
from .priors import resize_bilinear

LR_GRID = (1e-3, 5e-4, 1e-4, 5e-5, 1e-5)
WD_GRID = (1e-3, 1e-4, 5e-5)
DEFAULT_AUGMENTATIONS = ("random_resized_crop", "horizontal_flip", "color_jitter", "grayscale")

# validation runs 70 times over a full-length schedule
VALIDATIONS_PER_RUN = 70


class TrainingError(PipelineError):
    """Unusable training setup (empty pools, bad regime, missing images)."""


class DivergenceError(TrainingError):
    """Loss became non-finite; carries the step diagnostics."""

    def __init__(self, step: int, loss: float, lr: float):
        super().__init__(f"non-finite loss {loss} at step {step} (lr {lr:.3g})")
        self.step = step
        self.loss = loss
        self.lr = lr


class FrozenBaseError(TrainingError):
    """Base encoder weights changed during training; the run is invalid."""


class DataRegime(str, Enum):
    REAL = "real"
    SYNTHETIC = "syn"
    MIXED = "mixed"


class FeasibilityRegime(str, Enum):
    FEASIBLE = "feasible"
    INFEASIBLE = "infeasible"
    MIX = "mix"


def classifier_prompt(class_name: str) -> str:
    return f"a photo of {class_name}"


@dataclass(frozen=True)
class TrainConfig:
    total_iterations: int
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    lambda_mix: float = 0.5
    batch_size: int = 64
    eval_batch_size: int = 8
    warmup_fraction: float = 0.05
    min_lr: float = 1e-8
    validation_interval: int | None = None
    validation_fraction: float = 0.1
    rank: int = 16
    lora_alpha: float = 32.0
    literal_adapter_scale: bool = False
    single_mixed_batch: bool = False
    augmentations: tuple[str, ...] = DEFAULT_AUGMENTATIONS
    seed: int = 0

    def __post_init__(self):
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be positive")
        if not 0.0 <= self.lambda_mix <= 1.0:
            raise ValueError(f"lambda_mix must lie in [0, 1], got {self.lambda_mix}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.learning_rate <= 0 or self.min_lr < 0:
            raise ValueError("learning_rate must be positive and min_lr non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.validation_interval is not None and self.validation_interval < 1:
            raise ValueError("validation_interval must be positive when set")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if self.rank < 1:
            raise ValueError("rank must be positive")
        unknown = [name for name in self.augmentations if name not in _AUGMENTATIONS]
        if unknown:
            raise ValueError(f"unknown augmentations: {unknown}")

    @property
    def effective_validation_interval(self) -> int:
        if self.validation_interval is not None:
            return self.validation_interval
        return max(1, self.total_iterations // VALIDATIONS_PER_RUN)


def lr_at_step(step: int, config: TrainConfig) -> float:
    """Linear warmup then cosine decay to min_lr; step is 0-based."""
    warmup = int(round(config.warmup_fraction * config.total_iterations))
    if step < warmup:
        return config.learning_rate * (step + 1) / warmup
    span = max(1, config.total_iterations - warmup)
    progress = (step - warmup) / span
    return config.min_lr + 0.5 * (config.learning_rate - config.min_lr) * (
        1.0 + math.cos(math.pi * progress)
    )


def mixed_loss(real_loss, syn_loss, lambda_mix: float):
    """Convex combination of the two pool losses; works on floats and tensors."""
    if not 0.0 <= lambda_mix <= 1.0:
        raise ValueError(f"lambda_mix must lie in [0, 1], got {lambda_mix}")
    return lambda_mix * real_loss + (1.0 - lambda_mix) * syn_loss


def classify(image_embeddings, text_embeddings, temperature: float):
    """Cosine-similarity logits: logits[i][c] = cos(image_i, text_c) / temperature.

    Accepts torch tensors (kept differentiable) or numpy arrays (returned
    as numpy).  Zero-norm rows are an error, not a silent nan.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    numpy_in = isinstance(image_embeddings, np.ndarray)
    img = torch.as_tensor(np.asarray(image_embeddings, dtype=np.float64)) if numpy_in else image_embeddings
    txt = torch.as_tensor(np.asarray(text_embeddings, dtype=np.float64)) if numpy_in else text_embeddings
    img_norm = torch.linalg.vector_norm(img, dim=-1, keepdim=True)
    txt_norm = torch.linalg.vector_norm(txt, dim=-1, keepdim=True)
    if bool((img_norm == 0).any()) or bool((txt_norm == 0).any()):
        raise ValueError("zero-norm embedding cannot be scored")
    logits = (img / img_norm) @ (txt / txt_norm).T / temperature
    return logits.numpy() if numpy_in else logits


class ToyDualEncoder(nn.Module):
    """Deterministic stand-in for a pretrained two-tower scorer.

    Images pool to a fixed 16x16 grid and project through a frozen random
    linear layer; text maps to a hash-seeded pseudo-feature and projects
    the same way.  Low-rank adapters on both projections are the only
    trainable parameters, mirroring adapter insertion on a real model's
    attention projections.
    """

    POOL_SIZE = 16
    TEXT_FEATURES = 64

    def __init__(
        self,
        embed_dim: int = 32,
        rank: int = 16,
        lora_alpha: float = 32.0,
        base_seed: int = 0,
        temperature: float = 0.07,
        literal_adapter_scale: bool = False,
    ):
        super().__init__()
        gen = torch.Generator().manual_seed(base_seed)
        image_features = 3 * self.POOL_SIZE * self.POOL_SIZE
        image_base = nn.Linear(image_features, embed_dim)
        text_base = nn.Linear(self.TEXT_FEATURES, embed_dim)
        with torch.no_grad():
            for base in (image_base, text_base):
                base.weight.normal_(0.0, 1.0 / math.sqrt(base.in_features), generator=gen)
                base.bias.zero_()
        self.image_proj = LoraLinear(image_base, rank, lora_alpha, literal_adapter_scale, gen)
        self.text_proj = LoraLinear(text_base, rank, lora_alpha, literal_adapter_scale, gen)
        self.embed_dim = embed_dim
        self.temperature = temperature
        self._text_feature_cache: dict[str, np.ndarray] = {}

    def _pool_image(self, image: np.ndarray) -> torch.Tensor:
        arr = np.asarray(image)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected an HxWx3 image, got shape {arr.shape}")
        # astype copies, so PIL's read-only arrays convert cleanly
        t = torch.from_numpy(arr.astype(np.float32) / 255.0)
        t = t.permute(2, 0, 1)
        pooled = nn.functional.adaptive_avg_pool2d(t, self.POOL_SIZE)
        return pooled.reshape(-1)

    def encode_image(self, images: Sequence[np.ndarray]) -> torch.Tensor:
        if len(images) == 0:
            raise ValueError("empty image batch")
        feats = torch.stack([self._pool_image(img) for img in images])
        return self.image_proj(feats)

    def _text_features(self, prompt: str) -> np.ndarray:
        cached = self._text_feature_cache.get(prompt)
        if cached is None:
            rng = np.random.default_rng(stable_hash(f"text-feature|{prompt}"))
            cached = rng.standard_normal(self.TEXT_FEATURES).astype(np.float32)
            self._text_feature_cache[prompt] = cached
        return cached

    def encode_text(self, prompts: Sequence[str]) -> torch.Tensor:
        if len(prompts) == 0:
            raise ValueError("empty prompt batch")
        feats = torch.stack([torch.from_numpy(self._text_features(p)) for p in prompts])
        return self.text_proj(feats)

    def injection_points(self) -> dict[str, LoraLinear]:
        return {"image_proj": self.image_proj, "text_proj": self.text_proj}

    def trainable_parameters(self) -> list[nn.Parameter]:
        params: list[nn.Parameter] = []
        for layer in self.injection_points().values():
            params.extend([layer.lora_a, layer.lora_b])
        return params

    def export_adapters(self) -> dict[str, LowRankAdapter]:
        return {name: layer.adapter_weights() for name, layer in self.injection_points().items()}

    def load_adapters(self, adapters: Mapping[str, LowRankAdapter]) -> None:
        points = self.injection_points()
        unknown = sorted(set(adapters) - set(points))
        if unknown:
            raise ValueError(f"unknown injection points: {unknown}")
        for name, adapter in adapters.items():
            points[name].load_adapter_weights(adapter)

    def base_weight_hash(self) -> str:
        digest = hashlib.blake2b(digest_size=16)
        for name in sorted(self.injection_points()):
            base = self.injection_points()[name].base
            digest.update(base.weight.detach().numpy().astype(np.float32).tobytes())
            digest.update(base.bias.detach().numpy().astype(np.float32).tobytes())
        return digest.hexdigest()


# --------------------------------------------------------------------------
# augmentations (numpy, uint8 in and out, driven by an explicit generator)


def _random_resized_crop(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[:2]
    scale = rng.uniform(0.6, 1.0)
    ch = max(1, int(round(h * scale)))
    cw = max(1, int(round(w * scale)))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    crop = image[y0 : y0 + ch, x0 : x0 + cw]
    return resize_bilinear(crop, h, w)


def _horizontal_flip(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if rng.random() < 0.5:
        return np.ascontiguousarray(image[:, ::-1])
    return image


def _color_jitter(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    gains = rng.uniform(0.8, 1.2, size=3)
    shifted = image.astype(np.float64) * gains[None, None, :]
    return np.floor(np.clip(shifted, 0, 255) + 0.5).astype(np.uint8)


def _grayscale(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if rng.random() < 0.1:
        luma = (
            0.299 * image[..., 0].astype(np.float64)
            + 0.587 * image[..., 1].astype(np.float64)
            + 0.114 * image[..., 2].astype(np.float64)
        )
        gray = np.floor(luma + 0.5).astype(np.uint8)
        return np.stack([gray, gray, gray], axis=-1)
    return image


_AUGMENTATIONS: dict[str, Callable[[np.ndarray, np.random.Generator], np.ndarray]] = {
    "random_resized_crop": _random_resized_crop,
    "horizontal_flip": _horizontal_flip,
    "color_jitter": _color_jitter,
    "grayscale": _grayscale,
}


def apply_augmentations(
    image: np.ndarray, names: Sequence[str], rng: np.random.Generator
) -> np.ndarray:
    for name in names:
        try:
            fn = _AUGMENTATIONS[name]
        except KeyError:
            raise ValueError(f"unknown augmentation {name!r}") from None
        image = fn(image, rng)
    return image


# --------------------------------------------------------------------------
# pool assembly


@dataclass(frozen=True)
class TrainExample:
    image_id: str
    label: int


@dataclass(frozen=True)
class RegimePools:
    class_names: tuple[str, ...]
    real: tuple[TrainExample, ...]
    synthetic: tuple[TrainExample, ...]


def assemble_pools(
    manifest: Manifest,
    data_regime: DataRegime,
    feasibility_regime: FeasibilityRegime,
) -> RegimePools:
    """Collect the train-split example pools a regime may draw from.

    Synthetic candidates must have passed the auto filter; rejected and
    indeterminate records never train.  A regime whose pool comes up empty
    is an error rather than a silent no-op run.
    """
    classes = sorted(manifest.classes, key=lambda c: c.class_id)
    label_of = {entry.class_id: idx for idx, entry in enumerate(classes)}
    wanted = {
        FeasibilityRegime.FEASIBLE: {Feasibility.FEASIBLE},
        FeasibilityRegime.INFEASIBLE: {Feasibility.INFEASIBLE},
        FeasibilityRegime.MIX: {Feasibility.FEASIBLE, Feasibility.INFEASIBLE},
    }[feasibility_regime]

    real: list[TrainExample] = []
    synthetic: list[TrainExample] = []
    for record in manifest.images:
        if record.split is not Split.TRAIN:
            continue
        if record.kind is ImageKind.REAL:
            real.append(TrainExample(record.image_id, label_of[record.class_id]))
        elif record.filter_status is FilterStatus.ACCEPTED:
            prompt = manifest.prompt_by_id(record.prompt_id)
            if prompt.feasibility in wanted:
                synthetic.append(TrainExample(record.image_id, label_of[record.class_id]))

    pools = RegimePools(
        class_names=tuple(entry.name for entry in classes),
        real=tuple(real),
        synthetic=tuple(synthetic),
    )
    if data_regime in (DataRegime.REAL, DataRegime.MIXED) and not pools.real:
        raise TrainingError(f"regime {data_regime.value} needs real train images; none found")
    if data_regime in (DataRegime.SYNTHETIC, DataRegime.MIXED) and not pools.synthetic:
        raise TrainingError(
            f"regime {data_regime.value} needs accepted synthetic train images "
            f"({feasibility_regime.value}); none found"
        )
    return pools


def _holdout_split(
    examples: tuple[TrainExample, ...], fraction: float, stream: str, seed: int
) -> tuple[tuple[TrainExample, ...], tuple[TrainExample, ...]]:
    """Deterministic (train, validation) split of one pool."""
    if not examples:
        return (), ()
    n_val = int(len(examples) * fraction)
    rng = np.random.default_rng(stable_hash(f"holdout|{stream}|{seed}"))
    order = rng.permutation(len(examples))
    val_idx = set(order[:n_val].tolist())
    train = tuple(ex for i, ex in enumerate(examples) if i not in val_idx)
    val = tuple(ex for i, ex in enumerate(examples) if i in val_idx)
    return train, val


# --------------------------------------------------------------------------
# checkpoints


@dataclass(frozen=True)
class AdapterCheckpoint:
    """Best-validation adapters plus everything needed to reproduce them."""

    adapters: Mapping[str, LowRankAdapter]
    final_adapters: Mapping[str, LowRankAdapter]
    config: TrainConfig
    data_regime: DataRegime
    feasibility_regime: FeasibilityRegime
    best_val_accuracy: float
    best_val_step: int
    validation_history: tuple[tuple[int, float], ...] = field(default_factory=tuple)
    manifest_hash: str = ""
    base_weight_hash: str = ""


def save_checkpoint(checkpoint: AdapterCheckpoint, path: str | Path) -> None:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    adapter_meta: dict[str, dict] = {}
    for group, mapping in (("best", checkpoint.adapters), ("final", checkpoint.final_adapters)):
        for name, adapter in mapping.items():
            arrays[f"{group}__{name}__a"] = adapter.a
            arrays[f"{group}__{name}__b"] = adapter.b
            adapter_meta.setdefault(name, {})[group] = {
                "rank": adapter.rank,
                "alpha": adapter.alpha,
                "literal_scale": adapter.literal_scale,
            }
    meta = {
        "config": asdict(checkpoint.config),
        "data_regime": checkpoint.data_regime.value,
        "feasibility_regime": checkpoint.feasibility_regime.value,
        "best_val_accuracy": checkpoint.best_val_accuracy,
        "best_val_step": checkpoint.best_val_step,
        "validation_history": [list(item) for item in checkpoint.validation_history],
        "manifest_hash": checkpoint.manifest_hash,
        "base_weight_hash": checkpoint.base_weight_hash,
        "adapters": adapter_meta,
    }
    arrays["meta_json"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> AdapterCheckpoint:
    with np.load(Path(path)) as bundle:
        meta = json.loads(bytes(bundle["meta_json"].tobytes()).decode())
        groups: dict[str, dict[str, LowRankAdapter]] = {"best": {}, "final": {}}
        for name, per_group in meta["adapters"].items():
            for group, info in per_group.items():
                groups[group][name] = LowRankAdapter(
                    a=bundle[f"{group}__{name}__a"],
                    b=bundle[f"{group}__{name}__b"],
                    rank=info["rank"],
                    alpha=info["alpha"],
                    literal_scale=info["literal_scale"],
                )
    cfg = meta["config"]
    cfg["augmentations"] = tuple(cfg["augmentations"])
    return AdapterCheckpoint(
        adapters=groups["best"],
        final_adapters=groups["final"],
        config=TrainConfig(**cfg),
        data_regime=DataRegime(meta["data_regime"]),
        feasibility_regime=FeasibilityRegime(meta["feasibility_regime"]),
        best_val_accuracy=meta["best_val_accuracy"],
        best_val_step=meta["best_val_step"],
        validation_history=tuple((int(s), float(a)) for s, a in meta["validation_history"]),
        manifest_hash=meta["manifest_hash"],
        base_weight_hash=meta["base_weight_hash"],
    )


# --------------------------------------------------------------------------
# evaluation


def evaluate_accuracy(
    encoder: ToyDualEncoder,
    images: Sequence[np.ndarray],
    labels: Sequence[int],
    class_prompts: Sequence[str],
    batch_size: int = 8,
) -> float:
    """Top-1 accuracy in percent over an in-memory evaluation set."""
    if len(images) != len(labels):
        raise ValueError("images and labels differ in length")
    if not images:
        raise ValueError("empty evaluation set")
    correct = 0
    with torch.no_grad():
        text_emb = encoder.encode_text(class_prompts)
        for start in range(0, len(images), batch_size):
            chunk = images[start : start + batch_size]
            logits = classify(encoder.encode_image(chunk), text_emb, encoder.temperature)
            preds = torch.argmax(logits, dim=1)
            for offset, pred in enumerate(preds.tolist()):
                if pred == labels[start + offset]:
                    correct += 1
    return 100.0 * correct / len(images)


# --------------------------------------------------------------------------
# the training loop


def _load_pool_images(
    pool: Sequence[TrainExample],
    manifest: Manifest,
    image_loader: Callable[[ImageRecord], np.ndarray],
) -> list[np.ndarray]:
    images = []
    for example in pool:
        record = manifest.image_by_id(example.image_id)
        images.append(np.asarray(image_loader(record)))
    return images


def default_image_loader(root: str | Path | None = None) -> Callable[[ImageRecord], np.ndarray]:
    from PIL import Image

    def load(record: ImageRecord) -> np.ndarray:
        candidate = Path(record.path)
        if not candidate.is_absolute() and root is not None:
            candidate = Path(root) / candidate
        with Image.open(candidate) as img:
            return np.asarray(img.convert("RGB"))

    return load


@dataclass
class _PoolRuntime:
    """One pool's in-memory images and its private RNG streams."""

    images: list[np.ndarray]
    labels: list[int]
    sampler: np.random.Generator
    augmenter: np.random.Generator

    def draw(self, batch_size: int, augmentations: Sequence[str]) -> tuple[list[np.ndarray], list[int]]:
        idx = self.sampler.integers(0, len(self.images), size=batch_size)
        batch = [
            apply_augmentations(self.images[i], augmentations, self.augmenter) for i in idx
        ]
        return batch, [self.labels[i] for i in idx]


def train(
    manifest: Manifest,
    encoder: ToyDualEncoder,
    config: TrainConfig,
    data_regime: DataRegime,
    feasibility_regime: FeasibilityRegime = FeasibilityRegime.MIX,
    image_loader: Callable[[ImageRecord], np.ndarray] | None = None,
    root: str | Path | None = None,
    on_step: Callable[[int, float, float], None] | None = None,
) -> AdapterCheckpoint:
    """Run the fixed-budget adapter training loop and return the checkpoint.

    Exactly ``config.total_iterations`` optimizer steps run regardless of
    pool sizes.  Validation uses a deterministic holdout of each active
    pool; the checkpoint keeps both the best-validation and the final
    adapters.  Base weights are hashed before and after as a freeze guard.
    """
    data_regime = DataRegime(data_regime)
    feasibility_regime = FeasibilityRegime(feasibility_regime)
    loader = image_loader if image_loader is not None else default_image_loader(root)
    pools = assemble_pools(manifest, data_regime, feasibility_regime)
    class_prompts = [classifier_prompt(name) for name in pools.class_names]

    use_real = data_regime in (DataRegime.REAL, DataRegime.MIXED)
    use_syn = data_regime in (DataRegime.SYNTHETIC, DataRegime.MIXED)

    runtimes: dict[str, _PoolRuntime] = {}
    val_images: list[np.ndarray] = []
    val_labels: list[int] = []
    for stream, active, pool in (("real", use_real, pools.real), ("syn", use_syn, pools.synthetic)):
        if not active:
            continue
        train_part, val_part = _holdout_split(
            pool, config.validation_fraction, stream, config.seed
        )
        if not train_part:
            raise TrainingError(f"{stream} pool empty after validation holdout")
        runtimes[stream] = _PoolRuntime(
            images=_load_pool_images(train_part, manifest, loader),
            labels=[ex.label for ex in train_part],
            sampler=np.random.default_rng(stable_hash(f"sample|{stream}|{config.seed}")),
            augmenter=np.random.default_rng(stable_hash(f"augment|{stream}|{config.seed}")),
        )
        val_images.extend(_load_pool_images(val_part, manifest, loader))
        val_labels.extend(ex.label for ex in val_part)

    base_hash_before = encoder.base_weight_hash()
    params = encoder.trainable_parameters()
    optimizer = torch.optim.AdamW(
        params, lr=config.learning_rate, weight_decay=config.weight_decay
    )

    def pool_ce(stream: str, batch_size: int) -> torch.Tensor:
        batch, labels = runtimes[stream].draw(batch_size, config.augmentations)
        image_emb = encoder.encode_image(batch)
        text_emb = encoder.encode_text(class_prompts)
        logits = classify(image_emb, text_emb, encoder.temperature)
        return nn.functional.cross_entropy(logits, torch.tensor(labels))

    def mixed_single_batch() -> torch.Tensor:
        # one forward pass over a half-real, half-synthetic batch
        half = max(1, config.batch_size // 2)
        real_batch, real_labels = runtimes["real"].draw(half, config.augmentations)
        syn_batch, syn_labels = runtimes["syn"].draw(
            max(1, config.batch_size - half), config.augmentations
        )
        image_emb = encoder.encode_image(real_batch + syn_batch)
        text_emb = encoder.encode_text(class_prompts)
        logits = classify(image_emb, text_emb, encoder.temperature)
        losses = nn.functional.cross_entropy(
            logits, torch.tensor(real_labels + syn_labels), reduction="none"
        )
        ce_real = losses[: len(real_labels)].mean()
        ce_syn = losses[len(real_labels) :].mean()
        return mixed_loss(ce_real, ce_syn, config.lambda_mix)

    best_adapters = encoder.export_adapters()
    best_acc = float("-inf")
    best_step = -1
    history: list[tuple[int, float]] = []
    interval = config.effective_validation_interval

    for step in range(config.total_iterations):
        lr = lr_at_step(step, config)
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.zero_grad()
        if data_regime is DataRegime.REAL:
            loss = pool_ce("real", config.batch_size)
        elif data_regime is DataRegime.SYNTHETIC:
            loss = pool_ce("syn", config.batch_size)
        elif config.single_mixed_batch:
            loss = mixed_single_batch()
        else:
            loss = mixed_loss(
                pool_ce("real", config.batch_size),
                pool_ce("syn", config.batch_size),
                config.lambda_mix,
            )
        loss_value = float(loss.detach())
        if not math.isfinite(loss_value):
            raise DivergenceError(step, loss_value, lr)
        loss.backward()
        optimizer.step()
        if on_step is not None:
            on_step(step, loss_value, lr)

        is_last = step == config.total_iterations - 1
        if val_images and ((step + 1) % interval == 0 or is_last):
            acc = evaluate_accuracy(
                encoder, val_images, val_labels, class_prompts, config.eval_batch_size
            )
            history.append((step, acc))
            if acc > best_acc:
                best_acc = acc
                best_step = step
                best_adapters = encoder.export_adapters()

    if encoder.base_weight_hash() != base_hash_before:
        raise FrozenBaseError("base encoder weights drifted during training")

    final_adapters = encoder.export_adapters()
    if not val_images:
        best_adapters = final_adapters
        best_acc = float("nan")
        best_step = config.total_iterations - 1
    return AdapterCheckpoint(
        adapters=best_adapters,
        final_adapters=final_adapters,
        config=config,
        data_regime=data_regime,
        feasibility_regime=feasibility_regime,
        best_val_accuracy=best_acc,
        best_val_step=best_step,
        validation_history=tuple(history),
        manifest_hash=manifest_digest(manifest),
        base_weight_hash=base_hash_before,
    )


# --------------------------------------------------------------------------
# hyperparameter selection


@dataclass(frozen=True)
class HyperparameterChoice:
    learning_rate: float
    weight_decay: float
    val_accuracy: float
    table: tuple[tuple[float, float, float], ...]


def select_hyperparameters(
    evaluate_candidate: Callable[[float, float], float],
    lr_grid: Sequence[float] = LR_GRID,
    wd_grid: Sequence[float] = WD_GRID,
) -> HyperparameterChoice:
    """Grid search by validation accuracy.

    Candidates run in ascending (lr, wd) order and a new winner must be
    strictly better, so ties resolve to the smaller learning rate first
    and the smaller weight decay second.
    """
    if not lr_grid or not wd_grid:
        raise ValueError("both grids must be non-empty")
    table: list[tuple[float, float, float]] = []
    best: tuple[float, float, float] | None = None
    for lr in sorted(lr_grid):
        for wd in sorted(wd_grid):
            acc = evaluate_candidate(lr, wd)
            table.append((lr, wd, acc))
            if best is None or acc > best[2]:
                best = (lr, wd, acc)
    return HyperparameterChoice(
        learning_rate=best[0],
        weight_decay=best[1],
        val_accuracy=best[2],
        table=tuple(table),
    )
