"""Trainer behavior: regimes, schedules, determinism, checkpoints."""

import math

import numpy as np
import pytest
import torch

from monoedit.core import FilterStatus, ImageKind
from monoedit.training import (
    LR_GRID,
    WD_GRID,
    AdapterCheckpoint,
    DataRegime,
    DivergenceError,
    FeasibilityRegime,
    FrozenBaseError,
    ToyDualEncoder,
    TrainConfig,
    TrainingError,
    _holdout_split,
    TrainExample,
    apply_augmentations,
    assemble_pools,
    classifier_prompt,
    classify,
    evaluate_accuracy,
    load_checkpoint,
    lr_at_step,
    mixed_loss,
    save_checkpoint,
    select_hyperparameters,
    train,
)

from helpers import build_manifest, toy_image, toy_loader


def small_config(**overrides) -> TrainConfig:
    base = dict(
        total_iterations=20,
        learning_rate=5e-3,
        weight_decay=1e-4,
        batch_size=8,
        eval_batch_size=8,
        augmentations=(),
        validation_fraction=0.25,
        validation_interval=5,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


# --------------------------------------------------------------------------
# config and schedule


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(total_iterations=0)
    with pytest.raises(ValueError):
        TrainConfig(total_iterations=10, lambda_mix=1.5)
    with pytest.raises(ValueError):
        TrainConfig(total_iterations=10, warmup_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(total_iterations=10, learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(total_iterations=10, validation_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(total_iterations=10, augmentations=("sepia",))


def test_validation_interval_default_is_seventieth():
    assert TrainConfig(total_iterations=20700).effective_validation_interval == 295
    assert TrainConfig(total_iterations=10).effective_validation_interval == 1
    assert TrainConfig(total_iterations=700, validation_interval=3).effective_validation_interval == 3


def test_lr_schedule_warmup_then_cosine():
    cfg = TrainConfig(total_iterations=200, learning_rate=1e-3, warmup_fraction=0.05)
    warmup = 10
    ramp = [lr_at_step(s, cfg) for s in range(warmup)]
    assert all(b > a for a, b in zip(ramp, ramp[1:]))
    assert ramp[-1] == pytest.approx(1e-3)
    tail = [lr_at_step(s, cfg) for s in range(warmup, 200)]
    assert all(b < a for a, b in zip(tail, tail[1:]))
    assert tail[-1] < 1e-6
    assert tail[-1] >= cfg.min_lr


def test_lr_schedule_no_warmup():
    cfg = TrainConfig(total_iterations=100, learning_rate=1e-3, warmup_fraction=0.0)
    assert lr_at_step(0, cfg) == pytest.approx(1e-3)


# --------------------------------------------------------------------------
# loss and logits


def test_mixed_loss_hand_values():
    assert mixed_loss(1.2, 0.8, 0.5) == pytest.approx(1.0)
    assert mixed_loss(1.2, 0.8, 1.0) == pytest.approx(1.2)
    assert mixed_loss(1.2, 0.8, 0.0) == pytest.approx(0.8)
    with pytest.raises(ValueError):
        mixed_loss(1.0, 1.0, -0.1)


def test_classify_three_class_hand_oracle():
    image = np.array([[1.0, 0.0]])
    text = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    logits = classify(image, text, temperature=0.5)
    assert isinstance(logits, np.ndarray)
    assert np.allclose(logits, [[2.0, 0.0, -2.0]])


def test_classify_scale_invariant_argmax():
    rng = np.random.default_rng(5)
    image = rng.standard_normal((4, 8))
    text = rng.standard_normal((3, 8))
    base = classify(image, text, temperature=0.07)
    scaled = classify(image * 7.5, text * 0.2, temperature=0.07)
    assert np.allclose(base, scaled)
    assert np.array_equal(np.argmax(base, axis=1), np.argmax(scaled, axis=1))


def test_classify_rejects_zero_norm():
    with pytest.raises(ValueError):
        classify(np.zeros((1, 4)), np.ones((2, 4)), temperature=0.07)
    with pytest.raises(ValueError):
        classify(np.ones((1, 4)), np.ones((2, 4)), temperature=0.0)


# --------------------------------------------------------------------------
# the toy encoder


def test_encoder_deterministic_across_constructions():
    enc_a = ToyDualEncoder(base_seed=3)
    enc_b = ToyDualEncoder(base_seed=3)
    images = [toy_image("x", 0), toy_image("y", 1)]
    prompts = ["a photo of abyssinian", "a photo of bengal"]
    with torch.no_grad():
        logits_a = classify(enc_a.encode_image(images), enc_a.encode_text(prompts), 0.07)
        logits_b = classify(enc_b.encode_image(images), enc_b.encode_text(prompts), 0.07)
    assert torch.equal(logits_a, logits_b)
    assert enc_a.base_weight_hash() == enc_b.base_weight_hash()
    assert ToyDualEncoder(base_seed=4).base_weight_hash() != enc_a.base_weight_hash()


def test_encoder_zero_adapter_identity():
    enc = ToyDualEncoder(base_seed=0)
    images = [toy_image("z", 0)]
    with torch.no_grad():
        adapted = enc.encode_image(images)
        raw = enc.image_proj.base(torch.stack([enc._pool_image(images[0])]))
    assert torch.equal(adapted, raw)


def test_encoder_only_adapters_train():
    enc = ToyDualEncoder()
    trainable = {id(p) for p in enc.trainable_parameters()}
    for name, param in enc.named_parameters():
        if id(param) in trainable:
            assert param.requires_grad, name
        else:
            assert not param.requires_grad, name


def test_classifier_prompt_wording():
    assert classifier_prompt("bengal") == "a photo of bengal"


# --------------------------------------------------------------------------
# pools and holdout


def test_assemble_pools_real_only():
    pools = assemble_pools(build_manifest(4, 0), DataRegime.REAL, FeasibilityRegime.MIX)
    assert len(pools.real) == 8
    assert pools.synthetic == ()
    assert pools.class_names == ("abyssinian", "bengal")


def test_assemble_pools_feasibility_split():
    manifest = build_manifest(4, 4)
    feasible = assemble_pools(manifest, DataRegime.SYNTHETIC, FeasibilityRegime.FEASIBLE)
    infeasible = assemble_pools(manifest, DataRegime.SYNTHETIC, FeasibilityRegime.INFEASIBLE)
    mixed = assemble_pools(manifest, DataRegime.SYNTHETIC, FeasibilityRegime.MIX)
    assert len(feasible.synthetic) == 4
    assert len(infeasible.synthetic) == 4
    assert len(mixed.synthetic) == 8
    assert set(feasible.synthetic).isdisjoint(infeasible.synthetic)
    assert set(mixed.synthetic) == set(feasible.synthetic) | set(infeasible.synthetic)


def test_assemble_pools_excludes_unaccepted():
    rejected = build_manifest(4, 4, syn_status=FilterStatus.REJECTED)
    with pytest.raises(TrainingError):
        assemble_pools(rejected, DataRegime.SYNTHETIC, FeasibilityRegime.MIX)
    indeterminate = build_manifest(4, 4, syn_status=FilterStatus.INDETERMINATE)
    with pytest.raises(TrainingError):
        assemble_pools(indeterminate, DataRegime.MIXED, FeasibilityRegime.MIX)


def test_assemble_pools_requires_real_for_mixed():
    manifest = build_manifest(4, 4)
    manifest.images = [img for img in manifest.images if img.kind is ImageKind.SYNTHETIC]
    with pytest.raises(TrainingError):
        assemble_pools(manifest, DataRegime.MIXED, FeasibilityRegime.MIX)


def test_holdout_split_deterministic_partition():
    pool = tuple(TrainExample(f"im{i}", i % 2) for i in range(8))
    train_part, val_part = _holdout_split(pool, 0.25, "real", seed=0)
    again = _holdout_split(pool, 0.25, "real", seed=0)
    assert (train_part, val_part) == again
    assert len(val_part) == 2
    assert set(train_part) | set(val_part) == set(pool)
    assert set(train_part).isdisjoint(val_part)
    other_seed = _holdout_split(pool, 0.25, "real", seed=9)
    assert other_seed != (train_part, val_part)


# --------------------------------------------------------------------------
# augmentations


def test_augmentations_preserve_shape_and_dtype():
    img = toy_image("aug", 1)
    rng = np.random.default_rng(0)
    for name in ("random_resized_crop", "horizontal_flip", "color_jitter", "grayscale"):
        out = apply_augmentations(img, (name,), rng)
        assert out.shape == img.shape
        assert out.dtype == np.uint8


def test_augmentations_deterministic_for_fixed_stream():
    img = toy_image("aug2", 0)
    out_a = apply_augmentations(img, ("random_resized_crop", "color_jitter"), np.random.default_rng(3))
    out_b = apply_augmentations(img, ("random_resized_crop", "color_jitter"), np.random.default_rng(3))
    assert np.array_equal(out_a, out_b)


def test_unknown_augmentation_rejected():
    with pytest.raises(ValueError):
        apply_augmentations(toy_image("a", 0), ("vignette",), np.random.default_rng(0))


# --------------------------------------------------------------------------
# training runs


def test_exact_iteration_count_across_regimes():
    manifest = build_manifest(8, 8)
    counts = {}
    for regime in (DataRegime.REAL, DataRegime.SYNTHETIC, DataRegime.MIXED):
        steps = []
        train(
            manifest,
            ToyDualEncoder(base_seed=0),
            small_config(total_iterations=7),
            regime,
            FeasibilityRegime.MIX,
            image_loader=toy_loader,
            on_step=lambda step, loss, lr: steps.append(step),
        )
        counts[regime] = list(steps)
    assert all(c == list(range(7)) for c in counts.values())


def test_toy_convergence_32_images_300_steps():
    manifest = build_manifest(16, 0)
    encoder = ToyDualEncoder(base_seed=0)
    config = small_config(
        total_iterations=300,
        learning_rate=1e-2,
        batch_size=16,
        validation_fraction=0.0,
        validation_interval=None,
    )
    checkpoint = train(
        manifest, encoder, config, DataRegime.REAL, image_loader=toy_loader
    )
    pools = assemble_pools(manifest, DataRegime.REAL, FeasibilityRegime.MIX)
    images = [toy_loader(manifest.image_by_id(ex.image_id)) for ex in pools.real]
    labels = [ex.label for ex in pools.real]
    prompts = [classifier_prompt(name) for name in pools.class_names]
    acc = evaluate_accuracy(encoder, images, labels, prompts)
    assert len(images) == 32
    assert acc >= 95.0
    assert checkpoint.data_regime is DataRegime.REAL


def test_lambda_one_reproduces_real_only_trajectory():
    manifest = build_manifest(8, 8)
    losses = {}
    finals = {}
    for label, regime, lam in (("mixed", DataRegime.MIXED, 1.0), ("real", DataRegime.REAL, 0.5)):
        trace = []
        ckpt = train(
            manifest,
            ToyDualEncoder(base_seed=1),
            small_config(total_iterations=10, lambda_mix=lam),
            regime,
            FeasibilityRegime.MIX,
            image_loader=toy_loader,
            on_step=lambda step, loss, lr: trace.append(loss),
        )
        losses[label] = list(trace)
        finals[label] = ckpt.final_adapters
    assert losses["mixed"] == losses["real"]
    for name in finals["real"]:
        assert np.array_equal(finals["mixed"][name].a, finals["real"][name].a)
        assert np.array_equal(finals["mixed"][name].b, finals["real"][name].b)


def test_lambda_zero_reproduces_synthetic_only_trajectory():
    manifest = build_manifest(8, 8)
    losses = {}
    for label, regime, lam in (("mixed", DataRegime.MIXED, 0.0), ("syn", DataRegime.SYNTHETIC, 0.5)):
        trace = []
        train(
            manifest,
            ToyDualEncoder(base_seed=2),
            small_config(total_iterations=10, lambda_mix=lam),
            regime,
            FeasibilityRegime.MIX,
            image_loader=toy_loader,
            on_step=lambda step, loss, lr: trace.append(loss),
        )
        losses[label] = list(trace)
    assert losses["mixed"] == losses["syn"]


def test_training_is_deterministic():
    manifest = build_manifest(6, 6)
    runs = []
    for _ in range(2):
        ckpt = train(
            manifest,
            ToyDualEncoder(base_seed=0),
            small_config(total_iterations=8),
            DataRegime.MIXED,
            FeasibilityRegime.MIX,
            image_loader=toy_loader,
        )
        runs.append(ckpt)
    for name in runs[0].final_adapters:
        assert np.array_equal(runs[0].final_adapters[name].b, runs[1].final_adapters[name].b)
    assert runs[0].validation_history == runs[1].validation_history


def test_best_checkpoint_tracks_validation_history():
    manifest = build_manifest(8, 0)
    ckpt = train(
        manifest,
        ToyDualEncoder(base_seed=0),
        small_config(total_iterations=12, validation_interval=3),
        DataRegime.REAL,
        image_loader=toy_loader,
    )
    assert ckpt.validation_history
    accs = [acc for _, acc in ckpt.validation_history]
    assert ckpt.best_val_accuracy == max(accs)
    first_best = next(step for step, acc in ckpt.validation_history if acc == max(accs))
    assert ckpt.best_val_step == first_best
    assert ckpt.manifest_hash
    assert ckpt.base_weight_hash


def test_divergence_raises_with_diagnostics():
    manifest = build_manifest(4, 0)
    # subnormal temperature overflows the float32 logits to inf on step one
    encoder = ToyDualEncoder(base_seed=0, temperature=1e-320)
    with pytest.raises(DivergenceError) as err:
        train(
            manifest,
            encoder,
            small_config(total_iterations=5),
            DataRegime.REAL,
            image_loader=toy_loader,
        )
    assert err.value.step == 0
    assert not math.isfinite(err.value.loss)


def test_frozen_base_guard_detects_drift():
    manifest = build_manifest(4, 0)
    encoder = ToyDualEncoder(base_seed=0)

    def corrupt(step, loss, lr):
        if step == 2:
            with torch.no_grad():
                encoder.image_proj.base.weight.add_(1.0)

    with pytest.raises(FrozenBaseError):
        train(
            manifest,
            encoder,
            small_config(total_iterations=4),
            DataRegime.REAL,
            image_loader=toy_loader,
            on_step=corrupt,
        )


def test_single_mixed_batch_mode_runs():
    manifest = build_manifest(6, 6)
    ckpt = train(
        manifest,
        ToyDualEncoder(base_seed=0),
        small_config(total_iterations=5, single_mixed_batch=True),
        DataRegime.MIXED,
        FeasibilityRegime.MIX,
        image_loader=toy_loader,
    )
    assert isinstance(ckpt, AdapterCheckpoint)


# --------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bit_identical(tmp_path):
    manifest = build_manifest(6, 6)
    encoder = ToyDualEncoder(base_seed=7)
    ckpt = train(
        manifest,
        encoder,
        small_config(total_iterations=6),
        DataRegime.MIXED,
        FeasibilityRegime.FEASIBLE,
        image_loader=toy_loader,
    )
    path = tmp_path / "adapter.npz"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    assert loaded.config == ckpt.config
    assert loaded.data_regime is DataRegime.MIXED
    assert loaded.feasibility_regime is FeasibilityRegime.FEASIBLE
    assert loaded.best_val_accuracy == ckpt.best_val_accuracy
    assert loaded.validation_history == ckpt.validation_history
    assert loaded.manifest_hash == ckpt.manifest_hash
    for name in ckpt.adapters:
        assert np.array_equal(loaded.adapters[name].a, ckpt.adapters[name].a)
        assert np.array_equal(loaded.adapters[name].b, ckpt.adapters[name].b)

    # a fresh encoder with the loaded adapters scores bit-identically
    images = [toy_image("probe", 0), toy_image("probe2", 1)]
    prompts = ["a photo of abyssinian", "a photo of bengal"]
    encoder.load_adapters(ckpt.adapters)
    fresh = ToyDualEncoder(base_seed=7)
    fresh.load_adapters(loaded.adapters)
    with torch.no_grad():
        want = classify(encoder.encode_image(images), encoder.encode_text(prompts), 0.07)
        got = classify(fresh.encode_image(images), fresh.encode_text(prompts), 0.07)
    assert torch.equal(want, got)


# --------------------------------------------------------------------------
# hyperparameter selection


def test_select_hyperparameters_visits_full_grid():
    seen = []

    def fake_eval(lr, wd):
        seen.append((lr, wd))
        return 50.0

    choice = select_hyperparameters(fake_eval)
    assert len(seen) == len(LR_GRID) * len(WD_GRID) == 15
    assert choice.learning_rate == min(LR_GRID)
    assert choice.weight_decay == min(WD_GRID)


def test_select_hyperparameters_ties_prefer_smaller():
    def fake_eval(lr, wd):
        return 90.0 if lr in (1e-4, 1e-3) else 10.0

    choice = select_hyperparameters(fake_eval)
    assert choice.learning_rate == 1e-4
    assert choice.weight_decay == min(WD_GRID)
    assert choice.val_accuracy == 90.0


def test_select_hyperparameters_argmax():
    def fake_eval(lr, wd):
        return 100.0 if (lr, wd) == (5e-4, 1e-4) else 1.0

    choice = select_hyperparameters(fake_eval)
    assert (choice.learning_rate, choice.weight_decay) == (5e-4, 1e-4)
    assert len(choice.table) == 15


def test_evaluate_accuracy_guards():
    enc = ToyDualEncoder()
    with pytest.raises(ValueError):
        evaluate_accuracy(enc, [], [], ["a photo of x"])
    with pytest.raises(ValueError):
        evaluate_accuracy(enc, [toy_image("a", 0)], [0, 1], ["a photo of x"])
