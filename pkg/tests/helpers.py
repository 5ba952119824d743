"""Shared in-memory dataset builders for trainer and metric tests."""

import numpy as np

from monoedit.core import (
    AttributeCategory,
    ClassEntry,
    Feasibility,
    FilterStatus,
    ImageKind,
    ImageRecord,
    Manifest,
    PromptRecord,
    PromptStatus,
    Split,
    stable_hash,
)


def toy_image(image_id: str, class_id: int, size: int = 32) -> np.ndarray:
    """Red-dominant images for class 0, blue-dominant for class 1.

    Channel dominance is a direction cue, so it survives the cosine
    normalization inside the classifier (plain brightness would not).
    """
    rng = np.random.default_rng(stable_hash(f"toy-image|{image_id}"))
    img = rng.integers(0, 80, size=(size, size, 3), dtype=np.int64)
    hot = 0 if class_id == 0 else 2
    img[..., hot] += rng.integers(120, 176, size=(size, size), dtype=np.int64)
    return img.astype(np.uint8)


def build_manifest(
    n_real_per_class: int = 16,
    n_syn_per_class: int = 0,
    syn_status: FilterStatus = FilterStatus.ACCEPTED,
) -> Manifest:
    classes = [
        ClassEntry(class_id=0, name="abyssinian", dataset_id="toy"),
        ClassEntry(class_id=1, name="bengal", dataset_id="toy"),
    ]
    prompts = [
        PromptRecord(
            prompt_id=f"c{cid:03d}-co-{tag}-000",
            class_id=cid,
            category=AttributeCategory.COLOR,
            feasibility=feas,
            keyword=f"{tag}-shade",
            status=PromptStatus.MANUAL_ACCEPTED,
        )
        for cid in (0, 1)
        for tag, feas in (("f", Feasibility.FEASIBLE), ("i", Feasibility.INFEASIBLE))
    ]
    images = []
    for cid in (0, 1):
        for i in range(n_real_per_class):
            images.append(
                ImageRecord(
                    image_id=f"r{cid}_{i}",
                    class_id=cid,
                    path=f"real/r{cid}_{i}.png",
                    split=Split.TRAIN,
                    kind=ImageKind.REAL,
                )
            )
        for i in range(n_syn_per_class):
            feas_tag = "f" if i % 2 == 0 else "i"
            images.append(
                ImageRecord(
                    image_id=f"s{cid}_{i}",
                    class_id=cid,
                    path=f"synthetic/s{cid}_{i}.png",
                    split=Split.TRAIN,
                    kind=ImageKind.SYNTHETIC,
                    parent_real_id=f"r{cid}_{i % n_real_per_class}",
                    prompt_id=f"c{cid:03d}-co-{feas_tag}-000",
                    filter_status=syn_status,
                )
            )
    return Manifest(dataset_id="toy", classes=classes, prompts=prompts, images=images)


def toy_loader(record: ImageRecord) -> np.ndarray:
    return toy_image(record.image_id, record.class_id)
