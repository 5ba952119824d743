"""Synthetic-to-real ratio study with nested, seeded subsampling.

For each requested ratio r the runner selects r * n_real accepted
synthetic images and asks the caller's training function for an accuracy.
Selection is a prefix of one fixed permutation, so the ratio-1 subsample
is contained in ratio 2's, and so on: curves across ratios differ only by
the added images, never by reshuffling.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import (
    Feasibility,
    FilterStatus,
    ImageKind,
    Manifest,
    PipelineError,
    Split,
    stable_hash,
)
from .training import FeasibilityRegime


class InsufficientSyntheticError(PipelineError):
    def __init__(self, needed: int, available: int):
        super().__init__(
            f"largest ratio needs {needed} accepted synthetic images, have {available}"
        )
        self.needed = needed
        self.available = available


@dataclass(frozen=True)
class ScalingPoint:
    ratio: int
    n_synthetic: int
    accuracy: float


@dataclass(frozen=True)
class ScalingCurve:
    label: str
    points: tuple[ScalingPoint, ...]


def accepted_synthetic_ids(
    manifest: Manifest, feasibility_regime: FeasibilityRegime = FeasibilityRegime.MIX
) -> tuple[str, ...]:
    """Sorted ids of filter-accepted train-split synthetics for a regime."""
    wanted = {
        FeasibilityRegime.FEASIBLE: {Feasibility.FEASIBLE},
        FeasibilityRegime.INFEASIBLE: {Feasibility.INFEASIBLE},
        FeasibilityRegime.MIX: {Feasibility.FEASIBLE, Feasibility.INFEASIBLE},
    }[FeasibilityRegime(feasibility_regime)]
    ids = []
    for record in manifest.images:
        if (
            record.kind is ImageKind.SYNTHETIC
            and record.split is Split.TRAIN
            and record.filter_status is FilterStatus.ACCEPTED
            and manifest.prompt_by_id(record.prompt_id).feasibility in wanted
        ):
            ids.append(record.image_id)
    return tuple(sorted(ids))


def nested_subsample(ids: Sequence[str], count: int, seed: int = 0) -> tuple[str, ...]:
    """First ``count`` entries of a seeded permutation of the sorted ids.

    Prefixes of one permutation are nested by construction: the result for
    a smaller count is always a subset of the result for a larger one.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    if count > len(ids):
        raise InsufficientSyntheticError(count, len(ids))
    pool = sorted(ids)
    rng = np.random.default_rng(stable_hash(f"scaling-subsample|{seed}"))
    order = rng.permutation(len(pool))
    return tuple(pool[i] for i in order[:count])


def scaling_run(
    manifest: Manifest,
    ratios: Sequence[int],
    train_fn: Callable[[tuple[str, ...], int], float],
    feasibility_regime: FeasibilityRegime = FeasibilityRegime.MIX,
    seed: int = 0,
    plot_path: str | Path | None = None,
    label: str = "",
) -> ScalingCurve:
    """Accuracy as a function of the synthetic-to-real ratio.

    ``train_fn(synthetic_ids, ratio)`` trains under the fixed iteration
    budget on the given synthetic subset (plus whatever real data its
    regime uses) and returns an accuracy.  Feasibility of the subsample
    runs before any training so an impossible request fails fast.
    """
    if not ratios:
        raise ValueError("at least one ratio required")
    if any(int(r) != r or r < 1 for r in ratios):
        raise ValueError(f"ratios must be positive integers, got {list(ratios)}")
    n_real = sum(
        1
        for record in manifest.images
        if record.kind is ImageKind.REAL and record.split is Split.TRAIN
    )
    if n_real == 0:
        raise PipelineError("no real train images; ratios are per real image")
    pool = accepted_synthetic_ids(manifest, feasibility_regime)
    needed = max(ratios) * n_real
    if needed > len(pool):
        raise InsufficientSyntheticError(needed, len(pool))

    points = []
    for ratio in ratios:
        selected = nested_subsample(pool, ratio * n_real, seed)
        accuracy = float(train_fn(selected, int(ratio)))
        points.append(ScalingPoint(ratio=int(ratio), n_synthetic=len(selected), accuracy=accuracy))
    curve = ScalingCurve(label=label or feasibility_regime.value, points=tuple(points))
    if plot_path is not None:
        plot_curves([curve], plot_path)
    return curve


def write_curve(curve: ScalingCurve, path: str | Path) -> None:
    """Tab-separated series: ratio, synthetic count, accuracy."""
    lines = [f"# {curve.label}", "ratio\tn_synthetic\taccuracy"]
    lines += [f"{p.ratio}\t{p.n_synthetic}\t{p.accuracy:.4f}" for p in curve.points]
    Path(path).write_text("\n".join(lines) + "\n")


def plot_curves(curves: Sequence[ScalingCurve], path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for curve in curves:
        ax.plot(
            [p.ratio for p in curve.points],
            [p.accuracy for p in curve.points],
            marker="o",
            label=curve.label,
        )
    ax.set_xlabel("synthetic-to-real ratio")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
