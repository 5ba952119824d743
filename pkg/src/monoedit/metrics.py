"""Quantitative analysis: accuracy gaps, distribution distances, overlap.

The two accuracy gaps compare classifiers trained on different synthetic
pools: ``delta1 = F - IF`` (feasible minus infeasible) and
``delta2 = Mix - (F + IF) / 2`` (mixed pool against the average of the
pure pools).  Distribution similarity between synthetic and real images
uses the Frechet distance on extractor features, per-pair cosine
similarity, and a perceptual distance.  Prediction overlap between two
trained models uses inclusion and Jaccard coefficients over the sets of
correctly-classified test ids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Protocol, Sequence

import numpy as np

from .core import PipelineError

FID_REGULARIZATION = 1e-6


class MetricError(PipelineError):
    """Metric preconditions violated (shape, emptiness, non-finite data)."""


class EmbeddingBackend(Protocol):
    def embed(self, images: Sequence[np.ndarray]) -> np.ndarray: ...


class PerceptualBackend(Protocol):
    def distance(self, a: np.ndarray, b: np.ndarray) -> float: ...


# --------------------------------------------------------------------------
# accuracy and the two gap metrics


def round_half_up(value: float, decimals: int = 1) -> float:
    """Round with ties going toward +inf, matching reported table style."""
    factor = 10.0**decimals
    return float(np.floor(value * factor + 0.5) / factor)


def predictions_from_logits(logits: np.ndarray) -> np.ndarray:
    """Argmax per row; ties resolve to the lowest class index."""
    logits = np.asarray(logits)
    if logits.ndim != 2:
        raise MetricError(f"logits must be 2-D, got shape {logits.shape}")
    return np.argmax(logits, axis=1)


def top1_accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Percentage of predictions equal to their labels."""
    if len(predictions) != len(labels):
        raise MetricError("predictions and labels differ in length")
    if len(predictions) == 0:
        raise MetricError("empty prediction list")
    correct = sum(1 for p, y in zip(predictions, labels) if p == y)
    return 100.0 * correct / len(predictions)


def delta1(f_acc: float, if_acc: float) -> float:
    """Feasible-pool accuracy minus infeasible-pool accuracy."""
    return f_acc - if_acc


def delta2(mix_acc: float, f_acc: float, if_acc: float) -> float:
    """Mixed-pool accuracy minus the mean of the two pure-pool accuracies."""
    return mix_acc - (f_acc + if_acc) / 2.0


@dataclass(frozen=True)
class DeltaRow:
    """One reported result row: accuracies plus the printed gap columns."""

    label: str
    f_acc: float
    if_acc: float
    mix_acc: float
    printed_delta1: float
    printed_delta2: float


@dataclass(frozen=True)
class DeltaCheck:
    """A printed gap cell that disagrees with its recomputation."""

    label: str
    metric: str
    printed: float
    computed: float

    @property
    def diff(self) -> float:
        return self.printed - self.computed

    @property
    def severe(self) -> bool:
        # beyond what one-decimal rounding could explain
        return abs(self.diff) > 0.05 + 1e-9


def check_delta_consistency(rows: Iterable[DeltaRow]) -> list[DeltaCheck]:
    """Recompute both gap columns and list every cell that disagrees.

    A cell agrees when the recomputed value, rounded half-up to one
    decimal, equals the printed number.  Table entries are one-decimal
    figures, so the recomputation runs in exact decimal fractions; float
    arithmetic would flip half-tie cells either way on representation
    noise.  Disagreements carry the raw computed value so callers can
    judge severity.
    """
    findings: list[DeltaCheck] = []
    for row in rows:
        f_acc = Fraction(str(row.f_acc))
        if_acc = Fraction(str(row.if_acc))
        mix_acc = Fraction(str(row.mix_acc))
        for metric, printed, computed in (
            ("delta1", Fraction(str(row.printed_delta1)), f_acc - if_acc),
            ("delta2", Fraction(str(row.printed_delta2)), mix_acc - (f_acc + if_acc) / 2),
        ):
            rounded = Fraction(math.floor(computed * 10 + Fraction(1, 2)), 10)
            if rounded != printed:
                findings.append(DeltaCheck(row.label, metric, float(printed), float(computed)))
    return findings


# --------------------------------------------------------------------------
# prediction-overlap metrics


@dataclass(frozen=True)
class PredictionSet:
    """Ids of test samples a given training regime classified correctly."""

    regime: str
    ids: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "ids", frozenset(self.ids))

    @classmethod
    def from_predictions(
        cls,
        regime: str,
        sample_ids: Sequence[str],
        predictions: Sequence[int],
        labels: Sequence[int],
    ) -> "PredictionSet":
        if not len(sample_ids) == len(predictions) == len(labels):
            raise MetricError("ids, predictions, and labels must align")
        correct = {sid for sid, p, y in zip(sample_ids, predictions, labels) if p == y}
        return cls(regime=regime, ids=frozenset(correct))


def _ids(s: "PredictionSet | Iterable[str]") -> frozenset:
    return s.ids if isinstance(s, PredictionSet) else frozenset(s)


def inclusion_coefficient(a, b) -> float:
    """|A intersect B| / |A|: how much of A's correct set B also covers."""
    set_a, set_b = _ids(a), _ids(b)
    if not set_a:
        raise MetricError("inclusion coefficient undefined for empty A")
    return len(set_a & set_b) / len(set_a)


def jaccard(a, b) -> float:
    """|A intersect B| / |A union B|; symmetric overlap of the two sets."""
    set_a, set_b = _ids(a), _ids(b)
    union = set_a | set_b
    if not union:
        raise MetricError("jaccard undefined when both sets are empty")
    return len(set_a & set_b) / len(union)


def save_prediction_set(pred: PredictionSet, path) -> None:
    import json
    from pathlib import Path

    payload = {"regime": pred.regime, "ids": sorted(pred.ids)}
    Path(path).write_text(json.dumps(payload, indent=0, sort_keys=True) + "\n")


def load_prediction_set(path) -> PredictionSet:
    import json
    from pathlib import Path

    payload = json.loads(Path(path).read_text())
    return PredictionSet(regime=payload["regime"], ids=frozenset(payload["ids"]))


# --------------------------------------------------------------------------
# distribution metrics


@dataclass(frozen=True)
class FeatureCloud:
    """n x d matrix of extractor features for one image collection."""

    features: np.ndarray
    extractor_id: str = ""

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise MetricError(f"features must be n x d, got shape {features.shape}")
        if not np.isfinite(features).all():
            raise MetricError("features contain non-finite entries")
        object.__setattr__(self, "features", features)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, eigenvalues clipped at 0."""
    sym = (matrix + matrix.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(sym)
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def fid(cloud_a: FeatureCloud, cloud_b: FeatureCloud) -> float:
    """Frechet distance between the gaussian fits of two feature clouds.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with sample
    covariances (ddof 1) regularized by 1e-6 on the diagonal and the cross
    term computed through the symmetrized product sqrt(S_a) S_b sqrt(S_a)
    so the square root stays real for small clouds.
    """
    if cloud_a.dim != cloud_b.dim:
        raise MetricError(f"dimension mismatch: {cloud_a.dim} vs {cloud_b.dim}")
    if cloud_a.n < 2 or cloud_b.n < 2:
        raise MetricError("each cloud needs at least 2 samples")
    mu_a = cloud_a.features.mean(axis=0)
    mu_b = cloud_b.features.mean(axis=0)
    reg = FID_REGULARIZATION * np.eye(cloud_a.dim)
    sigma_a = np.cov(cloud_a.features, rowvar=False).reshape(cloud_a.dim, cloud_a.dim) + reg
    sigma_b = np.cov(cloud_b.features, rowvar=False).reshape(cloud_b.dim, cloud_b.dim) + reg

    sqrt_a = _psd_sqrt(sigma_a)
    inner = _psd_sqrt(sqrt_a @ sigma_b @ sqrt_a)
    value = float(
        np.sum((mu_a - mu_b) ** 2)
        + np.trace(sigma_a)
        + np.trace(sigma_b)
        - 2.0 * np.trace(inner)
    )
    if not np.isfinite(value):
        raise MetricError("distance computation produced a non-finite value")
    # tiny negatives are eigensolver noise on near-identical clouds
    return max(value, 0.0) if value > -1e-6 else value


def pairwise_cosine_score(
    backend: EmbeddingBackend,
    synthetic_images: Sequence[np.ndarray],
    real_parents: Sequence[np.ndarray],
) -> float:
    """Mean cosine similarity between each synthetic image and its source."""
    if len(synthetic_images) != len(real_parents):
        raise MetricError("each synthetic image needs exactly one source image")
    if not synthetic_images:
        raise MetricError("empty image list")
    syn = np.asarray(backend.embed(synthetic_images), dtype=np.float64)
    real = np.asarray(backend.embed(real_parents), dtype=np.float64)
    syn_norm = np.linalg.norm(syn, axis=1)
    real_norm = np.linalg.norm(real, axis=1)
    if (syn_norm == 0).any() or (real_norm == 0).any():
        raise MetricError("zero-norm embedding")
    cosines = np.sum(syn * real, axis=1) / (syn_norm * real_norm)
    return float(cosines.mean())


def lpips_score(
    perceptual_backend: PerceptualBackend,
    synthetic_images: Sequence[np.ndarray],
    real_parents: Sequence[np.ndarray],
) -> float:
    """Mean perceptual distance over (synthetic, source) pairs."""
    if len(synthetic_images) != len(real_parents):
        raise MetricError("each synthetic image needs exactly one source image")
    if not synthetic_images:
        raise MetricError("empty image list")
    distances = []
    for syn, real in zip(synthetic_images, real_parents):
        if syn.shape != real.shape:
            raise MetricError(f"image shape mismatch: {syn.shape} vs {real.shape}")
        distances.append(float(perceptual_backend.distance(syn, real)))
    return float(np.mean(distances))


# --------------------------------------------------------------------------
# report formatting


def report_lines(metrics: dict[str, float], decimals: int = 4) -> list[str]:
    """Stable machine-readable lines: ``name<TAB>value`` sorted by name."""
    return [f"{name}\t{metrics[name]:.{decimals}f}" for name in sorted(metrics)]


def render_table(header: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    """Plain aligned text table for human eyes."""
    cells = [list(map(str, header))] + [list(map(str, row)) for row in rows]
    widths = [max(len(row[col]) for row in cells) for col in range(len(header))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * width for width in widths))
    return "\n".join(lines)
