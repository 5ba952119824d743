"""Low-rank adapters for frozen linear layers.

The adapted layer computes ``h = W0 x + s * B A x`` where ``W0`` stays
frozen, ``A`` (rank x in) and ``B`` (out x rank) are the only trainable
pieces, and ``s`` scales the update.  ``B`` starts at zero, so a freshly
attached adapter leaves the base layer's output bit-identical.

Two scaling conventions coexist in the wild: ``s = alpha / rank`` (the
common normalization) and ``s = 1`` (the update applied verbatim).  Both
are supported; the normalized form is the default.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class LowRankAdapter:
    """Weights of one adapter: ``a`` is rank x in, ``b`` is out x rank."""

    a: np.ndarray
    b: np.ndarray
    rank: int
    alpha: float
    literal_scale: bool = field(default=False)

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be positive, got {self.rank}")
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError("adapter factors must be 2-D matrices")
        if a.shape[0] != self.rank:
            raise ValueError(f"a has {a.shape[0]} rows, expected rank {self.rank}")
        if b.shape[1] != self.rank:
            raise ValueError(f"b has {b.shape[1]} columns, expected rank {self.rank}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def scale(self) -> float:
        return 1.0 if self.literal_scale else self.alpha / self.rank

    @property
    def in_features(self) -> int:
        return self.a.shape[1]

    @property
    def out_features(self) -> int:
        return self.b.shape[0]


def init_adapter(
    in_features: int,
    out_features: int,
    rank: int,
    alpha: float,
    rng: np.random.Generator | None = None,
    literal_scale: bool = False,
) -> LowRankAdapter:
    """Fresh adapter: gaussian ``a``, zero ``b`` (identity at step 0)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    a = rng.standard_normal((rank, in_features)) * 0.02
    b = np.zeros((out_features, rank))
    return LowRankAdapter(a=a, b=b, rank=rank, alpha=alpha, literal_scale=literal_scale)


def adapted_forward(w0: np.ndarray, adapter: LowRankAdapter, x: np.ndarray) -> np.ndarray:
    """``W0 x + s B A x`` for a single input vector or a column stack."""
    w0 = np.asarray(w0, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w0.ndim != 2:
        raise ValueError("w0 must be a 2-D matrix")
    if w0.shape[1] != adapter.in_features:
        raise ValueError(
            f"w0 maps from {w0.shape[1]} features but adapter expects {adapter.in_features}"
        )
    if w0.shape[0] != adapter.out_features:
        raise ValueError(
            f"w0 maps to {w0.shape[0]} features but adapter produces {adapter.out_features}"
        )
    if x.shape[0] != w0.shape[1]:
        raise ValueError(f"input has {x.shape[0]} features, expected {w0.shape[1]}")
    return w0 @ x + adapter.scale * (adapter.b @ (adapter.a @ x))


class LoraLinear(nn.Module):
    """A frozen ``nn.Linear`` plus a trainable low-rank residual.

    Only ``lora_a`` and ``lora_b`` receive gradients; the wrapped layer's
    weight and bias are frozen at attach time.  ``lora_b`` is zero at init.
    """

    def __init__(
        self,
        base: nn.Linear,
        rank: int,
        alpha: float,
        literal_scale: bool = False,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if rank < 1:
            raise ValueError(f"rank must be positive, got {rank}")
        self.base = base
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)
        self.rank = rank
        self.alpha = float(alpha)
        self.literal_scale = literal_scale
        self.scaling = 1.0 if literal_scale else self.alpha / rank
        a = torch.empty(rank, base.in_features)
        a.normal_(mean=0.0, std=0.02, generator=generator)
        self.lora_a = nn.Parameter(a)
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        update = nn.functional.linear(nn.functional.linear(x, self.lora_a), self.lora_b)
        return self.base(x) + self.scaling * update

    def adapter_weights(self) -> LowRankAdapter:
        """Snapshot the trainable factors as a plain-array adapter."""
        return LowRankAdapter(
            a=self.lora_a.detach().cpu().numpy().astype(np.float64),
            b=self.lora_b.detach().cpu().numpy().astype(np.float64),
            rank=self.rank,
            alpha=self.alpha,
            literal_scale=self.literal_scale,
        )

    def load_adapter_weights(self, adapter: LowRankAdapter) -> None:
        if adapter.rank != self.rank:
            raise ValueError(f"adapter rank {adapter.rank} != layer rank {self.rank}")
        if adapter.in_features != self.base.in_features:
            raise ValueError("adapter input width does not match the wrapped layer")
        if adapter.out_features != self.base.out_features:
            raise ValueError("adapter output width does not match the wrapped layer")
        with torch.no_grad():
            self.lora_a.copy_(torch.from_numpy(adapter.a).float())
            self.lora_b.copy_(torch.from_numpy(adapter.b).float())

    def reset_adapter(self, generator: torch.Generator | None = None) -> None:
        with torch.no_grad():
            self.lora_a.normal_(mean=0.0, std=0.02, generator=generator)
            self.lora_b.zero_()
