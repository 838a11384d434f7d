"""LoRA adapters over frozen dense layers: forward pass, analytic gradients,
and backbone merging.

An adapter is a pair (A, B) of trainable low-rank factors with an effective
scale alpha / r, so the weight delta it contributes is (alpha / r) * B @ A.
All functions are value-semantic: inputs are never mutated, results are
fresh arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .linalg import LinAlgError, check_matrix

__all__ = [
    "BackboneLayer",
    "LoraAdapter",
    "init_adapter",
    "delta_weight",
    "forward",
    "lora_gradients",
    "merge_into_backbone",
    "adapter_to_record",
    "adapter_from_record",
    "adapter_to_json",
    "adapter_from_json",
]


@dataclass(frozen=True)
class BackboneLayer:
    """Frozen dense weight W (d x k)."""

    W: np.ndarray

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def k(self) -> int:
        return self.W.shape[1]


@dataclass(frozen=True)
class LoraAdapter:
    """Trainable pair A (r x k), B (d x r) with rank r and scaling numerator alpha."""

    A: np.ndarray
    B: np.ndarray
    rank: int
    alpha: float

    def __post_init__(self):
        if self.A.shape[0] != self.rank or self.B.shape[1] != self.rank:
            raise LinAlgError(
                f"adapter rank {self.rank} inconsistent with factor shapes "
                f"A {self.A.shape}, B {self.B.shape}"
            )
        if self.rank > min(self.d, self.k):
            raise LinAlgError(f"rank {self.rank} exceeds min(d, k) = {min(self.d, self.k)}")

    @property
    def d(self) -> int:
        return self.B.shape[0]

    @property
    def k(self) -> int:
        return self.A.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def init_adapter(d: int, k: int, r: int, alpha: float, rng: np.random.Generator) -> LoraAdapter:
    """Fresh adapter: A ~ N(0, 1/r) entrywise, B = 0, so the initial delta is zero."""
    if r < 1 or r > min(d, k):
        raise LinAlgError(f"rank r={r} out of range [1, {min(d, k)}]")
    A = rng.standard_normal((r, k)) / np.sqrt(r)
    B = np.zeros((d, r))
    return LoraAdapter(A=A, B=B, rank=r, alpha=float(alpha))


def init_adapter_random_b(
    d: int, k: int, r: int, alpha: float, rng: np.random.Generator
) -> LoraAdapter:
    """Sensitivity variant: both factors Gaussian, nonzero initial delta."""
    if r < 1 or r > min(d, k):
        raise LinAlgError(f"rank r={r} out of range [1, {min(d, k)}]")
    A = rng.standard_normal((r, k)) / np.sqrt(r)
    B = rng.standard_normal((d, r)) / np.sqrt(r)
    return LoraAdapter(A=A, B=B, rank=r, alpha=float(alpha))


def delta_weight(adapter: LoraAdapter) -> np.ndarray:
    """Effective weight delta (alpha / r) * B @ A, shape d x k."""
    return adapter.scale * (adapter.B @ adapter.A)


def forward(layer: BackboneLayer, adapter: LoraAdapter, X) -> np.ndarray:
    """Y = W X + (alpha / r) B (A X); the low-rank product BA is never formed."""
    Xm = check_matrix(X, "X")
    if Xm.shape[0] != layer.k:
        raise LinAlgError(f"X has {Xm.shape[0]} rows, layer expects {layer.k}")
    return layer.W @ Xm + adapter.scale * (adapter.B @ (adapter.A @ Xm))


def lora_gradients(
    layer: BackboneLayer, adapter: LoraAdapter, X, dY
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic loss gradients wrt A and B given dY = dL/dY.

    dA = s * B^T dY X^T (r x k), dB = s * dY (A X)^T (d x r), s = alpha / r.
    """
    Xm = check_matrix(X, "X")
    dYm = check_matrix(dY, "dY")
    if dYm.shape != (layer.d, Xm.shape[1]):
        raise LinAlgError(f"dY shape {dYm.shape} != ({layer.d}, {Xm.shape[1]})")
    s = adapter.scale
    dA = s * (adapter.B.T @ dYm @ Xm.T)
    dB = s * (dYm @ (adapter.A @ Xm).T)
    return dA, dB


def merge_into_backbone(layer: BackboneLayer, delta) -> BackboneLayer:
    """Return a new layer with W + delta; the input layer is untouched."""
    D = check_matrix(delta, "delta")
    if D.shape != layer.W.shape:
        raise LinAlgError(f"delta shape {D.shape} != layer shape {layer.W.shape}")
    return BackboneLayer(W=layer.W + D)


# --- serialization (documented wire format) ---------------------------------
#
# An adapter serializes to a JSON object:
#   {"d": int, "k": int, "r": int, "alpha": float,
#    "A": [r*k floats, row-major], "B": [d*r floats, row-major]}


def adapter_to_record(adapter: LoraAdapter) -> dict:
    return {
        "d": adapter.d,
        "k": adapter.k,
        "r": adapter.rank,
        "alpha": adapter.alpha,
        "A": adapter.A.ravel().tolist(),
        "B": adapter.B.ravel().tolist(),
    }


def adapter_from_record(rec: dict) -> LoraAdapter:
    d, k, r = int(rec["d"]), int(rec["k"]), int(rec["r"])
    A = np.asarray(rec["A"], dtype=np.float64).reshape(r, k)
    B = np.asarray(rec["B"], dtype=np.float64).reshape(d, r)
    return LoraAdapter(A=A, B=B, rank=r, alpha=float(rec["alpha"]))


def adapter_to_json(adapter: LoraAdapter) -> str:
    return json.dumps(adapter_to_record(adapter))


def adapter_from_json(text: str) -> LoraAdapter:
    return adapter_from_record(json.loads(text))
