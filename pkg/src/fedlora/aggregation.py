"""Server-side aggregation of client LoRA updates.

Six strategies share this module:

  * fedmomentum — sum the effective client deltas, sketch-SVD the sum,
    rebuild a rank-r adapter from the major components (balanced sqrt-sigma
    split) and ship the energy-selected residual components for backbone
    merging.
  * fedit      — average A and B separately (biased: mean(B)mean(A) != mean(BA)).
  * flora      — merge the summed delta into the backbone, reinitialize adapters.
  * ffa_lora   — average B only against a frozen shared A (bias-free).
  * rolora     — alternate the trained/averaged factor by round parity.
  * fedex_lora — fedit adapter plus a dense correction that restores exactness.

Also here: the cumulative-energy residual-rank selector and the closed-form
per-round communication accounting for every strategy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import LinAlgError, SvdFactors, exact_svd, randomized_svd
from .lora import LoraAdapter, delta_weight, init_adapter

__all__ = [
    "METHODS",
    "WEIGHTINGS",
    "ClientUpdate",
    "DecomposedUpdate",
    "CommReport",
    "StrategyConfig",
    "client_weights",
    "sum_updates",
    "select_residual_rank",
    "decompose_update",
    "major_factors_to_adapter",
    "fedmomentum_round",
    "fedit_aggregate",
    "flora_aggregate",
    "ffa_aggregate",
    "rolora_aggregate",
    "fedex_aggregate",
    "comm_cost",
]

METHODS = ("fedmomentum", "fedit", "flora", "ffa_lora", "rolora", "fedex_lora")
WEIGHTINGS = ("uniform_mean", "sample_weighted", "unweighted_sum")


@dataclass(frozen=True)
class ClientUpdate:
    """One client's trained per-layer adapters plus its local sample count."""

    adapters: list[LoraAdapter]
    sample_count: int
    client_id: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError(f"client {self.client_id}: sample_count must be >= 1")


@dataclass(frozen=True)
class DecomposedUpdate:
    """SVD split of an aggregated delta into major / residual / discarded parts.

    major_b @ major_a reconstructs the top-r part of the delta (no adapter
    scaling applied). residual_* hold the s energy-selected components past
    rank r; sigma is the full computed spectrum.
    """

    major_b: np.ndarray  # d x r
    major_a: np.ndarray  # r x k
    residual_u: np.ndarray  # d x s
    residual_sigma: np.ndarray  # (s,)
    residual_v: np.ndarray  # k x s
    sigma: np.ndarray  # full spectrum, non-increasing
    r_eff: int
    s: int
    energy_total: float
    energy_retained_fraction: float
    discarded_count: int

    def residual_matrix(self) -> np.ndarray:
        d = self.major_b.shape[0]
        k = self.major_a.shape[1]
        if self.s == 0:
            return np.zeros((d, k))
        return (self.residual_u * self.residual_sigma) @ self.residual_v.T

    def to_record(self) -> dict:
        return {
            "r_eff": self.r_eff,
            "s": self.s,
            "energy_total": self.energy_total,
            "energy_retained_fraction": self.energy_retained_fraction,
            "discarded_count": self.discarded_count,
            "sigma": self.sigma.tolist(),
        }


@dataclass(frozen=True)
class CommReport:
    """Per-round per-client uplink/downlink parameter counts for one strategy."""

    method: str
    p_lora: int
    p_full: int
    uplink: float
    downlink: float
    lam: float | None = None  # (r+s)/(nr), fedmomentum only
    extrapolated: bool = False  # true where the cost model is our extrapolation

    @property
    def total(self) -> float:
        return self.uplink + self.downlink

    def to_record(self) -> dict:
        return {
            "method": self.method,
            "p_lora": self.p_lora,
            "p_full": self.p_full,
            "uplink": self.uplink,
            "downlink": self.downlink,
            "total": self.total,
            "lambda": self.lam,
            "extrapolated": self.extrapolated,
        }


@dataclass(frozen=True)
class StrategyConfig:
    method: str = "fedmomentum"
    tau: float = 0.9999
    balanced_split: bool = True
    keep_residual: bool = True
    weighting: str = "uniform_mean"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if not (0.0 < self.tau <= 1.0):
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.weighting!r}")


def client_weights(updates: list[ClientUpdate], weighting: str) -> np.ndarray:
    if not updates:
        raise ValueError("no client updates")
    n = len(updates)
    if weighting == "uniform_mean":
        return np.full(n, 1.0 / n)
    if weighting == "sample_weighted":
        counts = np.array([u.sample_count for u in updates], dtype=np.float64)
        return counts / counts.sum()
    if weighting == "unweighted_sum":
        return np.ones(n)
    raise ValueError(f"unknown weighting {weighting!r}")


def _check_consistent(updates: list[ClientUpdate]) -> int:
    n_layers = len(updates[0].adapters)
    ref = updates[0].adapters
    for u in updates[1:]:
        if len(u.adapters) != n_layers:
            raise LinAlgError("client updates disagree on layer count")
        for a, b in zip(u.adapters, ref):
            if a.A.shape != b.A.shape or a.B.shape != b.B.shape:
                raise LinAlgError("client adapter shapes mismatch")
    return n_layers


def sum_updates(updates: list[ClientUpdate], weighting: str = "uniform_mean") -> list[np.ndarray]:
    """Weighted sum of effective client deltas, one dense matrix per layer."""
    w = client_weights(updates, weighting)
    n_layers = _check_consistent(updates)
    out = []
    for layer in range(n_layers):
        acc = np.zeros((updates[0].adapters[layer].d, updates[0].adapters[layer].k))
        for wi, u in zip(w, updates):
            acc += wi * delta_weight(u.adapters[layer])
        out.append(acc)
    return out


def select_residual_rank(
    sigma, r: int, tau: float, max_rank: int
) -> tuple[int, int]:
    """Smallest t with cumulative energy E(t) >= tau, clamped to [r, max_rank].

    E(t) = sum_{j<=t} sigma_j^2 / sum_j sigma_j^2. Returns (r_eff, s) with
    s = r_eff - r. tau == 1 means "retain every nonzero component" (avoids
    float-roundoff ambiguity in the cumulative sum). An all-zero spectrum
    yields (r, 0).
    """
    sig = np.asarray(sigma, dtype=np.float64)
    if sig.size and np.any(np.diff(sig) > 1e-12 * max(sig[0], 1.0)):
        raise ValueError("sigma must be non-increasing")
    if np.any(sig < 0):
        raise ValueError("sigma must be non-negative")
    if r < 1:
        raise ValueError("r must be >= 1")
    if not (0.0 < tau <= 1.0):
        raise ValueError("tau must be in (0, 1]")

    energy = sig * sig
    total = float(energy.sum())
    if total == 0.0:
        r_eff = min(r, max_rank)
        return r_eff, 0

    if tau >= 1.0:
        t = int(np.count_nonzero(sig > 0.0))
    else:
        frac = np.cumsum(energy) / total
        hits = np.nonzero(frac >= tau)[0]
        t = int(hits[0]) + 1 if hits.size else sig.size

    r_eff = int(min(max(t, r), max_rank))
    return r_eff, max(r_eff - r, 0)


def decompose_update(
    delta,
    r: int,
    tau: float,
    n: int,
    rng: np.random.Generator,
    balanced_split: bool = True,
) -> DecomposedUpdate:
    """Split an aggregated delta into major rank-r factors + residual triple.

    Uses the rank-nr Gaussian sketch when nr fits within min(d, k), else the
    exact decomposition (mathematically interchangeable; the sketch exists
    for speed). Major factors: balanced B = U_r sqrt(S_r), A = sqrt(S_r) V_r^T,
    or the unbalanced B = U_r S_r, A = V_r^T variant.
    """
    D = np.asarray(delta, dtype=np.float64)
    d, k = D.shape
    c = n * r
    if c <= min(d, k):
        f = randomized_svd(D, c, rng)
    else:
        f = exact_svd(D)
    sigma = f.sigma
    max_rank = min(c, sigma.size)
    r_eff, s = select_residual_rank(sigma, r, tau, max_rank)

    sig_r = sigma[:r]
    if balanced_split:
        root = np.sqrt(sig_r)
        major_b = f.U[:, :r] * root
        major_a = (f.V[:, :r] * root).T
    else:
        major_b = f.U[:, :r] * sig_r
        major_a = f.V[:, :r].T.copy()

    residual_u = f.U[:, r:r_eff].copy()
    residual_sigma = sigma[r:r_eff].copy()
    residual_v = f.V[:, r:r_eff].copy()

    energy = sigma * sigma
    total = float(energy.sum())
    retained = float(energy[:r_eff].sum() / total) if total > 0 else 1.0
    return DecomposedUpdate(
        major_b=major_b,
        major_a=major_a,
        residual_u=residual_u,
        residual_sigma=residual_sigma,
        residual_v=residual_v,
        sigma=sigma.copy(),
        r_eff=r_eff,
        s=s,
        energy_total=total,
        energy_retained_fraction=retained,
        discarded_count=int(sigma.size - r_eff),
    )


def major_factors_to_adapter(
    dec: DecomposedUpdate, rank: int, alpha: float, balanced_split: bool = True
) -> LoraAdapter:
    """Turn raw major factors into an adapter whose effective delta equals them.

    delta_weight applies alpha / r, so the stored factors absorb its inverse:
    split evenly (1/sqrt(scale) each) in the balanced case, entirely into B
    in the unbalanced case.
    """
    scale = alpha / rank
    if balanced_split:
        root = np.sqrt(scale)
        return LoraAdapter(A=dec.major_a / root, B=dec.major_b / root, rank=rank, alpha=alpha)
    return LoraAdapter(A=dec.major_a.copy(), B=dec.major_b / scale, rank=rank, alpha=alpha)


def fedmomentum_round(
    updates: list[ClientUpdate],
    config: StrategyConfig,
    rng: np.random.Generator,
) -> tuple[list[LoraAdapter], list[np.ndarray], list[DecomposedUpdate]]:
    """One aggregation round: sum deltas, decompose per layer, rebuild adapters.

    Returns (new rank-r adapters, per-layer residual matrices to merge into
    client backbones, per-layer decomposition reports). With
    config.keep_residual false the residual matrices are zero (dropped).
    """
    deltas = sum_updates(updates, config.weighting)
    n = len(updates)
    r = updates[0].adapters[0].rank
    alpha = updates[0].adapters[0].alpha
    base_seed = int(rng.integers(0, 2**63))

    adapters: list[LoraAdapter] = []
    residuals: list[np.ndarray] = []
    reports: list[DecomposedUpdate] = []
    for layer, delta in enumerate(deltas):
        # layer index mixed into the seed: per-layer streams are independent,
        # so parallel and serial layer processing give identical results
        layer_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([base_seed, layer])))
        dec = decompose_update(delta, r, config.tau, n, layer_rng, config.balanced_split)
        adapters.append(major_factors_to_adapter(dec, r, alpha, config.balanced_split))
        if config.keep_residual:
            residuals.append(dec.residual_matrix())
        else:
            residuals.append(np.zeros_like(delta))
        reports.append(dec)
    return adapters, residuals, reports


def fedit_aggregate(updates: list[ClientUpdate], weighting: str = "uniform_mean") -> list[LoraAdapter]:
    """Average A and B separately per layer (the biased classic)."""
    w = client_weights(updates, weighting)
    n_layers = _check_consistent(updates)
    out = []
    for layer in range(n_layers):
        ref = updates[0].adapters[layer]
        A = sum(wi * u.adapters[layer].A for wi, u in zip(w, updates))
        B = sum(wi * u.adapters[layer].B for wi, u in zip(w, updates))
        out.append(LoraAdapter(A=A, B=B, rank=ref.rank, alpha=ref.alpha))
    return out


def flora_aggregate(
    updates: list[ClientUpdate],
    weighting: str,
    rng: np.random.Generator,
) -> tuple[list[np.ndarray], list[LoraAdapter]]:
    """Merge-and-reinitialize: summed deltas go to the backbone, adapters restart."""
    deltas = sum_updates(updates, weighting)
    fresh = []
    for adapter in updates[0].adapters:
        fresh.append(init_adapter(adapter.d, adapter.k, adapter.rank, adapter.alpha, rng))
    return deltas, fresh


def ffa_aggregate(
    updates: list[ClientUpdate],
    frozen_a: list[np.ndarray],
    weighting: str = "uniform_mean",
) -> list[LoraAdapter]:
    """Average B only; A stays at its frozen value forever (bias-free)."""
    w = client_weights(updates, weighting)
    n_layers = _check_consistent(updates)
    out = []
    for layer in range(n_layers):
        ref = updates[0].adapters[layer]
        B = sum(wi * u.adapters[layer].B for wi, u in zip(w, updates))
        out.append(LoraAdapter(A=frozen_a[layer].copy(), B=B, rank=ref.rank, alpha=ref.alpha))
    return out


def rolora_aggregate(
    updates: list[ClientUpdate],
    round_index: int,
    weighting: str = "uniform_mean",
) -> list[LoraAdapter]:
    """Alternating-factor averaging: even rounds average B, odd rounds average A.

    The untrained factor is identical across clients by protocol, so the
    averaged product equals the average of products (bias-free).
    """
    w = client_weights(updates, weighting)
    n_layers = _check_consistent(updates)
    train_b = round_index % 2 == 0
    out = []
    for layer in range(n_layers):
        ref = updates[0].adapters[layer]
        if train_b:
            B = sum(wi * u.adapters[layer].B for wi, u in zip(w, updates))
            A = ref.A.copy()
        else:
            A = sum(wi * u.adapters[layer].A for wi, u in zip(w, updates))
            B = ref.B.copy()
        out.append(LoraAdapter(A=A, B=B, rank=ref.rank, alpha=ref.alpha))
    return out


def fedex_aggregate(
    updates: list[ClientUpdate],
    weighting: str = "uniform_mean",
) -> tuple[list[LoraAdapter], list[np.ndarray]]:
    """Separate averaging plus the dense correction that makes it exact.

    R = sum_i w_i dW_i - dW(mean adapter), merged into the backbone so that
    adapter-plus-residual reproduces the weighted client mean exactly.
    """
    adapters = fedit_aggregate(updates, weighting)
    exact = sum_updates(updates, weighting)
    residuals = [ex - delta_weight(ad) for ex, ad in zip(exact, adapters)]
    return adapters, residuals


def comm_cost(
    method: str,
    layer_shapes: list[tuple[int, int]],
    r: int,
    s: int,
    n: int,
) -> CommReport:
    """Per-round per-client communication in parameter counts, closed form.

    p_lora = sum_l r (d_l + k_l), p_full = sum_l d_l k_l.
    fedmomentum's downlink is (r+s)/r * p_lora, i.e. lambda * n * p_lora
    with lambda = (r+s)/(nr). rolora's figure (trained factor only, half
    the payload each way) is our extrapolation and flagged as such.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if not layer_shapes:
        raise ValueError("layer_shapes must be non-empty")
    if r < 1 or n < 1 or s < 0:
        raise ValueError("need r >= 1, n >= 1, s >= 0")
    p_lora = sum(r * (d + k) for d, k in layer_shapes)
    p_full = sum(d * k for d, k in layer_shapes)
    p_b = sum(r * d for d, k in layer_shapes)

    if method == "fedit":
        return CommReport(method, p_lora, p_full, p_lora, p_lora)
    if method == "flora":
        return CommReport(method, p_lora, p_full, p_lora, n * p_lora)
    if method == "ffa_lora":
        return CommReport(method, p_lora, p_full, p_b, p_b)
    if method == "rolora":
        return CommReport(method, p_lora, p_full, p_lora / 2, p_lora / 2, extrapolated=True)
    if method == "fedex_lora":
        return CommReport(method, p_lora, p_full, p_lora, p_lora + p_full)
    # fedmomentum
    lam = (r + s) / (n * r)
    downlink = (r + s) * sum(d + k for d, k in layer_shapes)  # = lam * n * p_lora, exact
    return CommReport(method, p_lora, p_full, p_lora, downlink, lam=lam)
