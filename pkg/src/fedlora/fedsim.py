"""Synthetic federated fine-tuning loop.

A linear teacher-student regression stands in for the fine-tuning task:
targets come from a known ground-truth low-rank delta on top of a frozen
backbone, so optimality gaps are exactly measurable. Clients hold Dirichlet-
partitioned index shares of one sample pool, train their adapters locally
for a few minibatch steps, and a strategy-specific server step aggregates.

Round protocol (all strategies):
  1. broadcast backbone + adapters (identical state for every client),
  2. each client trains locally from that state,
  3. the server aggregates the returned adapters,
  4. clients merge any residual/dense correction into their backbone and
     load the new adapters.

Everything is derived deterministically from (seed, round, client), so runs
are bitwise reproducible and resumable from a saved round state.
"""

from __future__ import annotations

import base64
import json
import time
from dataclasses import dataclass, replace

import numpy as np

from .aggregation import (
    ClientUpdate,
    CommReport,
    StrategyConfig,
    comm_cost,
    fedex_aggregate,
    fedit_aggregate,
    fedmomentum_round,
    ffa_aggregate,
    flora_aggregate,
    rolora_aggregate,
    sum_updates,
)
from .linalg import LinAlgError, exact_svd
from .lora import (
    BackboneLayer,
    LoraAdapter,
    adapter_from_record,
    adapter_to_record,
    delta_weight,
    forward,
    init_adapter,
    init_adapter_random_b,
    lora_gradients,
    merge_into_backbone,
)

__all__ = [
    "SyntheticTask",
    "ClientDataset",
    "TrainerConfig",
    "RoundReport",
    "RoundState",
    "dirichlet_partition",
    "make_teacher_student_task",
    "pooled_loss",
    "local_train",
    "run_federated",
    "save_round_state",
    "load_round_state",
]

# sub-stream tags mixed into SeedSequence entropy (arbitrary distinct ints)
_TAG_INIT = 1
_TAG_PARTITION = 2
_TAG_CLIENT = 3
_TAG_SERVER = 4


@dataclass(frozen=True)
class SyntheticTask:
    """Teacher-student regression data, one entry per instrumented layer."""

    base_ws: list[np.ndarray]  # frozen d x k backbones
    teacher_deltas: list[np.ndarray]  # ground-truth d x k rank-r* deltas
    inputs: np.ndarray  # k x N shared input pool
    targets: list[np.ndarray]  # d x N per layer, (W + dW*) X + noise
    noise_std: float

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.base_ws)


@dataclass(frozen=True)
class ClientDataset:
    """Index share of the task's sample pool."""

    indices: np.ndarray

    @property
    def sample_count(self) -> int:
        return int(self.indices.size)


@dataclass(frozen=True)
class TrainerConfig:
    optimizer: str = "adamw"
    learning_rate: float = 3e-4
    local_steps: int = 10
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0 or self.local_steps < 0 or self.batch_size < 1:
            raise ValueError("learning_rate/local_steps must be >= 0, batch_size >= 1")


@dataclass(frozen=True)
class RoundReport:
    round_index: int
    method: str
    loss: float
    spectra: list[np.ndarray]  # per-layer singular values of the aggregated delta
    r_eff: list[int]
    s_values: list[int]
    comm: CommReport
    wall_time: float
    tracked_delta: np.ndarray  # effective weight increment of the tracked layer


@dataclass(frozen=True)
class RoundState:
    """Everything needed to resume a run at the start of a given round."""

    round_index: int
    backbones: list[BackboneLayer]
    adapters: list[LoraAdapter]
    frozen_a: list[np.ndarray]
    initial_effective: np.ndarray


def dirichlet_partition(
    total_samples: int, n: int, beta: float, rng: np.random.Generator
) -> list[ClientDataset]:
    """Split sample indices across n clients with Dir(beta)-drawn proportions.

    Proportions come from normalized Gamma(beta) draws; integer counts by
    flooring with the remainder given to the largest fractional parts; every
    client is guaranteed at least one sample (stolen from the largest share).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if beta <= 0:
        raise ValueError("beta must be > 0")
    if total_samples < n:
        raise ValueError(f"cannot split {total_samples} samples across {n} clients")

    gam = rng.gamma(beta, 1.0, size=n)
    if gam.sum() == 0.0:
        gam = np.ones(n)
    props = gam / gam.sum()

    raw = props * total_samples
    counts = np.floor(raw).astype(int)
    remainder = total_samples - counts.sum()
    frac_order = np.argsort(-(raw - counts), kind="stable")
    for i in range(remainder):
        counts[frac_order[i]] += 1
    while np.any(counts == 0):
        counts[np.argmax(counts)] -= 1
        counts[np.argmin(counts)] += 1

    perm = rng.permutation(total_samples)
    out = []
    offset = 0
    for c in counts:
        out.append(ClientDataset(indices=np.sort(perm[offset : offset + c])))
        offset += c
    return out


def make_teacher_student_task(
    d: int,
    k: int,
    r_star: int,
    n_samples: int,
    noise_std: float,
    rng: np.random.Generator,
    layers: int = 1,
    teacher_scale: float = 0.1,
    cluster_count: int = 1,
    cluster_spread: float = 0.0,
) -> SyntheticTask:
    """Build the regression task: targets = (W + P Q) X + noise per layer.

    The teacher delta P Q is scaled by teacher_scale/sqrt(r_star) so its
    entry standard deviation is teacher_scale regardless of the true rank. cluster_count/cluster_spread optionally
    offset contiguous input blocks by per-block means, so an index-based
    partition also induces input-distribution shift across clients.
    """
    if r_star < 0 or r_star > min(d, k):
        raise LinAlgError(f"r_star={r_star} out of range [0, {min(d, k)}]")
    base_ws = []
    teacher_deltas = []
    inputs = rng.standard_normal((k, n_samples))
    if cluster_count > 1 and cluster_spread > 0.0:
        bounds = np.linspace(0, n_samples, cluster_count + 1).astype(int)
        for c in range(cluster_count):
            mu = cluster_spread * rng.standard_normal((k, 1))
            inputs[:, bounds[c] : bounds[c + 1]] += mu
    targets = []
    for _ in range(layers):
        W = rng.standard_normal((d, k)) / np.sqrt(k)
        if r_star == 0:
            dw = np.zeros((d, k))
        else:
            P = rng.standard_normal((d, r_star))
            Q = rng.standard_normal((r_star, k))
            dw = teacher_scale * (P @ Q) / np.sqrt(r_star)
        noise = noise_std * rng.standard_normal((d, n_samples)) if noise_std > 0 else 0.0
        targets.append((W + dw) @ inputs + noise)
        base_ws.append(W)
        teacher_deltas.append(dw)
    return SyntheticTask(
        base_ws=base_ws,
        teacher_deltas=teacher_deltas,
        inputs=inputs,
        targets=targets,
        noise_std=noise_std,
    )


def pooled_loss(
    task: SyntheticTask, backbones: list[BackboneLayer], adapters: list[LoraAdapter]
) -> float:
    """Mean squared-error loss over the full sample pool, summed across layers."""
    total = 0.0
    N = task.n_samples
    for layer in range(task.n_layers):
        Y = forward(backbones[layer], adapters[layer], task.inputs)
        resid = Y - task.targets[layer]
        total += 0.5 * float(np.sum(resid * resid)) / N
    return total


def _adamw_step(param, grad, m, v, step, cfg: TrainerConfig):
    m *= cfg.beta1
    m += (1 - cfg.beta1) * grad
    v *= cfg.beta2
    v += (1 - cfg.beta2) * grad * grad
    mhat = m / (1 - cfg.beta1**step)
    vhat = v / (1 - cfg.beta2**step)
    param -= cfg.learning_rate * (mhat / (np.sqrt(vhat) + cfg.eps) + cfg.weight_decay * param)


def local_train(
    backbones: list[BackboneLayer],
    adapters: list[LoraAdapter],
    task: SyntheticTask,
    dataset: ClientDataset,
    cfg: TrainerConfig,
    trainable: str,
    rng: np.random.Generator,
    client_id: int = 0,
) -> ClientUpdate:
    """Run cfg.local_steps minibatch steps on the client's index share.

    trainable selects which factors move: "both", "B_only" (FFA-style), or
    "A_only". Optimizer state starts fresh (moments do not persist across
    rounds; they are ill-defined after the server reparameterizes factors).
    The input adapters are not modified.
    """
    if trainable not in ("both", "B_only", "A_only"):
        raise ValueError(f"unknown trainable mask {trainable!r}")
    if dataset.sample_count == 0:
        raise ValueError("dataset is empty")

    As = [ad.A.copy() for ad in adapters]
    Bs = [ad.B.copy() for ad in adapters]
    if cfg.optimizer == "adamw":
        mA = [np.zeros_like(a) for a in As]
        vA = [np.zeros_like(a) for a in As]
        mB = [np.zeros_like(b) for b in Bs]
        vB = [np.zeros_like(b) for b in Bs]

    idx_pool = dataset.indices
    for step in range(1, cfg.local_steps + 1):
        if cfg.batch_size >= idx_pool.size:
            batch = idx_pool
        else:
            batch = idx_pool[np.sort(rng.choice(idx_pool.size, cfg.batch_size, replace=False))]
        X = task.inputs[:, batch]
        bsz = batch.size
        for layer in range(task.n_layers):
            ad = replace(adapters[layer], A=As[layer], B=Bs[layer])
            Y = forward(backbones[layer], ad, X)
            dY = (Y - task.targets[layer][:, batch]) / bsz
            dA, dB = lora_gradients(backbones[layer], ad, X, dY)
            if trainable == "B_only":
                dA = None
            elif trainable == "A_only":
                dB = None
            if cfg.optimizer == "sgd":
                if dA is not None:
                    As[layer] -= cfg.learning_rate * dA
                if dB is not None:
                    Bs[layer] -= cfg.learning_rate * dB
            else:
                if dA is not None:
                    _adamw_step(As[layer], dA, mA[layer], vA[layer], step, cfg)
                if dB is not None:
                    _adamw_step(Bs[layer], dB, mB[layer], vB[layer], step, cfg)

    trained = [
        replace(adapters[layer], A=As[layer], B=Bs[layer]) for layer in range(task.n_layers)
    ]
    return ClientUpdate(adapters=trained, sample_count=dataset.sample_count, client_id=client_id)


def _client_rng(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed, _TAG_CLIENT, round_index, client_id]))
    )


def _server_rng(seed: int, round_index: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed, _TAG_SERVER, round_index]))
    )


def _trainable_mask(method: str, round_index: int) -> str:
    if method == "ffa_lora":
        return "B_only"
    if method == "rolora":
        return "B_only" if round_index % 2 == 0 else "A_only"
    return "both"


def _round_comm(
    method: str,
    shapes: list[tuple[int, int]],
    r: int,
    s_values: list[int],
    n: int,
) -> CommReport:
    """Aggregate comm_cost over layers; layers may select different s."""
    parts = [comm_cost(method, [shape], r, s, n) for shape, s in zip(shapes, s_values)]
    uplink = sum(p.uplink for p in parts)
    downlink = sum(p.downlink for p in parts)
    p_lora = sum(p.p_lora for p in parts)
    p_full = sum(p.p_full for p in parts)
    lam = downlink / (n * p_lora) if method == "fedmomentum" else None
    return CommReport(
        method=method,
        p_lora=p_lora,
        p_full=p_full,
        uplink=uplink,
        downlink=downlink,
        lam=lam,
        extrapolated=parts[0].extrapolated,
    )


def initial_round_state(
    task: SyntheticTask,
    r: int,
    alpha: float,
    seed: int,
    tracked_layer: int = 0,
    init_b_random: bool = False,
) -> RoundState:
    """Stage-1 state: broadcast backbones plus freshly initialized adapters.

    Independent of the aggregation strategy, so comparison runs with the
    same seed share bitwise-identical starting points.
    """
    init_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _TAG_INIT])))
    init_fn = init_adapter_random_b if init_b_random else init_adapter
    adapters = []
    for W in task.base_ws:
        d, k = W.shape
        adapters.append(init_fn(d, k, r, alpha, init_rng))
    backbones = [BackboneLayer(W=W.copy()) for W in task.base_ws]
    initial_effective = backbones[tracked_layer].W + delta_weight(adapters[tracked_layer])
    return RoundState(
        round_index=0,
        backbones=backbones,
        adapters=adapters,
        frozen_a=[ad.A.copy() for ad in adapters],
        initial_effective=initial_effective,
    )


def run_federated(
    task: SyntheticTask,
    strategy: StrategyConfig,
    trainer: TrainerConfig,
    n: int,
    rounds: int,
    seed: int,
    r: int = 8,
    alpha: float = 64.0,
    beta: float = 0.5,
    tracked_layer: int = 0,
    init_b_random: bool = False,
    start_state: RoundState | None = None,
    return_final_state: bool = False,
):
    """Drive the four-stage loop for `rounds` rounds; one RoundReport each.

    Fully deterministic given (seed, configs): the partition, adapter init,
    and every per-round stream are derived from the seed, so two identical
    invocations agree bitwise and a run can resume from a saved RoundState.
    """
    partition = dirichlet_partition(
        task.n_samples,
        n,
        beta,
        np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _TAG_PARTITION]))),
    )
    state = start_state or initial_round_state(
        task, r, alpha, seed, tracked_layer, init_b_random
    )
    backbones = [BackboneLayer(W=b.W.copy()) for b in state.backbones]
    adapters = list(state.adapters)
    frozen_a = [a.copy() for a in state.frozen_a]
    initial_effective = state.initial_effective.copy()
    shapes = [(W.shape[0], W.shape[1]) for W in task.base_ws]
    method = strategy.method

    reports: list[RoundReport] = []
    for t in range(state.round_index, state.round_index + rounds):
        t0 = time.perf_counter()
        try:
            mask = _trainable_mask(method, t)
            updates = [
                local_train(
                    backbones,
                    adapters,
                    task,
                    ds,
                    trainer,
                    mask,
                    _client_rng(seed, t, i),
                    client_id=i,
                )
                for i, ds in enumerate(partition)
            ]
            srng = _server_rng(seed, t)

            if method == "fedmomentum":
                adapters, residuals, decs = fedmomentum_round(updates, strategy, srng)
                backbones = [merge_into_backbone(b, res) for b, res in zip(backbones, residuals)]
                spectra = [dec.sigma for dec in decs]
                r_eff = [dec.r_eff for dec in decs]
                s_values = [dec.s for dec in decs]
            else:
                deltas = sum_updates(updates, strategy.weighting)
                spectra = [exact_svd(dlt).sigma for dlt in deltas]
                r_eff = [r] * len(deltas)
                s_values = [0] * len(deltas)
                if method == "fedit":
                    adapters = fedit_aggregate(updates, strategy.weighting)
                elif method == "flora":
                    merged, adapters = flora_aggregate(updates, strategy.weighting, srng)
                    backbones = [merge_into_backbone(b, m) for b, m in zip(backbones, merged)]
                elif method == "ffa_lora":
                    adapters = ffa_aggregate(updates, frozen_a, strategy.weighting)
                elif method == "rolora":
                    adapters = rolora_aggregate(updates, t, strategy.weighting)
                elif method == "fedex_lora":
                    adapters, residuals = fedex_aggregate(updates, strategy.weighting)
                    backbones = [merge_into_backbone(b, rm) for b, rm in zip(backbones, residuals)]
                else:  # pragma: no cover - StrategyConfig already validated
                    raise ValueError(f"unknown method {method!r}")

            loss = pooled_loss(task, backbones, adapters)
            comm = _round_comm(method, shapes, r, s_values, n)
            tracked = (
                backbones[tracked_layer].W
                + delta_weight(adapters[tracked_layer])
                - initial_effective
            )
        except Exception as exc:
            raise RuntimeError(f"round {t} failed: {exc}") from exc
        reports.append(
            RoundReport(
                round_index=t,
                method=method,
                loss=loss,
                spectra=spectra,
                r_eff=r_eff,
                s_values=s_values,
                comm=comm,
                wall_time=time.perf_counter() - t0,
                tracked_delta=tracked,
            )
        )

    if return_final_state:
        final = RoundState(
            round_index=state.round_index + rounds,
            backbones=backbones,
            adapters=adapters,
            frozen_a=frozen_a,
            initial_effective=initial_effective,
        )
        return reports, final
    return reports


# --- checkpointing -----------------------------------------------------------
#
# RoundState serializes to JSON: scalars in clear, every matrix as a
# base64-encoded little-endian float64 blob with its shape alongside.


def _mat_to_blob(M: np.ndarray) -> dict:
    return {
        "shape": list(M.shape),
        "data": base64.b64encode(np.ascontiguousarray(M, dtype="<f8").tobytes()).decode("ascii"),
    }


def _mat_from_blob(blob: dict) -> np.ndarray:
    data = np.frombuffer(base64.b64decode(blob["data"]), dtype="<f8")
    return data.reshape(blob["shape"]).astype(np.float64)


def save_round_state(state: RoundState, path) -> None:
    rec = {
        "round_index": state.round_index,
        "backbones": [_mat_to_blob(b.W) for b in state.backbones],
        "adapters": [adapter_to_record(a) for a in state.adapters],
        "frozen_a": [_mat_to_blob(a) for a in state.frozen_a],
        "initial_effective": _mat_to_blob(state.initial_effective),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rec, fh)


def load_round_state(path) -> RoundState:
    with open(path, encoding="utf-8") as fh:
        rec = json.load(fh)
    return RoundState(
        round_index=int(rec["round_index"]),
        backbones=[BackboneLayer(W=_mat_from_blob(b)) for b in rec["backbones"]],
        adapters=[adapter_from_record(a) for a in rec["adapters"]],
        frozen_a=[_mat_from_blob(a) for a in rec["frozen_a"]],
        initial_effective=_mat_from_blob(rec["initial_effective"]),
    )
