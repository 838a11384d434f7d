"""Spectrum analytics and report serialization.

Effective rank (entropy form), residual-rank summary statistics, joint PCA
of update trajectories, and the CSV/JSON export used by the CLI. Floats are
printed with 17 significant digits so every CSV parses back bitwise-equal.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .linalg import exact_svd

__all__ = [
    "SpectrumLog",
    "TrajectoryPoint",
    "effective_rank",
    "residual_rank_stats",
    "trajectory_pca",
    "loss_landscape_grid",
    "export_reports",
    "fmt",
]


@dataclass(frozen=True)
class SpectrumLog:
    round_index: int
    layer_id: int
    sigma: np.ndarray
    r_eff: int
    s: int


@dataclass(frozen=True)
class TrajectoryPoint:
    round_index: int
    method: str
    x: float
    y: float
    loss: float  # pooled loss at the projected point, clipped to [0, 1]


def effective_rank(sigma) -> float:
    """exp of the Shannon entropy of the sigma-normalized spectrum, in [1, t]."""
    sig = np.asarray(sigma, dtype=np.float64)
    if np.any(sig < 0):
        raise ValueError("sigma must be non-negative")
    total = sig.sum()
    if total == 0.0:
        raise ValueError("effective_rank undefined for an all-zero spectrum")
    p = sig / total
    nz = p[p > 0]
    return float(np.exp(-np.sum(nz * np.log(nz))))


def residual_rank_stats(logs: list[SpectrumLog]) -> list[tuple[int, float, int, int]]:
    """Per-round (round, mean_s, min_s, max_s) across layers, rounds ascending."""
    if not logs:
        return []
    by_round: dict[int, list[int]] = {}
    for log in logs:
        by_round.setdefault(log.round_index, []).append(log.s)
    out = []
    for rnd in sorted(by_round):
        ss = by_round[rnd]
        if not ss:
            raise ValueError(f"round {rnd} has no layer logs")
        out.append((rnd, float(np.mean(ss)), int(min(ss)), int(max(ss))))
    return out


@dataclass(frozen=True)
class PcaPlane:
    """Top-2 principal directions (flattened-weight space) and the data mean."""

    mean: np.ndarray  # (F,)
    basis: np.ndarray  # (F, 2)
    degenerate: bool


def _pca_plane(flat: np.ndarray) -> PcaPlane:
    mean = flat.mean(axis=0)
    centered = flat - mean
    if not np.any(centered):
        return PcaPlane(mean=mean, basis=np.zeros((flat.shape[1], 2)), degenerate=True)
    f = exact_svd(centered)
    basis = np.zeros((flat.shape[1], 2))
    avail = min(2, f.V.shape[1])
    basis[:, :avail] = f.V[:, :avail]
    return PcaPlane(mean=mean, basis=basis, degenerate=False)


def trajectory_pca(
    deltas: list[np.ndarray],
    round_indices: list[int],
    methods: list[str],
    loss_fn=None,
) -> tuple[list[TrajectoryPoint], PcaPlane]:
    """Project per-round weight increments onto their joint top-2 PCA plane.

    All matrices (across methods and rounds) enter one PCA so trajectories
    are geometrically comparable. loss_fn, if given, maps a delta matrix to
    a pooled loss; point losses are clipped to [0, 1] for landscape export.
    Degenerate input (all points identical) yields origin coordinates.
    """
    if len(deltas) < 2:
        raise ValueError("need at least 2 matrices")
    shape = deltas[0].shape
    for m in deltas[1:]:
        if m.shape != shape:
            raise ValueError("all matrices must share one shape")
    if not (len(deltas) == len(round_indices) == len(methods)):
        raise ValueError("deltas, round_indices, methods must align")

    flat = np.stack([m.ravel() for m in deltas])
    plane = _pca_plane(flat)
    coords = (flat - plane.mean) @ plane.basis

    points = []
    for i, (rnd, meth) in enumerate(zip(round_indices, methods)):
        if loss_fn is None:
            loss = 0.0
        else:
            loss = float(np.clip(loss_fn(deltas[i]), 0.0, 1.0))
        points.append(
            TrajectoryPoint(
                round_index=rnd, method=meth, x=float(coords[i, 0]), y=float(coords[i, 1]), loss=loss
            )
        )
    return points, plane


def loss_landscape_grid(
    plane: PcaPlane,
    points: list[TrajectoryPoint],
    loss_fn,
    shape: tuple[int, int],
    resolution: int = 41,
    margin: float = 0.2,
) -> list[tuple[int, int, float, float, float]]:
    """Evaluate loss_fn over the plane's bounding box of the trajectory points.

    The box is expanded by `margin` on each side; losses are clipped to
    [0, 1]. Returns (i, j, x, y, loss) rows.
    """
    if not points:
        return []
    xs = np.array([p.x for p in points])
    ys = np.array([p.y for p in points])
    span_x = max(xs.max() - xs.min(), 1e-12)
    span_y = max(ys.max() - ys.min(), 1e-12)
    gx = np.linspace(xs.min() - margin * span_x, xs.max() + margin * span_x, resolution)
    gy = np.linspace(ys.min() - margin * span_y, ys.max() + margin * span_y, resolution)
    rows = []
    for i, x in enumerate(gx):
        for j, y in enumerate(gy):
            vec = plane.mean + x * plane.basis[:, 0] + y * plane.basis[:, 1]
            loss = float(np.clip(loss_fn(vec.reshape(shape)), 0.0, 1.0))
            rows.append((i, j, float(x), float(y), loss))
    return rows


def fmt(x: float) -> str:
    """17-significant-digit float formatting: parses back bitwise-equal."""
    return format(float(x), ".17g")


def _write_csv(path: str, header: list[str], rows) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(row) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc


def export_reports(
    reports_by_method: dict[str, list],
    out_dir: str,
    run_config: dict,
    trajectory_rows: list[TrajectoryPoint] | None = None,
    landscape_rows: list | None = None,
) -> list[str]:
    """Write the full metrics bundle under out_dir; returns written paths.

    Files: loss_curve.csv, spectra.csv, residual_rank.csv, comm_cost.json,
    trajectory.csv, landscape_grid.csv, run_config.json. Per-round wall
    times and timestamps go only into run_config.json so the CSVs are
    byte-stable across identical runs.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []

    path = os.path.join(out_dir, "loss_curve.csv")
    rows = (
        (str(rep.round_index), method, fmt(rep.loss))
        for method, reps in reports_by_method.items()
        for rep in reps
    )
    _write_csv(path, ["round", "method", "loss"], rows)
    written.append(path)

    path = os.path.join(out_dir, "spectra.csv")
    rows = (
        (str(rep.round_index), method, str(layer), str(i), fmt(sig))
        for method, reps in reports_by_method.items()
        for rep in reps
        for layer, spec in enumerate(rep.spectra)
        for i, sig in enumerate(spec)
    )
    _write_csv(path, ["round", "method", "layer", "index", "sigma"], rows)
    written.append(path)

    path = os.path.join(out_dir, "residual_rank.csv")
    rank_rows = []
    for method, reps in reports_by_method.items():
        logs = [
            SpectrumLog(rep.round_index, layer, rep.spectra[layer], rep.r_eff[layer], s)
            for rep in reps
            for layer, s in enumerate(rep.s_values)
        ]
        for rnd, mean_s, min_s, max_s in residual_rank_stats(logs):
            rank_rows.append((str(rnd), method, fmt(mean_s), str(min_s), str(max_s)))
    _write_csv(path, ["round", "method", "mean_s", "min_s", "max_s"], rank_rows)
    written.append(path)

    path = os.path.join(out_dir, "comm_cost.json")
    comm = [
        {"round": rep.round_index, **rep.comm.to_record()}
        for method, reps in reports_by_method.items()
        for rep in reps
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(comm, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(path)

    path = os.path.join(out_dir, "trajectory.csv")
    rows = (
        (str(p.round_index), p.method, fmt(p.x), fmt(p.y), fmt(p.loss))
        for p in (trajectory_rows or [])
    )
    _write_csv(path, ["round", "method", "x", "y", "loss"], rows)
    written.append(path)

    path = os.path.join(out_dir, "landscape_grid.csv")
    rows = (
        (str(i), str(j), fmt(x), fmt(y), fmt(loss)) for i, j, x, y, loss in (landscape_rows or [])
    )
    _write_csv(path, ["i", "j", "x", "y", "loss"], rows)
    written.append(path)

    path = os.path.join(out_dir, "run_config.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(run_config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(path)
    return written
