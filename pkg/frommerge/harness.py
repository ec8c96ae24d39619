"""Synthetic fixtures and k-sweep experiments with geometric ground truth.

Fixtures are built so that every task vector has an exact Frobenius norm,
a controlled pairwise cosine and optionally a fixed rank. Merge quality is
then measured directly through the merging objectives instead of through
downstream accuracy.
"""

import csv
import io
import json
import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from frommerge.checkpoint import Checkpoint, LoraAdapter, StoredTensor, atomic_write_bytes
from frommerge.errors import FromMergeError, ValidationError
from frommerge.lora import LoraMergeConfig, adapter_from_deltas, merge_lora_layer, oracle_lora_optimum
from frommerge.merge import (
    MergeConfig,
    MergeMethod,
    TaskVector,
    extract_task_vector,
    fro_objective,
    fro_weights,
    log_weights,
    merge_task_vectors,
    weight_scale,
)
from frommerge.parallel import map_layers
from frommerge.settings import DEFAULT_ALPHA_GRID, DEFAULT_SEED, DEFAULT_SYNTH_BASE_SIGMA
from frommerge.tensor import Matrix, frobenius_norm, seeded_normal

# Configure logging
logger = logging.getLogger(__name__)

LORA_METHOD = "lora"
CSV_COLUMNS = (
    "layer",
    "method",
    "k",
    "model_index",
    "norm",
    "weight",
    "loss_vs_model",
    "loss_eq1",
    "lora_final_loss",
    "lora_oracle_loss",
    "stop_reason",
)
_INT_COLUMNS = {"model_index"}
_FLOAT_COLUMNS = {"k", "norm", "weight", "loss_vs_model", "loss_eq1", "lora_final_loss", "lora_oracle_loss"}


@dataclass(frozen=True)
class SynthSpec:
    """
    Recipe for a synthetic family of fine-tuned models.

    Every layer of model i gets a task vector of Frobenius norm
    norm_profile[i]; any two task vectors of a layer have cosine overlap.
    """

    layer_shapes: tuple[tuple[str, int, int], ...]
    n_models: int
    norm_profile: tuple[float, ...]
    overlap: float = 0.0
    intrinsic_rank: int | None = None
    seed: int = DEFAULT_SEED
    base_sigma: float = DEFAULT_SYNTH_BASE_SIGMA
    dtype: str = "F64"

    def _direction_count(self) -> int:
        shared = 1 if self.overlap > 0 else 0
        private = self.n_models if self.overlap < 1 else 0
        return shared + private

    def validate(self) -> "SynthSpec":
        """
        Raises:
            ValidationError: On malformed fields or an infeasible overlap/rank combination
        """
        if self.n_models < 1:
            raise ValidationError(f"n_models must be positive, got {self.n_models}")
        if len(self.norm_profile) != self.n_models:
            raise ValidationError(f"norm_profile has {len(self.norm_profile)} entries for {self.n_models} models")
        if any(not np.isfinite(n) or n <= 0 for n in self.norm_profile):
            raise ValidationError("norm_profile entries must be positive")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValidationError(f"overlap must lie in [0, 1], got {self.overlap}")
        if not self.layer_shapes:
            raise ValidationError("at least one layer is required")
        names = [name for name, _, _ in self.layer_shapes]
        if len(set(names)) != len(names):
            raise ValidationError("layer names must be unique")
        for name, d1, d2 in self.layer_shapes:
            if d1 <= 0 or d2 <= 0:
                raise ValidationError(f"layer {name}: dimensions must be positive")
            if self.intrinsic_rank is not None and not 1 <= self.intrinsic_rank <= min(d1, d2):
                raise ValidationError(f"layer {name}: intrinsic_rank {self.intrinsic_rank} exceeds {min(d1, d2)}")
            space = self.intrinsic_rank**2 if self.intrinsic_rank is not None else d1 * d2
            if self._direction_count() > space:
                raise ValidationError(
                    f"layer {name}: {self._direction_count()} orthogonal directions do not fit a space of dimension {space}"
                )
        return self


def default_synth_spec(seed: int = DEFAULT_SEED) -> SynthSpec:
    return SynthSpec(
        layer_shapes=(
            ("layers.0.attn.weight", 16, 12),
            ("layers.0.mlp.weight", 24, 16),
            ("layers.1.attn.weight", 16, 12),
            ("layers.1.mlp.weight", 24, 16),
        ),
        n_models=3,
        norm_profile=(3.0, 2.0, 1.0),
        overlap=0.2,
        seed=seed,
    )


def _orthonormal_columns(rows: int, cols: int, seed: int, label: str) -> Matrix:
    q, _ = np.linalg.qr(seeded_normal(rows, cols, 1.0, seed, label))
    return q


def _unit_directions(spec: SynthSpec, layer: str, d1: int, d2: int) -> list[Matrix]:
    rank = spec.intrinsic_rank
    space = rank * rank if rank is not None else d1 * d2
    basis = _orthonormal_columns(space, spec._direction_count(), spec.seed, f"synth/directions/{layer}")
    shared = basis[:, 0] if spec.overlap > 0 else None
    private = basis[:, 1:] if shared is not None else basis

    vectors = []
    for i in range(spec.n_models):
        if spec.overlap == 1.0:
            v = shared
        elif shared is None:
            v = private[:, i]
        else:
            v = np.sqrt(spec.overlap) * shared + np.sqrt(1.0 - spec.overlap) * private[:, i]
        vectors.append(v)

    if rank is None:
        mats = [v.reshape(d1, d2) for v in vectors]
    else:
        left = _orthonormal_columns(d1, rank, spec.seed, f"synth/left/{layer}")
        right = _orthonormal_columns(d2, rank, spec.seed, f"synth/right/{layer}").T
        mats = [left @ v.reshape(rank, rank) @ right for v in vectors]
    return [m / frobenius_norm(m) for m in mats]


def synthetic_task_vectors(spec: SynthSpec) -> list[TaskVector]:
    """Exact task vectors described by spec."""
    spec.validate()
    deltas: list[dict[str, Matrix]] = [{} for _ in range(spec.n_models)]
    for name, d1, d2 in spec.layer_shapes:
        for i, direction in enumerate(_unit_directions(spec, name, d1, d2)):
            deltas[i][name] = spec.norm_profile[i] * direction
    return [TaskVector(deltas=d, source_label=f"model_{i}") for i, d in enumerate(deltas)]


def generate_synthetic(spec: SynthSpec) -> tuple[Checkpoint, list[Checkpoint]]:
    """
    Build a base checkpoint and one fine-tuned checkpoint per model.

    Returns:
        (base, finetuned) where finetuned[i] = base + θᵢ
    """
    vectors = synthetic_task_vectors(spec)
    base_tensors = {
        name: StoredTensor.from_array(seeded_normal(d1, d2, spec.base_sigma, spec.seed, f"synth/base/{name}"), spec.dtype)
        for name, d1, d2 in spec.layer_shapes
    }
    base = Checkpoint(tensors=base_tensors, metadata={"role": "base", "seed": str(spec.seed)})
    finetuned = []
    for i, vector in enumerate(vectors):
        tensors = {name: tensor.with_matrix(tensor.matrix + vector[name]) for name, tensor in base_tensors.items()}
        metadata = {"role": "finetuned", "model_index": str(i), "seed": str(spec.seed)}
        finetuned.append(Checkpoint(tensors=tensors, metadata=metadata))
    logger.info(
        "Generated %d synthetic models over %d layers (overlap=%s, rank=%s)",
        spec.n_models,
        len(spec.layer_shapes),
        spec.overlap,
        spec.intrinsic_rank,
    )
    return base, finetuned


def synthetic_adapters(spec: SynthSpec, rank: int) -> list[LoraAdapter]:
    """LoRA adapters whose dense deltas are the rank-`rank` truncations of the synthetic task vectors."""
    return [adapter_from_deltas(v.deltas, rank, spec.dtype) for v in synthetic_task_vectors(spec)]


@dataclass(frozen=True)
class SweepConfig:
    merge: MergeConfig = field(default_factory=MergeConfig)
    lora: LoraMergeConfig | None = None
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHA_GRID
    threads: int = 1


@dataclass
class SweepCell:
    layer: str
    method: str
    k: float
    model_index: int | None = None
    norm: float | None = None
    weight: float | None = None
    loss_vs_model: float | None = None
    loss_eq1: float | None = None
    lora_final_loss: float | None = None
    lora_oracle_loss: float | None = None
    stop_reason: str = ""
    norms: list[float] = field(default_factory=list)
    weights: list[float] = field(default_factory=list)
    losses_vs_models: list[float] = field(default_factory=list)
    distance_to_weighted_mean: float | None = None
    alpha_search: list[dict[str, float]] = field(default_factory=list)
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def to_row(self) -> dict[str, Any]:
        return {column: getattr(self, column) for column in CSV_COLUMNS}


@dataclass
class SweepResult:
    k_grid: list[float]
    methods: list[str]
    layers: list[str]
    seed: int
    cells: list[SweepCell] = field(default_factory=list)

    def is_complete(self) -> bool:
        keys = {(c.layer, c.method, c.k) for c in self.cells}
        return len(keys) == len(self.cells) == len(self.k_grid) * len(self.methods) * len(self.layers)

    def cell(self, layer: str, method: str, k: float) -> SweepCell:
        for c in self.cells:
            if (c.layer, c.method, c.k) == (layer, method, k):
                return c
        raise KeyError((layer, method, k))

    def to_dict(self) -> dict[str, Any]:
        return {
            "k_grid": self.k_grid,
            "methods": self.methods,
            "layers": self.layers,
            "seed": self.seed,
            "cells": [asdict(c) for c in self.cells],
        }


def alpha_search(merged: Matrix, thetas: Sequence[Matrix], alphas: Sequence[float]) -> list[dict[str, float]]:
    """Mean squared distance between α·θ* and each θᵢ for every α in the grid."""
    return [
        {"alpha": float(a), "loss": float(np.mean([frobenius_norm(a * merged - t) ** 2 for t in thetas]))}
        for a in alphas
    ]


def _validate_methods(methods: Sequence[str]) -> list[str]:
    allowed = {m.value for m in MergeMethod} | {LORA_METHOD}
    unknown = [m for m in methods if m not in allowed]
    if unknown:
        raise ValidationError(f"unknown sweep methods {unknown}; choose from {sorted(allowed)}")
    return list(methods)


def _merged_layers(
    vectors: Sequence[TaskVector], method: str, k: float, cfg: SweepConfig
) -> dict[str, tuple[Matrix, list[float], dict[str, Any]]]:
    """Merged delta, reported weights and solver extras per layer for one (method, k) cell."""
    out: dict[str, tuple[Matrix, list[float], dict[str, Any]]] = {}
    if method == LORA_METHOD:
        if cfg.lora is None:
            raise ValidationError("the lora method needs a LoRA configuration with rank_out")
        lora_cfg = replace(cfg.lora, k=k).validate()
        for layer in vectors[0].layers():
            thetas = [v[layer] for v in vectors]
            stable, log_scale = log_weights([frobenius_norm(t) for t in thetas], k)
            B, A, trace = merge_lora_layer(thetas, lora_cfg, layer, stable.tolist(), log_scale)
            oracle_loss = oracle_lora_optimum(thetas, stable.tolist(), lora_cfg.rank_out)[1]
            extras = {
                "lora_final_loss": trace.final_loss,
                "lora_oracle_loss": oracle_loss * weight_scale(log_scale) if oracle_loss else 0.0,
                "stop_reason": str(trace.stop_reason),
            }
            normalized, _ = fro_weights([frobenius_norm(t) for t in thetas], k)
            out[layer] = (B @ A, normalized.tolist(), extras)
        return out
    merged, report = merge_task_vectors(vectors, replace(cfg.merge, method=MergeMethod(method), k=k))
    for entry in report.layers:
        out[entry.layer] = (merged[entry.layer], entry.weights, {})
    return out


def _run_cell(vectors: Sequence[TaskVector], method: str, k: float, cfg: SweepConfig) -> list[SweepCell]:
    layers = vectors[0].layers()
    try:
        merged = _merged_layers(vectors, method, k, cfg)
    except FromMergeError as e:
        logger.warning("Sweep cell method=%s k=%s failed: %s", method, k, e)
        return [SweepCell(layer=layer, method=method, k=k, stop_reason="failed", error=str(e)) for layer in layers]

    cells = []
    for layer in layers:
        theta, weights, extras = merged[layer]
        thetas = [v[layer] for v in vectors]
        norms = [frobenius_norm(t) for t in thetas]
        top = int(np.argmax(norms))
        normalized, _ = fro_weights(norms, k)
        weighted_mean = sum(float(w) * t for w, t in zip(normalized, thetas, strict=True))
        losses = [frobenius_norm(theta - t) ** 2 for t in thetas]
        cell = SweepCell(
            layer=layer,
            method=method,
            k=k,
            model_index=top,
            norm=norms[top],
            weight=float(weights[top]) if weights else None,
            loss_vs_model=losses[top],
            loss_eq1=fro_objective(theta, thetas, k),
            norms=norms,
            weights=[float(w) for w in weights],
            losses_vs_models=losses,
            distance_to_weighted_mean=frobenius_norm(theta - weighted_mean),
            **extras,
        )
        if method == MergeMethod.FROM:
            cell.alpha_search = alpha_search(theta, thetas, cfg.alpha_grid)
        cells.append(cell)
    return cells


def sweep_k(
    base: Checkpoint,
    finetuned: Sequence[Checkpoint],
    k_grid: Sequence[float],
    methods: Sequence[str],
    cfg: SweepConfig,
) -> SweepResult:
    """
    Run every method at every k and collect per-layer metrics.

    A failing (method, k) cell is recorded with stop_reason "failed" and the
    sweep carries on. Cells are independent and may run on cfg.threads
    workers; the result is ordered by k, then method, then layer.

    Args:
        base: Base checkpoint
        finetuned: Fine-tuned checkpoints
        k_grid: Exponents to evaluate
        methods: Merge method names, plus "lora" for the low-rank solver
        cfg: Merge, LoRA and threading configuration

    Returns:
        Complete sweep result
    """
    if not k_grid:
        raise ValidationError("k_grid must not be empty")
    if any(not np.isfinite(k) or k < 0 for k in k_grid):
        raise ValidationError(f"k values must be finite and non-negative, got {list(k_grid)}")
    methods = _validate_methods(methods)
    cfg.merge.validate()
    vectors = [extract_task_vector(base, ft, label=f"model_{i}") for i, ft in enumerate(finetuned)]
    if not vectors:
        raise ValidationError("at least one fine-tuned model is required")

    grid = [(float(k), method) for k in k_grid for method in methods]
    logger.info("Sweeping %d k values x %d methods over %d layers", len(k_grid), len(methods), len(base.tensors))
    per_cell = map_layers(lambda item: _run_cell(vectors, item[1], item[0], cfg), grid, cfg.threads)
    result = SweepResult(
        k_grid=[float(k) for k in k_grid], methods=methods, layers=vectors[0].layers(), seed=cfg.merge.seed
    )
    for cells in per_cell:
        result.cells.extend(cells)
    failed = sum(1 for c in result.cells if c.failed)
    logger.info("Sweep finished: %d rows, %d failed", len(result.cells), failed)
    return result


def _format(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def emit_report(result: SweepResult, path: str | Path) -> tuple[Path, Path]:
    """
    Write the CSV rendition to path and the nested JSON rendition next to it.

    Floats are written with their shortest round-trip representation, so
    both files are byte-deterministic and parse back losslessly.

    Returns:
        (csv path, json path)
    """
    csv_path = Path(path)
    json_path = csv_path.with_suffix(".json")
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for cell in result.cells:
        writer.writerow([_format(cell.to_row()[column]) for column in CSV_COLUMNS])
    csv_bytes = buffer.getvalue().encode("utf-8")
    json_bytes = (json.dumps(result.to_dict(), indent=2) + "\n").encode("utf-8")
    atomic_write_bytes(csv_path, csv_bytes)
    atomic_write_bytes(json_path, json_bytes)
    logger.info("Wrote sweep report %s (%d rows) and %s", csv_path, len(result.cells), json_path)
    return csv_path, json_path


def read_report_csv(path: str | Path) -> list[dict[str, Any]]:
    """Parse a CSV written by emit_report; empty fields come back as None."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for raw in csv.DictReader(fh):
            row: dict[str, Any] = {}
            for column, text in raw.items():
                if column in _INT_COLUMNS:
                    row[column] = int(text) if text else None
                elif column in _FLOAT_COLUMNS:
                    row[column] = float(text) if text else None
                else:
                    row[column] = text
            rows.append(row)
    return rows
