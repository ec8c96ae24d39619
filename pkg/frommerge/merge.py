"""Task vectors and merging of fully fine-tuned models.

Implements the Frobenius-norm-weighted closed form together with the
comparison baselines (simple average, largest-norm selection, task
arithmetic, DARE and RegMean).
"""

import logging
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from enum import StrEnum
from typing import Any

import numpy as np

from frommerge.checkpoint import Checkpoint
from frommerge.errors import ShapeError, ValidationError
from frommerge.parallel import map_layers
from frommerge.settings import (
    DEFAULT_ALPHA,
    DEFAULT_DARE_DROP_P,
    DEFAULT_K,
    DEFAULT_METHOD,
    DEFAULT_NORM_SCOPE,
    DEFAULT_RCOND,
    DEFAULT_SEED,
)
from frommerge.tensor import Matrix, axpy_scale, counter_rng, frobenius_norm, pinv

# Configure logging
logger = logging.getLogger(__name__)


class MergeMethod(StrEnum):
    FROM = "from"
    AVERAGE = "average"
    MAX_NORM = "max_norm"
    TASK_ARITHMETIC = "task_arithmetic"
    DARE_FROM = "dare_from"
    DARE_TASK_ARITHMETIC = "dare_task_arithmetic"
    REGMEAN = "regmean"


class NormScope(StrEnum):
    PER_TENSOR = "per_tensor"
    WHOLE_MODEL = "whole_model"


@dataclass(frozen=True)
class TaskVector:
    """Per-layer deltas of one fine-tuned model relative to its base."""

    deltas: dict[str, Matrix]
    source_label: str = ""

    def layers(self) -> list[str]:
        return list(self.deltas)

    def __getitem__(self, layer: str) -> Matrix:
        return self.deltas[layer]


@dataclass(frozen=True)
class MergeConfig:
    method: MergeMethod = MergeMethod(DEFAULT_METHOD)
    k: float = DEFAULT_K
    alpha: float = DEFAULT_ALPHA
    norm_scope: NormScope = NormScope(DEFAULT_NORM_SCOPE)
    dare_drop_p: float = DEFAULT_DARE_DROP_P
    seed: int = DEFAULT_SEED
    rcond: float = DEFAULT_RCOND

    def validate(self) -> "MergeConfig":
        """
        Check the documented ranges.

        Raises:
            ValidationError: If any field is out of range
        """
        try:
            MergeMethod(self.method)
            NormScope(self.norm_scope)
        except ValueError as e:
            raise ValidationError(str(e)) from e
        if not np.isfinite(self.k) or self.k < 0:
            raise ValidationError(f"k must be a finite non-negative number, got {self.k}")
        if not np.isfinite(self.alpha):
            raise ValidationError(f"alpha must be finite, got {self.alpha}")
        if not 0.0 <= self.dare_drop_p < 1.0:
            raise ValidationError(f"dare_drop_p must lie in [0, 1), got {self.dare_drop_p}")
        if not 0 <= self.seed < 2**64:
            raise ValidationError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if not 0.0 < self.rcond < 1.0:
            raise ValidationError(f"rcond must lie in (0, 1), got {self.rcond}")
        return self

    def delta_alpha(self) -> float:
        """α to use in apply_delta; task arithmetic has already scaled its output."""
        if MergeMethod(self.method) in (MergeMethod.TASK_ARITHMETIC, MergeMethod.DARE_TASK_ARITHMETIC):
            return 1.0
        return self.alpha

    def to_dict(self) -> dict[str, Any]:
        return {key: str(value) if isinstance(value, StrEnum) else value for key, value in asdict(self).items()}


@dataclass
class LayerWeights:
    layer: str
    method: str
    norms: list[float]
    weights: list[float]
    fallback: bool = False


@dataclass
class MergeReport:
    """Per-layer norms and weights of a merge, with the config that produced it."""

    layers: list[LayerWeights] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    def fallback_layers(self) -> list[str]:
        return [entry.layer for entry in self.layers if entry.fallback]

    def to_dict(self, include_timings: bool = False) -> dict[str, Any]:
        out: dict[str, Any] = {"config": self.config, "layers": [asdict(entry) for entry in self.layers]}
        if include_timings:
            out["timings"] = self.timings
        return out


def extract_task_vector(base: Checkpoint, finetuned: Checkpoint, label: str = "") -> TaskVector:
    """
    Compute delta[ℓ] = finetuned[ℓ] − base[ℓ] for every tensor.

    Raises:
        ValidationError: If the tensor names or shapes differ, listing the offending layers
    """
    base_names, ft_names = set(base.tensors), set(finetuned.tensors)
    if base_names != ft_names:
        offending = sorted(base_names ^ ft_names)
        raise ValidationError(f"tensor names differ between base and {label or 'fine-tuned model'}: {offending}")
    mismatched = [name for name in base.tensors if base[name].shape != finetuned[name].shape]
    if mismatched:
        raise ValidationError(f"tensor shapes differ between base and {label or 'fine-tuned model'}: {mismatched}")
    deltas = {name: finetuned[name].matrix - base[name].matrix for name in base.tensors}
    return TaskVector(deltas=deltas, source_label=label)


def _check_compatible(vectors: Sequence[TaskVector]) -> list[str]:
    if not vectors:
        raise ValidationError("at least one task vector is required")
    layers = vectors[0].layers()
    for vector in vectors[1:]:
        if set(vector.deltas) != set(layers):
            offending = sorted(set(layers) ^ set(vector.deltas))
            raise ValidationError(f"task vector {vector.source_label!r} has different layers: {offending}")
        for layer in layers:
            if vector[layer].shape != vectors[0][layer].shape:
                raise ShapeError(
                    f"layer {layer}: shape {vector[layer].shape} differs from {vectors[0][layer].shape}"
                )
    return layers


def log_weights(norms: Sequence[float], k: float) -> tuple[np.ndarray, float]:
    """
    Weights ‖θᵢ‖^k split as stable · exp(log_scale) with max(stable) = 1.

    The stable part stays finite for any finite k, while ‖θᵢ‖^k itself can
    overflow. k = 0 and all-zero norms give stable weights of one.

    Args:
        norms: Frobenius norms, one per model
        k: Non-negative exponent

    Returns:
        (stable weights, natural log of the common scale)
    """
    norms_arr = np.asarray(norms, dtype=np.float64)
    if k == 0 or not np.any(norms_arr > 0):
        return np.ones_like(norms_arr), 0.0
    with np.errstate(divide="ignore"):
        logits = k * np.log(norms_arr)
    log_scale = float(logits.max())
    return np.exp(logits - log_scale), log_scale


def weight_scale(log_scale: float) -> float:
    """exp(log_scale), saturating to inf instead of warning on overflow."""
    with np.errstate(over="ignore"):
        return float(np.exp(log_scale))


def fro_weights(norms: Sequence[float], k: float) -> tuple[np.ndarray, bool]:
    """
    Normalized weights ‖θᵢ‖^k / Σⱼ‖θⱼ‖^k, computed as a softmax of k·log‖θᵢ‖.

    Conventions: with k = 0 every model gets weight 1 (0⁰ = 1). With k > 0
    and every norm zero the weights fall back to uniform.

    Args:
        norms: Frobenius norms, one per model
        k: Non-negative exponent

    Returns:
        (weights summing to 1, whether the uniform fallback was used)
    """
    stable, _ = log_weights(norms, k)
    fallback = k != 0 and not np.any(np.asarray(norms, dtype=np.float64) > 0)
    return stable / stable.sum(), fallback


def raw_weights(norms: Sequence[float], k: float) -> np.ndarray:
    """Unnormalized weights ‖θᵢ‖^k with 0⁰ = 1 and uniform ones when every norm is zero; may be inf for huge k."""
    stable, log_scale = log_weights(norms, k)
    scale = weight_scale(log_scale)
    with np.errstate(invalid="ignore"):
        return np.where(stable > 0, stable * scale, 0.0)


def fro_objective(theta: Matrix, thetas: Sequence[Matrix], k: float) -> float:
    """Σᵢ ‖θᵢ‖^k ‖θ − θᵢ‖² for one layer."""
    stable, log_scale = log_weights([frobenius_norm(t) for t in thetas], k)
    total = sum(float(w) * frobenius_norm(theta - t) ** 2 for w, t in zip(stable, thetas, strict=True))
    return total * weight_scale(log_scale) if total else 0.0


def _model_norms(vectors: Sequence[TaskVector], layers: Sequence[str]) -> list[float]:
    return [float(np.sqrt(sum(frobenius_norm(v[layer]) ** 2 for layer in layers))) for v in vectors]


def from_merge(
    vectors: Sequence[TaskVector],
    k: float = DEFAULT_K,
    norm_scope: NormScope | str = NormScope.PER_TENSOR,
    threads: int = 1,
) -> tuple[TaskVector, MergeReport]:
    """
    Closed-form FroM merge θ* = Σᵢ wᵢθᵢ / Σᵢ wᵢ with wᵢ = ‖θᵢ‖_F^k.

    With ``per_tensor`` scope each layer gets its own weights; with
    ``whole_model`` one weight per model is computed from the norm of all of
    that model's layers together.

    Args:
        vectors: Task vectors sharing layer names and shapes
        k: Non-negative exponent
        norm_scope: Where norms are measured
        threads: Per-layer worker count

    Returns:
        (merged task vector, report with per-layer norms and weights)
    """
    layers = _check_compatible(vectors)
    if k < 0:
        raise ValidationError(f"k must be non-negative, got {k}")
    scope = NormScope(norm_scope)
    model_weights: tuple[np.ndarray, bool] | None = None
    model_norms: list[float] = []
    if scope is NormScope.WHOLE_MODEL:
        model_norms = _model_norms(vectors, layers)
        model_weights = fro_weights(model_norms, k)

    def merge_layer(layer: str) -> tuple[Matrix, LayerWeights]:
        thetas = [v[layer] for v in vectors]
        if model_weights is None:
            norms = [frobenius_norm(t) for t in thetas]
            weights, fallback = fro_weights(norms, k)
        else:
            norms = model_norms
            weights, fallback = model_weights
        merged = axpy_scale([(float(w), t) for w, t in zip(weights, thetas, strict=True)])
        return merged, LayerWeights(layer, MergeMethod.FROM.value, list(norms), weights.tolist(), fallback)

    results = map_layers(merge_layer, layers, threads)
    report = MergeReport(layers=[entry for _, entry in results])
    for layer in report.fallback_layers():
        logger.warning("Layer %s: every task vector is zero, using the simple average", layer)
    merged = TaskVector(deltas={layer: m for layer, (m, _) in zip(layers, results, strict=True)}, source_label="from")
    return merged, report


def max_norm_select(vectors: Sequence[TaskVector], norm_scope: NormScope | str = NormScope.PER_TENSOR) -> TaskVector:
    """Pick, per layer or per model, the task vector with the largest norm; ties go to the lowest index."""
    layers = _check_compatible(vectors)
    if NormScope(norm_scope) is NormScope.WHOLE_MODEL:
        winner = int(np.argmax(_model_norms(vectors, layers)))
        return TaskVector(deltas={layer: vectors[winner][layer].copy() for layer in layers}, source_label="max_norm")
    deltas = {}
    for layer in layers:
        winner = int(np.argmax([frobenius_norm(v[layer]) for v in vectors]))
        deltas[layer] = vectors[winner][layer].copy()
    return TaskVector(deltas=deltas, source_label="max_norm")


def task_arithmetic_merge(vectors: Sequence[TaskVector], alpha: float = DEFAULT_ALPHA) -> TaskVector:
    """α·Σᵢ θᵢ layerwise."""
    layers = _check_compatible(vectors)
    deltas = {layer: axpy_scale([(alpha, v[layer]) for v in vectors]) for layer in layers}
    return TaskVector(deltas=deltas, source_label="task_arithmetic")


def dare_transform(vector: TaskVector, drop_p: float, seed: int, stream: str = "") -> TaskVector:
    """
    Randomly drop delta entries with probability drop_p and rescale survivors by 1/(1 − drop_p).

    The mask for each layer comes from the counter-based stream keyed by
    (seed, stream, layer name), so results are reproducible and independent
    of layer order.

    Args:
        vector: Task vector to sparsify
        drop_p: Drop probability in [0, 1)
        seed: Unsigned 64-bit seed
        stream: Extra label separating models that share a seed

    Returns:
        The transformed task vector, equal to the input in expectation
    """
    if not 0.0 <= drop_p < 1.0:
        raise ValidationError(f"drop_p must lie in [0, 1), got {drop_p}")
    scale = 1.0 / (1.0 - drop_p)
    deltas = {}
    for layer, theta in vector.deltas.items():
        keep = counter_rng(seed, f"dare/{stream}/{layer}").random(theta.shape) >= drop_p
        deltas[layer] = np.where(keep, theta * scale, 0.0)
    return TaskVector(deltas=deltas, source_label=vector.source_label)


def _check_gram(gram: Matrix, dim: int, index: int, rtol: float = 1e-8) -> None:
    if gram.ndim != 2 or gram.shape[0] != gram.shape[1]:
        raise ValidationError(f"Gram matrix {index} is not square: {gram.shape}")
    if gram.shape[0] != dim:
        raise ValidationError(f"Gram matrix {index} has dimension {gram.shape[0]}, layer input dimension is {dim}")
    if frobenius_norm(gram - gram.T) > rtol * max(1.0, frobenius_norm(gram)):
        raise ValidationError(f"Gram matrix {index} is not symmetric")


def regmean_merge(
    weights: Sequence[Matrix],
    grams: Sequence[Matrix],
    rcond: float = DEFAULT_RCOND,
    reduce_non_diagonal_ratio: float = 1.0,
) -> Matrix:
    """
    RegMean closed form W* = (Σ Gᵢ)⁺ Σ Gᵢ Wᵢ for one linear layer.

    Args:
        weights: Per-model weights, d_in×d_out (inputs multiply from the left)
        grams: Per-model Gram matrices Gᵢ = XᵢᵀXᵢ, d_in×d_in
        rcond: Pseudoinverse cutoff
        reduce_non_diagonal_ratio: Scale applied to off-diagonal Gram entries

    Raises:
        ValidationError: On asymmetric or mismatched Gram matrices
    """
    if not weights or len(weights) != len(grams):
        raise ValidationError(f"need one Gram matrix per model, got {len(grams)} for {len(weights)} models")
    dim = weights[0].shape[0]
    for index, (w, g) in enumerate(zip(weights, grams, strict=True)):
        if w.shape != weights[0].shape:
            raise ShapeError(f"weight {index} has shape {w.shape}, expected {weights[0].shape}")
        _check_gram(g, dim, index)
    if reduce_non_diagonal_ratio != 1.0:
        shrink = np.full((dim, dim), reduce_non_diagonal_ratio)
        np.fill_diagonal(shrink, 1.0)
        grams = [g * shrink for g in grams]
    gram_sum = axpy_scale([(1.0, g) for g in grams])
    weighted = axpy_scale([(1.0, g @ w) for w, g in zip(weights, grams, strict=True)])
    return pinv(gram_sum, rcond) @ weighted


def _gram_for(layer: str, grams: Sequence[Mapping[str, Matrix]]) -> list[Matrix] | None:
    for key in (layer, layer.removesuffix(".weight")):
        if all(key in g for g in grams):
            return [g[key] for g in grams]
    return None


def regmean_task_vectors(
    vectors: Sequence[TaskVector],
    grams: Sequence[Mapping[str, Matrix]],
    rcond: float = DEFAULT_RCOND,
    reduce_non_diagonal_ratio: float = 1.0,
) -> tuple[TaskVector, MergeReport]:
    """
    RegMean over whole task vectors.

    Layers follow the out×in convention of linear weights, so each delta is
    transposed before the closed form and back afterwards. Layers without a
    Gram entry in every model are simply averaged.
    """
    layers = _check_compatible(vectors)
    if len(grams) != len(vectors):
        raise ValidationError(f"need one Gram container per model, got {len(grams)} for {len(vectors)}")
    deltas: dict[str, Matrix] = {}
    report = MergeReport()
    n = len(vectors)
    for layer in layers:
        thetas = [v[layer] for v in vectors]
        norms = [frobenius_norm(t) for t in thetas]
        layer_grams = _gram_for(layer, grams)
        if layer_grams is None:
            logger.warning("Layer %s has no Gram matrix, using the simple average", layer)
            deltas[layer] = axpy_scale([(1.0 / n, t) for t in thetas])
            report.layers.append(LayerWeights(layer, MergeMethod.AVERAGE.value, norms, [1.0 / n] * n))
            continue
        merged_t = regmean_merge([t.T for t in thetas], layer_grams, rcond, reduce_non_diagonal_ratio)
        deltas[layer] = np.ascontiguousarray(merged_t.T)
        report.layers.append(LayerWeights(layer, MergeMethod.REGMEAN.value, norms, []))
    return TaskVector(deltas=deltas, source_label="regmean"), report


def apply_delta(base: Checkpoint, delta: TaskVector, alpha: float = DEFAULT_ALPHA) -> Checkpoint:
    """
    Return a checkpoint with out[ℓ] = base[ℓ] + α·delta[ℓ], keeping base shapes and dtypes.

    Tensors of the base that the delta does not touch are copied unchanged.

    Raises:
        ValidationError: If the delta names layers the base lacks or shapes differ
    """
    unknown = sorted(set(delta.deltas) - set(base.tensors))
    if unknown:
        raise ValidationError(f"delta has layers missing from the base: {unknown}")
    tensors = {}
    for name, tensor in base.tensors.items():
        if name not in delta.deltas:
            tensors[name] = tensor
            continue
        if delta[name].shape != tensor.matrix.shape:
            raise ShapeError(f"layer {name}: delta shape {delta[name].shape} does not match base {tensor.matrix.shape}")
        tensors[name] = tensor.with_matrix(tensor.matrix + alpha * delta[name])
    return Checkpoint(tensors=tensors, metadata=dict(base.metadata))


ExternalMerger = Callable[[Sequence[TaskVector]], TaskVector]
_MERGERS: dict[str, ExternalMerger] = {}


def register_merger(name: str, fn: ExternalMerger) -> None:
    """
    Register an external merging algorithm (e.g. TIES-Merging or KnOTS).

    Raises:
        ValidationError: If the name clashes with a built-in method or another plug-in
    """
    if name in MergeMethod.__members__.values() or name in _MERGERS:
        raise ValidationError(f"merger {name!r} is already defined")
    _MERGERS[name] = fn
    logger.debug("Registered merger %s", name)


def merge_with_plugin(name: str, vectors: Sequence[TaskVector]) -> TaskVector:
    if name not in _MERGERS:
        raise ValidationError(f"unknown merger {name!r}; registered: {sorted(_MERGERS)}")
    _check_compatible(vectors)
    return _MERGERS[name](vectors)


def _simple_report(
    vectors: Sequence[TaskVector],
    method: MergeMethod,
    weights_for: Callable[[list[float]], list[float]],
    norm_scope: NormScope | str = NormScope.PER_TENSOR,
) -> MergeReport:
    report = MergeReport()
    layers = vectors[0].layers()
    model_norms = _model_norms(vectors, layers) if NormScope(norm_scope) is NormScope.WHOLE_MODEL else None
    for layer in layers:
        norms = model_norms or [frobenius_norm(v[layer]) for v in vectors]
        report.layers.append(LayerWeights(layer, method.value, list(norms), weights_for(norms)))
    return report


def merge_task_vectors(
    vectors: Sequence[TaskVector],
    cfg: MergeConfig,
    grams: Sequence[Mapping[str, Matrix]] | None = None,
    threads: int = 1,
) -> tuple[TaskVector, MergeReport]:
    """
    Merge task vectors with the method named in cfg.

    DARE variants sparsify every task vector first, keyed by model index,
    then merge with FroM or task arithmetic. Task arithmetic already applies
    cfg.alpha; the other methods leave α to apply_delta.

    Args:
        vectors: Task vectors to merge
        cfg: Validated merge configuration
        grams: Per-model Gram containers, required for RegMean
        threads: Per-layer worker count for FroM

    Returns:
        (merged task vector, report)
    """
    cfg.validate()
    _check_compatible(vectors)
    method = MergeMethod(cfg.method)
    logger.info("Merging %d task vectors with %s (k=%s, scope=%s)", len(vectors), method, cfg.k, cfg.norm_scope)
    started = time.perf_counter()

    if method in (MergeMethod.DARE_FROM, MergeMethod.DARE_TASK_ARITHMETIC):
        vectors = [dare_transform(v, cfg.dare_drop_p, cfg.seed, stream=str(i)) for i, v in enumerate(vectors)]

    n = len(vectors)
    if method in (MergeMethod.FROM, MergeMethod.DARE_FROM):
        merged, report = from_merge(vectors, cfg.k, cfg.norm_scope, threads)
        for entry in report.layers:
            entry.method = method.value
    elif method is MergeMethod.AVERAGE:
        merged, report = from_merge(vectors, 0.0, cfg.norm_scope, threads)
        for entry in report.layers:
            entry.method = method.value
    elif method is MergeMethod.MAX_NORM:
        merged = max_norm_select(vectors, cfg.norm_scope)
        report = _simple_report(
            vectors, method, lambda norms: np.eye(n)[int(np.argmax(norms))].tolist(), cfg.norm_scope
        )
    elif method in (MergeMethod.TASK_ARITHMETIC, MergeMethod.DARE_TASK_ARITHMETIC):
        merged = task_arithmetic_merge(vectors, cfg.alpha)
        report = _simple_report(vectors, method, lambda norms: [cfg.alpha] * n)
    else:
        if grams is None:
            raise ValidationError("regmean needs Gram matrices for every model")
        merged, report = regmean_task_vectors(vectors, grams, cfg.rcond)

    report.config = cfg.to_dict()
    report.timings["merge_seconds"] = time.perf_counter() - started
    logger.info("Merged %d layers in %.3fs", len(report.layers), report.timings["merge_seconds"])
    return merged, report
