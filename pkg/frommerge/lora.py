"""Merging LoRA adapters by alternating minimization of the weighted low-rank objective.

For one layer the objective is L(A, B) = Σᵢ wᵢ ‖BA − θᵢ‖_F² with
wᵢ = ‖θᵢ‖_F^k. Holding A fixed the optimal B has a closed form and vice
versa, so the solver alternates the two exact half-steps from a seeded
normal A and stops early once the loss starts to rise.
"""

import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Any

import numpy as np

from frommerge.checkpoint import Checkpoint, LoraAdapter, LoraEntry
from frommerge.errors import ShapeError, ValidationError
from frommerge.merge import log_weights, weight_scale
from frommerge.parallel import map_layers
from frommerge.settings import (
    CONVERGED_REL_TOL,
    DEFAULT_INIT_SIGMA,
    DEFAULT_LORA_APPLY_ALPHA,
    DEFAULT_LORA_K,
    DEFAULT_LOSS_TOL,
    DEFAULT_MAX_ITERS,
    DEFAULT_RCOND,
    DEFAULT_SEED,
)
from frommerge.tensor import Matrix, axpy_scale, frobenius_norm, pinv, seeded_normal, svd

# Configure logging
logger = logging.getLogger(__name__)


class StopReason(StrEnum):
    LOSS_INCREASE = "loss_increase"
    MAX_ITERS = "max_iters"
    CONVERGED = "converged"


@dataclass(frozen=True)
class LoraMergeConfig:
    rank_out: int
    k: float = DEFAULT_LORA_K
    max_iters: int = DEFAULT_MAX_ITERS
    init_sigma: float = DEFAULT_INIT_SIGMA
    seed: int = DEFAULT_SEED
    rcond: float = DEFAULT_RCOND
    loss_tol: float = DEFAULT_LOSS_TOL
    converged_tol: float = CONVERGED_REL_TOL

    def validate(self) -> "LoraMergeConfig":
        if self.rank_out <= 0:
            raise ValidationError(f"rank_out must be positive, got {self.rank_out}")
        if not np.isfinite(self.k) or self.k < 0:
            raise ValidationError(f"k must be a finite non-negative number, got {self.k}")
        if self.max_iters <= 0:
            raise ValidationError(f"max_iters must be positive, got {self.max_iters}")
        if self.init_sigma <= 0:
            raise ValidationError(f"init_sigma must be positive, got {self.init_sigma}")
        if not 0 <= self.seed < 2**64:
            raise ValidationError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if not 0.0 < self.rcond < 1.0:
            raise ValidationError(f"rcond must lie in (0, 1), got {self.rcond}")
        if self.loss_tol < 0 or self.converged_tol < 0:
            raise ValidationError("loss_tol and converged_tol must be non-negative")
        return self


@dataclass
class LoraMergeTrace:
    layer: str
    losses: list[float] = field(default_factory=list)
    stop_reason: StopReason = StopReason.MAX_ITERS
    final_loss: float = float("nan")
    oracle_loss: float | None = None
    seconds: float = 0.0
    log_weight_scale: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "layer": self.layer,
            "losses": self.losses,
            "stop_reason": str(self.stop_reason),
            "final_loss": self.final_loss,
            "oracle_loss": self.oracle_loss,
            "log_weight_scale": self.log_weight_scale,
        }


def _weighted_sums(thetas: Sequence[Matrix], weights: Sequence[float]) -> tuple[float, Matrix]:
    if len(thetas) != len(weights) or not thetas:
        raise ValidationError(f"need one weight per task vector, got {len(weights)} for {len(thetas)}")
    return float(np.sum(weights)), axpy_scale([(float(w), t) for w, t in zip(weights, thetas, strict=True)])


def lora_objective(A: Matrix, B: Matrix, thetas: Sequence[Matrix], weights: Sequence[float]) -> float:
    """
    Σᵢ wᵢ ‖BA − θᵢ‖_F².

    Raises:
        ShapeError: If BA is not conformable with every θᵢ
    """
    if B.shape[1] != A.shape[0]:
        raise ShapeError(f"cannot multiply B{B.shape} by A{A.shape}")
    product = B @ A
    total = 0.0
    for w, theta in zip(weights, thetas, strict=True):
        if theta.shape != product.shape:
            raise ShapeError(f"BA has shape {product.shape}, task vector has {theta.shape}")
        total += float(w) * frobenius_norm(product - theta) ** 2
    return total


def lora_gradients(
    A: Matrix, B: Matrix, thetas: Sequence[Matrix], weights: Sequence[float]
) -> tuple[Matrix, Matrix]:
    """
    Analytic gradients of the objective.

    ∂L/∂B = 2Σwᵢ BAAᵀ − 2Σwᵢ θᵢAᵀ and ∂L/∂A = 2Σwᵢ BᵀBA − 2Σwᵢ Bᵀθᵢ.

    Returns:
        (∂L/∂B, ∂L/∂A)
    """
    w_sum, theta_sum = _weighted_sums(thetas, weights)
    residual = w_sum * (B @ A) - theta_sum
    return 2.0 * residual @ A.T, 2.0 * B.T @ residual


def update_B(A: Matrix, thetas: Sequence[Matrix], weights: Sequence[float], rcond: float = DEFAULT_RCOND) -> Matrix:
    """B = (Σwᵢ θᵢAᵀ)(Σwᵢ AAᵀ)⁺, the exact minimizer over B for fixed A."""
    w_sum, theta_sum = _weighted_sums(thetas, weights)
    if theta_sum.shape[1] != A.shape[1]:
        raise ShapeError(f"A{A.shape} does not match task vectors of shape {theta_sum.shape}")
    return (theta_sum @ A.T) @ pinv(w_sum * (A @ A.T), rcond)


def update_A(B: Matrix, thetas: Sequence[Matrix], weights: Sequence[float], rcond: float = DEFAULT_RCOND) -> Matrix:
    """A = (Σwᵢ BᵀB)⁺(Σwᵢ Bᵀθᵢ), the exact minimizer over A for fixed B."""
    w_sum, theta_sum = _weighted_sums(thetas, weights)
    if theta_sum.shape[0] != B.shape[0]:
        raise ShapeError(f"B{B.shape} does not match task vectors of shape {theta_sum.shape}")
    return pinv(w_sum * (B.T @ B), rcond) @ (B.T @ theta_sum)


def _check_layer(thetas: Sequence[Matrix], rank: int, layer_name: str) -> tuple[int, int]:
    if not thetas:
        raise ValidationError(f"layer {layer_name}: no task vectors to merge")
    shape = thetas[0].shape
    if any(t.ndim != 2 or t.shape != shape for t in thetas):
        raise ShapeError(f"layer {layer_name}: task vectors must share one 2-D shape")
    d1, d2 = shape
    if not 1 <= rank <= min(d1, d2):
        raise ValidationError(f"layer {layer_name}: rank {rank} is outside [1, {min(d1, d2)}] for shape {shape}")
    return d1, d2


def _stable_weights(weights: Sequence[float], log_scale: float) -> tuple[list[float], float]:
    w = np.asarray(weights, dtype=np.float64)
    top = float(w.max()) if w.size else 0.0
    if not np.isfinite(top):
        raise ValidationError("weights must be finite; pass stable weights with a log scale instead")
    if top <= 0:
        return w.tolist(), log_scale
    return (w / top).tolist(), log_scale + float(np.log(top))


def merge_lora_layer(
    thetas: Sequence[Matrix],
    cfg: LoraMergeConfig,
    layer_name: str,
    weights: Sequence[float] | None = None,
    log_weight_scale: float = 0.0,
) -> tuple[Matrix, Matrix, LoraMergeTrace]:
    """
    Alternating minimization for one layer.

    A starts from N(0, σ²) keyed by (seed, layer_name). Each iteration
    updates B then A and evaluates the loss once. If the loss rises by more
    than loss_tol the previous pair is returned; the loop also stops after
    max_iters or when the relative change drops below converged_tol.

    The solver runs on weights rescaled so the largest is 1; the minimizer
    does not depend on a common factor. Reported losses are in the units of
    the true weights and saturate to inf when those are not representable.

    Args:
        thetas: Dense task vectors for this layer, all d₁×d₂
        cfg: Solver configuration
        layer_name: Names the RNG stream and the trace
        weights: Per-model weights; defaults to ‖θᵢ‖_F^k
        log_weight_scale: True weights are weights · exp(log_weight_scale)

    Returns:
        (B, A, trace) with trace.final_loss equal to the objective at (A, B)
    """
    started = time.perf_counter()
    d1, d2 = _check_layer(thetas, cfg.rank_out, layer_name)
    if weights is None:
        stable, log_scale = log_weights([frobenius_norm(t) for t in thetas], cfg.k)
        weights = stable.tolist()
        log_weight_scale += log_scale
    weights, log_weight_scale = _stable_weights(weights, log_weight_scale)
    scale = weight_scale(log_weight_scale)
    trace = LoraMergeTrace(layer=layer_name, log_weight_scale=log_weight_scale)

    A = seeded_normal(cfg.rank_out, d2, cfg.init_sigma, cfg.seed, f"lora-init/{layer_name}")
    B = np.zeros((d1, cfg.rank_out))
    previous: float | None = None
    for iteration in range(cfg.max_iters):
        B_next = update_B(A, thetas, weights, cfg.rcond)
        A_next = update_A(B_next, thetas, weights, cfg.rcond)
        loss = lora_objective(A_next, B_next, thetas, weights)
        if previous is not None and loss > previous + cfg.loss_tol / scale:
            trace.stop_reason = StopReason.LOSS_INCREASE
            logger.debug("Layer %s: loss rose to %.6e at iteration %d, stopping", layer_name, loss * scale, iteration)
            break
        trace.losses.append(_rescale(loss, scale))
        A, B = A_next, B_next
        if previous is not None and abs(previous - loss) <= cfg.converged_tol * max(abs(previous), 1e-300):
            trace.stop_reason = StopReason.CONVERGED
            break
        previous = loss

    trace.final_loss = trace.losses[-1]
    trace.seconds = time.perf_counter() - started
    logger.debug(
        "Layer %s: %d iterations, final loss %.6e (%s)", layer_name, len(trace.losses), trace.final_loss, trace.stop_reason
    )
    return B, A, trace


def _rescale(loss: float, scale: float) -> float:
    return loss * scale if loss else 0.0


def oracle_lora_optimum(thetas: Sequence[Matrix], weights: Sequence[float], rank: int) -> tuple[Matrix, float]:
    """
    Global minimum of the weighted low-rank objective.

    The objective splits into (Σwᵢ)‖M − θ̄‖² plus a constant, with θ̄ the
    weighted mean, so the rank-r truncated SVD of θ̄ is optimal.

    Returns:
        (M*, loss*)
    """
    _check_layer(thetas, rank, "oracle")
    w_sum, theta_sum = _weighted_sums(thetas, weights)
    if w_sum <= 0:
        raise ValidationError("oracle needs a positive total weight")
    mean = theta_sum / w_sum
    u, s, vt = svd(mean)
    best = (u[:, :rank] * s[:rank]) @ vt[:rank]
    spread = sum(float(w) * frobenius_norm(t - mean) ** 2 for w, t in zip(weights, thetas, strict=True))
    return best, w_sum * float(np.sum(s[rank:] ** 2)) + spread


def densify(adapter: LoraAdapter) -> dict[str, Matrix]:
    """Dense per-layer deltas scaling_alpha·B·A."""
    return {layer: entry.delta(adapter.scaling_alpha) for layer, entry in adapter.entries.items()}


def factorize_delta(delta: Matrix, rank: int) -> tuple[Matrix, Matrix]:
    """
    Split a dense delta into B (d₁×r) and A (r×d₂) by truncated SVD.

    The singular values are shared evenly (√σ on each side), and BA is the
    best rank-r approximation of the delta.
    """
    _check_layer([delta], rank, "factorize")
    u, s, vt = svd(delta)
    root = np.sqrt(s[:rank])
    return u[:, :rank] * root, root[:, None] * vt[:rank]


def adapter_from_deltas(deltas: dict[str, Matrix], rank: int, dtype: str = "F64") -> LoraAdapter:
    """Build an adapter with scaling 1 whose densified layers approximate the given deltas."""
    entries = {}
    for layer, delta in deltas.items():
        B, A = factorize_delta(delta, rank)
        entries[layer] = LoraEntry(layer=layer, A=A, B=B)
    return LoraAdapter(entries=entries, rank=rank, lora_alpha=float(rank), dtype=dtype)


def merge_adapters(
    adapters: Sequence[LoraAdapter],
    cfg: LoraMergeConfig,
    threads: int = 1,
    with_oracle: bool = False,
) -> tuple[LoraAdapter, dict[str, LoraMergeTrace]]:
    """
    Merge LoRA adapters layer by layer into one adapter of rank cfg.rank_out.

    Each adapter is densified first; input ranks may differ. The output
    carries scaling 1 (lora_alpha = rank_out) and the dtype of the first input.

    Args:
        adapters: Adapters sharing target layers and per-layer shapes
        cfg: Solver configuration
        threads: Per-layer worker count
        with_oracle: Also record the truncated-SVD optimum in each trace

    Returns:
        (merged adapter, per-layer traces)

    Raises:
        ValidationError: If layer sets or shapes differ, or the rank is invalid
    """
    cfg.validate()
    if not adapters:
        raise ValidationError("at least one adapter is required")
    layers = adapters[0].layers()
    for index, adapter in enumerate(adapters[1:], start=1):
        if set(adapter.layers()) != set(layers):
            offending = sorted(set(layers) ^ set(adapter.layers()))
            raise ValidationError(f"adapter {index} targets different layers: {offending}")
    dense = [densify(adapter) for adapter in adapters]
    logger.info(
        "Merging %d LoRA adapters over %d layers to rank %d (k=%s)", len(adapters), len(layers), cfg.rank_out, cfg.k
    )

    def merge_one(layer: str) -> tuple[Matrix, Matrix, LoraMergeTrace]:
        thetas = [d[layer] for d in dense]
        stable, log_scale = log_weights([frobenius_norm(t) for t in thetas], cfg.k)
        B, A, trace = merge_lora_layer(thetas, cfg, layer, stable.tolist(), log_scale)
        if with_oracle:
            best = oracle_lora_optimum(thetas, stable.tolist(), cfg.rank_out)[1]
            trace.oracle_loss = _rescale(best, weight_scale(log_scale))
        return B, A, trace

    results = map_layers(merge_one, layers, threads)
    entries = {layer: LoraEntry(layer=layer, A=A, B=B) for layer, (B, A, _) in zip(layers, results, strict=True)}
    traces = {layer: trace for layer, (_, _, trace) in zip(layers, results, strict=True)}
    merged = LoraAdapter(
        entries=entries,
        rank=cfg.rank_out,
        lora_alpha=float(cfg.rank_out),
        dtype=adapters[0].dtype,
        target_modules=adapters[0].target_modules,
    )
    for trace in traces.values():
        logger.info("Layer %s: final loss %.6e after %d iterations (%s)", trace.layer, trace.final_loss, len(trace.losses), trace.stop_reason)
    return merged, traces


def _base_name(base: Checkpoint, layer: str) -> str:
    for name in (layer, f"{layer}.weight"):
        if name in base.tensors:
            return name
    raise ValidationError(f"base checkpoint has no tensor for adapted layer {layer}")


def apply_adapter(base: Checkpoint, adapter: LoraAdapter, alpha: float = DEFAULT_LORA_APPLY_ALPHA) -> Checkpoint:
    """
    Return base + α·scaling_alpha·B·A for every adapted layer.

    Layers are matched by name, with or without a trailing ``.weight``.
    """
    tensors = dict(base.tensors)
    for layer, delta in densify(adapter).items():
        name = _base_name(base, layer)
        tensor = base[name]
        if tensor.matrix.shape != delta.shape:
            raise ShapeError(f"layer {layer}: adapter delta {delta.shape} does not match base {tensor.matrix.shape}")
        tensors[name] = tensor.with_matrix(tensor.matrix + alpha * delta)
    return Checkpoint(tensors=tensors, metadata=dict(base.metadata))
