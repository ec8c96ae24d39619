"""Shared test fixtures and configuration."""

from collections.abc import Callable, Generator
from pathlib import Path

import numpy as np
import pytest

from frommerge.checkpoint import Checkpoint, LoraAdapter, LoraEntry, write_container
from frommerge.harness import SynthSpec, generate_synthetic
from frommerge.merge import TaskVector


@pytest.fixture
def tmp_duckdb_path(tmp_path: Path) -> Generator[str, None, None]:
    """
    Provide a temporary DuckDB database path.

    Args:
        tmp_path: pytest's built-in tmp_path fixture

    Yields:
        Path to temporary DuckDB file
    """
    db_path = tmp_path / "test_sweep.duckdb"
    yield str(db_path)
    # Cleanup happens automatically with tmp_path


@pytest.fixture
def mock_env(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> Generator[None, None, None]:
    """
    Set up environment variables for testing.

    Args:
        monkeypatch: pytest's monkeypatch fixture
        tmp_path: pytest's built-in tmp_path fixture

    Yields:
        None
    """
    # Set DLT pipeline directory to temp location
    dlt_dir = tmp_path / ".dlt"
    monkeypatch.setenv("DLT_PROJECT_DIR", str(dlt_dir))
    monkeypatch.setenv("DLT_DATA_DIR", str(dlt_dir / "data"))
    monkeypatch.setenv("DLT_PIPELINE_DIR", str(dlt_dir / "pipelines"))

    # Set test database path to temp directory (isolate from real experiment data!)
    monkeypatch.setenv("DUCKDB_PATH", str(tmp_path / "test_from_merge.duckdb"))
    monkeypatch.setenv("FROM_MERGE_LOG", "error")

    yield


@pytest.fixture
def small_spec() -> SynthSpec:
    """Two small layers, three models with distinct norms."""
    return SynthSpec(
        layer_shapes=(("layers.0.weight", 6, 5), ("layers.1.weight", 4, 4)),
        n_models=3,
        norm_profile=(3.0, 2.0, 1.0),
        overlap=0.3,
        seed=7,
    )


@pytest.fixture
def synthetic_models(small_spec: SynthSpec) -> tuple[Checkpoint, list[Checkpoint]]:
    return generate_synthetic(small_spec)


@pytest.fixture
def fixture_dir(tmp_path: Path, synthetic_models: tuple[Checkpoint, list[Checkpoint]]) -> Path:
    """
    Write the synthetic base and fine-tuned models to disk.

    Returns:
        Directory holding base.safetensors and model_{i}.safetensors
    """
    base, finetuned = synthetic_models
    out = tmp_path / "fixtures"
    write_container(base, out / "base.safetensors")
    for i, ckpt in enumerate(finetuned):
        write_container(ckpt, out / f"model_{i}.safetensors")
    return out


@pytest.fixture
def make_vectors() -> Callable[..., list[TaskVector]]:
    """
    Factory for random task vectors.

    Returns:
        Function (n, shapes, seed, scales) -> list of TaskVector
    """

    def factory(
        n: int, shapes: dict[str, tuple[int, int]], seed: int = 0, scales: list[float] | None = None
    ) -> list[TaskVector]:
        rng = np.random.default_rng(seed)
        scales = scales or [1.0] * n
        return [
            TaskVector(
                deltas={name: scales[i] * rng.standard_normal(shape) for name, shape in shapes.items()},
                source_label=f"model_{i}",
            )
            for i in range(n)
        ]

    return factory


@pytest.fixture
def make_adapter() -> Callable[..., LoraAdapter]:
    """
    Factory for random LoRA adapters.

    Returns:
        Function (layers, rank, seed, lora_alpha, dtype) -> LoraAdapter
    """

    def factory(
        layers: dict[str, tuple[int, int]],
        rank: int,
        seed: int = 0,
        lora_alpha: float | None = None,
        dtype: str = "F64",
    ) -> LoraAdapter:
        rng = np.random.default_rng(seed)
        entries = {}
        for name, (d1, d2) in layers.items():
            A = rng.standard_normal((rank, d2))
            B = rng.standard_normal((d1, rank))
            if dtype == "F32":
                A, B = A.astype(np.float32).astype(np.float64), B.astype(np.float32).astype(np.float64)
            entries[name] = LoraEntry(layer=name, A=A, B=B)
        return LoraAdapter(
            entries=entries, rank=rank, lora_alpha=float(lora_alpha if lora_alpha is not None else rank), dtype=dtype
        )

    return factory
