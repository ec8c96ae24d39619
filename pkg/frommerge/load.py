"""Load sweep results into DuckDB through a dlt pipeline."""

import logging
import os
from collections.abc import Generator
from typing import Any

import dlt

from frommerge.errors import CheckpointIOError, ValidationError
from frommerge.harness import SweepResult
from frommerge.settings import DEFAULT_DUCKDB_PATH, DUCKDB_PATH_ENV

# Configure logging
logger = logging.getLogger(__name__)

WRITE_MODES = ("merge", "replace", "append")


@dlt.resource(name="sweep_cells", write_disposition="merge", primary_key=["layer", "method", "k", "seed"])
def sweep_cells(result: SweepResult) -> Generator[dict[str, Any], None, None]:
    """
    Yield one row per sweep cell, tagged with the sweep seed.

    Args:
        result: Completed sweep
    """
    for cell in result.cells:
        row = cell.to_row()
        row["seed"] = result.seed
        row["failed"] = cell.failed
        yield row


def load_sweep(result: SweepResult, mode: str = "merge", db_path: str | None = None) -> Any:
    """
    Load sweep cells into the ``bronze.sweep_cells`` table.

    ``merge`` upserts on (layer, method, k, seed), so re-loading the same
    sweep is idempotent; ``replace`` rewrites the table; ``append`` adds rows.

    Args:
        result: Completed sweep
        mode: Write mode - 'merge', 'replace', or 'append'
        db_path: DuckDB file; defaults to $DUCKDB_PATH or data/from_merge.duckdb

    Returns:
        dlt load info

    Raises:
        ValidationError: If mode is not one of 'merge', 'replace', or 'append'
        CheckpointIOError: If the load fails
    """
    if mode not in WRITE_MODES:
        error_msg = f"Invalid mode: {mode}. Must be one of: merge, replace, append"
        logger.error(error_msg)
        raise ValidationError(error_msg)

    db_path = db_path or os.getenv(DUCKDB_PATH_ENV, DEFAULT_DUCKDB_PATH)
    db_dir = os.path.dirname(db_path)
    try:
        if db_dir:
            os.makedirs(db_dir, exist_ok=True)
        logger.info("Loading %d sweep rows into %s (mode=%s)", len(result.cells), db_path, mode)
        pipeline = dlt.pipeline(
            pipeline_name="from_merge_sweep",
            destination=dlt.destinations.duckdb(db_path),
            dataset_name="bronze",
        )
        resource = sweep_cells(result)
        resource.apply_hints(write_disposition=mode)  # type: ignore[arg-type]
        load_info = pipeline.run(resource)
        logger.info("Load info: %s", load_info)
        return load_info
    except Exception as e:
        error_msg = f"Loading sweep into {db_path} failed: {e}"
        logger.exception(error_msg)
        raise CheckpointIOError(error_msg) from e
