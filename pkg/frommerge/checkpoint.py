"""Reading and writing checkpoint containers and LoRA adapters.

The container layout is the widely used "8-byte header length + JSON
header + raw little-endian payload" format, so files written here load
with standard safetensors readers and vice versa.
"""

import contextlib
import json
import logging
import math
import os
import tempfile
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from frommerge.errors import CheckpointIOError, NumericError, ParseError, ShapeError, ValidationError
from frommerge.settings import ADAPTER_CONFIG_NAME, ADAPTER_WEIGHTS_NAME
from frommerge.tensor import Matrix, as_matrix

# Configure logging
logger = logging.getLogger(__name__)

DTYPES: dict[str, np.dtype] = {"F32": np.dtype("<f4"), "F64": np.dtype("<f8")}
HEADER_LENGTH_BYTES = 8
METADATA_KEY = "__metadata__"


@dataclass(frozen=True)
class StoredTensor:
    """A tensor as float64 matrix plus the shape and dtype it had on disk."""

    matrix: Matrix
    shape: tuple[int, ...]
    dtype: str = "F64"

    def __post_init__(self) -> None:
        if self.dtype not in DTYPES:
            raise ValidationError(f"unsupported dtype {self.dtype!r}")
        if math.prod(self.shape) != self.matrix.size:
            raise ShapeError(f"recorded shape {self.shape} does not match {self.matrix.size} stored elements")

    @classmethod
    def from_array(cls, values: Any, dtype: str = "F64") -> "StoredTensor":
        arr = np.asarray(values)
        return cls(matrix=as_matrix(arr), shape=tuple(int(d) for d in arr.shape), dtype=dtype)

    def with_matrix(self, matrix: Matrix) -> "StoredTensor":
        """Same shape and dtype, new values."""
        return StoredTensor(matrix=matrix, shape=self.shape, dtype=self.dtype)

    def to_array(self) -> np.ndarray:
        return self.matrix.reshape(self.shape)

    def encode(self) -> bytes:
        """Serialize to little-endian bytes in the storage dtype (round-to-nearest for F32)."""
        with np.errstate(over="ignore"):
            values = self.to_array().astype(DTYPES[self.dtype])
        if not np.all(np.isfinite(values)):
            raise NumericError(f"values of shape {self.shape} do not fit dtype {self.dtype}")
        return values.tobytes(order="C")


@dataclass(frozen=True)
class Checkpoint:
    """Ordered map of tensor name to StoredTensor plus string metadata."""

    tensors: dict[str, StoredTensor]
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if METADATA_KEY in self.tensors:
            raise ValidationError(f"{METADATA_KEY!r} is reserved and cannot name a tensor")
        for key, value in self.metadata.items():
            if not isinstance(key, str) or not isinstance(value, str):
                raise ValidationError("checkpoint metadata must map strings to strings")

    @classmethod
    def from_matrices(
        cls, matrices: Mapping[str, Any], dtype: str = "F64", metadata: Mapping[str, str] | None = None
    ) -> "Checkpoint":
        tensors = {name: StoredTensor.from_array(values, dtype) for name, values in matrices.items()}
        return cls(tensors=tensors, metadata=dict(metadata or {}))

    def names(self) -> list[str]:
        return list(self.tensors)

    def matrices(self) -> dict[str, Matrix]:
        return {name: tensor.matrix for name, tensor in self.tensors.items()}

    def __getitem__(self, name: str) -> StoredTensor:
        return self.tensors[name]

    def __len__(self) -> int:
        return len(self.tensors)


def _reject_duplicates(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in pairs:
        if key in out:
            raise ValueError(f"duplicate key {key!r} in header")
        out[key] = value
    return out


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _parse_entry(name: str, entry: Any, payload_size: int, data_start: int) -> tuple[str, tuple[int, ...], int, int]:
    where = HEADER_LENGTH_BYTES
    if not isinstance(entry, dict):
        raise ParseError(f"tensor {name!r}: header entry is not an object", where)
    dtype = entry.get("dtype")
    if dtype not in DTYPES:
        raise ParseError(f"tensor {name!r}: unsupported dtype {dtype!r}", where)
    shape = entry.get("shape")
    if not isinstance(shape, list) or not all(_is_int(d) and d >= 0 for d in shape):
        raise ParseError(f"tensor {name!r}: shape must be a list of non-negative integers", where)
    offsets = entry.get("data_offsets")
    if not isinstance(offsets, list) or len(offsets) != 2 or not all(_is_int(o) for o in offsets):
        raise ParseError(f"tensor {name!r}: data_offsets must be two integers", where)
    begin, end = offsets
    if not 0 <= begin <= end <= payload_size:
        raise ParseError(
            f"tensor {name!r}: extent [{begin}, {end}) outside payload of {payload_size} bytes",
            data_start + min(max(begin, 0), payload_size),
        )
    count = math.prod(shape)
    if count == 0:
        raise ParseError(f"tensor {name!r}: empty tensors are not supported", data_start + begin)
    if end - begin != count * DTYPES[dtype].itemsize:
        raise ParseError(
            f"tensor {name!r}: extent of {end - begin} bytes does not hold shape {shape} of {dtype}",
            data_start + begin,
        )
    return dtype, tuple(shape), begin, end


def parse_container(raw: bytes) -> Checkpoint:
    """
    Parse container bytes into a Checkpoint.

    Every declared extent is checked against the payload before any data is
    touched, and extents must tile the payload without gaps or overlaps.

    Args:
        raw: Complete file contents

    Returns:
        Parsed checkpoint with float64 matrices

    Raises:
        ParseError: On any structural problem, with the byte offset
    """
    if len(raw) < HEADER_LENGTH_BYTES:
        raise ParseError(f"file of {len(raw)} bytes is shorter than the header length field", 0)
    header_size = int.from_bytes(raw[:HEADER_LENGTH_BYTES], "little")
    if header_size > len(raw) - HEADER_LENGTH_BYTES:
        raise ParseError(f"header length {header_size} exceeds file size {len(raw)}", 0)

    data_start = HEADER_LENGTH_BYTES + header_size
    try:
        text = raw[HEADER_LENGTH_BYTES:data_start].decode("utf-8")
    except UnicodeDecodeError as e:
        raise ParseError(f"header is not valid UTF-8: {e.reason}", HEADER_LENGTH_BYTES + e.start) from e
    try:
        header = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as e:
        raise ParseError(f"header is not valid JSON: {e.msg}", HEADER_LENGTH_BYTES + e.pos) from e
    except (ValueError, RecursionError) as e:
        raise ParseError(f"header is not valid: {e}", HEADER_LENGTH_BYTES) from e
    if not isinstance(header, dict):
        raise ParseError("header is not a JSON object", HEADER_LENGTH_BYTES)

    metadata = header.pop(METADATA_KEY, {})
    if not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values()):
        raise ParseError(f"{METADATA_KEY} must map strings to strings", HEADER_LENGTH_BYTES)

    payload_size = len(raw) - data_start
    entries = {name: _parse_entry(name, entry, payload_size, data_start) for name, entry in header.items()}

    cursor = 0
    for name, (_, _, begin, end) in sorted(entries.items(), key=lambda item: item[1][2]):
        if begin != cursor:
            kind = "overlaps the previous tensor" if begin < cursor else "leaves a gap before it"
            raise ParseError(f"tensor {name!r} {kind}", data_start + begin)
        cursor = end
    if cursor != payload_size:
        raise ParseError(f"{payload_size - cursor} trailing payload bytes are not covered by any tensor", data_start + cursor)

    tensors: dict[str, StoredTensor] = {}
    for name, (dtype, shape, begin, end) in entries.items():
        values = np.frombuffer(raw, dtype=DTYPES[dtype], count=math.prod(shape), offset=data_start + begin)
        if not np.all(np.isfinite(values)):
            raise ParseError(f"tensor {name!r} contains non-finite values", data_start + begin)
        tensors[name] = StoredTensor(matrix=as_matrix(values.reshape(shape)), shape=shape, dtype=dtype)
    return Checkpoint(tensors=tensors, metadata=dict(metadata))


def serialize_container(ckpt: Checkpoint) -> bytes:
    """
    Encode a checkpoint; tensors are laid out in name-sorted order.

    The JSON header is compact, metadata first, and padded with spaces to a
    multiple of 8 bytes, so equal checkpoints always give equal bytes.
    """
    header: dict[str, Any] = {}
    if ckpt.metadata:
        header[METADATA_KEY] = {key: ckpt.metadata[key] for key in sorted(ckpt.metadata)}
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(ckpt.tensors):
        tensor = ckpt.tensors[name]
        data = tensor.encode()
        header[name] = {"dtype": tensor.dtype, "shape": list(tensor.shape), "data_offsets": [offset, offset + len(data)]}
        chunks.append(data)
        offset += len(data)
    header_bytes = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    header_bytes += b" " * (-len(header_bytes) % 8)
    return len(header_bytes).to_bytes(HEADER_LENGTH_BYTES, "little") + header_bytes + b"".join(chunks)


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """
    Write data to path through a temp file and an atomic rename.

    The destination is either left untouched or holds the complete data.

    Raises:
        CheckpointIOError: If the file cannot be written
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.chmod(tmp_name, 0o644)
            os.replace(tmp_name, path)
        except BaseException:
            with contextlib.suppress(FileNotFoundError):
                os.unlink(tmp_name)
            raise
    except OSError as e:
        error_msg = f"cannot write {path}: {e}"
        logger.error(error_msg)
        raise CheckpointIOError(error_msg) from e


def _read_bytes(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        error_msg = f"cannot read {path}: {e}"
        logger.error(error_msg)
        raise CheckpointIOError(error_msg) from e


def read_container(path: str | Path) -> Checkpoint:
    """
    Load a container file.

    Args:
        path: File to read

    Returns:
        Checkpoint with float64 matrices and the original shapes and dtypes

    Raises:
        CheckpointIOError: If the file cannot be read
        ParseError: If the file is malformed
    """
    ckpt = parse_container(_read_bytes(path))
    logger.debug("Read %d tensors from %s", len(ckpt), path)
    return ckpt


def write_container(ckpt: Checkpoint, path: str | Path) -> None:
    atomic_write_bytes(path, serialize_container(ckpt))
    logger.debug("Wrote %d tensors to %s", len(ckpt), path)


@dataclass(frozen=True)
class LoraEntry:
    """Factors of one adapted layer: B is d₁×r, A is r×d₂."""

    layer: str
    A: Matrix
    B: Matrix

    def delta(self, scale: float = 1.0) -> Matrix:
        return scale * (self.B @ self.A)


@dataclass(frozen=True)
class LoraAdapter:
    """
    A LoRA adapter: per-layer factors sharing one rank.

    ``lora_alpha`` is kept as written in the adapter config; the scale
    applied to B·A is ``lora_alpha / rank``.
    """

    entries: dict[str, LoraEntry]
    rank: int
    lora_alpha: float
    dtype: str = "F32"
    target_modules: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.rank <= 0:
            raise ValidationError(f"adapter rank must be positive, got {self.rank}")
        if self.dtype not in DTYPES:
            raise ValidationError(f"unsupported dtype {self.dtype!r}")
        for layer, entry in self.entries.items():
            if entry.A.ndim != 2 or entry.B.ndim != 2:
                raise ValidationError(f"layer {layer}: LoRA factors must be 2-D")
            if entry.A.shape[0] != self.rank or entry.B.shape[1] != self.rank:
                raise ValidationError(
                    f"layer {layer}: factor shapes B{entry.B.shape} A{entry.A.shape} do not match rank {self.rank}"
                )

    @property
    def scaling_alpha(self) -> float:
        return self.lora_alpha / self.rank

    def layers(self) -> list[str]:
        return list(self.entries)


_LORA_SUFFIXES = {".lora_A": "A", ".lora_B": "B", ".lora_down": "A", ".lora_up": "B"}


def split_lora_name(name: str) -> tuple[str, str] | None:
    """
    Map a stored LoRA tensor name to (layer, "A" | "B").

    Accepts the canonical ``<layer>.lora_A`` / ``<layer>.lora_B`` names and
    the common PEFT (``base_model.model.<layer>.lora_A.default.weight``) and
    kohya (``<layer>.lora_down.weight``) variants. Returns None for tensors
    that are not LoRA factors.
    """
    name = name.removeprefix("base_model.model.").removesuffix(".weight").removesuffix(".default")
    for suffix, part in _LORA_SUFFIXES.items():
        if name.endswith(suffix):
            return name[: -len(suffix)], part
    return None


def _read_json(path: str | Path) -> Any:
    try:
        text = _read_bytes(path).decode("utf-8")
    except UnicodeDecodeError as e:
        raise ValidationError(f"{path} is not valid UTF-8 at byte {e.start}: {e.reason}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path} is not valid JSON: {e.msg}", e.pos) from e


def _targets(layer: str, module: str) -> bool:
    return layer == module or layer.endswith(f".{module}")


def _check_target_modules(entries: Mapping[str, LoraEntry], target_modules: Sequence[str], config_path: str | Path) -> None:
    """Every paired layer must match a target module, and every module at least one layer."""
    for layer in entries:
        if not any(_targets(layer, module) for module in target_modules):
            raise ValidationError(f"{config_path}: layer {layer} is not covered by target_modules {list(target_modules)}")
    for module in target_modules:
        if not any(_targets(layer, module) for layer in entries):
            raise ValidationError(f"{config_path}: target module {module!r} matches no layer in the weights")


def read_lora(weights_path: str | Path, config_path: str | Path) -> LoraAdapter:
    """
    Load an adapter from its weights container and JSON config.

    Args:
        weights_path: Container holding ``<layer>.lora_A`` / ``<layer>.lora_B`` tensors
        config_path: JSON with keys "r", "lora_alpha" and "target_modules"

    Returns:
        The paired adapter

    Raises:
        ValidationError: Unpaired factors, rank mismatch or missing config keys
    """
    config = _read_json(config_path)
    if not isinstance(config, dict):
        raise ValidationError(f"{config_path}: adapter config must be a JSON object")
    missing = [key for key in ("r", "lora_alpha", "target_modules") if key not in config]
    if missing:
        raise ValidationError(f"{config_path}: adapter config is missing keys {missing}")
    rank, lora_alpha, target_modules = config["r"], config["lora_alpha"], config["target_modules"]
    if not _is_int(rank) or rank <= 0:
        raise ValidationError(f"{config_path}: 'r' must be a positive integer, got {rank!r}")
    if not isinstance(lora_alpha, int | float) or isinstance(lora_alpha, bool):
        raise ValidationError(f"{config_path}: 'lora_alpha' must be a number, got {lora_alpha!r}")
    if not isinstance(target_modules, list) or not all(isinstance(m, str) for m in target_modules):
        raise ValidationError(f"{config_path}: 'target_modules' must be a list of strings")

    ckpt = read_container(weights_path)
    factors: dict[str, dict[str, StoredTensor]] = {}
    for name, tensor in ckpt.tensors.items():
        parsed = split_lora_name(name)
        if parsed is None:
            logger.warning("Skipping non-LoRA tensor %s in %s", name, weights_path)
            continue
        layer, part = parsed
        if part in factors.setdefault(layer, {}):
            raise ValidationError(f"layer {layer}: more than one lora_{part} tensor")
        factors[layer][part] = tensor

    entries: dict[str, LoraEntry] = {}
    dtypes: dict[str, str] = {}
    for layer in sorted(factors):
        parts = factors[layer]
        if set(parts) != {"A", "B"}:
            present = "".join(sorted(parts))
            raise ValidationError(f"layer {layer}: lora_{present} has no matching partner")
        a, b = parts["A"].matrix, parts["B"].matrix
        if a.shape[0] != rank or b.shape[1] != rank:
            raise ValidationError(f"layer {layer}: factors have rank {a.shape[0]}/{b.shape[1]}, config says r={rank}")
        if parts["A"].dtype != parts["B"].dtype:
            raise ValidationError(f"layer {layer}: lora_A is {parts['A'].dtype} but lora_B is {parts['B'].dtype}")
        entries[layer] = LoraEntry(layer=layer, A=a, B=b)
        dtypes[layer] = parts["A"].dtype

    if len(set(dtypes.values())) > 1:
        first = next(iter(dtypes))
        offending = next(layer for layer, d in dtypes.items() if d != dtypes[first])
        raise ValidationError(f"layer {offending}: dtype {dtypes[offending]} differs from {dtypes[first]} of layer {first}")
    dtype = next(iter(dtypes.values()), "F32")
    _check_target_modules(entries, target_modules, config_path)

    logger.info("Loaded LoRA adapter %s: %d layers, rank %d", weights_path, len(entries), rank)
    return LoraAdapter(
        entries=entries, rank=rank, lora_alpha=float(lora_alpha), dtype=dtype, target_modules=tuple(target_modules)
    )


def serialize_lora_config(adapter: LoraAdapter) -> bytes:
    config = {
        "lora_alpha": adapter.lora_alpha,
        "r": adapter.rank,
        "target_modules": list(adapter.target_modules) or sorted(adapter.entries),
    }
    return (json.dumps(config, indent=2, sort_keys=True) + "\n").encode("utf-8")


def lora_to_checkpoint(adapter: LoraAdapter) -> Checkpoint:
    tensors: dict[str, StoredTensor] = {}
    for layer, entry in adapter.entries.items():
        tensors[f"{layer}.lora_A"] = StoredTensor(matrix=entry.A, shape=entry.A.shape, dtype=adapter.dtype)
        tensors[f"{layer}.lora_B"] = StoredTensor(matrix=entry.B, shape=entry.B.shape, dtype=adapter.dtype)
    return Checkpoint(tensors=tensors)


def write_lora(adapter: LoraAdapter, weights_path: str | Path, config_path: str | Path) -> None:
    """Write the adapter weights and config; both are encoded before either file is touched."""
    weights = serialize_container(lora_to_checkpoint(adapter))
    config = serialize_lora_config(adapter)
    atomic_write_bytes(weights_path, weights)
    atomic_write_bytes(config_path, config)
    logger.debug("Wrote LoRA adapter with %d layers to %s", len(adapter.entries), weights_path)


def read_lora_dir(directory: str | Path) -> LoraAdapter:
    directory = Path(directory)
    return read_lora(directory / ADAPTER_WEIGHTS_NAME, directory / ADAPTER_CONFIG_NAME)


def write_lora_dir(adapter: LoraAdapter, directory: str | Path) -> None:
    directory = Path(directory)
    write_lora(adapter, directory / ADAPTER_WEIGHTS_NAME, directory / ADAPTER_CONFIG_NAME)
