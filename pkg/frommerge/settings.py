"""Settings and defaults for checkpoint merging."""

# FroM weighting exponents
DEFAULT_K: float = 1.0
DEFAULT_LORA_K: float = 0.9

# Linear weighting coefficient applied to a merged delta
DEFAULT_ALPHA: float = 1.0
DEFAULT_LORA_APPLY_ALPHA: float = 0.7

# Merge defaults
DEFAULT_METHOD: str = "from"
DEFAULT_NORM_SCOPE: str = "per_tensor"
DEFAULT_DARE_DROP_P: float = 0.5
DEFAULT_SEED: int = 0
DEFAULT_RCOND: float = 1e-10

# Alternating least squares defaults
DEFAULT_MAX_ITERS: int = 100
DEFAULT_INIT_SIGMA: float = 0.02
DEFAULT_LOSS_TOL: float = 0.0
CONVERGED_REL_TOL: float = 1e-10

# Sweep defaults
DEFAULT_K_GRID: tuple[float, ...] = (0.0, 0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
DEFAULT_ALPHA_GRID: tuple[float, ...] = (0.5, 0.7, 0.9, 1.0, 1.1, 1.3)
DEFAULT_SWEEP_METHODS: tuple[str, ...] = ("from", "average", "max_norm", "task_arithmetic", "dare_from")
DEFAULT_SYNTH_BASE_SIGMA: float = 0.02

# Parallelism
DEFAULT_THREADS: int = 1

# Adapter directory layout
ADAPTER_WEIGHTS_NAME: str = "adapter_model.safetensors"
ADAPTER_CONFIG_NAME: str = "adapter_config.json"

# Environment
LOG_LEVEL_ENV: str = "FROM_MERGE_LOG"
DEFAULT_LOG_LEVEL: str = "info"
DUCKDB_PATH_ENV: str = "DUCKDB_PATH"
DEFAULT_DUCKDB_PATH: str = "data/from_merge.duckdb"
