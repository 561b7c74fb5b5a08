"""Runtime configuration, overridable via environment variables."""

import os

RUNTIME_CONFIG = {
    # Worker cap for group passes, dataset generation and evaluation
    "threads": max(1, int(os.getenv("MESHSIM_THREADS", str(os.cpu_count() or 1)))),
    "log_level": os.getenv("MESHSIM_LOG_LEVEL", "INFO"),
    # Checkpoint manifest served by the HTTP API
    "checkpoint": os.getenv("MESHSIM_CHECKPOINT", ""),
    # SQLite file created inside every run directory
    "database_name": os.getenv("MESHSIM_DATABASE_NAME", "metrics.db"),
    "step_cap": int(os.getenv("MESHSIM_STEP_CAP", "16")),
}


def worker_count(requested: int | None = None) -> int:
    """Number of workers to use, never above MESHSIM_THREADS."""
    cap = RUNTIME_CONFIG["threads"]
    if requested is None:
        return cap
    return max(1, min(cap, requested))
