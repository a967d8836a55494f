import os
from pathlib import Path

import pytest


def acceptance_cache_dir() -> Path | None:
    """Optional cache for the slow training fixtures (developer loop only).

    Set TRIFORGE_ACC_CACHE=/some/dir to reuse checkpoints across pytest runs;
    unset, every session trains from scratch.
    """
    val = os.environ.get("TRIFORGE_ACC_CACHE")
    if not val:
        return None
    path = Path(val)
    path.mkdir(parents=True, exist_ok=True)
    return path


def pass_line(name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"[acceptance] {name}: {status}{suffix}", flush=True)
