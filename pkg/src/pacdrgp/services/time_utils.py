from __future__ import annotations

from datetime import datetime
from time import perf_counter


def now_local_iso() -> str:
    return datetime.now().astimezone().replace(microsecond=0).isoformat()


def elapsed_ms(started: float) -> int:
    return int((perf_counter() - started) * 1000)
