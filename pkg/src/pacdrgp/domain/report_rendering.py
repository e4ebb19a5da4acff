from __future__ import annotations

import math
from collections.abc import Iterable, Sequence

from pacdrgp.domain.experiment_models import CSV_COLUMNS, CurveRecord

_SPARK_LEVELS = " .:-=+*#%@"


def render_curve_csv(records: Iterable[CurveRecord]) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for record in sorted(records, key=lambda item: item.N):
        lines.append(",".join(record.csv_values()))
    return "\n".join(lines) + "\n"


def sparkline(values: Sequence[float], width: int = 60) -> str:
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        return ""
    if len(values) > width:
        step = len(values) / width
        values = [values[int(i * step)] for i in range(width)]
    low, high = min(finite), max(finite)
    span = high - low
    chars = []
    for value in values:
        if not math.isfinite(value):
            chars.append("?")
            continue
        level = 0 if span == 0 else int((value - low) / span * (len(_SPARK_LEVELS) - 1))
        chars.append(_SPARK_LEVELS[level])
    return "".join(chars)


def render_bound_report(
    *,
    num_samples: int,
    tau: float,
    generated_at_local_iso: str,
    rows: Sequence[tuple[str, float, float]],
    kl: float,
    oracle: float,
    asymptote: float,
    empirical_nll: float,
) -> str:
    """Text summary of every bound variant at one sample size.

    ``rows`` holds (variant name, one-sided value, two-sided value).
    """
    lines = [
        "REPORT_VERSION: 1",
        f"GENERATED_AT: {generated_at_local_iso}",
        f"N: {num_samples}",
        f"TAU: {tau!r}",
        f"KL: {kl:.6f}",
        f"ORACLE_RISK: {oracle:.6f}",
        f"CONSISTENCY_ASYMPTOTE: {asymptote:.6f}",
        f"EMPIRICAL_NLL: {empirical_nll:.6f}",
        "",
        f"{'variant':<12}{'one-sided':>18}{'two-sided':>18}",
    ]
    for name, one_sided, two_sided in rows:
        lines.append(f"{name:<12}{_fmt(one_sided):>18}{_fmt(two_sided):>18}")
    return "\n".join(lines) + "\n"


def _fmt(value: float) -> str:
    return f"{value:.6f}" if math.isfinite(value) else "undefined"
