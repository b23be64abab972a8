"""Theoretical FLOPs, reduction rates, RTF, throughput and KV-cache byte accounting.

The per-layer FLOPs model counts attention scores/weighted sum (2 n^2 d), the
Q/K/V/O projections (4 n d^2) and the feed-forward pair (2 n d m). Softmax and
layer-norm costs are not counted. For decode steps the same model is specialised
to one query against a cache of ``len`` keys: 2 len d + 4 d^2 + 2 d m.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields

from .runtime import ModelConfig, RunTimings


def layer_flops(n: float, d: int, m: int) -> float:
    if n < 0 or d < 1 or m < 1:
        raise ValueError("layer_flops needs n >= 0 and d, m >= 1")
    return 2 * n * n * d + 4 * n * d * d + 2 * n * d * m


def decode_layer_flops(cache_len: int, d: int, m: int) -> float:
    return 2 * cache_len * d + 4 * d * d + 2 * d * m


def reduction_rate(k: float, n: float, d: int, m: int) -> float:
    """Next-layer FLOPs saved when a fraction ``k`` of ``n`` tokens is removed."""
    if not 0.0 <= k <= 1.0:
        raise ValueError(f"reduction ratio k={k} outside [0, 1]")
    return k + (k - k * k) / (1 + (2 * d + m) / n)


def k_for_target_rate(target: float, n: float, d: int, m: int, tol: float = 1e-12) -> float:
    """Invert :func:`reduction_rate` in ``k`` by bisection (the rate is increasing in k)."""
    if not 0.0 <= target <= 1.0:
        raise ValueError(f"target rate {target} outside [0, 1]")
    if target == 0.0:
        return 0.0
    if target == 1.0:
        return 1.0
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if reduction_rate(mid, n, d, m) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def k_tokens_for_target(target: float, prompt_len: int, audio_len: int, d: int, m: int) -> int:
    """Token budget for a FLOPs-reduction target, measured against the full prompt length."""
    k = k_for_target_rate(target, prompt_len, d, m)
    k_tokens = int(round(k * prompt_len))
    if k_tokens > max(audio_len - 1, 0):
        raise ValueError(
            f"target {target:.0%} needs {k_tokens} tokens but only {audio_len} audio tokens are present"
        )
    return k_tokens


@dataclass
class FlopsSummary:
    baseline: float
    reduced: float

    @property
    def reduction(self) -> float:
        return 1.0 - self.reduced / self.baseline if self.baseline else 0.0

    @property
    def reduction_pct(self) -> float:
        return 100.0 * self.reduction


def run_flops(lengths, d: int, m: int, decode_steps: int = 0) -> float:
    total = 0.0
    for n in lengths:
        total += layer_flops(n, d, m)
        for t in range(decode_steps):
            total += decode_layer_flops(n + t + 1, d, m)
    return total


def aggregate_run_flops(
    baseline_lengths, reduced_lengths, d: int, m: int, decode_steps: int = 0, num_layers: int | None = None
) -> FlopsSummary:
    """Sum prefill and decode FLOPs over layers using each layer's actual input length."""
    baseline_lengths = list(baseline_lengths)
    reduced_lengths = list(reduced_lengths)
    if len(baseline_lengths) != len(reduced_lengths):
        raise ValueError(
            f"length arrays disagree: {len(baseline_lengths)} vs {len(reduced_lengths)} layers"
        )
    if num_layers is not None and len(baseline_lengths) != num_layers:
        raise ValueError(f"expected {num_layers} per-layer lengths, got {len(baseline_lengths)}")
    return FlopsSummary(
        baseline=run_flops(baseline_lengths, d, m, decode_steps),
        reduced=run_flops(reduced_lengths, d, m, decode_steps),
    )


def rtf(timings: RunTimings) -> float:
    if timings.audio_s <= 0:
        raise ValueError("audio duration must be positive for RTF")
    return (timings.prefill_s + timings.decoding_s) / timings.audio_s


def throughput(timings: RunTimings) -> float:
    if timings.generated_tokens < 1 or timings.decoding_s <= 0:
        raise ValueError("throughput needs >= 1 generated token and positive decode time")
    return timings.generated_tokens / timings.decoding_s


def kv_bytes(config: ModelConfig, lengths, bytes_per_scalar: int = 8) -> int:
    lengths = list(lengths)
    if len(lengths) != config.num_layers:
        raise ValueError(f"expected {config.num_layers} cache lengths, got {len(lengths)}")
    return sum(2 * int(n) * config.hidden_dim * bytes_per_scalar for n in lengths)


def max_batch(budget_bytes: int, per_sequence_bytes: int) -> int:
    if per_sequence_bytes <= 0:
        raise ValueError("per-sequence bytes must be positive")
    return budget_bytes // per_sequence_bytes


@dataclass
class RunReport:
    policy: str
    schedule: str
    layers: str
    audio_len: int
    text_len: int
    decode_steps: int
    seed: int
    target_pct: float | None
    k_tokens: int
    flops_reduction_pct: float
    kv_bytes_baseline: int
    kv_bytes_reduced: int
    fallback_warnings: int
    rtf: float
    prefill_s: float
    decode_s: float
    throughput_tps: float
    status: str = "ok"


REPORT_COLUMNS = [f.name for f in fields(RunReport)]
TIMING_COLUMNS = ("rtf", "prefill_s", "decode_s", "throughput_tps")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def report_row(report: RunReport) -> dict[str, str]:
    return {k: _fmt(v) for k, v in asdict(report).items()}


def write_reports_csv(reports, fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(report_row(r) if isinstance(r, RunReport) else r)


def reports_csv(reports) -> str:
    buf = io.StringIO()
    write_reports_csv(reports, buf)
    return buf.getvalue()


def system_cost_markdown(reports) -> str:
    """Rows shaped like a system-cost table: reduction, RTF, latencies, throughput."""
    lines = [
        "| FLOPs Reduction % | Policy | Real Time Factor | Pre-filling Latency (s) | Decoding Latency (s) | Throughput (token/s) |",
        "|---|---|---|---|---|---|",
    ]
    for r in reports:
        lines.append(
            f"| {r.flops_reduction_pct:.2f} | {r.policy} | {r.rtf:.3f} | {r.prefill_s:.3f} "
            f"| {r.decode_s:.3f} | {r.throughput_tps:.2f} |"
        )
    return "\n".join(lines) + "\n"


def sweep_markdown(cells: dict[tuple[str, float], str], policies, targets, metric: str) -> str:
    """Policy x target grid; ``cells`` maps (policy, target) to a formatted value."""
    headers = [f"{round(t * 100)}%" for t in targets]
    lines = [
        f"| {metric} | " + " | ".join(headers) + " |",
        "|---|" + "---|" * len(headers),
    ]
    for p in policies:
        lines.append(f"| {p} | " + " | ".join(cells.get((p, t), "") for t in targets) + " |")
    return "\n".join(lines) + "\n"
