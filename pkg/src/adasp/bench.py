"""Seeded fixtures, single runs and policy x target sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import yaml

from . import io as adasp_io
from .kernels import make_rng
from .metrics import (
    REPORT_COLUMNS,
    RunReport,
    aggregate_run_flops,
    k_tokens_for_target,
    kv_bytes,
    report_row,
    rtf,
    sweep_markdown,
    throughput,
)
from .policies import POLICIES, ScheduledReduction
from .runtime import (
    ModelConfig,
    ModelWeights,
    RunTimings,
    Sequence,
    decode_step,
    generate,
    logits_from_hidden,
    prefill,
)
from .schedule import SCHEDULE_KINDS, EntropyReport, default_candidates, make_schedule, select_layer

log = logging.getLogger(__name__)

DEFAULT_TARGETS = (0.1, 0.2, 0.3, 0.4, 0.5)
SWEEP_POLICIES = ("weighted_merge", "average_merge", "atome", "fastv", "random_merge", "random_evict")
SEED_ENV = "ADASP_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class FixtureConfig:
    audio_len: int = 512
    text_len: int = 32
    decode_steps: int = 32
    tokens_per_second: float = 50.0
    audio_seconds: float | None = None
    redundancy: float = 0.5

    @property
    def audio_s(self) -> float:
        if self.audio_seconds is not None:
            return self.audio_seconds
        return self.audio_len / self.tokens_per_second


@dataclass
class PlanConfig:
    policy: str = "weighted_merge"
    target: float | None = 0.3
    k_tokens: int | None = None
    schedule: str = "constant"
    layer: int | str = 1
    candidates: list[int] | None = None


@dataclass
class SweepSpec:
    targets: list[float] = field(default_factory=lambda: list(DEFAULT_TARGETS))
    policies: list[str] = field(default_factory=lambda: list(SWEEP_POLICIES))
    metric: str = "flops_reduction_pct"

    def validate(self) -> None:
        if not self.targets or not self.policies:
            raise ConfigError("sweep targets and policies must be non-empty")
        for t in self.targets:
            if not 0.0 < t < 1.0:
                raise ConfigError(f"sweep target {t} outside (0, 1)")
        for p in self.policies:
            if p not in POLICIES:
                raise ConfigError(f"unknown policy {p!r}")
        if self.metric not in REPORT_COLUMNS:
            raise ConfigError(f"unknown metric {self.metric!r}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    fixture: FixtureConfig = field(default_factory=FixtureConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    seed: int = 0
    repeats: int = 3
    warmup: bool = True
    out: str = "out"
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def validate(self) -> None:
        p = self.plan
        if p.policy not in POLICIES:
            raise ConfigError(f"unknown policy {p.policy!r}; expected one of {', '.join(POLICIES)}")
        if p.schedule not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule {p.schedule!r}; expected one of {', '.join(SCHEDULE_KINDS)}")
        if p.policy != "none" and (p.target is None) == (p.k_tokens is None):
            raise ConfigError("set exactly one of plan.target and plan.k_tokens")
        if p.target is not None and not 0.0 <= p.target <= 1.0:
            raise ConfigError(f"target {p.target} outside [0, 1]")
        if not (p.layer == "auto" or isinstance(p.layer, int)):
            raise ConfigError(f"layer must be an integer or 'auto', got {p.layer!r}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.fixture.audio_len < 1 or self.fixture.text_len < 0 or self.fixture.decode_steps < 1:
            raise ConfigError("fixture needs audio_len >= 1, text_len >= 0, decode_steps >= 1")


def parse_target(value) -> float:
    """Accept 0.3, "0.3", "30" or "30%" as a 30% FLOPs-reduction target."""
    s = str(value).strip()
    pct = s.endswith("%")
    x = float(s.rstrip("%"))
    return x / 100.0 if pct or x > 1.0 else x


def _build(cls, data: dict, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {where} field(s): {', '.join(sorted(unknown))}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {where}: {e}") from e


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data or {})
    unknown = set(data) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
    plan = dict(data.pop("plan", None) or {})
    if "target" in plan and plan["target"] is not None:
        plan["target"] = parse_target(plan["target"])
    sweep = dict(data.pop("sweep", None) or {})
    if "targets" in sweep:
        sweep["targets"] = [parse_target(t) for t in sweep["targets"]]
    cfg = RunConfig(
        model=_build(ModelConfig, data.pop("model", None), "model"),
        fixture=_build(FixtureConfig, data.pop("fixture", None), "fixture"),
        plan=_build(PlanConfig, plan, "plan"),
        sweep=_build(SweepSpec, sweep, "sweep"),
        **data,
    )
    return cfg


def load_config(path) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from e
    return config_from_dict(data or {})


def config_to_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)


# --- fixtures ---------------------------------------------------------------

def synth_audio(rng: np.random.Generator, audio_len: int, dim: int, redundancy: float, std: float = 0.02) -> np.ndarray:
    """Piecewise-constant Gaussian audio embeddings.

    ``redundancy`` 1.0 gives a single repeated row; 0.0 gives independent rows.
    In between, ceil((1 - r) L) segments share a prototype plus small jitter.
    """
    if not 0.0 <= redundancy <= 1.0:
        raise ValueError("redundancy must lie in [0, 1]")
    if audio_len == 0:
        return np.empty((0, dim))
    n_seg = max(1, math.ceil((1.0 - redundancy) * audio_len))
    cuts = np.sort(rng.choice(np.arange(1, audio_len), size=n_seg - 1, replace=False)) if n_seg > 1 else []
    protos = rng.standard_normal((n_seg, dim)) * std
    rows = protos[np.searchsorted(cuts, np.arange(audio_len), side="right")]
    if redundancy < 1.0:
        rows = rows + rng.standard_normal((audio_len, dim)) * (0.25 * std * (1.0 - redundancy))
    return rows


def make_sequence(weights: ModelWeights, seed: int, audio_len: int, text_len: int, redundancy: float = 0.5) -> Sequence:
    rng = make_rng(seed + 0x5EED)
    audio = synth_audio(rng, audio_len, weights.config.hidden_dim, redundancy)
    text_ids = rng.integers(0, weights.config.vocab_size, size=text_len)
    text = weights.embed_tokens(text_ids)
    return Sequence(np.concatenate([audio, text], axis=0), audio_len, text_len)


@lru_cache(maxsize=4)
def cached_weights(model: ModelConfig, seed: int) -> ModelWeights:
    return ModelWeights.init(model, seed)


def gen_fixture(out_dir, seed: int, audio_len: int, text_len: int, model: ModelConfig | None = None,
                redundancy: float = 0.5, tokens_per_second: float = 50.0) -> tuple[ModelWeights, Sequence]:
    """Write ``model.bin``, ``fixture.bin`` (+ manifests) and ``fixture.json`` to ``out_dir``."""
    model = model or ModelConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    weights = ModelWeights.init(model, seed)
    seq = make_sequence(weights, seed, audio_len, text_len, redundancy)
    adasp_io.save_weights(weights, out / "model.bin")
    adasp_io.save_sequence(seq, out / "fixture.bin")
    manifest = {
        "seed": seed,
        "audio_len": audio_len,
        "text_len": text_len,
        "redundancy": redundancy,
        "tokens_per_second": tokens_per_second,
        "audio_seconds": audio_len / tokens_per_second,
        "model": asdict(model),
    }
    (out / "fixture.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return weights, seq


# --- runs -------------------------------------------------------------------

def resolve_seed(flag_seed: int | None, config_seed: int | None = None) -> int:
    if flag_seed is not None:
        return flag_seed
    if config_seed is not None:
        return config_seed
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from e
    return 0


def resolve_k_tokens(cfg: RunConfig, seq: Sequence) -> int:
    p = cfg.plan
    if p.policy == "none":
        return 0
    if p.k_tokens is not None:
        k = int(p.k_tokens)
        if not 0 <= k <= seq.audio_len - 1:
            raise ValueError(f"k_tokens={k} infeasible for {seq.audio_len} audio tokens")
        return k
    return k_tokens_for_target(p.target, seq.prompt_len, seq.audio_len, cfg.model.hidden_dim, cfg.model.ffn_dim)


def expected_lengths(prompt_len: int, budgets) -> list[int]:
    """Per-layer cache length implied by a schedule (reduction after layer l shortens l + 1 onward)."""
    out, n = [], prompt_len
    for b in budgets:
        out.append(n)
        n -= b
    return out


@dataclass
class RunOutcome:
    report: RunReport
    entropy: EntropyReport | None
    token_ids: list[int]
    cache_lengths: list[int]


def run_once(cfg: RunConfig, weights: ModelWeights | None = None, seq: Sequence | None = None) -> RunOutcome:
    cfg.validate()
    weights = weights or cached_weights(cfg.model, cfg.seed)
    seq = seq or make_sequence(weights, cfg.seed, cfg.fixture.audio_len, cfg.fixture.text_len, cfg.fixture.redundancy)
    n_layers = weights.config.num_layers
    k_tokens = resolve_k_tokens(cfg, seq)

    entropy = None
    layer = cfg.plan.layer
    if layer == "auto":
        if cfg.plan.schedule == "single_layer" and k_tokens > 0:
            layer, entropy = select_layer(weights, seq, cfg.plan.candidates, k_tokens)
        else:
            layer = 1 if n_layers > 1 else 0
    schedule = make_schedule(cfg.plan.schedule, k_tokens, layer, n_layers, seq.audio_len)
    budgets = list(schedule.budgets) if cfg.plan.policy != "none" else [0] * n_layers

    steps = cfg.fixture.decode_steps
    runs = []
    for i in range(cfg.repeats + (1 if cfg.warmup else 0)):
        hooks = ScheduledReduction(cfg.plan.policy, budgets, seed=cfg.seed)
        res = generate(weights, seq, hooks, steps=steps, audio_s=cfg.fixture.audio_s)
        if cfg.warmup and i == 0:
            continue
        runs.append(res)
        fallbacks = hooks.fallbacks

    first = runs[0]
    for r in runs[1:]:
        if r.token_ids != first.token_ids:
            raise RuntimeError("non-deterministic token ids across repeats")
    # generate() leaves the cache after the decode steps
    prefill_lengths = [n - steps for n in first.prefill.cache.lengths]
    want = expected_lengths(seq.prompt_len, budgets)
    if prefill_lengths != want:
        raise RuntimeError(f"KV bookkeeping {prefill_lengths} does not match schedule {want}")

    d, m = weights.config.hidden_dim, weights.config.ffn_dim
    flops = aggregate_run_flops([seq.prompt_len] * n_layers, prefill_lengths, d, m, steps, n_layers)
    timings = RunTimings(
        prefill_s=statistics.median(r.timings.prefill_s for r in runs),
        decoding_s=statistics.median(r.timings.decoding_s for r in runs),
        audio_s=cfg.fixture.audio_s,
        generated_tokens=steps,
    )
    report = RunReport(
        policy=cfg.plan.policy,
        schedule=cfg.plan.schedule,
        layers=" ".join(str(i) for i in schedule.operation_layers) if cfg.plan.policy != "none" else "",
        audio_len=seq.audio_len,
        text_len=seq.text_len,
        decode_steps=steps,
        seed=cfg.seed,
        target_pct=None if cfg.plan.target is None or cfg.plan.policy == "none" else 100.0 * cfg.plan.target,
        k_tokens=k_tokens,
        flops_reduction_pct=flops.reduction_pct,
        kv_bytes_baseline=kv_bytes(weights.config, [seq.prompt_len + steps] * n_layers),
        kv_bytes_reduced=kv_bytes(weights.config, [n + steps for n in prefill_lengths]),
        fallback_warnings=fallbacks,
        rtf=rtf(timings),
        prefill_s=timings.prefill_s,
        decode_s=timings.decoding_s,
        throughput_tps=throughput(timings),
    )
    return RunOutcome(report, entropy, first.token_ids, prefill_lengths)


@dataclass
class SpeedupMeasurement:
    audio_len: int
    k_tokens: int
    layer: int
    steps: int
    baseline_s: list[float]
    reduced_s: list[float]

    @property
    def baseline_tps(self) -> float:
        return self.steps / statistics.median(self.baseline_s)

    @property
    def reduced_tps(self) -> float:
        return self.steps / statistics.median(self.reduced_s)

    @property
    def speedup(self) -> float:
        return self.reduced_tps / self.baseline_tps


def paired_decode_speedup(
    weights: ModelWeights,
    seq: Sequence,
    k_tokens: int,
    layer: int = 0,
    steps: int = 256,
    repeats: int = 5,
    policy: str = "weighted_merge",
    warmup_steps: int = 16,
) -> SpeedupMeasurement:
    """Decode throughput with and without a single-layer reduction, timed in lockstep.

    Both sessions advance one step at a time, alternately, so host contention
    hits them equally; each repeat restarts both from their prefill caches.
    """
    budgets = [0] * weights.config.num_layers
    budgets[layer] = k_tokens
    sessions = {}
    for name, plan in (("baseline", [0] * len(budgets)), ("reduced", budgets)):
        pre = prefill(weights, seq, ScheduledReduction(policy, plan), reserve=steps + warmup_steps)
        sessions[name] = (pre.cache, int(np.argmax(logits_from_hidden(weights, pre.final_hidden[-1]))))

    def one_pass(n_steps: int) -> dict[str, float]:
        caches = {k: c.copy() for k, (c, _) in sessions.items()}
        tokens = {k: t for k, (_, t) in sessions.items()}
        spent = dict.fromkeys(sessions, 0.0)
        for _ in range(n_steps):
            for name in sessions:
                t0 = time.perf_counter()
                logits, _ = decode_step(weights, caches[name], weights.embedding[tokens[name]])
                tokens[name] = int(np.argmax(logits))
                spent[name] += time.perf_counter() - t0
        return spent

    if warmup_steps:
        one_pass(warmup_steps)
    passes = [one_pass(steps) for _ in range(repeats)]
    return SpeedupMeasurement(
        audio_len=seq.audio_len,
        k_tokens=k_tokens,
        layer=layer,
        steps=steps,
        baseline_s=[p["baseline"] for p in passes],
        reduced_s=[p["reduced"] for p in passes],
    )


# --- sweeps -----------------------------------------------------------------

ENTROPY_COLUMNS = ["policy", "target_pct", "layer", "k_tokens", "entropy", "te", "rank", "selected"]


def sweep_configs(base: RunConfig) -> list[RunConfig]:
    base.sweep.validate()
    out = []
    for policy in base.sweep.policies:
        for target in base.sweep.targets:
            plan = replace(base.plan, policy=policy, target=target, k_tokens=None)
            out.append(replace(base, plan=plan))
    return out


def _run_cell(cfg: RunConfig):
    try:
        return run_once(cfg), None
    except Exception as e:  # a failed cell is recorded, not fatal to the sweep
        return None, f"{type(e).__name__}: {e}"


def _failed_row(cfg: RunConfig, reason: str) -> dict[str, str]:
    row = {c: "" for c in REPORT_COLUMNS}
    row.update(
        policy=cfg.plan.policy,
        schedule=cfg.plan.schedule,
        target_pct=f"{100.0 * cfg.plan.target:.6f}",
        seed=str(cfg.seed),
        status="failed: " + reason.replace("\n", " "),
    )
    return row


def _fmt_cell(value) -> str:
    return f"{value:.2f}" if isinstance(value, float) else str(value)


def run_sweep(base: RunConfig, out_dir=None) -> int:
    """Run every policy x target cell; write results.csv, results.md and entropy_report.csv.

    Returns the number of failed cells.
    """
    cells = sweep_configs(base)
    out = Path(out_dir or base.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    grid: dict[tuple[str, float], str] = {}
    entropy_rows = []

    if base.workers > 1:
        pool = ProcessPoolExecutor(max_workers=base.workers)
        results = pool.map(_run_cell, cells)
    else:
        pool = None
        results = map(_run_cell, cells)

    try:
        with open(out / "results.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for cfg, (outcome, err) in zip(cells, results):
                key = (cfg.plan.policy, cfg.plan.target)
                if err is not None:
                    failures += 1
                    log.error("cell %s failed: %s", key, err)
                    writer.writerow(_failed_row(cfg, err))
                    grid[key] = "FAILED"
                else:
                    writer.writerow(report_row(outcome.report))
                    grid[key] = _fmt_cell(getattr(outcome.report, base.sweep.metric))
                    if outcome.entropy is not None:
                        entropy_rows.extend(entropy_rows_for(outcome, cfg.plan.policy, cfg.plan.target))
                fh.flush()
    finally:
        if pool is not None:
            pool.shutdown()

    (out / "results.md").write_text(
        sweep_markdown(grid, base.sweep.policies, base.sweep.targets, base.sweep.metric)
    )
    if entropy_rows:
        write_entropy_csv(entropy_rows, out / "entropy_report.csv")
    return failures


def write_entropy_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ENTROPY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def entropy_rows_for(outcome: RunOutcome, policy: str, target) -> list[dict]:
    rows = []
    for row in outcome.entropy.rows():
        rows.append(
            dict(policy=policy, target_pct="" if target is None else f"{100 * target:.0f}",
                 selected=int(row["layer"] == outcome.entropy.selected),
                 **{k: (f"{v:.9f}" if isinstance(v, float) else v) for k, v in row.items()})
        )
    return rows


__all__ = [
    "ConfigError", "FixtureConfig", "PlanConfig", "RunConfig", "SweepSpec", "RunOutcome",
    "gen_fixture", "make_sequence", "synth_audio", "run_once", "run_sweep", "sweep_configs",
    "load_config", "config_from_dict", "parse_target", "resolve_seed", "default_candidates",
]
