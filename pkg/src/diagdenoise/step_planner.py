"""Per-chunk step allocations, timestep lists, NFE counts, and the abstract cost model.

The cost model is deliberately abstract (units of one denoiser forward); only
orderings and ratios are meaningful, never wall-clock seconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence


@dataclass(frozen=True)
class StepSchedule:
    """Denoising step counts per chunk, e.g. [4,3,2,2,2,2,2]."""

    steps_per_chunk: tuple[int, ...]
    cyclic_extension: bool = False
    require_monotonic: bool = False

    def __init__(self, steps_per_chunk: Sequence[int], cyclic_extension: bool = False,
                 require_monotonic: bool = False):
        steps = tuple(int(v) for v in steps_per_chunk)
        if not steps:
            raise ValueError("schedule must have at least one chunk")
        if any(v < 1 for v in steps):
            raise ValueError("every chunk needs at least one step")
        if require_monotonic and any(b > a for a, b in zip(steps, steps[1:])):
            raise ValueError("schedule is not non-increasing")
        object.__setattr__(self, "steps_per_chunk", steps)
        object.__setattr__(self, "cyclic_extension", bool(cyclic_extension))
        object.__setattr__(self, "require_monotonic", bool(require_monotonic))

    def __len__(self) -> int:
        return len(self.steps_per_chunk)

    def digits(self) -> str:
        return "".join(str(v) for v in self.steps_per_chunk)


@dataclass(frozen=True)
class CostModel:
    """Abstract per-forward cost plus the bookkeeping constants."""

    cost_per_forward: float = 1.0
    frames_per_chunk: int = 3
    nfe_multiplier: int = 2

    def __post_init__(self):
        if self.cost_per_forward <= 0 or self.frames_per_chunk <= 0 or self.nfe_multiplier <= 0:
            raise ValueError("cost model fields must be positive")


@dataclass(frozen=True)
class ScheduleReport:
    """Accounting record produced by simulate()."""

    schedule: str
    nfe: int
    first_chunk_latency: float
    in_flight_latency: float
    throughput: float
    total_frames: int = field(default=0)
    total_cost: float = field(default=0.0)


def parse_schedule(digits: str) -> StepSchedule:
    """Parse a digit string like "4322222" into a step schedule (digits 1-9)."""
    if not digits:
        raise ValueError("empty schedule string")
    steps = []
    for ch in digits:
        if ch == "0" or not ch.isdigit():
            raise ValueError(f"invalid schedule digit {ch!r} (must be 1-9)")
        steps.append(int(ch))
    return StepSchedule(steps)


def nfe_count(sched: StepSchedule, cost: CostModel = CostModel()) -> int:
    """Total function evaluations: nfe_multiplier * sum of steps."""
    return cost.nfe_multiplier * sum(sched.steps_per_chunk)


def timesteps_for(steps: int, horizon: int = 1000, floor: int = 100,
                  policy: str = "linear") -> list[int]:
    """Per-step timestep list: always starts at the horizon, ends at the floor.

    steps=1 -> [1000]; steps=2 -> [1000, 100]; steps>=3 interpolates between
    the same two anchors, linearly by default or geometrically (log-space)
    under policy="geometric".
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps == 1:
        return [horizon]
    if policy == "linear":
        span = horizon - floor
        return [int(round(horizon - span * i / (steps - 1))) for i in range(steps)]
    if policy == "geometric":
        import math
        lo, hi = math.log(floor), math.log(horizon)
        return [int(round(math.exp(hi - (hi - lo) * i / (steps - 1)))) for i in range(steps)]
    raise ValueError(f"unknown timestep policy {policy!r}")


def simulate(sched: StepSchedule, cost: CostModel = CostModel()) -> ScheduleReport:
    """Pure-arithmetic accounting: NFE, latencies, and frames-per-cost throughput."""
    steps = sched.steps_per_chunk
    total_cost = sum(steps) * cost.cost_per_forward
    total_frames = len(steps) * cost.frames_per_chunk
    in_flight = max((s * cost.cost_per_forward for s in steps[1:]), default=0.0)
    return ScheduleReport(
        schedule=sched.digits(),
        nfe=nfe_count(sched, cost),
        first_chunk_latency=steps[0] * cost.cost_per_forward,
        in_flight_latency=in_flight,
        throughput=total_frames / total_cost,
        total_frames=total_frames,
        total_cost=total_cost,
    )


def extend_cyclically(sched: StepSchedule, chunks: int) -> StepSchedule:
    """Repeat the base pattern until `chunks` entries (truncating if shorter)."""
    if chunks < 1:
        raise ValueError("chunks must be >= 1")
    base = sched.steps_per_chunk
    reps = (chunks + len(base) - 1) // len(base)
    return StepSchedule((base * reps)[:chunks], cyclic_extension=True)
