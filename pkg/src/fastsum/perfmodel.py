"""Analytical throughput model and report metrics.

Bandwidth figures are modelled bytes moved (expansion reads plus result
writes) divided by wall time; memory-transaction granularity is not modelled.
"""

import json
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .core import KernelCounters
from .errors import ChipSpecError, InvalidArgumentError


@dataclass(frozen=True)
class ChipSpec:
    clock_ghz: float
    tpc_count: int
    sm_per_tpc: int
    sp_per_sm: int
    sfu_per_sm: int
    sp_flops_per_cycle: int
    sfu_flops_per_cycle: int
    dp_fpu_per_sm: int
    dp_flops_per_cycle: int
    max_threads_per_sm: int
    max_blocks_per_sm: int
    shared_mem_bytes_per_sm: int

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type is int and (isinstance(v, bool) or not isinstance(v, int)):
                raise ChipSpecError(f.name, f"expected an integer, got {v!r}")
            if f.type is float and (isinstance(v, bool) or not isinstance(v, (int, float))):
                raise ChipSpecError(f.name, f"expected a number, got {v!r}")
            if not v > 0:
                raise ChipSpecError(f.name, f"must be positive, got {v!r}")

    @property
    def sm_count(self):
        return self.tpc_count * self.sm_per_tpc


@dataclass(frozen=True)
class PeakReport:
    sp_gflops: float
    sfu_gflops: float
    combined_gflops: float
    dp_gflops: float


def load_chip(source="gt200") -> ChipSpec:
    """Load a chip spec from a JSON file path or the name of a bundled spec."""
    path = Path(source)
    if path.suffix != ".json" and not path.exists():
        text = resources.files("fastsum.data").joinpath(f"{source}.json").read_text()
    else:
        text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ChipSpecError("<document>", f"not valid JSON ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise ChipSpecError("<document>", "expected a JSON object")
    names = [f.name for f in fields(ChipSpec)]
    for name in names:
        if name not in doc:
            raise ChipSpecError(name, "missing")
    extra = sorted(set(doc) - set(names))
    if extra:
        raise ChipSpecError(extra[0], "unknown field")
    return ChipSpec(**{n: doc[n] for n in names})


def peak_throughput(chip: ChipSpec) -> PeakReport:
    units = chip.clock_ghz * chip.sm_count
    sp = units * chip.sp_per_sm * chip.sp_flops_per_cycle
    sfu = units * chip.sfu_per_sm * chip.sfu_flops_per_cycle
    dp = units * chip.dp_fpu_per_sm * chip.dp_flops_per_cycle
    return PeakReport(sp, sfu, sp + sfu, dp)


def occupancy(active_threads, max_threads):
    if max_threads <= 0:
        raise InvalidArgumentError("max_threads must be positive")
    if not 0 <= active_threads <= max_threads:
        raise InvalidArgumentError(f"active_threads must lie in [0, {max_threads}]")
    return active_threads / max_threads


def shared_fit(item_bytes, shared_bytes, reserved_bytes=0):
    """Items of ``item_bytes`` that fit in shared memory after a reserved region."""
    if item_bytes <= 0:
        raise InvalidArgumentError("item_bytes must be positive")
    if not 0 <= reserved_bytes < shared_bytes:
        raise InvalidArgumentError("reserved_bytes must lie in [0, shared_bytes)")
    return (shared_bytes - reserved_bytes) // item_bytes


def kernel_metrics(counters: KernelCounters, items, elapsed=None):
    """Gop/s, GB/s and items/s; ``elapsed`` defaults to ``counters.elapsed_seconds``."""
    elapsed = counters.elapsed_seconds if elapsed is None else elapsed
    if not elapsed > 0:
        raise InvalidArgumentError("elapsed time must be positive")
    return {
        "gops": counters.arithmetic_ops / elapsed / 1e9,
        "gbps": (counters.bytes_read + counters.bytes_written) / elapsed / 1e9,
        "items_per_second": items / elapsed,
    }
