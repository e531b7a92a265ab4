"""Per-step decode records shared by every decoding policy."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

from .tensor_core import FlopCounter

DLM = "dlm"
GUIDER = "guider"


@dataclass(frozen=True)
class PassRecord:
    role: str
    n_query: int
    n_ctx: int


@dataclass
class GuidedStepRecord:
    positions: tuple[int, ...]
    draft: tuple[int, ...]
    guider_topk: tuple[tuple[int, ...], ...]
    k: int
    accepted: tuple[int, ...]
    fallback: bool


@dataclass
class StepRecord:
    step: int
    window_len: int
    masked_before: tuple[int, ...]
    unmasked: tuple[int, ...]
    flops: int
    flops_by_module: dict[str, int]
    passes: list[PassRecord]
    dlm_passes: int
    ar_passes: int
    wall_ms: float
    guided: GuidedStepRecord | None = None


@dataclass
class DecodeTrace:
    policy: str
    prompt_len: int
    gen_len: int
    steps: list[StepRecord] = field(default_factory=list)
    counter_total: int = 0
    _open: tuple | None = field(default=None, repr=False)
    _passes: list = field(default_factory=list, repr=False)

    def begin_step(self, counter: FlopCounter) -> None:
        total, by_module = counter.snapshot()
        self._open = (time.perf_counter(), total, by_module)
        self._passes = []

    def record_pass(self, role: str, n_query: int, n_ctx: int) -> None:
        self._passes.append(PassRecord(role, n_query, n_ctx))

    def end_step(self, counter: FlopCounter, window_len: int, masked_before, unmasked,
                 guided: GuidedStepRecord | None = None) -> StepRecord:
        t0, total0, mods0 = self._open
        total, mods = counter.snapshot()
        delta = {k: v - mods0.get(k, 0) for k, v in mods.items() if v - mods0.get(k, 0)}
        dlm = self.dlm_passes + sum(p.role == DLM for p in self._passes)
        ar = self.ar_passes + sum(p.role == GUIDER for p in self._passes)
        rec = StepRecord(len(self.steps) + 1, int(window_len), tuple(int(i) for i in masked_before),
                         tuple(sorted(int(i) for i in unmasked)), total - total0, delta, list(self._passes),
                         dlm, ar, (time.perf_counter() - t0) * 1e3, guided)
        self.steps.append(rec)
        self.counter_total = total
        self._open = None
        return rec

    @property
    def dlm_passes(self) -> int:
        return self.steps[-1].dlm_passes if self.steps else 0

    @property
    def ar_passes(self) -> int:
        return self.steps[-1].ar_passes if self.steps else 0

    @property
    def total_flops(self) -> int:
        return sum(s.flops for s in self.steps)

    @property
    def wall_ms(self) -> float:
        return sum(s.wall_ms for s in self.steps)

    def __len__(self) -> int:
        return len(self.steps)
