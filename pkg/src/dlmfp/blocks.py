from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigurationError, InputError


@dataclass
class BlockSchedule:
    """Fixed-size tiling of the generation region.

    ``current_block`` is the block being unmasked; ``n_frozen`` counts blocks
    whose cached K/V are frozen.  Freezing may lag unmasking by one pass.
    """

    prompt_len: int
    gen_len: int
    block_size: int
    current_block: int = 0
    n_frozen: int = 0

    @property
    def n_blocks(self) -> int:
        return -(-self.gen_len // self.block_size)

    @property
    def boundaries(self) -> list[int]:
        return [self.prompt_len + i * self.block_size for i in range(self.n_blocks)]

    def block_range(self, index: int) -> tuple[int, int]:
        start = self.prompt_len + index * self.block_size
        return start, min(start + self.block_size, self.prompt_len + self.gen_len)

    @property
    def lengths(self) -> list[int]:
        return [hi - lo for lo, hi in (self.block_range(i) for i in range(self.n_blocks))]


def partition_blocks(prompt_len: int, gen_len: int, block_size: int) -> BlockSchedule:
    if block_size < 1:
        raise ConfigurationError(f"block_size must be >= 1, got {block_size}")
    if gen_len < 1:
        raise InputError(f"gen_len must be >= 1, got {gen_len}")
    return BlockSchedule(prompt_len, gen_len, block_size)


def apportion_steps(lengths: list[int], total_steps: int) -> list[int]:
    """Split ``total_steps`` across blocks proportionally to their lengths.

    Every block gets between 1 and ``len`` steps; the rest go one at a time to
    the block furthest below its proportional share (lowest index on ties).
    """
    n, gen_len = len(lengths), sum(lengths)
    if not n <= total_steps <= gen_len:
        raise ConfigurationError(f"steps={total_steps} must lie in [{n}, {gen_len}] for {n} block(s)")
    alloc = [1] * n
    for _ in range(total_steps - n):
        best, best_gap = -1, None
        for i, length in enumerate(lengths):
            if alloc[i] >= length:
                continue
            gap = total_steps * length / gen_len - alloc[i]
            if best_gap is None or gap > best_gap:
                best, best_gap = i, gap
        alloc[best] += 1
    return alloc
