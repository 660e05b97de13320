"""Workloads: an exact Jacobi2D stencil and a compute-dominant synthetic load.

The stencil is split into equal rectangular blocks. Each block owns its cells
and receives four edge halos per iteration; the update is a double-buffered
four-neighbour mean with a fixed (Dirichlet) global boundary, so the result
does not depend on how blocks are placed or in which order they run.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .machine import ConfigError

HEADER_BYTES = 1024

# receiver-side direction -> (block offset of the sender, slice of sender values)
_HALO_SOURCES = {
    "north": ((-1, 0), lambda v: v[-1, :]),
    "south": ((1, 0), lambda v: v[0, :]),
    "west": ((0, -1), lambda v: v[:, -1]),
    "east": ((0, 1), lambda v: v[:, 0]),
}
# sender-side: sending toward offset d lands in the receiver's opposite side
_OPPOSITE = {"north": "south", "south": "north", "west": "east", "east": "west"}


@dataclass(frozen=True, order=True)
class ChareId:
    collection: str
    index: tuple

    def __str__(self):
        return f"{self.collection}{list(self.index)}"


@dataclass(frozen=True)
class StencilConfig:
    grid_n: int
    od_factor: int = 1
    iterations: int = 10
    element_bytes: int = 8
    boundary_value: float = 1.0

    def __post_init__(self):
        for name in ("grid_n", "od_factor", "iterations", "element_bytes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")


@dataclass(frozen=True)
class SyntheticConfig:
    chare_count: int
    work_per_iter: float
    comm_bytes: int
    iterations: int
    state_bytes: int = 1 << 20

    def __post_init__(self):
        if min(self.chare_count, self.work_per_iter, self.comm_bytes,
               self.iterations, self.state_bytes) <= 0:
            raise ConfigError("synthetic workload parameters must all be positive")


def _near_square(n: int) -> tuple[int, int]:
    """Split ``n`` into ``(a, b)`` with ``a * b == n`` and ``a <= b`` as close as possible."""
    a = int(math.isqrt(n))
    while n % a:
        a -= 1
    return a, n // a


@dataclass(frozen=True)
class BlockLayout:
    pe_rows: int
    pe_cols: int
    tile_rows: int
    tile_cols: int
    block_rows: int  # cells per block, vertical
    block_cols: int

    @property
    def grid_blocks(self) -> tuple[int, int]:
        return self.pe_rows * self.tile_rows, self.pe_cols * self.tile_cols

    def home_pe(self, bi: int, bj: int) -> int:
        return (bi // self.tile_rows) * self.pe_cols + bj // self.tile_cols


def block_layout(cfg: StencilConfig, pe_count: int) -> BlockLayout:
    """Lay out ``od_factor * pe_count`` blocks; each PE gets one tile of ``od_factor`` blocks."""
    if pe_count < 1:
        raise ConfigError("pe_count must be >= 1")
    pr, pc = _near_square(pe_count)
    tr, tc = _near_square(cfg.od_factor)
    nbr, nbc = pr * tr, pc * tc
    if cfg.grid_n % nbr or cfg.grid_n % nbc:
        raise ConfigError(
            f"grid {cfg.grid_n}x{cfg.grid_n} does not split into a {nbr}x{nbc} block grid "
            f"(od_factor={cfg.od_factor}, pe_count={pe_count})")
    br, bc = cfg.grid_n // nbr, cfg.grid_n // nbc
    if br < 2 or bc < 2:
        raise ConfigError(f"blocks of {br}x{bc} cells are too small; need at least 2x2")
    return BlockLayout(pr, pc, tr, tc, br, bc)


class ChareBlock:
    """One block of the Jacobi grid plus its halo buffers."""

    collection = "jacobi"

    def __init__(self, index, values, origin, grid_n, element_bytes=8,
                 device_resident=False, block_grid=(1, 1)):
        self.index = tuple(index)
        self.cid = ChareId(self.collection, self.index)
        self.values = values
        self.origin = origin
        self.grid_n = grid_n
        self.element_bytes = element_bytes
        self.device_resident = device_resident
        self.iteration = 0
        # iteration -> {direction: edge array}
        self.halos: dict[int, dict[str, np.ndarray]] = {}
        nbr, nbc = block_grid
        bi, bj = self.index
        self.neighbor_dirs = {}
        for direction, ((di, dj), _) in _HALO_SOURCES.items():
            ni, nj = bi + di, bj + dj
            if 0 <= ni < nbr and 0 <= nj < nbc:
                self.neighbor_dirs[direction] = ChareId(self.collection, (ni, nj))
        rows, cols = values.shape
        r0, c0 = origin
        gr = np.arange(r0, r0 + rows)[:, None]
        gc = np.arange(c0, c0 + cols)[None, :]
        self.fixed = (gr == 0) | (gr == grid_n - 1) | (gc == 0) | (gc == grid_n - 1)
        self.work_per_iter = float(np.count_nonzero(~self.fixed))

    @property
    def state_bytes(self) -> int:
        return self.values.size * self.element_bytes + HEADER_BYTES

    @property
    def expected_halos(self) -> int:
        return len(self.neighbor_dirs)

    def halos_complete(self) -> bool:
        got = self.halos.get(self.iteration)
        n = len(got) if got else 0
        return n == self.expected_halos

    def receive(self, iteration: int, direction: str, edge) -> None:
        slot = self.halos.setdefault(iteration, {})
        if direction in slot:
            raise RuntimeError(f"{self.cid}: duplicate {direction} halo for iteration {iteration}")
        slot[direction] = edge

    def outgoing(self):
        """Messages carrying this block's edges for its current iteration."""
        out = []
        for direction, nbr in self.neighbor_dirs.items():
            edge_fn = _HALO_SOURCES[_OPPOSITE[direction]][1]
            edge = edge_fn(self.values).copy()
            out.append((nbr, _OPPOSITE[direction], edge, edge.size * self.element_bytes))
        return out

    def step(self) -> None:
        local_step(self)

    def snapshot(self) -> dict:
        return {"values": self.values.copy(), "iteration": self.iteration}

    def load(self, state: dict) -> None:
        self.values = state["values"].copy()
        self.iteration = state["iteration"]
        self.halos = {}


class SyntheticChare:
    """Compute-dominant chare on a ring; carries no numerical state."""

    collection = "synthetic"

    def __init__(self, index: int, cfg: SyntheticConfig, device_resident=False):
        self.index = (index,)
        self.cid = ChareId(self.collection, self.index)
        self.work_per_iter = float(cfg.work_per_iter)
        self.comm_bytes = cfg.comm_bytes
        self.device_resident = device_resident
        self.state_bytes = cfg.state_bytes
        self.iteration = 0
        self.halos: dict[int, dict[str, object]] = {}
        n = cfg.chare_count
        self.neighbor_dirs = {}
        if n > 1:
            self.neighbor_dirs["west"] = ChareId(self.collection, ((index - 1) % n,))
        if n > 2:
            self.neighbor_dirs["east"] = ChareId(self.collection, ((index + 1) % n,))
        elif n == 2:
            self.neighbor_dirs = {"west": ChareId(self.collection, ((index + 1) % 2,))}

    @property
    def expected_halos(self) -> int:
        return len(self.neighbor_dirs)

    def halos_complete(self) -> bool:
        got = self.halos.get(self.iteration)
        return (len(got) if got else 0) == self.expected_halos

    def receive(self, iteration, direction, edge) -> None:
        slot = self.halos.setdefault(iteration, {})
        if direction in slot:
            raise RuntimeError(f"{self.cid}: duplicate {direction} halo for iteration {iteration}")
        slot[direction] = edge

    def outgoing(self):
        flip = {"west": "east", "east": "west"}
        if len(self.neighbor_dirs) == 1:
            flip = {"west": "west"}
        return [(nbr, flip[d], None, self.comm_bytes) for d, nbr in self.neighbor_dirs.items()]

    def step(self) -> None:
        if not self.halos_complete():
            raise RuntimeError(f"{self.cid}: missing halo at iteration {self.iteration}")
        self.halos.pop(self.iteration, None)
        self.iteration += 1

    def snapshot(self) -> dict:
        return {"iteration": self.iteration}

    def load(self, state: dict) -> None:
        self.iteration = state["iteration"]
        self.halos = {}


def init_blocks(cfg: StencilConfig, pe_count: int = 1,
                placement: Optional[Callable[[tuple], int]] = None,
                device_resident: bool = False):
    """Create every block of the grid and its initial PE.

    Returns ``(blocks, placement_map)`` where ``placement_map`` maps each
    :class:`ChareId` to a PE index. Without an explicit ``placement`` each PE
    receives one contiguous tile of ``od_factor`` blocks.
    """
    layout = block_layout(cfg, pe_count)
    nbr, nbc = layout.grid_blocks
    full = initial_grid(cfg)
    blocks, where = [], {}
    for bi in range(nbr):
        for bj in range(nbc):
            r0, c0 = bi * layout.block_rows, bj * layout.block_cols
            vals = full[r0:r0 + layout.block_rows, c0:c0 + layout.block_cols].copy()
            blk = ChareBlock((bi, bj), vals, (r0, c0), cfg.grid_n, cfg.element_bytes,
                             device_resident, (nbr, nbc))
            pe = placement((bi, bj)) if placement else layout.home_pe(bi, bj)
            if not 0 <= pe < pe_count:
                raise ConfigError(f"placement put block {(bi, bj)} on unknown PE {pe}")
            blocks.append(blk)
            where[blk.cid] = pe
    return blocks, where


def init_synthetic(cfg: SyntheticConfig, pe_count: int = 1, device_resident=False):
    """Create the ring of synthetic chares, dealt to PEs in contiguous runs."""
    chares = [SyntheticChare(i, cfg, device_resident) for i in range(cfg.chare_count)]
    where = {c.cid: (i * pe_count) // cfg.chare_count for i, c in enumerate(chares)}
    return chares, where


def halo_messages(block: ChareBlock) -> list[tuple[ChareId, int]]:
    return [(nbr, size) for nbr, _, _, size in block.outgoing()]


def initial_grid(cfg: StencilConfig) -> np.ndarray:
    grid = np.zeros((cfg.grid_n, cfg.grid_n), dtype=np.float64)
    grid[0, :] = grid[-1, :] = cfg.boundary_value
    grid[:, 0] = grid[:, -1] = cfg.boundary_value
    return grid


def local_step(block: ChareBlock) -> ChareBlock:
    """Advance one block by one Jacobi sweep using the halos of its current iteration."""
    got = block.halos.get(block.iteration, {})
    missing = set(block.neighbor_dirs) - set(got)
    if missing:
        raise RuntimeError(
            f"{block.cid}: missing halo(s) {sorted(missing)} at iteration {block.iteration}")
    v = block.values
    rows, cols = v.shape
    p = np.zeros((rows + 2, cols + 2), dtype=v.dtype)
    p[1:-1, 1:-1] = v
    if "north" in got:
        p[0, 1:-1] = got["north"]
    if "south" in got:
        p[-1, 1:-1] = got["south"]
    if "west" in got:
        p[1:-1, 0] = got["west"]
    if "east" in got:
        p[1:-1, -1] = got["east"]
    new = 0.25 * (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:])
    new[block.fixed] = v[block.fixed]
    block.values = new
    block.halos.pop(block.iteration, None)
    block.iteration += 1
    return block


def reference_solve(cfg: StencilConfig, iterations: Optional[int] = None) -> np.ndarray:
    """Sequential whole-grid Jacobi sweeps; ground truth for the distributed run."""
    grid = initial_grid(cfg)
    n = cfg.iterations if iterations is None else iterations
    for _ in range(n):
        nxt = grid.copy()
        nxt[1:-1, 1:-1] = 0.25 * (grid[:-2, 1:-1] + grid[2:, 1:-1]
                                  + grid[1:-1, :-2] + grid[1:-1, 2:])
        grid = nxt
    return grid


def assemble(blocks, grid_n: int) -> np.ndarray:
    out = np.full((grid_n, grid_n), np.nan)
    for b in blocks:
        r0, c0 = b.origin
        rows, cols = b.values.shape
        out[r0:r0 + rows, c0:c0 + cols] = b.values
    return out
