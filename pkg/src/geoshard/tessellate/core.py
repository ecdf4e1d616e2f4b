"""Grid-generic covering machinery behind the tessellation API.

Everything here works on abstract tiles ``(level, idx)`` where ``idx`` is a
tuple of integers, one per dimension. Level 0 is the coarsest; each tile
splits into ``branch`` children per axis. The production geographic grid,
the reduced-ratio verification grid and the one-dimensional period hierarchy
are all instances of :class:`GridSpec`.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

Tile = tuple[int, tuple[int, ...]]

_EPS = 1e-7


class InstanceTooLarge(ValueError):
    """Raised when an exhaustive search would exceed its size guard."""


@dataclass(frozen=True, slots=True)
class GridSpec:
    """A hierarchical grid: `levels` levels, `branch` children per axis."""

    levels: int
    branch: int
    dims: int
    cell0: float = 1.0

    def __post_init__(self):
        if self.levels < 1 or self.branch < 2 or self.dims < 1 or self.cell0 <= 0:
            raise ValueError(f"bad grid spec: {self}")

    @property
    def finest(self) -> int:
        return self.levels - 1

    def side(self, level: int) -> float:
        return self.cell0 / self.branch ** level

    def tile_area(self, level: int) -> float:
        return self.side(level) ** self.dims

    def ancestor(self, tile: Tile, level: int) -> Tile:
        tl, idx = tile
        if level > tl:
            raise ValueError(f"level {level} deeper than tile level {tl}")
        div = self.branch ** (tl - level)
        return (level, tuple(i // div for i in idx))

    def covers(self, outer: Tile, inner: Tile) -> bool:
        """True when `inner` lies inside `outer` (equality included)."""
        return outer[0] <= inner[0] and self.ancestor(inner, outer[0]) == outer

    def tile_bounds(self, tile: Tile) -> tuple[tuple[float, float], ...]:
        s = self.side(tile[0])
        return tuple((i * s, (i + 1) * s) for i in tile[1])


class Region:
    """A query region: the area the tessellation must cover."""

    grid: GridSpec

    def area(self) -> float:
        raise NotImplementedError

    def intersection_area(self, tile: Tile) -> float:
        raise NotImplementedError

    def tiles_overlapping(self, level: int) -> list[Tile]:
        raise NotImplementedError

    def count_overlapping(self, level: int) -> int:
        return len(self.tiles_overlapping(level))

    def mst_leaves(self) -> list[Tile]:
        """Leaves of the minimum stretch-and-tiles reduction."""
        raise NotImplementedError


class BoxRegion(Region):
    """Axis-aligned box; all tile bookkeeping is index arithmetic.

    The minimum-stretch-and-tiles leaf set is enumerated in O(boundary)
    rather than O(area), which is what keeps large constrained tessellations
    affordable.
    """

    def __init__(self, grid: GridSpec, lo: Sequence[float], hi: Sequence[float]):
        if len(lo) != grid.dims or len(hi) != grid.dims:
            raise ValueError("box dimensionality does not match the grid")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError(f"degenerate box: {lo} .. {hi}")
        self.grid = grid
        self.lo = tuple(float(v) for v in lo)
        self.hi = tuple(float(v) for v in hi)

    def _span(self, level: int) -> list[tuple[int, int]]:
        """Inclusive index range of overlapping tiles, per dimension."""
        scale = self.grid.branch ** level / self.grid.cell0
        out = []
        for a, b in zip(self.lo, self.hi):
            i0 = math.floor(a * scale + _EPS)
            i1 = math.ceil(b * scale - _EPS) - 1
            out.append((i0, max(i0, i1)))
        return out

    def area(self) -> float:
        prod = 1.0
        for a, b in zip(self.lo, self.hi):
            prod *= b - a
        return prod

    def intersection_area(self, tile: Tile) -> float:
        prod = 1.0
        for (a, b), (ta, tb) in zip(zip(self.lo, self.hi), self.grid.tile_bounds(tile)):
            w = min(b, tb) - max(a, ta)
            if w <= 0:
                return 0.0
            prod *= w
        return prod

    def count_overlapping(self, level: int) -> int:
        n = 1
        for i0, i1 in self._span(level):
            n *= i1 - i0 + 1
        return n

    def tiles_overlapping(self, level: int) -> list[Tile]:
        ranges = [range(i0, i1 + 1) for i0, i1 in self._span(level)]
        return [(level, idx) for idx in itertools.product(*ranges)]

    def _full_spans(self) -> list[list[tuple[int, int]] | None]:
        """Per level, the index box of tiles that collapse in the reduction.

        A tile collapses when all of its children are present; at the finest
        level "collapses" just means "overlaps the box". Empty boxes are None.
        """
        spans: list[list[tuple[int, int]] | None] = [None] * self.grid.levels
        spans[self.grid.finest] = self._span(self.grid.finest)
        b = self.grid.branch
        for level in range(self.grid.finest - 1, -1, -1):
            below = spans[level + 1]
            if below is None:
                break
            cur = []
            for i0, i1 in below:
                lo = -((-i0) // b)  # ceil div
                hi = (i1 + 1) // b - 1
                if lo > hi:
                    cur = None
                    break
                cur.append((lo, hi))
            spans[level] = cur
            if cur is None:
                break
        return spans

    def mst_leaves(self) -> list[Tile]:
        spans = self._full_spans()
        leaves: list[Tile] = []
        b = self.grid.branch
        for level in range(self.grid.levels):
            outer = spans[level]
            if outer is None:
                continue
            inner = spans[level - 1] if level > 0 else None
            if inner is not None:
                inner = [(i0 * b, i1 * b + b - 1) for i0, i1 in inner]
            leaves.extend((level, idx) for idx in _box_difference(outer, inner))
        return leaves


def _box_difference(
    outer: list[tuple[int, int]], inner: list[tuple[int, int]] | None
) -> Iterator[tuple[int, ...]]:
    """Cells of the `outer` index box not inside `inner` (output-sensitive)."""
    if inner is None:
        yield from itertools.product(*(range(a, b + 1) for a, b in outer))
        return
    if len(outer) == 1:
        (a, b), (ia, ib) = outer[0], inner[0]
        for i in itertools.chain(range(a, ia), range(ib + 1, b + 1)):
            yield (i,)
        return
    if len(outer) == 2:
        (a0, b0), (a1, b1) = outer
        (ia0, ib0), (ia1, ib1) = inner
        for i in itertools.chain(range(a0, ia0), range(ib0 + 1, b0 + 1)):
            for j in range(a1, b1 + 1):
                yield (i, j)
        for i in range(max(a0, ia0), min(b0, ib0) + 1):
            for j in itertools.chain(range(a1, ia1), range(ib1 + 1, b1 + 1)):
                yield (i, j)
        return
    for idx in itertools.product(*(range(a, b + 1) for a, b in outer)):
        if not all(ia <= i <= ib for i, (ia, ib) in zip(idx, inner)):
            yield idx


class CellSetRegion(Region):
    """Region given as an explicit set of finest-level cells.

    Intended for small instances: verification grids and the exhaustive
    oracle. Intersections are counted exactly (whole cells).
    """

    def __init__(self, grid: GridSpec, cells: Iterable[tuple[int, ...]]):
        self.grid = grid
        self.cells = {tuple(c) for c in cells}
        if not self.cells:
            raise ValueError("empty cell set")
        # cells-per-ancestor counts, all levels
        self._counts: dict[Tile, int] = {}
        for c in self.cells:
            for level in range(grid.levels):
                anc = grid.ancestor((grid.finest, c), level)
                self._counts[anc] = self._counts.get(anc, 0) + 1

    def area(self) -> float:
        return len(self.cells) * self.grid.tile_area(self.grid.finest)

    def intersection_area(self, tile: Tile) -> float:
        return self._counts.get(tile, 0) * self.grid.tile_area(self.grid.finest)

    def tiles_overlapping(self, level: int) -> list[Tile]:
        return sorted(t for t in self._counts if t[0] == level)

    def mst_leaves(self) -> list[Tile]:
        tree = IndexTree.from_leaves(self.grid, ((self.grid.finest, c) for c in self.cells))
        return tree.reduce().leaf_tiles()


class IndexTree:
    """Explicit tessellation tree: leaves are the current cover.

    Every non-root node's parent is present; leaves are pairwise disjoint and
    their union covers the query cells the tree was built from.
    """

    def __init__(self, grid: GridSpec):
        self.grid = grid
        self.children: dict[Tile, set[Tile]] = {}
        self.leaves: set[Tile] = set()

    @classmethod
    def from_leaves(cls, grid: GridSpec, leaves: Iterable[Tile]) -> "IndexTree":
        tree = cls(grid)
        for leaf in leaves:
            tree.leaves.add(leaf)
            node = leaf
            while node[0] > 0:
                parent = grid.ancestor(node, node[0] - 1)
                kids = tree.children.setdefault(parent, set())
                if node in kids:
                    break
                kids.add(node)
                node = parent
        return tree

    def leaf_tiles(self) -> list[Tile]:
        return sorted(self.leaves)

    def reduce(self) -> "IndexTree":
        """Minimum stretch-and-tiles reduction (in place, returns self).

        Repeatedly replaces any full complement of children that are all
        leaves with their parent, deepest parents first so collapses cascade.
        """
        full = self.grid.branch ** self.grid.dims
        for level in range(self.grid.finest - 1, -1, -1):
            for node, kids in list(self.children.items()):
                if node[0] != level:
                    continue
                if len(kids) == full and kids <= self.leaves:
                    self.leaves -= kids
                    self.leaves.add(node)
                    del self.children[node]
        return self

    def copy(self) -> "IndexTree":
        dup = IndexTree(self.grid)
        dup.children = {k: set(v) for k, v in self.children.items()}
        dup.leaves = set(self.leaves)
        return dup


@dataclass(frozen=True, slots=True)
class CoverResult:
    """Disjoint tile cover of a region."""

    tiles: tuple[Tile, ...]
    covered_area: float
    region_area: float
    constraint_respected: bool

    @property
    def stretch(self) -> float:
        return self.covered_area / self.region_area


def _cover_result(grid: GridSpec, region: Region, tiles: Iterable[Tile], ok: bool) -> CoverResult:
    tiles = tuple(sorted(tiles))
    covered = sum(grid.tile_area(t[0]) for t in tiles)
    return CoverResult(tiles, covered, region.area(), ok)


def min_stretch_cover(region: Region) -> CoverResult:
    """All finest-level tiles overlapping the region."""
    grid = region.grid
    return _cover_result(grid, region, region.tiles_overlapping(grid.finest), True)


def mst_cover(region: Region) -> CoverResult:
    return _cover_result(region.grid, region, region.mst_leaves(), True)


def tile_stretch(region: Region, tile: Tile) -> float:
    """Ratio of the tile area to its intersection with the region (>= 1)."""
    inter = region.intersection_area(tile)
    if inter <= 0:
        raise ValueError(f"tile {tile} does not intersect the region")
    return region.grid.tile_area(tile[0]) / inter


class _GreedyState:
    """Incremental leaf bookkeeping for the constrained greedy.

    Tracks, per level m, the map from each level-m ancestor tile to the set
    of current leaves strictly deeper than m below it, so both the necessity
    count and the candidate scan avoid full passes over the leaf set.
    """

    def __init__(self, region: Region):
        self.region = region
        self.grid = region.grid
        self.leaves: set[Tile] = set()
        self.level_count = [0] * self.grid.levels
        self.members: list[dict[Tile, set[Tile]]] = [dict() for _ in range(self.grid.levels)]
        self._areas: dict[Tile, float] = {}

    def area_of(self, tile: Tile) -> float:
        a = self._areas.get(tile)
        if a is None:
            a = self.region.intersection_area(tile)
            self._areas[tile] = a
        return a

    def add(self, leaf: Tile) -> None:
        self.leaves.add(leaf)
        self.level_count[leaf[0]] += 1
        for m in range(leaf[0]):
            anc = self.grid.ancestor(leaf, m)
            self.members[m].setdefault(anc, set()).add(leaf)

    def remove(self, leaf: Tile) -> None:
        self.leaves.discard(leaf)
        self.level_count[leaf[0]] -= 1
        for m in range(leaf[0]):
            anc = self.grid.ancestor(leaf, m)
            group = self.members[m][anc]
            group.discard(leaf)
            if not group:
                del self.members[m][anc]

    def completion_count(self, level: int) -> int:
        """Leaf count if every deeper leaf were aggregated at `level`."""
        return sum(self.level_count[: level + 1]) + len(self.members[level])

    def aggregate_best(self, level: int) -> bool:
        """Replace the min-tile-stretch level-`level` candidate's leaves by it."""
        groups = self.members[level]
        if not groups:
            return False
        best = min(groups, key=lambda c: (-self.area_of(c), c))
        for leaf in list(groups[best]):
            self.remove(leaf)
        self.add(best)
        return True


def constrained_cover(region: Region, k: int) -> CoverResult:
    """Greedy constrained tessellation.

    Starts from the reduced tree and, while over budget, inserts the
    necessary shallowest aggregation with minimum tile-stretch. A level-i
    tile is necessary when completing the cover with all remaining
    level-(i+1) tiles still exceeds k. When even the complete level-0 cover
    exceeds k, that cover is returned with the constraint flagged as not
    respected. Ties break on the lexicographically smallest tile.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    grid = region.grid
    if region.count_overlapping(0) > k:
        return _cover_result(grid, region, region.tiles_overlapping(0), False)

    state = _GreedyState(region)
    for leaf in region.mst_leaves():
        state.add(leaf)
    while len(state.leaves) > k:
        aggregated = False
        for i in range(grid.levels - 1):
            if state.completion_count(i + 1) <= k:
                continue  # level-(i+1) completion fits: level-i not necessary
            if state.aggregate_best(i):
                aggregated = True
                break
        if not aggregated:  # all leaves already level-0; guarded by the fallback
            break
    return _cover_result(grid, region, state.leaves, len(state.leaves) <= k)


def brute_force_cover(region: Region, k: int, cell_bound: int = 64) -> CoverResult:
    """Exhaustive minimum-stretch disjoint cover with at most k tiles.

    Independent of the greedy path: branches over which ancestor covers the
    first uncovered cell. Rejects instances with more than `cell_bound`
    finest cells.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    grid = region.grid
    cells = sorted(region.tiles_overlapping(grid.finest))
    if len(cells) > cell_bound:
        raise InstanceTooLarge(f"{len(cells)} cells exceeds the bound {cell_bound}")

    best: dict[str, object] = {"area": math.inf, "tiles": None}

    def first_uncovered(chosen: list[Tile]) -> Tile | None:
        for c in cells:
            if not any(grid.covers(t, c) for t in chosen):
                return c
        return None

    def search(chosen: list[Tile], area: float) -> None:
        if area >= best["area"]:
            return
        cell = first_uncovered(chosen)
        if cell is None:
            best["area"] = area
            best["tiles"] = tuple(chosen)
            return
        if len(chosen) >= k:
            return
        for level in range(grid.levels):
            cand = grid.ancestor(cell, level)
            if any(grid.covers(cand, t) for t in chosen):
                continue  # would swallow an already chosen tile
            chosen.append(cand)
            search(chosen, area + grid.tile_area(level))
            chosen.pop()

    search([], 0.0)
    if best["tiles"] is None:
        raise InstanceTooLarge(f"no cover with at most {k} tiles exists")
    return _cover_result(grid, region, best["tiles"], True)
