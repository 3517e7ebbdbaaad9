"""Dynamic maps: nested multi-resolution grids over a planar extent.

A dynamic map tiles a rectangular extent with square cells of three side
lengths (12 km, 3 km and 1.5 km by default). Regions of interest are
refined to finer cells while the surroundings stay coarse, keeping the
total cell count within a hard budget of 64 so flow matrices fit a fixed
64x64 frame. All geometry is integer meters in projected planar
coordinates; map projection happens upstream.

Cell ordering is deterministic: coarse tiles are walked in raster order
(row-major from the bottom-left corner) and a refined tile is replaced
in place by its children, again in raster order. The same refinement
input therefore always yields the same matrix indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CellBudgetExceeded,
    MapParseError,
    MisalignedRectangle,
    NotInExtent,
    RectangleOutOfExtent,
    TilingViolation,
)

MAX_CELLS = 64
DEFAULT_LEVELS = (12_000, 3_000, 1_500)

# axis-aligned rectangle in meters: (min_x, min_y, width, height)
Rect = tuple[int, int, int, int]


@dataclass(frozen=True)
class Extent:
    """Rectangular map footprint; width/height are multiples of the coarse side."""

    min_x: int
    min_y: int
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("extent width and height must be positive")

    @property
    def max_x(self) -> int:
        return self.min_x + self.width

    @property
    def max_y(self) -> int:
        return self.min_y + self.height


@dataclass(frozen=True)
class Cell:
    """One square cell; `index` is its row/column in the flow matrix."""

    index: int
    min_x: int
    min_y: int
    side: int

    @property
    def center(self) -> tuple[float, float]:
        return (self.min_x + self.side / 2.0, self.min_y + self.side / 2.0)


@dataclass(frozen=True)
class RefinementSpec:
    """Regions refined to mid (3 km) and fine (1.5 km) cells.

    Every fine rectangle must be nested inside the union of the mid
    rectangles, and rectangle corners must snap to the grid of the level
    they refine (mid rects to coarse lines, fine rects to mid lines).
    """

    mid_rects: tuple[Rect, ...] = ()
    fine_rects: tuple[Rect, ...] = ()
    name: str = "map"


@dataclass(frozen=True)
class DynamicMap:
    extent: Extent
    cells: tuple[Cell, ...]
    name: str
    levels: tuple[int, int, int] = DEFAULT_LEVELS
    # coarse-tile lookup table built by build_map; derived, not compared
    _tiles: tuple = field(default=(), compare=False, repr=False)

    @property
    def n(self) -> int:
        return len(self.cells)


def _validate_levels(levels: tuple[int, int, int]) -> None:
    coarse, mid, fine = levels
    if not (coarse > mid > fine > 0):
        raise ValueError(f"levels must be strictly decreasing, got {levels}")
    if coarse % mid != 0 or mid % fine != 0:
        raise ValueError(f"each level must subdivide its parent exactly, got {levels}")


def _validate_extent(extent: Extent, coarse: int) -> None:
    if extent.width % coarse != 0 or extent.height % coarse != 0:
        raise ValueError(
            f"extent {extent.width}x{extent.height} is not a multiple of the "
            f"coarse cell side {coarse}"
        )


def _check_rect(rect: Rect, extent: Extent, grid: int, label: str) -> None:
    x, y, w, h = rect
    if w <= 0 or h <= 0:
        raise MisalignedRectangle(f"{label} rect {rect} has nonpositive size")
    for v, name in ((x - extent.min_x, "min_x"), (y - extent.min_y, "min_y"),
                    (w, "width"), (h, "height")):
        if v % grid != 0:
            raise MisalignedRectangle(
                f"{label} rect {rect}: {name} does not snap to the {grid} m grid"
            )
    if x < extent.min_x or y < extent.min_y or x + w > extent.max_x or y + h > extent.max_y:
        raise RectangleOutOfExtent(f"{label} rect {rect} exceeds extent")


def _covered(x0: int, y0: int, side: int, rects: tuple[Rect, ...]) -> bool:
    # rects snap to this tile's grid, so cover is all-or-nothing per rect
    for rx, ry, rw, rh in rects:
        if rx <= x0 and ry <= y0 and x0 + side <= rx + rw and y0 + side <= ry + rh:
            return True
    return False


def build_map(extent: Extent, spec: RefinementSpec,
              levels: tuple[int, int, int] = DEFAULT_LEVELS) -> DynamicMap:
    """Tile `extent` with cells refined per `spec`.

    Cells inside a fine rectangle get the fine side, cells inside a mid
    rectangle (but no fine one) the mid side, everything else stays
    coarse. Raises CellBudgetExceeded when the result would have more
    than MAX_CELLS cells.
    """
    _validate_levels(levels)
    coarse, mid, fine = levels
    _validate_extent(extent, coarse)
    for r in spec.mid_rects:
        _check_rect(r, extent, coarse, "mid")
    for r in spec.fine_rects:
        _check_rect(r, extent, mid, "fine")
        # nested-refinement invariant: every mid-grid tile of a fine rect
        # must itself be refined to mid cells
        rx, ry, rw, rh = r
        for yy in range(ry, ry + rh, mid):
            for xx in range(rx, rx + rw, mid):
                if not _covered(xx, yy, mid, spec.mid_rects):
                    raise RectangleOutOfExtent(
                        f"fine rect {r} is not contained in the mid-level refinement"
                    )

    cells: list[Cell] = []
    tiles: list[list] = []
    n_tx = extent.width // coarse
    n_ty = extent.height // coarse
    mid_per_coarse = coarse // mid
    fine_per_mid = mid // fine

    def over_budget() -> CellBudgetExceeded:
        # finish counting without materializing cells
        count = 0
        for ty in range(n_ty):
            for tx in range(n_tx):
                cx = extent.min_x + tx * coarse
                cy = extent.min_y + ty * coarse
                if not _covered(cx, cy, coarse, spec.mid_rects):
                    count += 1
                    continue
                for my in range(mid_per_coarse):
                    for mx in range(mid_per_coarse):
                        if _covered(cx + mx * mid, cy + my * mid, mid, spec.fine_rects):
                            count += fine_per_mid ** 2
                        else:
                            count += 1
        return CellBudgetExceeded(count, MAX_CELLS)

    for ty in range(n_ty):
        row: list = []
        tiles.append(row)
        for tx in range(n_tx):
            cx = extent.min_x + tx * coarse
            cy = extent.min_y + ty * coarse
            if not _covered(cx, cy, coarse, spec.mid_rects):
                row.append(len(cells))
                cells.append(Cell(len(cells), cx, cy, coarse))
                if len(cells) > MAX_CELLS:
                    raise over_budget()
                continue
            mid_grid: list[list] = []
            row.append(mid_grid)
            for my in range(mid_per_coarse):
                mid_row: list = []
                mid_grid.append(mid_row)
                for mx in range(mid_per_coarse):
                    mxx = cx + mx * mid
                    myy = cy + my * mid
                    if _covered(mxx, myy, mid, spec.fine_rects):
                        fine_grid: list[list[int]] = []
                        mid_row.append(fine_grid)
                        for fy in range(fine_per_mid):
                            fine_row: list[int] = []
                            fine_grid.append(fine_row)
                            for fx in range(fine_per_mid):
                                fine_row.append(len(cells))
                                cells.append(Cell(len(cells), mxx + fx * fine,
                                                  myy + fy * fine, fine))
                                if len(cells) > MAX_CELLS:
                                    raise over_budget()
                    else:
                        mid_row.append(len(cells))
                        cells.append(Cell(len(cells), mxx, myy, mid))
                        if len(cells) > MAX_CELLS:
                            raise over_budget()

    return DynamicMap(extent=extent, cells=tuple(cells), name=spec.name,
                      levels=levels, _tiles=_freeze(tiles))


def _freeze(entry):
    if isinstance(entry, list):
        return tuple(_freeze(e) for e in entry)
    return entry


def _tile_table(dmap: DynamicMap):
    if dmap._tiles:
        return dmap._tiles
    # maps parsed from documents carry no table; rebuild one from the cells
    rebuilt = _tiles_from_cells(dmap)
    object.__setattr__(dmap, "_tiles", rebuilt)
    return rebuilt


def _tiles_from_cells(dmap: DynamicMap):
    coarse, mid, fine = dmap.levels
    ext = dmap.extent
    n_tx = ext.width // coarse
    n_ty = ext.height // coarse
    mpc = coarse // mid
    fpm = mid // fine
    grid: list[list] = [[None] * n_tx for _ in range(n_ty)]
    for c in dmap.cells:
        tx = (c.min_x - ext.min_x) // coarse
        ty = (c.min_y - ext.min_y) // coarse
        if c.side == coarse:
            grid[ty][tx] = c.index
            continue
        if grid[ty][tx] is None:
            grid[ty][tx] = [[None] * mpc for _ in range(mpc)]
        sub = grid[ty][tx]
        mx = (c.min_x - ext.min_x) % coarse // mid
        my = (c.min_y - ext.min_y) % coarse // mid
        if c.side == mid:
            sub[my][mx] = c.index
        else:
            if sub[my][mx] is None:
                sub[my][mx] = [[None] * fpm for _ in range(fpm)]
            fgrid = sub[my][mx]
            fx = (c.min_x - ext.min_x) % mid // fine
            fy = (c.min_y - ext.min_y) % mid // fine
            fgrid[fy][fx] = c.index
    return _freeze(grid)


def locate(dmap: DynamicMap, x: float, y: float) -> int:
    """Index of the cell containing (x, y).

    Cells are half-open [min, min+side) on both axes; the extent's top
    and right borders are closed so every point of the extent maps to
    exactly one cell. Raises NotInExtent otherwise.
    """
    ext = dmap.extent
    if not (ext.min_x <= x <= ext.max_x and ext.min_y <= y <= ext.max_y):
        raise NotInExtent(f"point ({x}, {y}) outside extent")
    coarse, mid, fine = dmap.levels
    # closed max border: fold onto the adjacent interior cell
    lx = min(x - ext.min_x, ext.width - 1e-9)
    ly = min(y - ext.min_y, ext.height - 1e-9)
    tx = int(lx // coarse)
    ty = int(ly // coarse)
    entry = _tile_table(dmap)[ty][tx]
    if isinstance(entry, int):
        return entry
    mx = int(lx % coarse // mid)
    my = int(ly % coarse // mid)
    sub = entry[my][mx]
    if isinstance(sub, int):
        return sub
    fx = int(lx % mid // fine)
    fy = int(ly % mid // fine)
    return sub[fy][fx]


def cell_centers(dmap: DynamicMap) -> np.ndarray:
    """(n, 2) float array of cell centroids, in index order."""
    return np.array([c.center for c in dmap.cells], dtype=float)


# --- validation -----------------------------------------------------------

def validate_tiling(extent: Extent, cells: tuple[Cell, ...],
                    levels: tuple[int, int, int]) -> None:
    """Check that `cells` tile `extent` exactly with legal side lengths."""
    if not cells:
        raise TilingViolation("map has no cells")
    if len(cells) > MAX_CELLS:
        raise CellBudgetExceeded(len(cells), MAX_CELLS)
    allowed = set(levels)
    area = 0
    for c in cells:
        if c.side not in allowed:
            raise TilingViolation(f"cell {c.index} has illegal side {c.side}")
        if (c.min_x < extent.min_x or c.min_y < extent.min_y
                or c.min_x + c.side > extent.max_x or c.min_y + c.side > extent.max_y):
            raise TilingViolation(f"cell {c.index} exceeds the extent")
        area += c.side * c.side
    for i, a in enumerate(cells):
        if a.index != i:
            raise TilingViolation(f"cell at position {i} carries index {a.index}")
        for b in cells[i + 1:]:
            if (a.min_x < b.min_x + b.side and b.min_x < a.min_x + a.side
                    and a.min_y < b.min_y + b.side and b.min_y < a.min_y + a.side):
                raise TilingViolation(f"cells {a.index} and {b.index} overlap")
    if area != extent.width * extent.height:
        raise TilingViolation(
            f"cells cover {area} m^2, extent is {extent.width * extent.height} m^2"
        )


# --- map documents --------------------------------------------------------
#
# Two structured text formats share one key/value syntax:
#   flowgan-mapspec/1   human-editable refinement spec (extent + rectangles)
#   flowgan-map/1       fully materialized map (extent + explicit cell list)
#
# Lines are `key: values...`; blank lines and `#` comments are skipped.
# Unknown keys are rejected.

_MAP_FORMAT = "flowgan-map/1"
_SPEC_FORMAT = "flowgan-mapspec/1"


def _parse_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise MapParseError("expected 'key: value'", lineno)
        key, _, value = line.partition(":")
        yield lineno, key.strip(), value.strip()


def _ints(value: str, count: int, lineno: int, key: str) -> list[int]:
    parts = value.split()
    if len(parts) != count:
        raise MapParseError(f"{key} expects {count} integers", lineno)
    try:
        return [int(p) for p in parts]
    except ValueError:
        raise MapParseError(f"{key} expects integers, got {value!r}", lineno) from None


def serialize_map(dmap: DynamicMap) -> str:
    lines = [
        f"format: {_MAP_FORMAT}",
        f"name: {dmap.name}",
        f"extent: {dmap.extent.min_x} {dmap.extent.min_y} "
        f"{dmap.extent.width} {dmap.extent.height}",
        f"levels: {dmap.levels[0]} {dmap.levels[1]} {dmap.levels[2]}",
    ]
    for c in dmap.cells:
        lines.append(f"cell: {c.index} {c.min_x} {c.min_y} {c.side}")
    return "\n".join(lines) + "\n"


def parse_map(text: str) -> DynamicMap:
    """Parse a serialized map and re-validate every map invariant."""
    name = None
    extent = None
    levels = None
    fmt = None
    cells: list[Cell] = []
    for lineno, key, value in _parse_lines(text):
        if key == "format":
            fmt = value
        elif key == "name":
            name = value
        elif key == "extent":
            x, y, w, h = _ints(value, 4, lineno, "extent")
            extent = Extent(x, y, w, h)
        elif key == "levels":
            a, b, c = _ints(value, 3, lineno, "levels")
            levels = (a, b, c)
        elif key == "cell":
            idx, x, y, side = _ints(value, 4, lineno, "cell")
            cells.append(Cell(idx, x, y, side))
        else:
            raise MapParseError(f"unknown key {key!r}", lineno)
    if fmt != _MAP_FORMAT:
        raise MapParseError(f"expected 'format: {_MAP_FORMAT}', got {fmt!r}")
    if extent is None or name is None:
        raise MapParseError("missing extent or name")
    levels = levels or DEFAULT_LEVELS
    _validate_levels(levels)
    _validate_extent(extent, levels[0])
    validate_tiling(extent, tuple(cells), levels)
    return DynamicMap(extent=extent, cells=tuple(cells), name=name, levels=levels)


def write_spec_document(extent: Extent, spec: RefinementSpec,
                        levels: tuple[int, int, int] = DEFAULT_LEVELS) -> str:
    lines = [
        f"format: {_SPEC_FORMAT}",
        f"name: {spec.name}",
        f"extent: {extent.min_x} {extent.min_y} {extent.width} {extent.height}",
        f"levels: {levels[0]} {levels[1]} {levels[2]}",
    ]
    for r in spec.mid_rects:
        lines.append(f"mid: {r[0]} {r[1]} {r[2]} {r[3]}")
    for r in spec.fine_rects:
        lines.append(f"fine: {r[0]} {r[1]} {r[2]} {r[3]}")
    return "\n".join(lines) + "\n"


def parse_spec_document(text: str) -> tuple[Extent, RefinementSpec, tuple[int, int, int]]:
    """Parse a human-editable refinement document into build_map inputs."""
    name = None
    extent = None
    levels = None
    fmt = None
    mid: list[Rect] = []
    fine: list[Rect] = []
    for lineno, key, value in _parse_lines(text):
        if key == "format":
            fmt = value
        elif key == "name":
            name = value
        elif key == "extent":
            x, y, w, h = _ints(value, 4, lineno, "extent")
            extent = Extent(x, y, w, h)
        elif key == "levels":
            a, b, c = _ints(value, 3, lineno, "levels")
            levels = (a, b, c)
        elif key == "mid":
            mid.append(tuple(_ints(value, 4, lineno, "mid")))
        elif key == "fine":
            fine.append(tuple(_ints(value, 4, lineno, "fine")))
        else:
            raise MapParseError(f"unknown key {key!r}", lineno)
    if fmt != _SPEC_FORMAT:
        raise MapParseError(f"expected 'format: {_SPEC_FORMAT}', got {fmt!r}")
    if extent is None or name is None:
        raise MapParseError("missing extent or name")
    spec = RefinementSpec(mid_rects=tuple(mid), fine_rects=tuple(fine), name=name)
    return extent, spec, levels or DEFAULT_LEVELS


def load_map_document(path) -> DynamicMap:
    """Build a DynamicMap from either document flavor on disk."""
    text = Path(path).read_text()
    for _, key, value in _parse_lines(text):
        if key == "format":
            if value == _SPEC_FORMAT:
                extent, spec, levels = parse_spec_document(text)
                return build_map(extent, spec, levels)
            return parse_map(text)
    raise MapParseError("document has no format line")
